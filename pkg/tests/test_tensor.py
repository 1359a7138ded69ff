import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from loranas import tensor as T
from loranas.tensor import DimensionError, TapeStateError, Tensor, finite_diff_check

from conftest import rand_tensor

SHAPES = [(2, 3), (4, 5), (7, 2)]


def test_matmul_identity_and_dot():
    a = Tensor([[1, 2], [3, 4]])
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), a).data, a.data)
    assert T.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_grad_of_sum(rng):
    a = rand_tensor(rng, 3, 4)
    b = Tensor(rng.normal(size=(4, 2)))
    T.sum(T.matmul(a, b)).backward()
    assert np.allclose(a.grad, np.ones((3, 2)) @ b.data.T, atol=0, rtol=1e-14)
    assert finite_diff_check(lambda x: T.sum(T.matmul(x, b)), a) < 1e-6


def test_softmax_examples():
    assert np.allclose(T.softmax_rows(Tensor([0.0, 0.0, 0.0])).data, 1 / 3, atol=1e-15)
    big = T.softmax_rows(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(big)) and big[0] == pytest.approx(1.0) and big[1] < 1e-300
    x = np.array([1.0, 2.0, 3.0])
    direct = [math.exp(v) / sum(math.exp(w) for w in x) for v in x]
    assert np.allclose(T.softmax_rows(Tensor(x)).data, direct, atol=1e-15)
    assert np.allclose(direct, [0.09003057, 0.24472847, 0.66524096], atol=5e-9)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_on_simplex(x):
    p = T.softmax_rows(Tensor(x)).data
    assert np.all(np.abs(p.sum(axis=-1) - 1) <= 1e-12)
    assert np.all((p >= 0) & (p <= 1))


def test_softmax_strictly_inside_open_interval_for_moderate_inputs(rng):
    p = T.softmax_rows(Tensor(rng.normal(size=(4, 6)) * 5)).data
    assert np.all((p > 0) & (p < 1))


def test_slice_cols_examples(rng):
    x = rand_tensor(rng, 4, 32)
    assert T.slice_cols(x, 12, 20).shape == (4, 8)
    y = rand_tensor(rng, 3, 5)
    assert np.array_equal(T.slice_cols(y, 0, 5).data, y.data)
    T.sum(T.slice_cols(y, 1, 3)).backward()
    expect = np.zeros((3, 5))
    expect[:, 1:3] = 1
    assert np.array_equal(y.grad, expect)


def test_slice_rows_examples(rng):
    x = rand_tensor(rng, 32, 4)
    assert T.slice_rows(x, 8, 24).shape == (16, 4)
    y = rand_tensor(rng, 5, 3)
    assert np.array_equal(T.slice_rows(y, 0, 5).data, y.data)
    T.sum(T.slice_rows(y, 2, 4)).backward()
    expect = np.zeros((5, 3))
    expect[2:4] = 1
    assert np.array_equal(y.grad, expect)


@pytest.mark.parametrize("bounds", [(-1, 2), (2, 2), (0, 6), (3, 1)])
def test_slice_bounds_rejected(bounds):
    with pytest.raises(IndexError):
        T.slice_cols(Tensor(np.ones((2, 5))), *bounds)
    with pytest.raises(IndexError):
        T.slice_rows(Tensor(np.ones((5, 2))), *bounds)


def test_slice_conserves_gradient_mass(rng):
    x = rand_tensor(rng, 6, 10)
    w = Tensor(rng.normal(size=(6, 4)))
    T.sum(T.mul(T.slice_cols(x, 3, 7), w)).backward()
    assert x.grad[:, 3:7].sum() == pytest.approx(w.data.sum(), abs=1e-12)
    assert not x.grad[:, :3].any() and not x.grad[:, 7:].any()


def test_cross_entropy_examples(rng):
    assert T.cross_entropy_loss(Tensor([[10.0, -10.0]]), [0]).item() == pytest.approx(0.0, abs=1e-8)
    assert T.cross_entropy_loss(Tensor(np.zeros((3, 7))), [0, 3, 6]).item() == pytest.approx(math.log(7), abs=1e-14)
    logits = rng.normal(size=(4, 7))
    targets = [1, 0, 6, 3]
    scalar = 0.0
    for row, t in zip(logits, targets):
        scalar -= math.log(math.exp(row[t]) / sum(math.exp(v) for v in row))
    assert T.cross_entropy_loss(Tensor(logits), targets).item() == pytest.approx(scalar / 4, abs=1e-10)


def test_cross_entropy_rejects_bad_target():
    with pytest.raises(IndexError):
        T.cross_entropy_loss(Tensor(np.zeros((2, 3))), [0, 3])


def test_masked_rows_get_zero_gradient(rng):
    x = rand_tensor(rng, 4, 5)
    T.cross_entropy_loss(x, [0, 1, 2, 3], weights=[1, 0, 1, 0]).backward()
    assert not x.grad[1].any() and not x.grad[3].any()
    assert x.grad[0].any()


def test_backward_examples(rng):
    x = rand_tensor(rng, 2, 2)
    T.sum(x).backward()
    assert np.array_equal(x.grad, np.ones((2, 2)))
    y = rand_tensor(rng, 2, 2)
    T.sum(T.mul(y, y)).backward()
    assert np.allclose(y.grad, 2 * y.data, rtol=0, atol=1e-15)


def test_backward_errors(rng):
    x = rand_tensor(rng, 2, 2)
    with pytest.raises(DimensionError):
        T.backward(T.mul(x, x))
    loss = T.sum(T.mul(x, x))
    loss.backward()
    with pytest.raises(TapeStateError):
        loss.backward()


def test_finite_diff_check_non_scalar():
    with pytest.raises(DimensionError):
        finite_diff_check(lambda x: x, Tensor(np.ones((2, 2))))


def test_finite_diff_sum_is_exact(rng):
    assert finite_diff_check(T.sum, rand_tensor(rng, 3, 4)) < 1e-10


def test_finite_diff_softmax_pick(rng):
    def f(x):
        return T.slice_cols(T.softmax_rows(x), 2, 3)

    assert finite_diff_check(f, rand_tensor(rng, 1, 5)) < 1e-6


OPS = {
    "add": lambda x, c: T.add(x, c["b"]),
    "sub": lambda x, c: T.sub(c["b"], x),
    "mul": lambda x, c: T.mul(x, c["b"]),
    "scale": lambda x, c: T.scale(x, -1.7),
    "silu": lambda x, c: T.silu(x),
    "transpose": lambda x, c: T.transpose(x),
    "reshape": lambda x, c: T.reshape(x, (x.shape[1], x.shape[0])),
    "softmax": lambda x, c: T.softmax_rows(x),
    "rowvec": lambda x, c: T.add_rowvec(c["b"], T.reshape(T.slice_rows(x, 0, 1), (x.shape[1],))),
    "scale_cols": lambda x, c: T.scale_cols(x, c["col"]),
    "scale_rows": lambda x, c: T.scale_rows(x, c["row"]),
    "layer_norm": lambda x, c: T.layer_norm(x, c["g"], c["beta"]),
    "take_rows": lambda x, c: T.take_rows(x, [0, x.shape[0] - 1, 0]),
    "concat": lambda x, c: T.concat_rows([x, c["b"], x]),
    "xent": lambda x, c: T.cross_entropy_loss(x, c["t"], c["w"]),
}


@pytest.mark.parametrize("shape", SHAPES)
@pytest.mark.parametrize("op", sorted(OPS))
def test_every_op_passes_finite_differences(op, shape, rng):
    m, n = shape
    ctx = {
        "b": Tensor(rng.normal(size=shape)),
        "col": Tensor(rng.normal(size=n)),
        "row": Tensor(rng.normal(size=m)),
        "g": Tensor(rng.normal(size=n)),
        "beta": Tensor(rng.normal(size=n)),
        "t": rng.integers(0, n, m),
        "w": (rng.random(m) > 0.3).astype(float) + np.eye(1, m).ravel(),
    }
    x = rand_tensor(rng, m, n)
    wrng = np.random.default_rng(7)
    out_w = None

    def f(x):
        nonlocal out_w
        out = OPS[op](x, ctx)
        if out_w is None:
            out_w = Tensor(wrng.normal(size=out.shape))
        return T.sum(T.mul(out, out_w))

    assert finite_diff_check(f, x) < 1e-4


@pytest.mark.parametrize("which", ["col", "row"])
def test_scale_vector_gradients(which, rng):
    x = Tensor(rng.normal(size=(3, 4)))
    v = rand_tensor(rng, 4 if which == "col" else 3)
    op = T.scale_cols if which == "col" else T.scale_rows
    w = Tensor(rng.normal(size=(3, 4)))
    assert finite_diff_check(lambda v: T.sum(T.mul(op(x, v), w)), v) < 1e-6


@pytest.mark.parametrize("prefix", [0, 2])
@pytest.mark.parametrize("batch,seq,heads,d", [(1, 3, 1, 4), (2, 5, 2, 6), (3, 4, 4, 8)])
def test_attention_finite_differences(batch, seq, heads, d, prefix, rng):
    if prefix >= seq:
        pytest.skip("prefix must leave text rows")
    q, k, v = (rand_tensor(rng, batch * seq, d) for _ in range(3))
    w = Tensor(rng.normal(size=(batch * seq, d)))
    kw = dict(batch=batch, seq=seq, heads=heads, prefix=prefix)
    for i, name in enumerate("qkv"):
        def f(x, i=i):
            args = [q, k, v]
            args[i] = x
            return T.sum(T.mul(T.attention(*args, **kw), w))

        assert finite_diff_check(f, [q, k, v][i]) < 1e-4, name


def test_gather_scatter_add_repeated_rows(rng):
    table = rand_tensor(rng, 4, 3)
    T.sum(T.take_rows(table, [1, 1, 3])).backward()
    assert np.array_equal(table.grad, np.array([[0, 0, 0], [2, 2, 2], [0, 0, 0], [1, 1, 1]], float))


def test_no_broadcasting_between_mismatched_shapes():
    with pytest.raises(DimensionError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((1, 3))))


def test_frozen_operand_gets_no_grad(rng):
    a = rand_tensor(rng, 2, 3)
    b = Tensor(rng.normal(size=(3, 2)))
    T.sum(T.matmul(a, b)).backward()
    assert b.grad is None


def test_replay_is_bit_identical(rng):
    x0 = rng.normal(size=(5, 4))
    w = rng.normal(size=(4, 3))

    def run():
        x = Tensor(x0.copy(), requires_grad=True)
        wt = Tensor(w.copy(), requires_grad=True)
        loss = T.cross_entropy_loss(T.matmul(T.silu(x), wt), [0, 1, 2, 0, 1])
        loss.backward()
        return loss.data.copy(), x.grad.copy(), wt.grad.copy()

    a, b = run(), run()
    assert all(np.array_equal(u, v) for u, v in zip(a, b))


def test_no_grad_records_nothing(rng):
    x = rand_tensor(rng, 2, 2)
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad and y._parents == ()


def test_nonpositive_shape_rejected():
    with pytest.raises(DimensionError):
        Tensor(np.ones((0, 3)))
