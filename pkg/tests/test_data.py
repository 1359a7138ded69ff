import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loranas import tensor as T
from loranas.data import (
    BOS,
    PAD,
    QRY,
    SEP,
    SYMBOL_BASE,
    batch_iter,
    collate,
    copy_example,
    gen_task,
    load_corpus,
    modsum_example,
    patchcount_example,
    split_train_val,
    task_vocab_needed,
)
from loranas.model import FrozenTransformer, ModelConfig


def test_copy_example_layout():
    ex = copy_example([5, 9, 7])
    assert ex.tokens == (BOS, 5, 9, 7, SEP, 5, 9, 7)
    assert ex.answer == (False,) * 5 + (True,) * 3


def test_modsum_running_sum():
    # digits 1,1,0,1 mod 2 -> running sums 1,0,0,1
    ex = modsum_example([1, 1, 0, 1], 2)
    assert ex.tokens[-4:] == tuple(SYMBOL_BASE + y for y in (1, 0, 0, 1))
    ex = modsum_example([2, 2, 2], 3)
    assert ex.tokens[-3:] == tuple(SYMBOL_BASE + y for y in (2, 1, 0))


def test_patchcount_answer_and_features():
    grid = np.array([[1, 0, 1], [0, 0, 0], [1, 1, 0]])
    ex = patchcount_example(grid)
    assert ex.tokens == (BOS, QRY, SYMBOL_BASE + 4)
    assert ex.answer == (False, False, True)
    assert ex.patches.shape == (9, 4)
    assert ex.patches[:, 0].sum() == 4
    assert np.all(ex.patches[:, 0] + ex.patches[:, 1] == 1)


@pytest.mark.parametrize("kind", ["copy", "modsum", "patchcount"])
def test_split_sizes_and_disjoint_union(kind):
    size = 200 if kind != "patchcount" else 100
    tr, va, ev = gen_task(kind, size, seed=4, length=8, grid=3)
    assert (len(tr), len(va), len(ev)) == (int(0.8 * size), int(0.1 * size), size - int(0.9 * size))
    keys = [e.key() for s in (tr, va, ev) for e in s]
    assert len(set(keys)) == size


def test_split_is_a_permutation_of_the_input():
    items = [copy_example([SYMBOL_BASE + i % 10, SYMBOL_BASE + i // 10]) for i in range(50)]
    parts = split_train_val(items, seed=9)
    joined = sorted(e.tokens for p in parts for e in p)
    assert joined == sorted(e.tokens for e in items)


def test_generation_deterministic_and_seed_sensitive():
    a = gen_task("copy", 100, seed=1)
    b = gen_task("copy", 100, seed=1)
    c = gen_task("copy", 100, seed=2)
    assert [e.tokens for e in a[0]] == [e.tokens for e in b[0]]
    assert [e.tokens for e in a[0]] != [e.tokens for e in c[0]]


def test_generation_errors():
    with pytest.raises(ValueError, match="unknown task"):
        gen_task("sort", 100, seed=0)
    with pytest.raises(ValueError, match="at least 30"):
        gen_task("copy", 29, seed=0)
    with pytest.raises(ValueError, match="distinct"):
        gen_task("modsum", 100, seed=0, length=3, modulus=2)
    with pytest.raises(ValueError):
        split_train_val(list(range(40)), ratios=(0.5, 0.5, 0.5))


def test_vocab_needed():
    assert task_vocab_needed("copy", alphabet=16) == 20
    assert task_vocab_needed("modsum", modulus=3) == 7
    assert task_vocab_needed("patchcount", grid=3) == 14


def test_collate_shift_and_padding():
    a = copy_example([5, 6])
    b = copy_example([7])
    batch = collate([a, b])
    assert batch.tokens.tolist() == [[BOS, 5, 6, SEP, 5], [BOS, 7, SEP, PAD, PAD]]
    assert batch.targets.tolist() == [[5, 6, SEP, 5, 6], [7, SEP, 7, PAD, PAD]]
    assert batch.mask.tolist() == [[0, 0, 0, 1, 1], [0, 0, 1, 0, 0]]


@settings(max_examples=30, deadline=None)
@given(n=st.integers(30, 120), bs=st.integers(1, 40), epoch=st.integers(0, 5))
def test_batch_iter_covers_each_example_once(n, bs, epoch):
    tr, _, _ = gen_task("copy", n, seed=0, length=4)
    batches = batch_iter(tr, bs, seed=3, epoch=epoch)
    ids = [i for b in batches for i in b.ids]
    assert sorted(ids) == list(range(len(tr)))
    assert all(b.size == bs for b in batches[:-1])
    assert 1 <= batches[-1].size <= bs


def test_batch_iter_order_depends_on_epoch_only_through_seed():
    tr, _, _ = gen_task("copy", 100, seed=0)
    a = [b.ids for b in batch_iter(tr, 8, seed=1, epoch=0)]
    assert a == [b.ids for b in batch_iter(tr, 8, seed=1, epoch=0)]
    assert a != [b.ids for b in batch_iter(tr, 8, seed=1, epoch=1)]
    with pytest.raises(ValueError):
        batch_iter(tr, 0, seed=1, epoch=0)


def test_load_corpus(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("\n".join(f"1 {i % 7 + 4} {i % 5 + 4} 2" for i in range(40)) + "\n\n")
    tr, va, ev = load_corpus(p, seed=0)
    assert len(tr) + len(va) + len(ev) == 40
    assert tr[0].answer == (False, True, True, True)
    bad = tmp_path / "bad.txt"
    bad.write_text("1 x 3\n")
    with pytest.raises(ValueError, match="bad.txt:1"):
        load_corpus(bad)


def test_masked_positions_receive_zero_gradient():
    # the logits of non-answer positions must not influence the loss
    m = FrozenTransformer(ModelConfig(vocab_size=12, d_model=8, n_layers=1, n_heads=2, d_mlp=8, max_seq_len=12))
    batch = collate([copy_example([5, 6, 7]), copy_example([8, 9])])
    logits = T.Tensor(m.forward(batch.tokens).data, requires_grad=True)
    loss = T.cross_entropy_loss(logits, batch.targets.reshape(-1), batch.mask.reshape(-1))
    T.backward(loss)
    masked = batch.mask.reshape(-1) == 0
    assert np.all(logits.grad[masked] == 0.0)
    assert np.all(np.abs(logits.grad[~masked]).sum(axis=1) > 0)
