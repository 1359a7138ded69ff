import numpy as np
import pytest

from loranas.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rand_tensor(rng, *shape, grad=True):
    return Tensor(rng.normal(size=shape), requires_grad=grad)


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""
    lines = request.config.__dict__.setdefault("_acceptance_lines", [])

    def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title}" + (f" -- {detail}" if detail else "")
        lines.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
