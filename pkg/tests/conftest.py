import numpy as np
import pytest

from mfconv.tensor import Tensor


def numeric_grad(fn, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        up = fn()
        arr[i] = old - h
        down = fn()
        arr[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def check_grads(loss_fn, leaves: list[Tensor], tol: float = 1e-4) -> float:
    """Compare backprop with finite differences for every leaf; return worst relative error."""
    for t in leaves:
        t.zero_grad()
    loss_fn().backward()
    analytic = [t.grad.copy() for t in leaves]
    worst = 0.0
    for t, a in zip(leaves, analytic):
        num = numeric_grad(lambda: float(loss_fn().data), t.data)
        worst = max(worst, rel_error(a, num))
    assert worst < tol, f"relative gradient error {worst:.3e}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = []


@pytest.fixture
def verdict(request):
    """Record and print one PASS/FAIL line, then fail the test if the check did not hold."""
    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        request.config.stash[ACCEPTANCE_LINES].append(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
