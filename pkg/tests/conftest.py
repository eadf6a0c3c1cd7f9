import numpy as np
import pytest

from radseg import tensor as T


def numeric_grad(f, x: np.ndarray, eps: float = 1e-5, indices=None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. entries of ``x`` (perturbed in place).

    With ``indices`` only those flat positions are probed; the rest stay 0.
    """
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size) if indices is None else indices:
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return g


def rel_err(a, n, floor: float = 1e-6) -> float:
    a, n = np.asarray(a), np.asarray(n)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def check_op_grads(build, *arrays, eps: float = 1e-5, tol: float = 1e-4) -> float:
    """Gradcheck ``sum(build(*tensors) * r)`` for every input array."""
    rng = np.random.default_rng(123)
    leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
    with T.no_tape():
        proj = rng.standard_normal(build(*leaves).shape)

    def value():
        with T.no_tape():
            return float((build(*leaves).data * proj).sum())

    with T.Tape() as tape:
        loss = T.tsum(build(*leaves) * proj)
    tape.backward(loss)
    worst = 0.0
    for leaf in leaves:
        num = numeric_grad(value, leaf.data, eps)
        worst = max(worst, rel_err(leaf.grad, num))
    assert worst < tol, worst
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(20240)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for num in sorted(results):
            terminalreporter.write_line(results[num])
