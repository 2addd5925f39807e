import numpy as np
import pytest

from ddsl.diffarray import Array4, Tape, mul, no_record, precision, sum_all
from ddsl.engine import numeric_grad, rel_error


def probe_loss(out: Array4, probe: np.ndarray) -> Array4:
    """Scalar ``Σ out ⊙ probe``; a random probe avoids symmetric cancellations."""
    return sum_all(mul(out, Array4(probe)))


def fd_check(fn, arrays, seed=0, step=1e-5):
    """Max relative error between tape gradients and central differences.

    ``fn(*arrays)`` must return an Array4; every array in ``arrays`` is checked.
    """
    rng = np.random.default_rng(seed)
    with no_record():
        probe = rng.standard_normal(fn(*arrays).shape)
    for a in arrays:
        a.requires_grad = True
        a.grad = None
    with Tape() as tape:
        loss = probe_loss(fn(*arrays), probe)
    tape.backward(loss)
    scale = loss.item()

    def value():
        with no_record():
            return probe_loss(fn(*arrays), probe).item()

    worst = 0.0
    for a in arrays:
        num = numeric_grad(value, a.values, step=step)
        g = np.zeros(a.values.size) if a.grad is None else a.grad.reshape(-1)
        worst = max(worst, rel_error(g, num, scale))
    return worst


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


def randn(rng, *shape):
    return Array4(rng.standard_normal(shape))


# --- acceptance verdicts ------------------------------------------------------------

VERDICTS: list[str] = []


def verdict(criterion: str, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'} [{criterion}] {detail}"
    VERDICTS.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
