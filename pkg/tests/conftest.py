import numpy as np
import pytest

from lesioncap import diffcore as dc
from lesioncap.diffcore.gradcheck import GRADCHECK_FLOOR, GRADCHECK_STEP


def param_grad_error(loss_fn, params, h=GRADCHECK_STEP, max_entries=40, seed=0):
    """Worst relative error between backprop and central differences for module parameters.

    ``loss_fn()`` rebuilds the scalar loss from the current parameter values.
    At most ``max_entries`` random entries per parameter are perturbed.
    """
    for p in params:
        p.grad = None
    dc.backward(loss_fn())
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(max_entries, flat.size), replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn().item()
            flat[i] = orig - h
            fm = loss_fn().item()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), GRADCHECK_FLOOR))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
