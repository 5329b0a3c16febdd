import numpy as np
import pytest

from realformer import tensor as T


def fd_check(build, arrays, step=1e-5):
    """Max relative error between tape and central-difference gradients.

    ``build(tensors) -> scalar Tensor``; ``arrays`` are perturbed in place.
    """
    tape = T.Tape()
    leaves = [tape.leaf(f"x{i}", a) for i, a in enumerate(arrays)]
    loss = build(leaves)
    grads = T.backward(tape, loss)
    worst = 0.0
    for i, a in enumerate(arrays):
        flat = a.reshape(-1)
        num = np.zeros_like(flat)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + step
            up = build([T.Tensor(b) for b in arrays]).item()
            flat[j] = old - step
            down = build([T.Tensor(b) for b in arrays]).item()
            flat[j] = old
            num[j] = (up - down) / (2 * step)
        g = grads[f"x{i}"].reshape(-1)
        err = np.abs(g - num) / np.maximum(np.maximum(np.abs(g), np.abs(num)), 1e-6)
        worst = max(worst, float(err.max()))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.RESULTS:
        terminalreporter.write_line(line)
