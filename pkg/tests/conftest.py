import numpy as np
import pytest


def numerical_grad(f, x, eps=1e-3):
    """Central finite differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + eps
        up = f()
        x[i] = orig - eps
        down = f()
        x[i] = orig
        grad[i] = (up - down) / (2 * eps)
    return grad


def max_rel_error(analytic, numeric):
    """Largest elementwise |a - n| / max(|a|, |n|), ignoring entries where both are ~0."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    mask = scale > 1e-7
    if not mask.any():
        return 0.0
    return float(np.max(np.abs(analytic - numeric)[mask] / scale[mask]))


def gradcheck_block(block, x, rng, eps=1e-3):
    """Max relative error between backward and finite differences for the
    scalar loss sum(forward(x) * R), over the input and every parameter."""
    block.astype(np.float64)
    x = x.astype(np.float64)
    out = block.forward(x)
    R = rng.standard_normal(out.shape)
    gx, pgrads = block.backward(R)

    def f():
        return float(np.sum(block.forward(x) * R))

    errs = [max_rel_error(gx, numerical_grad(f, x, eps))]
    for p, g in zip(block.params(), block.flat_grads(pgrads)):
        errs.append(max_rel_error(g, numerical_grad(f, p, eps)))
    return max(errs)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
