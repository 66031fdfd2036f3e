import numpy as np
import pytest

from mor1e.numeric import finite_diff_gradient, make_rng


def rel_err(analytic, numeric, floor=1e-8):
    """Norm-wise relative error with an absolute floor for vanishing gradients."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))


def check_param_grads(params, grads, loss_fn, h=1e-5):
    """Largest relative error between analytic grads and central differences, per parameter."""
    worst = {}
    for name, p in params.items():
        def f(val, p=p):
            saved = p.copy()
            p[...] = val
            try:
                return loss_fn()
            finally:
                p[...] = saved

        worst[name] = rel_err(grads[name], finite_diff_gradient(f, p.copy(), h))
    return worst


@pytest.fixture
def rng():
    return make_rng(1234)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    from test_acceptance import ACCEPTANCE_KEY

    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
