import numpy as np
import pytest

from pairedae.numerics import directional_fd, make_rng


def grad_probe_error(f, w0, grad, rng, probes=100, h=1e-5):
    """Largest relative mismatch between grad.v and central differences along random v."""
    worst = 0.0
    for _ in range(probes):
        v = rng.standard_normal(w0.size)
        v /= np.linalg.norm(v)
        fd = directional_fd(f, w0, v, h)
        an = float(grad @ v)
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    return worst


@pytest.fixture
def rng():
    return make_rng(1234)


ACCEPTANCE = {}


def record(criterion, ok, detail):
    """Store one acceptance verdict for the terminal summary, then fail the test if needed."""
    ACCEPTANCE[criterion] = (bool(ok), detail)
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
