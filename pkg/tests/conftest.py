import numpy as np
import pytest

from lsmbd.synth import make_rng


@pytest.fixture
def rng():
    return make_rng(1234, 7)


def dense_conv_matrix(k, in_len, offset, out_len):
    """Reference matrix of ``x -> (x * k)[offset:offset+out_len]`` from the defining sum."""
    m = np.zeros((out_len, in_len))
    for i in range(out_len):
        for l in range(in_len):
            j = offset + i - l
            if 0 <= j < len(k):
                m[i, l] = k[j]
    return m


def central_fd(f, p, step=1e-6):
    """Central differences of scalar ``f`` at every entry of ``p``."""
    p = np.array(p, dtype=np.float64)
    g = np.zeros_like(p)
    for idx in np.ndindex(p.shape):
        e = np.zeros_like(p)
        e[idx] = step
        g[idx] = (f(p + e) - f(p - e)) / (2 * step)
    return g


def kink_safe_fd(f, p, pattern, steps=(1e-6, 1e-7, 1e-8)):
    """Central differences that shrink the step while the activation ``pattern`` changes.

    A ReLU kink inside the stencil makes the one-sided slopes disagree, so the
    first step at which ``pattern(p +- e) == pattern(p)`` is used for each entry.
    """
    p = np.array(p, dtype=np.float64)
    g = np.zeros_like(p)
    base = pattern(p)
    for idx in np.ndindex(p.shape):
        for h in steps:
            e = np.zeros_like(p)
            e[idx] = h
            if np.array_equal(pattern(p + e), base) and np.array_equal(pattern(p - e), base):
                break
        g[idx] = (f(p + e) - f(p - e)) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


#: criterion number -> (passed, detail), filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
