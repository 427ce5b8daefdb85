import numpy as np
import pytest

from hffed.networks import ScanProtocol


def rel_err(analytic, numeric, floor=1e-6):
    """Element-wise relative error, with an absolute floor for near-zero gradients."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def two_protocols():
    return [
        ScanProtocol(720, 1024, 1e6, 120, 60, 0.5, 1.0),
        ScanProtocol(60, 384, 1e4, 80, 300, 0.9, 3.0),
    ]


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
