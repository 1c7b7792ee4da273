"""Shared fixtures and the acceptance-line reporter."""

import numpy as np
import pytest

from posoc.model import LqgSpec

# One human-readable line per acceptance criterion, echoed at the end of the
# run regardless of output capture.
ACCEPTANCE_LINES = []


def record_acceptance(line: str) -> None:
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def table1_spec() -> LqgSpec:
    """The scalar benchmark model used throughout: dX = (-X/4 + alpha) dt
    + dW/2, observed through unit C at noise level 0.1."""
    return LqgSpec(
        A=np.array([[-0.25]]), B=np.array([[1.0]]), C=np.array([[1.0]]),
        sigma=np.array([[0.5]]), Q=np.array([[2.0]]), R=np.array([[2.0]]),
        Q_T=np.array([[2.0]]), m0=np.array([0.0]), Sigma0=np.array([[1.0]]),
        fixed_eps=0.1,
    )
