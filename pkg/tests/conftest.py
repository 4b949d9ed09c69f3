import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from vvlab import powerflow  # noqa: E402
from vvlab.netmodel import load_network  # noqa: E402


@pytest.fixture(scope="session")
def bus5():
    return load_network("bus5")


@pytest.fixture(scope="session")
def bus13():
    return load_network("bus13")


@pytest.fixture(params=["compiled", "python"])
def pf_backend(request):
    if request.param == "compiled" and not powerflow.has_compiled():
        pytest.skip("compiled kernel not built")
    previous = powerflow.backend()
    powerflow.set_backend(request.param)
    yield request.param
    powerflow.set_backend(previous)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    """Record a one-line verdict that is echoed in the terminal summary."""
    def emit(line: str) -> None:
        ACCEPTANCE_LINES.append(line)
        print(line)
    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
