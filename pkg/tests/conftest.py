import pytest

_CRITERIA = {}


@pytest.fixture(scope="session")
def criteria():
    """Acceptance outcomes keyed by criterion number, printed at the end of the run."""
    return _CRITERIA


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        status, detail = _CRITERIA[num]
        terminalreporter.write_line(f"criterion {num}: {status}  {detail}")
