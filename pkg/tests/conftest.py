import pytest

_VERDICTS = []


@pytest.fixture(scope="session")
def verdicts():
    """Collects one verdict line per acceptance criterion."""
    return _VERDICTS


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS):
            terminalreporter.write_line(line)
