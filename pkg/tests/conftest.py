import pytest

_CRITERIA = []


@pytest.fixture
def report():
    """Record one pass/fail line for the acceptance summary."""
    def _report(name, ok, detail):
        line = f"{name}: {'PASS' if ok else 'FAIL'}: {detail}"
        _CRITERIA.append(line)
        print(line)
        return ok
    return _report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
