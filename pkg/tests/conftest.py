import pytest

# lines recorded by tests/test_acceptance.py, echoed once at the end of the session
CRITERIA: dict[str, str] = {}


def record(key: str, name: str, passed: bool, detail: str) -> None:
    line = f"criterion {key} {'PASS' if passed else 'FAIL'} {name}: {detail}"
    CRITERIA[key] = line
    print(line)


@pytest.fixture
def criterion():
    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[key])
