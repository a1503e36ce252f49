import pytest

ACCEPTANCE_LINES: list = []


@pytest.fixture
def gate(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(ok: bool, detail: str):
        name = request.node.name.removeprefix("test_")
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
