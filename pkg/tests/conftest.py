import pytest

# Verdict lines collected by the acceptance tests, printed in the terminal summary.
VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    def record(label: str, ok: bool, detail: str) -> bool:
        VERDICTS.append(f"{label} {'PASS' if ok else 'FAIL'}: {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
