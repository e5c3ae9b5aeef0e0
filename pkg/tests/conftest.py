"""Shared pytest plumbing: acceptance verdict lines are echoed in the terminal summary."""
import pytest

VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one ``[criterion N] PASS|FAIL ...`` line, print it, and return the pass flag."""
    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"[criterion {number}] {'PASS' if ok else 'FAIL'} {detail}"
        VERDICTS.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1].rstrip("]"))):
            terminalreporter.write_line(line)
