import pytest

_LINES = pytest.StashKey[dict]()


@pytest.fixture
def verdict(request):
    """Record one pass/fail line for an acceptance criterion."""

    def record(number: int, ok: bool, text: str, soft: bool = False):
        tag = "PASS" if ok else ("SOFT-FAIL" if soft else "FAIL")
        line = f"criterion {number:2d}: {tag}  {text}"
        request.config.stash.setdefault(_LINES, {})[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
