import pytest

_RESULTS = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line, print it, then assert it."""
    lines = request.config.stash.setdefault(_RESULTS, [])

    def check(name: str, ok: bool, detail: str = ""):
        line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        lines.append(line)
        print(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_RESULTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
