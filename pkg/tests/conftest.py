import pytest

_RESULTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_RESULTS] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line; ``passed=None`` marks a skipped criterion."""
    def record(number, passed, detail=""):
        status = "SKIP" if passed is None else "PASS" if passed else "FAIL"
        line = f"criterion {number}: {status}  {detail}".rstrip()
        request.config.stash[_RESULTS].append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_RESULTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: s.split(":")[0]):
            terminalreporter.write_line(line)
