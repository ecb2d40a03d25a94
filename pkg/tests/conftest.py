import pytest

_VERDICTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_VERDICTS] = {}


@pytest.fixture
def verdict(request):
    """``verdict(n, ok, detail)`` records one acceptance line and returns ``ok``."""
    table = request.config.stash[_VERDICTS]

    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        table[n] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    table = config.stash[_VERDICTS]
    if not table:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(table):
        terminalreporter.write_line(table[n])
