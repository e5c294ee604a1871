import pytest

VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[VERDICTS] = []


@pytest.fixture
def verdict(request, capsys):
    """Print and record one PASS/FAIL line, then assert it."""

    def record(number: int, name: str, ok: bool, detail: str) -> None:
        line = f"CRITERION {number:>2} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
        request.config.stash[VERDICTS].append((number, line))
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = sorted(config.stash.get(VERDICTS, []))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in lines:
            terminalreporter.write_line(line)
