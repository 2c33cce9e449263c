import pytest

ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


@pytest.fixture
def record(request):
    """Log one PASS/FAIL line for an acceptance criterion."""
    lines = request.config.stash[ACCEPTANCE]

    def _record(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}: {detail}"
        lines.append((number, line))
        print(line)

    return _record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if not lines:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for _, line in sorted(lines):
        terminalreporter.write_line(line)
