from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"

_criteria = pytest.StashKey[list]()


@pytest.fixture
def fixtures() -> Path:
    return FIXTURES


@pytest.fixture
def mixed_depth_text() -> str:
    return (FIXTURES / "mixed_depth.yaml").read_text()


@pytest.fixture
def criterion(request):
    """Record and assert one acceptance line: ``criterion(n, ok, detail)``."""
    lines = request.config.stash.setdefault(_criteria, [])

    def check(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        lines.append(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_criteria, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
