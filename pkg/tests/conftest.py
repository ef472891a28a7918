from pathlib import Path

import pytest

from gnntickets.graph import load_linqs_dir

ROOT = Path(__file__).resolve().parent.parent
CORA = ROOT / "data" / "cora"


@pytest.fixture(scope="session")
def cora():
    if not (CORA / "cora.content").exists():
        pytest.skip("Cora not present; run scripts/fetch_cora.py")
    return load_linqs_dir(CORA)


_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Print and remember one PASS/FAIL line per acceptance check, then assert it."""

    def record(name: str, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
        print(line)
        _VERDICTS.append(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
