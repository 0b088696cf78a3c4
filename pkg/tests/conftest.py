"""Collects acceptance results and prints one PASS/FAIL line per criterion."""
import pytest

CRITERIA = range(1, 11)
_results: dict = {}
_seen = {"acceptance": False}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one check of acceptance criterion ``n``."""
    _seen["acceptance"] = True

    def record(n: int, ok: bool, detail: str) -> bool:
        _results.setdefault(n, []).append((bool(ok), detail))
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _seen["acceptance"]:
        return
    terminalreporter.section("acceptance criteria")
    for n in CRITERIA:
        checks = _results.get(n)
        if not checks:
            terminalreporter.write_line(f"criterion {n}: FAIL  (no result recorded)")
            continue
        ok = all(c for c, _ in checks)
        detail = "; ".join(d for _, d in checks)
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
