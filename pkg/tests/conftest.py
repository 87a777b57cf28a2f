import pytest


@pytest.fixture
def report(capsys):
    """Print one PASS/FAIL line for an acceptance criterion, bypassing capture, then assert it."""

    def _report(number: int, title: str, ok: bool, detail: str = ""):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d} {title}" + (f": {detail}" if detail else "")
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return _report
