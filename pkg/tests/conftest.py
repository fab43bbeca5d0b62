import sys
import time
from contextlib import contextmanager
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_RESULTS: dict[int, tuple[str, str, str]] = {}


@pytest.fixture
def criterion():
    """``with criterion(n, title) as note:`` records PASS unless the body raises;
    ``note(text)`` attaches the measured numbers to the summary line."""

    @contextmanager
    def record(number, title):
        details = []
        t0 = time.perf_counter()
        try:
            yield details.append
        except BaseException:
            _RESULTS[number] = ("FAIL", title, "; ".join(details))
            raise
        details.append(f"{time.perf_counter() - t0:.1f}s")
        _RESULTS[number] = ("PASS", title, "; ".join(details))

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        status, title, detail = _RESULTS[number]
        terminalreporter.write_line(f"{status} criterion {number:2d}: {title} [{detail}]")
