import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from muscleseg._accel import HAVE_NUMBA, backend_scope  # noqa: E402

BACKENDS = ["numpy", "numba"] if HAVE_NUMBA else ["numpy"]


@pytest.fixture(params=BACKENDS)
def backend(request):
    with backend_scope(request.param):
        yield request.param


VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
