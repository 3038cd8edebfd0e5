import numpy as np
import pytest

from colf import kernels
from colf._jit import HAVE_NUMBA, tune_allocator

tune_allocator()


@pytest.fixture(params=["numpy", "numba"])
def kernel_backend(request):
    """Run a test once per kernel implementation."""
    if request.param == "numba" and not HAVE_NUMBA:
        pytest.skip("numba not installed")
    with kernels.backend(request.param == "numba"):
        yield request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance verdicts, filled by tests/test_acceptance.py and echoed at the end of the run
VERDICTS = []


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(VERDICTS, key=lambda v: v[0]):
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
