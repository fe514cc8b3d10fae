import pytest
import torch

from rodinlab.numerics import set_precision


@pytest.fixture(autouse=True)
def _float64():
    """Unit tests run at 64-bit; heavy runs switch to float32 explicitly."""
    old = torch.get_default_dtype()
    set_precision("float64")
    torch.set_num_threads(1)
    yield
    torch.set_default_dtype(old)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion that ran."""
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        title, ok, detail = results[n]
        terminalreporter.write_line(f"CRITERION {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
