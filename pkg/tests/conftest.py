import numpy as np
import pytest

from voxface.metrics import synthetic_regions
from voxface.morphable import synthetic_basis

_ACCEPTANCE: list[tuple[str, bool, str]] = []


def central_diff(f, x, h=1e-6):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-10))


@pytest.fixture(scope="session")
def basis():
    return synthetic_basis(20, seed=0)


@pytest.fixture(scope="session")
def regions(basis):
    return synthetic_regions(basis)


@pytest.fixture
def acceptance():
    def record(criterion: str, ok: bool, detail: str = ""):
        _ACCEPTANCE.append((criterion, bool(ok), detail))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
