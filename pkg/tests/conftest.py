import numpy as np
import pytest

from vreg.kernels import backends
from vreg.phantoms import PhantomSpec, generate_phantom


@pytest.fixture(scope="session")
def simple2d():
    return generate_phantom(PhantomSpec("simple", (32, 32, 1), (4.0, 4.0, 4.0)), 0)


@pytest.fixture(scope="session")
def spine2d():
    return generate_phantom(PhantomSpec("spine-like", (64, 64, 1), (2.0, 2.0, 2.0)), 0)


@pytest.fixture(scope="session")
def simple3d():
    return generate_phantom(PhantomSpec("simple", (16, 16, 16), (4.0, 4.0, 4.0)), 0)


@pytest.fixture(params=sorted(backends()))
def backend(request):
    return backends()[request.param]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance report -------------------------------------------------------

ACCEPTANCE = {}


@pytest.fixture
def acceptance(request):
    """Record one verdict line for an acceptance criterion: ``acceptance(n, ok, detail)``."""
    def record(n, ok, detail):
        ACCEPTANCE[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
