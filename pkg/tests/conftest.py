import numpy as np
import pytest

from mfswitch.coeffs import make_lq
from mfswitch.coupled import Numerics

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


RICCATI = dict(A=-1.0, B=0.5, C=0.3, D=0.1, M=0.2, N=0.0, Q=1.0, R=1.0)


@pytest.fixture(scope="session")
def riccati_coeffs():
    return make_lq(kappa_star=10.0, **RICCATI)


@pytest.fixture(scope="session")
def small_numerics():
    return Numerics(dt=0.05, particles=128, scenarios=4, seed=3, tol=1e-5, max_iters=60)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
