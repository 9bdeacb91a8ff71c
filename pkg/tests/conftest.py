import numpy as np
import pytest

from labyrinth_mpc.dynamics import build_linear_model
from labyrinth_mpc.layout import bundled_layout

# acceptance results, printed as one line per criterion at the end of the session
CRITERIA: dict[int, tuple[bool, str]] = {}


def report(n: int, ok: bool, detail: str) -> None:
    CRITERIA[n] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def brio():
    return bundled_layout("brio_synthetic")


@pytest.fixture(scope="session")
def corridor():
    return bundled_layout("corridor")


@pytest.fixture(scope="session")
def model():
    return build_linear_model()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
