import numpy as np
import pytest

from viablemfg.geometry import build_disk_domain, build_interval_domain
from viablemfg.model import decoupled_model, default_initial_density, random_initial_density, viable_model


def masses(grid, dens):
    return dens * grid.quad_weights


@pytest.fixture(scope="session")
def interval():
    return build_interval_domain(1.0, 64)


@pytest.fixture(scope="session")
def disk():
    return build_disk_domain(1.0, 32)


@pytest.fixture(scope="session")
def viable(interval):
    return viable_model(interval)


@pytest.fixture(scope="session")
def decoupled(interval):
    return decoupled_model(interval)


@pytest.fixture(scope="session")
def m0(interval):
    return masses(interval, default_initial_density(interval))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_masses(grid, rng):
    return masses(grid, random_initial_density(grid, rng))


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list = []


def record_criterion(number: int, ok: bool, detail: str) -> bool:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append((number, line))
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
