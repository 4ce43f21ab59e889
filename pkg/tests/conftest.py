import numpy as np
import pytest

from lspd import linops


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training or Monte-Carlo runs")


@pytest.fixture(scope="session")
def small_parallel():
    g = linops.ScanGeometry(mode="parallel", image_size=16, n_angles=12, n_rays=16)
    return g, linops.assemble_projector(g)


@pytest.fixture(scope="session")
def small_fan():
    g = linops.ScanGeometry(mode="fan", image_size=16, n_angles=12, n_rays=24, source_distance=2.0)
    return g, linops.assemble_projector(g)


@pytest.fixture(scope="session")
def desk_fan():
    g = linops.ScanGeometry(mode="fan", image_size=32, n_angles=32, n_rays=48, source_distance=2.0, pixel_size=0.16)
    return g, linops.assemble_projector(g)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE = {}


@pytest.fixture(scope="session")
def acceptance():
    def record(n, ok, detail, elapsed, budget):
        within = elapsed <= budget
        line = f"CRITERION {n:2d} {'PASS' if ok and within else 'FAIL'}: {detail} [{elapsed:.1f}s of {budget:.0f}s]"
        ACCEPTANCE[n] = line
        print(line)
        return ok and within

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
