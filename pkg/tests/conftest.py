import numpy as np
import pytest

from specklesense.optics import MaterialConfig, build_material


@pytest.fixture(scope="session")
def config():
    return MaterialConfig()


@pytest.fixture(scope="session")
def field(config):
    return build_material(config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        ok, title, detail = RESULTS[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:2d}. {title}: {detail}")
