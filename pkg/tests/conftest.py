import numpy as np
import pytest

from rbmspectra.ed import SectorBasis, Spectrum
from rbmspectra.hamiltonian import ModelSpec
from rbmspectra.rbm import init_random


@pytest.fixture(scope="session")
def chain4():
    return ModelSpec(4)


@pytest.fixture(scope="session")
def spectrum4(chain4):
    return Spectrum.from_model(chain4)


@pytest.fixture(scope="session")
def basis4():
    return SectorBasis.build(4, 0.0)


@pytest.fixture
def params4():
    return init_random(4, 8, 0.3, seed=11)


def complex_rng(seed):
    rng = np.random.default_rng(seed)

    def draw(*shape):
        return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    return draw


@pytest.fixture(scope="session")
def ground4(chain4, basis4):
    """RBM ground state of the L=4 ring, optimized in enumeration mode."""
    from rbmspectra.groundstate import SrSettings, optimize_ground_state
    settings = SrSettings(learning_rate=0.05, max_steps=2000, energy_tolerance=1e-9)
    return optimize_ground_state(chain4, init_random(4, 8, 0.01, seed=1), settings, None,
                                 basis4.configs)


ACCEPTANCE_RESULTS: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        passed, title, detail = ACCEPTANCE_RESULTS[number]
        shown = ", ".join(f"{k}={v:.3g}" if isinstance(v, float) else f"{k}={v}"
                          for k, v in detail.items())
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  "
                                    f"{title}  [{shown}]")
