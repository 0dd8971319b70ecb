import numpy as np
import pytest

from scenediff.synth import procedural_bank, procedural_bases


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_bases():
    return procedural_bases(3, 32, 48, seed=7)


@pytest.fixture(scope="session")
def small_bank():
    return procedural_bank(5, (6, 12), seed=8)
