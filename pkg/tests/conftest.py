import numpy as np
import pytest

from ashc.cuk import DEFAULT_M, build_cuk


@pytest.fixture(scope="session")
def cuk():
    return build_cuk()


@pytest.fixture(scope="session")
def cuk_unit():
    return build_cuk(delta_variant="unit")


@pytest.fixture(scope="session")
def M_pub():
    return np.array(DEFAULT_M, dtype=float)


@pytest.fixture
def rng():
    return np.random.default_rng(7)
