import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from core.atomic_structure import Transition, build_dipole_components  # noqa: E402
from core.lattice_field import LatticeField, irradiance_for_depth  # noqa: E402


@pytest.fixture(scope="session")
def cesium():
    return Transition.cesium_d2()


@pytest.fixture(scope="session")
def cesium_dipoles(cesium):
    return build_dipole_components(cesium)


@pytest.fixture(scope="session")
def lattice(cesium, cesium_dipoles):
    """Delta = -10 Gamma, U0 = 1000 E_R."""
    return LatticeField(irradiance_for_depth(cesium, -10.0, 1000.0, dipoles=cesium_dipoles), cesium_dipoles)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
