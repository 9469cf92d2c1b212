"""Shared fixtures: the canonical shallow-cone scenario is expensive to
solve, so it is built once per session and reused across test modules."""

import numpy as np
import pytest

from selfexpander.geometry import AmbientConfig, Cone
from selfexpander.ode import ShootingConfig, shoot_annulus, shoot_disk

# shallow symmetric double cone with two connected and one disconnected
# expander; confirmed by the parameter sweep in the acceptance suite
SCENARIO_SLOPE = 0.4


@pytest.fixture(scope="session")
def ambient():
    return AmbientConfig(n=2, r_max=12.0)


@pytest.fixture(scope="session")
def cone():
    return Cone(SCENARIO_SLOPE, SCENARIO_SLOPE)


@pytest.fixture(scope="session")
def shooting_cfg():
    # narrowed brackets around the known roots keep the fixtures fast; the
    # full-bracket sweep runs in the acceptance suite
    return ShootingConfig(h=2e-3, sample_stride=3)


@pytest.fixture(scope="session")
def annuli(cone, ambient, shooting_cfg):
    sols = shoot_annulus(cone, shooting_cfg, ambient)
    assert len(sols) == 2
    return sorted(sols, key=lambda s: s.shooting_parameter)


@pytest.fixture(scope="session")
def disk(cone, ambient, shooting_cfg):
    return shoot_disk(cone, shooting_cfg, ambient)


@pytest.fixture(scope="session")
def unstable_annulus(annuli):
    return annuli[0]


@pytest.fixture(scope="session")
def stable_annulus(annuli):
    return annuli[1]
