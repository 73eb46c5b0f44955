import numpy as np
import pytest

from cbvfkit import hjgrid
from cbvfkit.dynamics.corridor import kinematic_corridor_model
from cbvfkit.dynamics.track import TrackGeometry

CORRIDOR_SPEED = 10.0
CORRIDOR_UBAR = 1.0 / 12.0
HORIZON = 1.0


@pytest.fixture(scope="session")
def corridor():
    return kinematic_corridor_model(CORRIDOR_SPEED, CORRIDOR_UBAR, TrackGeometry())


def corridor_grid_spec(counts=(201, 201)):
    return hjgrid.GridSpec(lo=(-4.0, -np.pi), hi=(4.0, np.pi), counts=counts,
                           periodic=(False, True))


@pytest.fixture(scope="session")
def oracle_grid(corridor):
    """Undiscounted 201x201 value function, shared by the heavier tests."""
    return hjgrid.solve_cbvf(corridor, corridor_grid_spec(), gamma=0.0,
                             horizon=HORIZON)


@pytest.fixture(scope="session")
def oracle_grid_discounted(corridor):
    """Coarser discounted oracle used by the learning tests."""
    return hjgrid.solve_cbvf(corridor, corridor_grid_spec((101, 101)), gamma=0.1,
                             horizon=HORIZON)
