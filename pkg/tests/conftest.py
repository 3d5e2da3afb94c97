import os

# pin BLAS threading before numpy initializes it (see lanechange_rl.__init__)
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from lanechange_rl.traffic_world import (
    EGO_START_SPEED,
    IdmParams,
    RoadConfig,
    VehicleState,
    WorldState,
)


def make_world(vehicles, seed=0, road=None, idm=None):
    """Hand-built world for geometry tests; vehicles[0] must be the ego."""
    assert vehicles[0].is_ego
    return WorldState(
        road=road or RoadConfig(),
        idm=idm or IdmParams(),
        vehicles=vehicles,
        tick=0,
        rng=np.random.default_rng(seed),
        seed=seed,
    )


def ego_at(lane=0, pos=0.0, speed=EGO_START_SPEED, road=None):
    road = road or RoadConfig()
    return VehicleState(
        id=0,
        lane_target=lane,
        lateral_pos=road.lane_center(lane),
        longitudinal_pos=pos,
        speed=speed,
        target_speed=speed,
        is_ego=True,
    )


def car(vid, lane=1, pos=0.0, speed=8.0, target=None, road=None, lateral=None):
    road = road or RoadConfig()
    return VehicleState(
        id=vid,
        lane_target=lane,
        lateral_pos=road.lane_center(lane) if lateral is None else lateral,
        longitudinal_pos=pos,
        speed=speed,
        target_speed=speed if target is None else target,
    )


@pytest.fixture
def road():
    return RoadConfig()


@pytest.fixture
def idm():
    return IdmParams()
