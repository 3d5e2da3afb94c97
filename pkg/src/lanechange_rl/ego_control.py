"""Ego vehicle control: decisions in, continuous actuation out.

The five behavioral decisions only touch setpoints (target speed, lane).
Every 0.02 s control tick converts setpoints into actuation: a PID speed
loop governed by an IDM safety term for the longitudinal axis, and the
quintic plan derivative for the lateral axis.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import IntEnum
from typing import Optional

from .quintic import LANE_CHANGE_DURATION, TrajectoryPlan, plan_quintic
from .traffic_world import DT, EGO_START_SPEED, MAX_BRAKE, WorldState, front_rear_of, idm_acceleration

log = logging.getLogger(__name__)

SPEED_STEP = 2.0 / 3.6     # accelerate/brake adjust the target by 2 km/h
PID_GAINS = (1.2, 0.05, 0.0)
EGO_ACCEL_LIMIT = 1.5      # m/s^2, same cap as the IDM's a_max


class DecisionAction(IntEnum):
    MAINTAIN = 0
    ACCELERATE = 1
    BRAKE = 2
    LANE_LEFT = 3
    LANE_RIGHT = 4


@dataclass
class EgoController:
    """Setpoints plus PID state for one episode. Owns at most one active plan."""

    target_speed: float = EGO_START_SPEED
    active_plan: Optional[TrajectoryPlan] = None
    pid_gains: tuple[float, float, float] = PID_GAINS
    pid_integral: float = 0.0
    pid_prev_error: float = 0.0
    completed_change: Optional[tuple[int, int]] = None  # (from_lane, to_lane), consumed by the env

    def reset(self, target_speed: float = EGO_START_SPEED) -> None:
        self.target_speed = target_speed
        self.active_plan = None
        self.pid_integral = 0.0
        self.pid_prev_error = 0.0
        self.completed_change = None

    def take_completed_change(self) -> Optional[tuple[int, int]]:
        change, self.completed_change = self.completed_change, None
        return change


def apply_decision(ctrl: EgoController, action: DecisionAction, world: WorldState) -> EgoController:
    """Apply one behavioral decision to the controller setpoints.

    Lane changes at the road edge, or while a maneuver is in progress, are
    no-ops. Called once per decision tick.
    """
    road = world.road
    ego = world.ego
    if action == DecisionAction.ACCELERATE:
        ctrl.target_speed = min(ctrl.target_speed + SPEED_STEP, road.speed_ceiling)
    elif action == DecisionAction.BRAKE:
        ctrl.target_speed = max(ctrl.target_speed - SPEED_STEP, 0.0)
    elif action in (DecisionAction.LANE_LEFT, DecisionAction.LANE_RIGHT):
        if ctrl.active_plan is not None:
            log.debug("lane change ignored: maneuver already in progress")
            return ctrl
        step = -1 if action == DecisionAction.LANE_LEFT else 1
        target_lane = ego.lane_target + step
        if target_lane < 0 or target_lane >= road.lane_count:
            log.debug("lane change ignored: already at the road edge")
            return ctrl
        ctrl.active_plan = plan_quintic(
            ego.lateral_pos, road.lane_center(target_lane), LANE_CHANGE_DURATION, world.time
        )
        ego.lane_target = target_lane
    return ctrl


def control_tick(ctrl: EgoController, world: WorldState) -> tuple[float, float]:
    """One 0.02 s actuation step: (longitudinal accel, lateral speed).

    The commanded acceleration is the minimum of the PID demand and the IDM
    value with respect to the current front vehicle, so the IDM acts as a
    safety governor whenever a leader exists. A finished plan snaps the ego
    onto the target lane center exactly and records the completed change.
    """
    ego = world.ego
    if ctrl.active_plan is not None and ctrl.active_plan.done(world.time):
        plan = ctrl.active_plan
        from_lane = _nearest_lane(world, plan.start_lateral)
        ego.lateral_pos = plan.end_lateral
        ego.lateral_speed = 0.0
        ctrl.active_plan = None
        ctrl.completed_change = (from_lane, ego.lane_target)

    accel = _pid_accel(ctrl, ego.speed)
    front, _ = front_rear_of(world, ego.id)
    if front is not None:
        leader = world.vehicle_by_id(front)
        gap = leader.longitudinal_pos - ego.longitudinal_pos - 0.5 * (ego.length + leader.length)
        governor = idm_acceleration(
            ego.speed, max(ctrl.target_speed, 0.1), gap, ego.speed - leader.speed, world.idm
        )
        accel = min(accel, governor)

    lateral_speed = ctrl.active_plan.velocity(world.time) if ctrl.active_plan is not None else 0.0
    return accel, lateral_speed


def _pid_accel(ctrl: EgoController, speed: float) -> float:
    kp, ki, kd = ctrl.pid_gains
    error = ctrl.target_speed - speed
    derivative = (error - ctrl.pid_prev_error) / DT
    raw = kp * error + ki * ctrl.pid_integral + kd * derivative
    lo, hi = -MAX_BRAKE, EGO_ACCEL_LIMIT
    # conditional anti-windup: freeze the integral while the command saturates
    if lo < raw < hi or (raw >= hi and error < 0.0) or (raw <= lo and error > 0.0):
        ctrl.pid_integral += error * DT
    ctrl.pid_prev_error = error
    return min(max(raw, lo), hi)


def _nearest_lane(world: WorldState, lateral: float) -> int:
    road = world.road
    lane = int(lateral / road.lane_width)
    return min(max(lane, 0), road.lane_count - 1)
