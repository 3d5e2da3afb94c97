"""Deterministic multi-lane road world.

Point-kinematic vehicles on a straight road: IDM car-following for the
surrounding traffic, a probabilistic gap-acceptance manager for their lane
changes, rectangle collision geometry, and time-to-collision queries. One
world instance is owned by one episode loop; identical seeds and identical
control sequences reproduce bit-identical trajectories.

Conventions: lateral position is measured in meters from the road's left
edge (lane 0 is leftmost), longitudinal position from the ego spawn point.
Time advances only through :func:`step_world` in exact 0.02 s ticks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .quintic import LANE_CHANGE_DURATION, TrajectoryPlan, plan_quintic

DT = 0.02                   # control tick, s
TICKS_PER_DECISION = 25     # decision tick = 0.5 s
VEHICLE_LENGTH = 4.5        # m
VEHICLE_WIDTH = 2.0         # m
MAX_BRAKE = 8.0             # m/s^2, physical braking cap
TTC_FLOOR = 0.1             # s, lower clamp so 1/TTC terms stay bounded
EGO_START_SPEED = 30.0 / 3.6

# Surrounding-traffic manager (gap-acceptance lane changes)
TM_CHANGE_PROB = 0.02       # per vehicle per decision tick, when blocked
TM_BLOCKED_MARGIN = 2.0     # m/s below target speed that counts as blocked
TM_MIN_GAP = 10.0           # m, required front and rear gap in the target lane
RECYCLE_BEHIND = 100.0      # m behind the ego that triggers recycling
RECYCLE_AHEAD = (100.0, 120.0)  # m ahead of the ego where recycled vehicles reappear

SPAWN_RANGE = (-40.0, 100.0)
SPAWN_COUNT = 15


class SpawnError(RuntimeError):
    """Raised when vehicle placement cannot satisfy the gap constraints."""


class UnknownVehicleError(KeyError):
    """Raised when an operation references a vehicle id not in the world."""


@dataclass(frozen=True)
class RoadConfig:
    lane_count: int = 4
    lane_width: float = 3.5
    goal_distance: float = 240.0
    speed_floor: float = 20.0 / 3.6
    speed_ceiling: float = 50.0 / 3.6

    def __post_init__(self):
        if self.lane_count < 2:
            raise ValueError("road needs at least 2 lanes")
        if self.goal_distance <= 0:
            raise ValueError("goal distance must be positive")

    @property
    def width(self) -> float:
        return self.lane_count * self.lane_width

    @property
    def shoulder_lane_index(self) -> int:
        return self.lane_count - 1

    def lane_center(self, lane: int) -> float:
        return (lane + 0.5) * self.lane_width


@dataclass(frozen=True)
class IdmParams:
    a_max: float = 1.5
    b_comf: float = 2.0
    s0: float = 2.0
    headway_T: float = 1.0
    delta: float = 4.0

    def __post_init__(self):
        for name in ("a_max", "b_comf", "s0", "headway_T", "delta"):
            if getattr(self, name) <= 0:
                raise ValueError(f"IDM parameter {name} must be strictly positive")


@dataclass
class VehicleState:
    id: int
    lane_target: int
    lateral_pos: float
    longitudinal_pos: float
    speed: float
    lateral_speed: float = 0.0
    accel: float = 0.0
    target_speed: float = EGO_START_SPEED
    length: float = VEHICLE_LENGTH
    width: float = VEHICLE_WIDTH
    is_ego: bool = False
    plan: Optional[TrajectoryPlan] = None  # surrounding-vehicle maneuver; the ego's lives in its controller

    def corridor(self) -> tuple[float, float]:
        half = 0.5 * self.width
        return self.lateral_pos - half, self.lateral_pos + half

    def clone(self) -> "VehicleState":
        return replace(self)


@dataclass
class WorldState:
    road: RoadConfig
    idm: IdmParams
    vehicles: list[VehicleState]
    tick: int
    rng: np.random.Generator
    seed: int

    @property
    def time(self) -> float:
        return self.tick * DT

    @property
    def ego(self) -> VehicleState:
        return self.vehicles[0]

    def vehicle_by_id(self, vehicle_id: int) -> VehicleState:
        for v in self.vehicles:
            if v.id == vehicle_id:
                return v
        raise UnknownVehicleError(vehicle_id)

    def clone(self) -> "WorldState":
        rng = np.random.Generator(np.random.PCG64())
        rng.bit_generator.state = self.rng.bit_generator.state
        return WorldState(
            road=self.road,
            idm=self.idm,
            vehicles=[v.clone() for v in self.vehicles],
            tick=self.tick,
            rng=rng,
            seed=self.seed,
        )


def spawn_world(
    seed: int,
    road: RoadConfig | None = None,
    idm: IdmParams | None = None,
    n_vehicles: int = SPAWN_COUNT,
) -> WorldState:
    """Place the ego plus `n_vehicles` surrounding vehicles, seeded.

    The ego starts in the leftmost lane at longitudinal 0 moving at 30 km/h.
    Surrounding vehicles get uniform lanes and positions in [-40, 100] m,
    rejected until every same-lane bumper gap is at least s0 + length, and
    start at their target speed (uniform in the road's speed band).
    """
    road = road or RoadConfig()
    idm = idm or IdmParams()
    rng = np.random.default_rng(seed)
    min_center_dist = idm.s0 + 2.0 * VEHICLE_LENGTH

    ego = VehicleState(
        id=0,
        lane_target=0,
        lateral_pos=road.lane_center(0),
        longitudinal_pos=0.0,
        speed=EGO_START_SPEED,
        target_speed=EGO_START_SPEED,
        is_ego=True,
    )
    vehicles = [ego]
    for vid in range(1, n_vehicles + 1):
        placed = False
        for _ in range(200):
            lane = int(rng.integers(road.lane_count))
            pos = float(rng.uniform(*SPAWN_RANGE))
            if _lane_slot_free(vehicles, road, lane, pos, min_center_dist):
                target = float(rng.uniform(road.speed_floor, road.speed_ceiling))
                vehicles.append(
                    VehicleState(
                        id=vid,
                        lane_target=lane,
                        lateral_pos=road.lane_center(lane),
                        longitudinal_pos=pos,
                        speed=target,
                        target_speed=target,
                    )
                )
                placed = True
                break
        if not placed:
            raise SpawnError(f"could not place vehicle {vid} after 200 attempts (seed {seed})")
    return WorldState(road=road, idm=idm, vehicles=vehicles, tick=0, rng=rng, seed=seed)


def _lane_slot_free(vehicles, road, lane, pos, min_center_dist) -> bool:
    center = road.lane_center(lane)
    for other in vehicles:
        if abs(other.lateral_pos - center) < 0.5 * road.lane_width:
            if abs(other.longitudinal_pos - pos) < min_center_dist:
                return False
    return True


def idm_acceleration(v: float, v0: float, gap: Optional[float], dv: float, p: IdmParams) -> float:
    """IDM acceleration for speed v, desired speed v0, bumper gap and closing speed dv.

    gap None means free road (no interaction term). A non-positive gap with a
    leader present is an emergency and returns the braking cap. The result is
    clamped to [-MAX_BRAKE, a_max].
    """
    if gap is not None and gap <= 0.0:
        return -MAX_BRAKE
    accel = p.a_max * (1.0 - (v / v0) ** p.delta)
    if gap is not None:
        s_star = p.s0 + v * p.headway_T + v * dv / (2.0 * math.sqrt(p.a_max * p.b_comf))
        accel -= p.a_max * (s_star / gap) ** 2
    return min(max(accel, -MAX_BRAKE), p.a_max)


def step_world(world: WorldState, ego_accel: float = 0.0, ego_lateral_speed: float = 0.0, dt: float = DT) -> WorldState:
    """Advance the world by one 0.02 s control tick (in place; returns `world`).

    Surrounding vehicles follow IDM with respect to their corridor leader and,
    on decision-tick boundaries, may start traffic-manager lane changes or be
    recycled ahead of the ego. The ego applies the supplied controls. All
    accelerations are computed from the pre-step state, then every vehicle
    integrates semi-implicitly (speed first, then position).
    """
    if dt != DT:
        raise ValueError(f"step_world requires dt={DT}, got {dt}")
    if world.tick % TICKS_PER_DECISION == 0:
        _run_traffic_manager(world)

    t = world.time
    idm = world.idm
    commands = []
    for v in world.vehicles:
        if v.is_ego:
            accel = min(max(ego_accel, -MAX_BRAKE), idm.a_max)
            lat_speed = ego_lateral_speed
        else:
            gap, dv = _leader_gap(world, v)
            accel = idm_acceleration(v.speed, v.target_speed, gap, dv, idm)
            lat_speed = v.plan.velocity(t) if v.plan is not None else 0.0
        commands.append((v, accel, lat_speed))

    lat_max = world.road.width
    for v, accel, lat_speed in commands:
        v.accel = accel
        v.speed = max(0.0, v.speed + accel * dt)
        v.longitudinal_pos += v.speed * dt
        v.lateral_speed = lat_speed
        v.lateral_pos = min(max(v.lateral_pos + lat_speed * dt, 0.0), lat_max)

    world.tick += 1
    t_next = world.time
    for v in world.vehicles:
        if v.plan is not None and not v.is_ego and v.plan.done(t_next):
            v.lateral_pos = v.plan.end_lateral
            v.lateral_speed = 0.0
            v.plan = None
    return world


def _overlap(lo1: float, hi1: float, lo2: float, hi2: float) -> bool:
    return lo1 < hi2 and lo2 < hi1


def _leader_gap(world: WorldState, v: VehicleState) -> tuple[Optional[float], float]:
    """Bumper gap and closing speed to the nearest corridor-overlapping leader."""
    lo, hi = v.corridor()
    best = None
    for other in world.vehicles:
        if other is v:
            continue
        if other.longitudinal_pos <= v.longitudinal_pos:
            continue
        olo, ohi = other.corridor()
        if _overlap(lo, hi, olo, ohi):
            if best is None or other.longitudinal_pos < best.longitudinal_pos:
                best = other
    if best is None:
        return None, 0.0
    gap = best.longitudinal_pos - v.longitudinal_pos - 0.5 * (v.length + best.length)
    return gap, v.speed - best.speed


def front_rear_of(world: WorldState, vehicle_id: int) -> tuple[Optional[int], Optional[int]]:
    """Nearest corridor-overlapping vehicle ids ahead of and behind `vehicle_id`."""
    v = world.vehicle_by_id(vehicle_id)
    lo, hi = v.corridor()
    front = rear = None
    front_d = rear_d = math.inf
    for other in world.vehicles:
        if other.id == vehicle_id:
            continue
        olo, ohi = other.corridor()
        if not _overlap(lo, hi, olo, ohi):
            continue
        d = other.longitudinal_pos - v.longitudinal_pos
        if d > 0.0 and (d < front_d or (d == front_d and other.id < front)):
            front, front_d = other.id, d
        elif d < 0.0 and (-d < rear_d or (-d == rear_d and other.id < rear)):
            rear, rear_d = other.id, -d
    return front, rear


def neighbors(world: WorldState, vehicle_id: int, lane: int) -> tuple[Optional[int], Optional[int]]:
    """Nearest vehicle ids ahead/behind `vehicle_id` whose corridor overlaps `lane`.

    A vehicle mid-lane-change straddles the boundary and is reported as an
    occupant of both lanes it touches.
    """
    if lane < 0 or lane >= world.road.lane_count:
        raise ValueError(f"lane {lane} out of range")
    v = world.vehicle_by_id(vehicle_id)
    lane_lo = lane * world.road.lane_width
    lane_hi = lane_lo + world.road.lane_width
    front = rear = None
    front_d = rear_d = math.inf
    for other in world.vehicles:
        if other.id == vehicle_id:
            continue
        olo, ohi = other.corridor()
        if not _overlap(lane_lo, lane_hi, olo, ohi):
            continue
        d = other.longitudinal_pos - v.longitudinal_pos
        if d > 0.0 and (d < front_d or (d == front_d and other.id < front)):
            front, front_d = other.id, d
        elif d < 0.0 and (-d < rear_d or (-d == rear_d and other.id < rear)):
            rear, rear_d = other.id, -d
    return front, rear


def committed_neighbors(world: WorldState, vehicle_id: int, lane: int) -> tuple[Optional[int], Optional[int]]:
    """Like :func:`neighbors`, but also counts vehicles committed to `lane`.

    A vehicle heading into the lane (lane_target == lane) occupies it for
    gap-acceptance purposes even while its corridor is still en route, which
    keeps two movers from converging on the same slot from opposite sides.
    """
    if lane < 0 or lane >= world.road.lane_count:
        raise ValueError(f"lane {lane} out of range")
    v = world.vehicle_by_id(vehicle_id)
    lane_lo = lane * world.road.lane_width
    lane_hi = lane_lo + world.road.lane_width
    front = rear = None
    front_d = rear_d = math.inf
    for other in world.vehicles:
        if other.id == vehicle_id:
            continue
        olo, ohi = other.corridor()
        if not (_overlap(lane_lo, lane_hi, olo, ohi) or other.lane_target == lane):
            continue
        d = other.longitudinal_pos - v.longitudinal_pos
        if d > 0.0 and (d < front_d or (d == front_d and other.id < front)):
            front, front_d = other.id, d
        elif d < 0.0 and (-d < rear_d or (-d == rear_d and other.id < rear)):
            rear, rear_d = other.id, -d
    return front, rear


def detect_collision(world: WorldState) -> list[tuple[int, int]]:
    """All id pairs whose axis-aligned rectangles overlap with positive area."""
    hits = []
    vehicles = world.vehicles
    for i in range(len(vehicles)):
        a = vehicles[i]
        for j in range(i + 1, len(vehicles)):
            b = vehicles[j]
            if abs(a.longitudinal_pos - b.longitudinal_pos) < 0.5 * (a.length + b.length) and abs(
                a.lateral_pos - b.lateral_pos
            ) < 0.5 * (a.width + b.width):
                hits.append((min(a.id, b.id), max(a.id, b.id)))
    return hits


def ttc(world: WorldState, follower_id: int, leader_id: int) -> Optional[float]:
    """Bumper gap over closing speed, or None when not closing / not laterally aligned.

    Clamped below at TTC_FLOOR so downstream 1/TTC terms stay bounded.
    """
    follower = world.vehicle_by_id(follower_id)
    leader = world.vehicle_by_id(leader_id)
    flo, fhi = follower.corridor()
    llo, lhi = leader.corridor()
    if not _overlap(flo, fhi, llo, lhi):
        return None
    closing = follower.speed - leader.speed
    if closing <= 0.0:
        return None
    gap = leader.longitudinal_pos - follower.longitudinal_pos - 0.5 * (follower.length + leader.length)
    return max(gap / closing, TTC_FLOOR)


def _run_traffic_manager(world: WorldState) -> None:
    """Decision-tick housekeeping: recycling and gap-acceptance lane changes.

    Draws from the world rng happen in vehicle-id order so trajectories stay
    reproducible for a fixed seed and control sequence.
    """
    road = world.road
    ego = world.ego
    rng = world.rng
    min_center_dist = world.idm.s0 + 2.0 * VEHICLE_LENGTH

    for v in world.vehicles:
        if v.is_ego:
            continue
        if v.longitudinal_pos < ego.longitudinal_pos - RECYCLE_BEHIND:
            for _ in range(10):
                lane = int(rng.integers(road.lane_count))
                pos = ego.longitudinal_pos + float(rng.uniform(*RECYCLE_AHEAD))
                if _lane_slot_free([o for o in world.vehicles if o is not v], road, lane, pos, min_center_dist):
                    target = float(rng.uniform(road.speed_floor, road.speed_ceiling))
                    v.lane_target = lane
                    v.lateral_pos = road.lane_center(lane)
                    v.longitudinal_pos = pos
                    v.speed = target
                    v.target_speed = target
                    v.lateral_speed = 0.0
                    v.plan = None
                    break

    for v in world.vehicles:
        if v.is_ego or v.plan is not None:
            continue
        if abs(v.lateral_pos - road.lane_center(v.lane_target)) > 1e-6:
            continue
        gap, dv = _leader_gap(world, v)
        blocked = gap is not None and (v.speed - dv) < v.target_speed - TM_BLOCKED_MARGIN
        if not blocked:
            continue
        if rng.random() >= TM_CHANGE_PROB:
            continue
        options = [lane for lane in (v.lane_target - 1, v.lane_target + 1) if 0 <= lane < road.lane_count]
        target_lane = options[int(rng.integers(len(options)))]
        front, rear = committed_neighbors(world, v.id, target_lane)
        if front is not None:
            f = world.vehicle_by_id(front)
            if f.longitudinal_pos - v.longitudinal_pos - 0.5 * (f.length + v.length) <= TM_MIN_GAP:
                continue
        if rear is not None:
            r = world.vehicle_by_id(rear)
            if v.longitudinal_pos - r.longitudinal_pos - 0.5 * (r.length + v.length) <= TM_MIN_GAP:
                continue
        v.plan = plan_quintic(v.lateral_pos, road.lane_center(target_lane), LANE_CHANGE_DURATION, world.time)
        v.lane_target = target_lane


SNAPSHOT_VERSION = 1


def format_snapshot(world: WorldState) -> str:
    """Line-delimited world snapshot: header line, then one vehicle per line."""
    lines = [
        f"worldsnap {SNAPSHOT_VERSION} tick={world.tick} seed={world.seed} "
        f"lanes={world.road.lane_count} lane_width={world.road.lane_width!r}"
    ]
    for v in world.vehicles:
        lines.append(
            f"{v.id},{v.lane_target},{v.lateral_pos!r},{v.longitudinal_pos!r},{v.speed!r},{v.lateral_speed!r}"
        )
    return "\n".join(lines) + "\n"


def parse_snapshot(text: str) -> tuple[dict, list[dict]]:
    """Parse :func:`format_snapshot` output into (header meta, vehicle rows)."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("worldsnap "):
        raise ValueError("not a world snapshot")
    head = lines[0].split()
    version = int(head[1])
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {version}")
    meta = {"version": version}
    for token in head[2:]:
        key, _, value = token.partition("=")
        meta[key] = float(value) if "." in value else int(value)
    rows = []
    for line in lines[1:]:
        vid, lane_target, lat, pos, speed, lat_speed = line.split(",")
        rows.append(
            {
                "id": int(vid),
                "lane_target": int(lane_target),
                "lateral_pos": float(lat),
                "longitudinal_pos": float(pos),
                "speed": float(speed),
                "lateral_speed": float(lat_speed),
            }
        )
    return meta, rows
