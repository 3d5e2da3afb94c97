"""RL environment: bird's-eye-view observations, reward, termination.

One decision tick is 0.5 s of simulated time = 25 control ticks. Each
decision tick captures one 80x45 grayscale frame; the observation is the
last four frames stacked oldest first. The reward combines a rightward
lane-change bonus, a collision penalty, and inverse-TTC penalties against
the ego's front and rear neighbors.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .ego_control import DecisionAction, EgoController, apply_decision, control_tick
from .traffic_world import (
    DT,
    TICKS_PER_DECISION,
    IdmParams,
    RoadConfig,
    WorldState,
    detect_collision,
    front_rear_of,
    spawn_world,
    step_world,
    ttc,
)

FRAME_LONG = 80          # px along the road, 1 m/px
FRAME_LAT = 45           # px across the road, 0.5 m/px
LONG_BEHIND = 25.0       # m of road behind the ego inside the frame
LAT_RESOLUTION = 0.5
FRAME_STACK = 4
MAX_DECISION_STEPS = 120

INTENSITY_BACKGROUND = 0.0
INTENSITY_MARKING = 0.25
INTENSITY_TRAFFIC = 0.5
INTENSITY_EGO = 1.0


class Outcome(Enum):
    RUNNING = "running"
    SUCCESS = "success"
    COLLISION = "collision"
    MISSED_EXIT = "missed_exit"


class EpisodeDoneError(RuntimeError):
    """Raised when stepping an episode that already terminated."""


@dataclass(frozen=True)
class RewardWeights:
    right_change: float = 1.0
    collision: float = -10.0
    front_ttc: float = -1.0
    rear_ttc: float = -1.0

    def as_dict(self) -> dict:
        return {
            "right_change": self.right_change,
            "collision": self.collision,
            "front_ttc": self.front_ttc,
            "rear_ttc": self.rear_ttc,
        }


@dataclass(frozen=True)
class RewardBreakdown:
    r1: float  # rightward lane-change bonus
    r2: float  # collision penalty
    r3: float  # front inverse-TTC penalty
    r4: float  # rear inverse-TTC penalty

    @property
    def total(self) -> float:
        return self.r1 + self.r2 + self.r3 + self.r4


@dataclass(frozen=True)
class StepEvents:
    completed_right_change: bool = False
    ego_collision: bool = False


@dataclass(frozen=True)
class StepResult:
    observation: np.ndarray
    reward: RewardBreakdown
    done: bool
    outcome: Outcome


def render_bev(world: WorldState) -> np.ndarray:
    """Rasterize the world into one ego-centric (80, 45) float32 frame.

    Axis 0 is longitudinal ([-25 m, +55 m) around the ego at 1 m/px, so the
    ego center always falls in column 25), axis 1 lateral (22.5 m centered
    on the road at 0.5 m/px). Painter order: markings, traffic, ego. A pixel
    is filled when its center lies inside the vehicle rectangle.
    """
    road = world.road
    frame = np.zeros((FRAME_LONG, FRAME_LAT), dtype=np.float32)
    lat0 = 0.5 * road.width - 0.5 * FRAME_LAT * LAT_RESOLUTION

    for boundary in range(road.lane_count + 1):
        j = int((boundary * road.lane_width - lat0) / LAT_RESOLUTION)
        if 0 <= j < FRAME_LAT:
            frame[:, j] = INTENSITY_MARKING

    ego = world.ego
    long0 = ego.longitudinal_pos - LONG_BEHIND
    ordered = [v for v in world.vehicles if not v.is_ego] + [ego]
    for v in ordered:
        intensity = INTENSITY_EGO if v.is_ego else INTENSITY_TRAFFIC
        ci = v.longitudinal_pos - long0                      # px units (1 m/px)
        cj = (v.lateral_pos - lat0) / LAT_RESOLUTION
        half_i = 0.5 * v.length
        half_j = 0.5 * v.width / LAT_RESOLUTION
        i_lo = max(int(np.ceil(ci - half_i - 0.5)), 0)
        i_hi = min(int(np.ceil(ci + half_i - 0.5)) - 1, FRAME_LONG - 1)
        j_lo = max(int(np.ceil(cj - half_j - 0.5)), 0)
        j_hi = min(int(np.ceil(cj + half_j - 0.5)) - 1, FRAME_LAT - 1)
        if i_lo <= i_hi and j_lo <= j_hi:
            frame[i_lo : i_hi + 1, j_lo : j_hi + 1] = intensity
    return frame


def observe(frames: list[np.ndarray]) -> np.ndarray:
    """Stack the most recent 4 frames oldest first, repeating the earliest."""
    if not frames:
        raise ValueError("at least one frame is required")
    recent = list(frames[-FRAME_STACK:])
    while len(recent) < FRAME_STACK:
        recent.insert(0, recent[0])
    return np.stack(recent).astype(np.float32, copy=False)


def compute_reward(
    prev: WorldState,
    cur: WorldState,
    events: StepEvents,
    weights: RewardWeights = RewardWeights(),
) -> RewardBreakdown:
    """Reward for the decision tick that transformed `prev` into `cur`.

    The TTC terms are evaluated on the post-tick state against the ego's
    nearest laterally-overlapping front and rear vehicles; an absent or
    non-closing neighbor contributes 0. The TTC floor bounds each term.
    """
    ego_id = cur.ego.id
    r1 = weights.right_change if events.completed_right_change else 0.0
    r2 = weights.collision if events.ego_collision else 0.0
    r3 = r4 = 0.0
    front, rear = front_rear_of(cur, ego_id)
    if front is not None:
        t = ttc(cur, ego_id, front)
        if t is not None:
            r3 = weights.front_ttc / t
    if rear is not None:
        t = ttc(cur, rear, ego_id)
        if t is not None:
            r4 = weights.rear_ttc / t
    return RewardBreakdown(r1=r1, r2=r2, r3=r3, r4=r4)


class LaneChangeEnv:
    """Episode loop for the lane-change task.

    reset(seed) -> observation; step(action) -> StepResult. Success means
    the ego settled on the shoulder lane center; driving past the goal
    distance or exhausting the step cap without that is a missed exit.
    """

    def __init__(
        self,
        road: RoadConfig | None = None,
        idm: IdmParams | None = None,
        weights: RewardWeights | None = None,
        max_decision_steps: int = MAX_DECISION_STEPS,
        n_vehicles: int = 15,
        trace: bool = False,
        record_log: bool = False,
    ):
        self.road = road or RoadConfig()
        self.idm = idm or IdmParams()
        self.weights = weights or RewardWeights()
        self.max_decision_steps = max_decision_steps
        self.n_vehicles = n_vehicles
        self.trace = trace
        self.record_log = record_log
        self.world: Optional[WorldState] = None
        self.controller = EgoController()
        self.frames: list[np.ndarray] = []
        self.steps = 0
        self.outcome = Outcome.RUNNING
        self.trace_rows: list[tuple[float, float, float, float]] = []
        self.episode_log: list[dict] = []
        self._traffic_speed_sum = 0.0
        self._traffic_speed_samples = 0

    @property
    def done(self) -> bool:
        return self.outcome is not Outcome.RUNNING

    @property
    def traffic_mean_speed(self) -> float:
        """Time-and-vehicle average speed of the surrounding traffic so far."""
        if self._traffic_speed_samples == 0:
            return 0.0
        return self._traffic_speed_sum / self._traffic_speed_samples

    def reset(self, seed: int) -> np.ndarray:
        self.world = spawn_world(seed, self.road, self.idm, n_vehicles=self.n_vehicles)
        self.controller.reset()
        first = render_bev(self.world)
        self.frames = [first]
        self.steps = 0
        self.outcome = Outcome.RUNNING
        self.trace_rows = []
        self.episode_log = []
        self._traffic_speed_sum = 0.0
        self._traffic_speed_samples = 0
        if self.trace:
            self._record_trace()
        return observe(self.frames)

    def step(self, action: DecisionAction) -> StepResult:
        if self.world is None:
            raise EpisodeDoneError("reset() must be called before step()")
        if self.done:
            raise EpisodeDoneError(f"episode already ended with {self.outcome.value}")

        world = self.world
        prev = world.clone()
        apply_decision(self.controller, DecisionAction(action), world)
        ego_collision = False
        for _ in range(TICKS_PER_DECISION):
            accel, lat_speed = control_tick(self.controller, world)
            step_world(world, accel, lat_speed)
            for v in world.vehicles:
                if not v.is_ego:
                    self._traffic_speed_sum += v.speed
                    self._traffic_speed_samples += 1
            if self.trace:
                self._record_trace()
            if not ego_collision:
                for a, b in detect_collision(world):
                    if a == world.ego.id or b == world.ego.id:
                        ego_collision = True
                        break

        change = self.controller.take_completed_change()
        events = StepEvents(
            completed_right_change=change is not None and change[1] > change[0],
            ego_collision=ego_collision,
        )
        reward = compute_reward(prev, world, events, self.weights)
        self.frames.append(render_bev(world))
        if len(self.frames) > FRAME_STACK:
            del self.frames[0]
        self.steps += 1
        self.outcome = self._classify(ego_collision)
        result = StepResult(
            observation=observe(self.frames),
            reward=reward,
            done=self.done,
            outcome=self.outcome,
        )
        if self.record_log:
            ego = world.ego
            self.episode_log.append(
                {
                    "time": world.time,
                    "action": int(action),
                    "r1": reward.r1,
                    "r2": reward.r2,
                    "r3": reward.r3,
                    "r4": reward.r4,
                    "total": reward.total,
                    "ego_longitudinal": ego.longitudinal_pos,
                    "ego_lateral": ego.lateral_pos,
                    "ego_speed": ego.speed,
                    "ego_lateral_speed": ego.lateral_speed,
                }
            )
        return result

    def _classify(self, ego_collision: bool) -> Outcome:
        world = self.world
        ego = world.ego
        road = self.road
        if ego_collision:
            return Outcome.COLLISION
        settled_on_shoulder = (
            self.controller.active_plan is None
            and ego.lane_target == road.shoulder_lane_index
            and abs(ego.lateral_pos - road.lane_center(road.shoulder_lane_index)) < 1e-6
        )
        if settled_on_shoulder:
            return Outcome.SUCCESS
        if ego.longitudinal_pos > road.goal_distance or self.steps >= self.max_decision_steps:
            return Outcome.MISSED_EXIT
        return Outcome.RUNNING

    def _record_trace(self) -> None:
        ego = self.world.ego
        self.trace_rows.append((self.world.time, ego.lateral_pos, ego.lateral_speed, ego.speed))


EPISODE_LOG_FIELDS = [
    "time",
    "action",
    "r1",
    "r2",
    "r3",
    "r4",
    "total",
    "ego_longitudinal",
    "ego_lateral",
    "ego_speed",
    "ego_lateral_speed",
]


def write_episode_log(rows: list[dict], path) -> None:
    """Write per-decision-tick episode log rows as CSV."""
    with open(path, "w") as fh:
        fh.write(",".join(EPISODE_LOG_FIELDS) + "\n")
        for row in rows:
            fh.write(",".join(repr(row[k]) if isinstance(row[k], float) else str(row[k]) for k in EPISODE_LOG_FIELDS) + "\n")


def quantize_frame(frame: np.ndarray) -> np.ndarray:
    """Frame intensities [0,1] -> uint8, the canonical stored representation."""
    return np.round(frame * 255.0).astype(np.uint8)


def dequantize(stored: np.ndarray) -> np.ndarray:
    """uint8 frames or stacks -> float32 intensities in [0,1]."""
    return stored.astype(np.float32) / 255.0


def quantize_observation(obs: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(obs) * 255.0).astype(np.uint8)


def frame_digest(frame_u8: np.ndarray) -> str:
    """Hex digest identifying one quantized frame (used by the demo format)."""
    return hashlib.sha256(np.ascontiguousarray(frame_u8).tobytes()).hexdigest()
