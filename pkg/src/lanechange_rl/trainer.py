"""Demonstration-aided dueling double-Q training.

Two FIFO replay buffers (demonstration and exploration tuples) are sampled
into fixed-split mixed minibatches. Each decision step trains one of the
two networks, chosen by a fair coin: the chosen network selects the bootstrap
action on the next state, the other evaluates it, and the squared TD error
is averaged per group (demonstration and conventional) before summing.

Phase 1 fills the demonstration buffer, either from a recorded demo file or
by running a demonstrator policy live; phase 2 is epsilon-greedy training.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .mdp_env import LaneChangeEnv, Outcome, dequantize, quantize_observation
from .value_net import (
    DEFAULT_ARCH,
    ArchSpec,
    NetworkParams,
    OptimizerState,
    copy_params,
    forward,
    init_params,
    loss_and_gradients,
    optimize_step,
    save_checkpoint,
)

N_ACTIONS = 5


@dataclass
class Transition:
    """One replay tuple; observations are stored quantized (uint8)."""

    obs: np.ndarray
    action: int
    reward: float
    next_obs: np.ndarray
    done: bool
    is_demo: bool


class ReplayBuffer:
    """Ring buffer with strictly FIFO eviction and uniform batch sampling."""

    def __init__(self, capacity: int = 1_000_000):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._storage: list[Transition] = []
        self._next = 0
        self.inserted = 0

    def __len__(self) -> int:
        return len(self._storage)

    def push(self, transition: Transition) -> None:
        if len(self._storage) < self.capacity:
            self._storage.append(transition)
        else:
            self._storage[self._next] = transition
            self._next = (self._next + 1) % self.capacity
        self.inserted += 1

    def sample(self, rng: np.random.Generator, n: int) -> list[Transition]:
        """n distinct transitions, uniform without replacement."""
        if n > len(self._storage):
            raise ValueError(f"cannot sample {n} from buffer of {len(self._storage)}")
        idx = rng.choice(len(self._storage), size=n, replace=False)
        return [self._storage[i] for i in idx]

    def items(self) -> list[Transition]:
        """Stored transitions, oldest first."""
        return self._storage[self._next :] + self._storage[: self._next]


@dataclass(frozen=True)
class EpsilonSchedule:
    init: float = 1.0
    cutoff: float = 0.1
    decay_horizon: int = 800


def epsilon_at(schedule: EpsilonSchedule, episode: int) -> float:
    """Linear decay from init to cutoff over the horizon, then constant."""
    if episode < 0:
        raise ValueError("episode must be non-negative")
    if episode >= schedule.decay_horizon:
        return schedule.cutoff
    frac = episode / schedule.decay_horizon
    return schedule.init + (schedule.cutoff - schedule.init) * frac


def select_action(params: NetworkParams, obs: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy over the Q values; argmax ties break to the lowest code."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must be in [0, 1]")
    if epsilon > 0.0 and rng.random() < epsilon:
        return int(rng.integers(N_ACTIONS))
    return int(np.argmax(forward(params, obs)))


@dataclass
class TrainerConfig:
    gamma: float = 0.9
    learning_rate: float = 0.005
    batch_size: int = 64
    n_demo: int = 16          # demonstration tuples per minibatch
    n_explore: int = 48       # conventional tuples per minibatch
    buffer_capacity: int = 1_000_000
    demo_episodes: int = 30   # phase-1 episode count when collecting live
    episodes: int = 1000      # phase-2 episode budget
    epsilon_init: float = 1.0
    epsilon_cutoff: float = 0.1
    epsilon_horizon: Optional[int] = None  # defaults to 80% of episodes
    checkpoint_interval: int = 100
    max_decision_steps: int = 120
    dueling_mean: bool = True

    def __post_init__(self):
        if self.n_demo + self.n_explore != self.batch_size:
            raise ValueError("n_demo + n_explore must equal batch_size")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")

    @property
    def schedule(self) -> EpsilonSchedule:
        horizon = self.epsilon_horizon or max(1, int(round(0.8 * self.episodes)))
        return EpsilonSchedule(self.epsilon_init, self.epsilon_cutoff, horizon)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["epsilon_horizon"] = self.schedule.decay_horizon
        return d


@dataclass
class TrainerState:
    config: TrainerConfig
    theta1: NetworkParams
    theta2: NetworkParams
    opt1: OptimizerState
    opt2: OptimizerState
    demo_buffer: ReplayBuffer
    explore_buffer: ReplayBuffer
    rng: np.random.Generator
    seed: int
    episode: int = 0
    updates_theta1: int = 0
    updates_theta2: int = 0
    warm_batch_mix: dict = field(default_factory=dict)  # (demo, explore) -> count once both buffers warm


def make_trainer(seed: int, config: TrainerConfig | None = None, arch: ArchSpec = DEFAULT_ARCH) -> TrainerState:
    config = config or TrainerConfig()
    theta1 = init_params(seed, arch, dueling_mean=config.dueling_mean)
    theta2 = init_params(seed + 1, arch, dueling_mean=config.dueling_mean)
    return TrainerState(
        config=config,
        theta1=theta1,
        theta2=theta2,
        opt1=OptimizerState(learning_rate=config.learning_rate),
        opt2=OptimizerState(learning_rate=config.learning_rate),
        demo_buffer=ReplayBuffer(config.buffer_capacity),
        explore_buffer=ReplayBuffer(config.buffer_capacity),
        rng=np.random.default_rng(seed),
        seed=seed,
    )


def sample_mixed_batch(state: TrainerState) -> Optional[list[Transition]]:
    """n_demo + n_explore tuples; a deficit on one side is filled from the other.

    Returns None (not ready) while the buffers cannot fill a whole batch.
    Demo tuples come first in the returned list.
    """
    cfg = state.config
    demo, explore = state.demo_buffer, state.explore_buffer
    if len(demo) + len(explore) < cfg.batch_size:
        return None
    want_demo = min(cfg.n_demo, len(demo))
    want_explore = min(cfg.n_explore, len(explore))
    deficit = cfg.batch_size - want_demo - want_explore
    if deficit > 0:
        extra = min(deficit, len(explore) - want_explore)
        want_explore += extra
        deficit -= extra
    if deficit > 0:
        extra = min(deficit, len(demo) - want_demo)
        want_demo += extra
        deficit -= extra
    batch = demo.sample(state.rng, want_demo) if want_demo else []
    batch += explore.sample(state.rng, want_explore) if want_explore else []
    if len(demo) >= cfg.n_demo and len(explore) >= cfg.n_explore:
        key = (want_demo, want_explore)
        state.warm_batch_mix[key] = state.warm_batch_mix.get(key, 0) + 1
    return batch


def _batch_arrays(batch: list[Transition]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    obs = dequantize(np.stack([t.obs for t in batch]))
    next_obs = dequantize(np.stack([t.next_obs for t in batch]))
    actions = np.array([t.action for t in batch], dtype=np.int64)
    rewards = np.array([t.reward for t in batch], dtype=np.float64)
    done = np.array([t.done for t in batch], dtype=np.float64)
    is_demo = np.array([t.is_demo for t in batch], dtype=bool)
    return obs, next_obs, actions, rewards, done, is_demo


def compute_targets(
    theta_online: NetworkParams,
    theta_target: NetworkParams,
    next_obs: np.ndarray,
    rewards: np.ndarray,
    done: np.ndarray,
    gamma: float,
) -> np.ndarray:
    """Double-Q targets: the online net picks the argmax, the other evaluates it."""
    q_online_next = forward(theta_online, next_obs)
    a_star = np.argmax(q_online_next, axis=1)
    q_target_next = forward(theta_target, next_obs)
    bootstrap = q_target_next[np.arange(len(a_star)), a_star]
    return rewards + gamma * (1.0 - done) * bootstrap


def compute_loss(
    theta_online: NetworkParams,
    theta_target: NetworkParams,
    batch: list[Transition],
    gamma: float,
) -> tuple[float, np.ndarray]:
    """Mixed-batch loss: demo-group MSE plus conventional-group MSE.

    Returns (loss, per-sample TD targets). Targets are constants with no
    gradient; an empty group simply contributes nothing.
    """
    obs, next_obs, actions, rewards, done, is_demo = _batch_arrays(batch)
    td = compute_targets(theta_online, theta_target, next_obs, rewards, done, gamma)
    q = forward(theta_online, obs)
    taken = q[np.arange(len(batch)), actions].astype(np.float64)
    sq = (td - taken) ** 2
    loss = 0.0
    if is_demo.any():
        loss += float(sq[is_demo].mean())
    if (~is_demo).any():
        loss += float(sq[~is_demo].mean())
    return loss, td


def _group_weights(is_demo: np.ndarray) -> np.ndarray:
    """Per-sample weights reproducing the sum of the two group means."""
    w = np.empty(is_demo.shape[0], dtype=np.float64)
    n_demo = int(is_demo.sum())
    n_conv = is_demo.shape[0] - n_demo
    if n_demo:
        w[is_demo] = 1.0 / n_demo
    if n_conv:
        w[~is_demo] = 1.0 / n_conv
    return w


def choose_online(state: TrainerState) -> tuple[NetworkParams, NetworkParams, OptimizerState]:
    """Fair-coin pick of the network to update; the other serves as target."""
    if state.rng.random() < 0.5:
        state.updates_theta1 += 1
        return state.theta1, state.theta2, state.opt1
    state.updates_theta2 += 1
    return state.theta2, state.theta1, state.opt2


def train_step(state: TrainerState, batch: list[Transition]) -> float:
    """One optimizer step on the coin-chosen online network; returns the loss."""
    cfg = state.config
    obs, next_obs, actions, rewards, done, is_demo = _batch_arrays(batch)
    online, target, opt = choose_online(state)
    td = compute_targets(online, target, next_obs, rewards, done, cfg.gamma)
    loss, grads = loss_and_gradients(online, obs, actions, td, _group_weights(is_demo))
    optimize_step(online, grads, opt)
    return loss


@dataclass
class EpisodeMetrics:
    episode: int
    reward: float
    final_lateral: float
    collision: bool
    outcome: str
    epsilon: float
    steps: int


METRICS_FIELDS = ["episode", "reward", "final_lateral", "collision", "outcome", "epsilon", "steps"]


def format_metrics_row(m: EpisodeMetrics) -> str:
    return ",".join(
        [str(m.episode), repr(m.reward), repr(m.final_lateral), str(int(m.collision)), m.outcome, repr(m.epsilon), str(m.steps)]
    )


def episode_seed(run_seed: int, phase: int, episode: int) -> int:
    """Deterministic per-episode world seed derived from the run seed."""
    return int(np.random.SeedSequence([run_seed, phase, episode]).generate_state(1, np.uint64)[0])


def run_demo_phase(
    state: TrainerState,
    env: LaneChangeEnv,
    demo_policy: Callable,
    episodes: Optional[int] = None,
) -> int:
    """Phase 1 of the training procedure: fill the demo buffer by running the policy."""
    episodes = episodes if episodes is not None else state.config.demo_episodes
    stored = 0
    for e in range(episodes):
        obs = quantize_observation(env.reset(episode_seed(state.seed, 1, e)))
        done = False
        while not done:
            action = demo_policy(env.world)
            result = env.step(action)
            next_obs = quantize_observation(result.observation)
            state.demo_buffer.push(
                Transition(obs, int(action), result.reward.total, next_obs, result.done, True)
            )
            obs = next_obs
            done = result.done
            stored += 1
    return stored


def load_demo_transitions(state: TrainerState, transitions: list[Transition]) -> int:
    for t in transitions:
        if not t.is_demo:
            raise ValueError("demo buffer only accepts demonstration transitions")
        state.demo_buffer.push(t)
    return len(transitions)


def train(
    state: TrainerState,
    env: LaneChangeEnv,
    demo_policy: Optional[Callable] = None,
    demo_transitions: Optional[list[Transition]] = None,
    out_dir: Optional[Path] = None,
    on_episode: Optional[Callable[[EpisodeMetrics], None]] = None,
) -> list[EpisodeMetrics]:
    """Both phases of the training procedure; returns per-episode metrics.

    When out_dir is given the resolved config is written before training,
    metrics stream to metrics.csv, and policy checkpoints are saved every
    checkpoint_interval episodes plus at the end. An episode that raises is
    logged as aborted and training continues.
    """
    cfg = state.config
    if demo_transitions is not None:
        load_demo_transitions(state, demo_transitions)
    elif demo_policy is not None and cfg.demo_episodes > 0:
        run_demo_phase(state, env, demo_policy)

    metrics_fh = None
    ckpt_dir = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        manifest = {
            "config": cfg.as_dict(),
            "seed": state.seed,
            "arch": state.theta1.arch.to_dict(),
            "demo_buffer_size": len(state.demo_buffer),
        }
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        ckpt_dir = out_dir / "checkpoints"
        ckpt_dir.mkdir(exist_ok=True)
        metrics_fh = open(out_dir / "metrics.csv", "w")
        metrics_fh.write(",".join(METRICS_FIELDS) + "\n")

    schedule = cfg.schedule
    metrics: list[EpisodeMetrics] = []
    try:
        for e in range(cfg.episodes):
            state.episode = e
            eps = epsilon_at(schedule, e)
            try:
                m = _train_episode(state, env, e, eps)
            except Exception:  # env failure aborts the episode, not the run
                logging.getLogger(__name__).exception("episode %d aborted", e)
                m = EpisodeMetrics(e, 0.0, 0.0, False, "aborted", eps, 0)
            metrics.append(m)
            if metrics_fh is not None:
                metrics_fh.write(format_metrics_row(m) + "\n")
                metrics_fh.flush()
            if on_episode is not None:
                on_episode(m)
            if ckpt_dir is not None and cfg.checkpoint_interval > 0 and (e + 1) % cfg.checkpoint_interval == 0:
                save_checkpoint(state.theta1, ckpt_dir / f"policy_ep{e + 1:06d}.qnet", step=e + 1)
        if out_dir is not None:
            save_checkpoint(state.theta1, out_dir / "policy_final.qnet", step=cfg.episodes)
            save_checkpoint(state.theta2, out_dir / "q2_final.qnet", step=cfg.episodes)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    return metrics


def _train_episode(state: TrainerState, env: LaneChangeEnv, episode: int, eps: float) -> EpisodeMetrics:
    cfg = state.config
    obs = quantize_observation(env.reset(episode_seed(state.seed, 2, episode)))
    total_reward = 0.0
    done = False
    steps = 0
    while not done:
        action = select_action(state.theta1, dequantize(obs), eps, state.rng)
        result = env.step(action)
        next_obs = quantize_observation(result.observation)
        state.explore_buffer.push(
            Transition(obs, action, result.reward.total, next_obs, result.done, False)
        )
        batch = sample_mixed_batch(state)
        if batch is not None:
            train_step(state, batch)
        obs = next_obs
        total_reward += result.reward.total
        done = result.done
        steps += 1
    ego = env.world.ego
    return EpisodeMetrics(
        episode=episode,
        reward=total_reward,
        final_lateral=ego.lateral_pos,
        collision=env.outcome is Outcome.COLLISION,
        outcome=env.outcome.value,
        epsilon=eps,
        steps=steps,
    )
