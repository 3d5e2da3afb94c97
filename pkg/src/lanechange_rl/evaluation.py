"""Training/evaluation harness for the three decision strategies.

The proposed strategy trains with demonstration-mixed batches; the vanilla
ablation trains with exploration data only; the imitation baseline clones
the demonstrations supervised. One evaluate() path scores all three with a
greedy policy over fresh seeds, and report() turns a finished run directory
into curve CSVs, an evaluation table, kinematic traces, and PNG figures.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .demo import load_demos
from .ego_control import DecisionAction
from .mdp_env import LaneChangeEnv, Outcome, write_episode_log
from .trainer import (
    METRICS_FIELDS,
    TrainerConfig,
    Transition,
    episode_seed,
    make_trainer,
    select_action,
    train,
)
from .value_net import (
    DEFAULT_ARCH,
    ArchSpec,
    NetworkParams,
    OptimizerState,
    backward_from_dq,
    copy_params,
    forward,
    init_params,
    load_checkpoint,
    optimize_step,
    save_checkpoint,
)

log = logging.getLogger(__name__)

ROLLING_WINDOW = 50


class ConfigError(ValueError):
    pass


class ReportError(RuntimeError):
    pass


class StrategyKind(Enum):
    PROPOSED = "proposed"
    VANILLA = "vanilla"
    IL = "il"


@dataclass(frozen=True)
class EvalReport:
    collision_rate: float      # percent of runs
    success_rate: float        # percent of runs
    traffic_speed_mean: float  # m/s, mean over runs of per-run traffic averages
    traffic_speed_std: float
    n_runs: int

    def as_dict(self) -> dict:
        return {
            "collision_rate": self.collision_rate,
            "success_rate": self.success_rate,
            "traffic_speed_mean": self.traffic_speed_mean,
            "traffic_speed_std": self.traffic_speed_std,
            "n_runs": self.n_runs,
        }


# --------------------------------------------------------------- training

def strategy_config(kind: StrategyKind, episodes: int, base: Optional[TrainerConfig] = None) -> TrainerConfig:
    base = base or TrainerConfig()
    common = dict(
        gamma=base.gamma,
        learning_rate=base.learning_rate,
        batch_size=base.batch_size,
        buffer_capacity=base.buffer_capacity,
        episodes=episodes,
        epsilon_init=base.epsilon_init,
        epsilon_cutoff=base.epsilon_cutoff,
        epsilon_horizon=base.epsilon_horizon,
        checkpoint_interval=base.checkpoint_interval,
        max_decision_steps=base.max_decision_steps,
        dueling_mean=base.dueling_mean,
        demo_episodes=0,  # demonstrations come from the demo file
    )
    if kind is StrategyKind.VANILLA:
        return TrainerConfig(n_demo=0, n_explore=base.batch_size, **common)
    return TrainerConfig(n_demo=base.n_demo, n_explore=base.n_explore, **common)


def _file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _run_training_job(args: dict) -> dict:
    """One seeded training run; executed in a worker process."""
    from .mdp_env import RewardWeights

    kind = StrategyKind(args["kind"])
    seed = args["seed"]
    arch = ArchSpec.from_dict(args["arch"])
    config = TrainerConfig(**args["config"])
    out_dir = Path(args["out_dir"])
    demo_transitions = load_demos(args["demo_file"]) if args["demo_file"] else None
    weights = RewardWeights(**args["reward_weights"]) if args.get("reward_weights") else None
    state = make_trainer(seed, config, arch=arch)
    env = LaneChangeEnv(max_decision_steps=config.max_decision_steps, weights=weights)
    metrics = train(state, env, demo_transitions=demo_transitions, out_dir=out_dir)
    return {
        "seed": seed,
        "kind": kind.value,
        "out_dir": str(out_dir),
        "episodes": len(metrics),
        "warm_batch_mix": {str(k): v for k, v in state.warm_batch_mix.items()},
        "updates": [state.updates_theta1, state.updates_theta2],
    }


def train_strategy(
    kind: StrategyKind,
    seeds: list[int],
    episodes: int,
    demo_file: Optional[Path],
    out_dir: Path,
    base_config: Optional[TrainerConfig] = None,
    arch: ArchSpec = DEFAULT_ARCH,
    workers: int = 1,
    reward_weights: Optional[dict] = None,
) -> dict:
    """Train one strategy on every seed; returns a summary dict.

    The proposed and IL strategies require a demo file; the vanilla ablation
    must not receive one.
    """
    if kind in (StrategyKind.PROPOSED, StrategyKind.IL) and not demo_file:
        raise ConfigError(f"{kind.value} strategy requires a demonstration file")
    if kind is StrategyKind.VANILLA and demo_file:
        raise ConfigError("the vanilla ablation must not read demonstrations")

    out_dir = Path(out_dir)
    strategy_dir = out_dir / kind.value
    strategy_dir.mkdir(parents=True, exist_ok=True)

    if kind is StrategyKind.IL:
        transitions = load_demos(demo_file)
        params, history = train_behavior_cloning(transitions, net_seed=seeds[0], arch=arch)
        save_checkpoint(params, strategy_dir / "policy_final.qnet", step=history["epochs"])
        (strategy_dir / "bc_history.json").write_text(json.dumps(history, indent=2, sort_keys=True))
        resolved = {
            "strategy": kind.value,
            "seeds": seeds,
            "demo_file_digest": _file_digest(demo_file),
            "history": {k: history[k] for k in ("epochs", "train_accuracy", "best_val_loss")},
        }
        (strategy_dir / "config_resolved.json").write_text(json.dumps(resolved, indent=2, sort_keys=True))
        return resolved

    config = strategy_config(kind, episodes, base_config)
    jobs = [
        {
            "kind": kind.value,
            "seed": seed,
            "arch": arch.to_dict(),
            "config": {k: v for k, v in config.as_dict().items()},
            "demo_file": str(demo_file) if demo_file else None,
            "out_dir": str(strategy_dir / f"seed{seed}"),
            "reward_weights": reward_weights,
        }
        for seed in seeds
    ]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(_run_training_job, jobs))
    else:
        results = [_run_training_job(job) for job in jobs]

    resolved = {
        "strategy": kind.value,
        "seeds": seeds,
        "episodes": episodes,
        "config": config.as_dict(),
        "reward_weights": reward_weights,
        "demo_file_digest": _file_digest(demo_file) if demo_file else None,
        "runs": results,
    }
    (strategy_dir / "config_resolved.json").write_text(json.dumps(resolved, indent=2, sort_keys=True))
    return resolved


# --------------------------------------------------------- behavior cloning

def _softmax(q: np.ndarray) -> np.ndarray:
    z = q - q.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def split_by_episode(transitions: list[Transition], val_fraction: float, rng: np.random.Generator):
    """80/20 split on episode boundaries (episodes end at done flags)."""
    episodes: list[list[Transition]] = [[]]
    for t in transitions:
        episodes[-1].append(t)
        if t.done:
            episodes.append([])
    if not episodes[-1]:
        episodes.pop()
    order = rng.permutation(len(episodes))
    n_val = max(1, int(round(val_fraction * len(episodes)))) if len(episodes) > 1 else 0
    val_ids = set(order[:n_val].tolist())
    train_set = [t for i, ep in enumerate(episodes) for t in ep if i not in val_ids]
    val_set = [t for i, ep in enumerate(episodes) for t in ep if i in val_ids]
    return train_set, val_set


def _bc_arrays(transitions: list[Transition]) -> tuple[np.ndarray, np.ndarray]:
    from .mdp_env import dequantize

    obs = dequantize(np.stack([t.obs for t in transitions]))
    actions = np.array([t.action for t in transitions], dtype=np.int64)
    return obs, actions


def _cross_entropy(params: NetworkParams, obs: np.ndarray, actions: np.ndarray) -> tuple[float, float]:
    """(mean CE loss, accuracy) in eval mode; chunked to bound working memory."""
    n = len(actions)
    ce_sum = 0.0
    hits = 0
    for lo in range(0, n, 64):
        q = forward(params, obs[lo : lo + 64])
        p = _softmax(q)
        idx = np.arange(q.shape[0])
        ce_sum += -float(np.sum(np.log(p[idx, actions[lo : lo + 64]] + 1e-12)))
        hits += int(np.sum(np.argmax(q, axis=1) == actions[lo : lo + 64]))
    return ce_sum / n, hits / n


def train_behavior_cloning(
    transitions: list[Transition],
    net_seed: int,
    arch: ArchSpec = DEFAULT_ARCH,
    learning_rate: float = 5e-4,
    batch_size: int = 64,
    max_epochs: int = 200,
    patience: int = 10,
    val_fraction: float = 0.2,
) -> tuple[NetworkParams, dict]:
    """Supervised cloning of demonstration actions with a softmax read-out.

    Early-stops on validation cross-entropy and restores the best epoch's
    parameters. A single-action demonstration set trains anyway (logged).
    """
    if not transitions:
        raise ConfigError("behavior cloning needs a non-empty demonstration set")
    if len({t.action for t in transitions}) == 1:
        log.warning("demonstration set contains a single action class; cloning will be degenerate")

    rng = np.random.default_rng(net_seed)
    train_set, val_set = split_by_episode(transitions, val_fraction, rng)
    if not val_set:
        val_set = train_set
    params = init_params(net_seed, arch)
    opt = OptimizerState(learning_rate=learning_rate)
    obs_tr, act_tr = _bc_arrays(train_set)
    obs_val, act_val = _bc_arrays(val_set)

    best_val = np.inf
    best_vector = params.vector.copy()
    best_epoch = 0
    bad_epochs = 0
    history_rows = []
    n = len(train_set)
    for epoch in range(max_epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            idx = order[lo : lo + batch_size]
            obs_b, act_b = obs_tr[idx], act_tr[idx]
            q = forward(params, obs_b)
            p = _softmax(q)
            dq = p.copy()
            dq[np.arange(len(idx)), act_b] -= 1.0
            dq /= len(idx)
            grads = backward_from_dq(params, obs_b, dq.astype(params.dtype))
            optimize_step(params, grads, opt)
        val_ce, val_acc = _cross_entropy(params, obs_val, act_val)
        history_rows.append({"epoch": epoch, "val_loss": val_ce, "val_accuracy": val_acc})
        if val_ce < best_val - 1e-6:
            best_val = val_ce
            best_vector = params.vector.copy()
            best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= patience:
                break
    params.vector[...] = best_vector
    train_ce, train_acc = _cross_entropy(params, obs_tr, act_tr)
    history = {
        "epochs": len(history_rows),
        "best_epoch": best_epoch,
        "best_val_loss": best_val if np.isfinite(best_val) else None,
        "train_loss": train_ce,
        "train_accuracy": train_acc,
        "rows": history_rows,
    }
    return params, history


# --------------------------------------------------------------- evaluation

def greedy_policy(params: NetworkParams) -> Callable:
    rng = np.random.default_rng(0)  # unused at epsilon 0

    def policy(obs: np.ndarray) -> int:
        return select_action(params, obs, 0.0, rng)

    return policy


def evaluate(
    policy: Callable,
    n_runs: int = 30,
    seed_base: int = 9000,
    out_dir: Optional[Path] = None,
    trace: bool = True,
    max_decision_steps: int = 120,
) -> tuple[EvalReport, list[dict]]:
    """Greedy evaluation over independent seeds.

    `policy` maps a float observation to an action code. Per run it records
    the outcome and the time-averaged surrounding-traffic speed; with an
    out_dir it also writes per-run episode logs and 0.02 s kinematic traces.
    """
    rows = []
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "traces").mkdir(parents=True, exist_ok=True)
        (out_dir / "logs").mkdir(parents=True, exist_ok=True)
    env = LaneChangeEnv(trace=trace, record_log=out_dir is not None, max_decision_steps=max_decision_steps)
    for i in range(n_runs):
        seed = episode_seed(seed_base, 3, i)
        obs = env.reset(seed)
        total = 0.0
        while not env.done:
            result = env.step(DecisionAction(policy(obs)))
            obs = result.observation
            total += result.reward.total
        row = {
            "run": i,
            "seed": seed,
            "outcome": env.outcome.value,
            "reward": total,
            "steps": env.steps,
            "final_lateral": env.world.ego.lateral_pos,
            "traffic_mean_speed": env.traffic_mean_speed,
        }
        rows.append(row)
        if out_dir is not None:
            write_trace(env.trace_rows, out_dir / "traces" / f"run{i:03d}.csv")
            write_episode_log(env.episode_log, out_dir / "logs" / f"run{i:03d}.csv")
    speeds = np.array([r["traffic_mean_speed"] for r in rows])
    report = EvalReport(
        collision_rate=100.0 * sum(r["outcome"] == Outcome.COLLISION.value for r in rows) / n_runs,
        success_rate=100.0 * sum(r["outcome"] == Outcome.SUCCESS.value for r in rows) / n_runs,
        traffic_speed_mean=float(speeds.mean()),
        traffic_speed_std=float(speeds.std(ddof=0)),
        n_runs=n_runs,
    )
    if out_dir is not None:
        _write_eval_rows(rows, out_dir / "runs.csv")
        (out_dir / "report.json").write_text(json.dumps(report.as_dict(), indent=2, sort_keys=True))
    return report, rows


def evaluate_checkpoint(checkpoint: Path, **kw) -> tuple[EvalReport, list[dict]]:
    params, _ = load_checkpoint(checkpoint)
    return evaluate(greedy_policy(params), **kw)


TRACE_FIELDS = ["time", "lateral_pos", "lateral_speed", "longitudinal_speed"]


def write_trace(rows: list[tuple[float, float, float, float]], path: Path) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(TRACE_FIELDS) + "\n")
        for t, lat, lat_v, long_v in rows:
            fh.write(f"{t!r},{lat!r},{lat_v!r},{long_v!r}\n")


def _write_eval_rows(rows: list[dict], path: Path) -> None:
    fields = ["run", "seed", "outcome", "reward", "steps", "final_lateral", "traffic_mean_speed"]
    with open(path, "w") as fh:
        fh.write(",".join(fields) + "\n")
        for r in rows:
            fh.write(",".join(repr(r[k]) if isinstance(r[k], float) else str(r[k]) for k in fields) + "\n")


# ------------------------------------------------------------------ curves

def read_metrics(path: Path) -> dict[str, np.ndarray]:
    lines = Path(path).read_text().strip().splitlines()
    header = lines[0].split(",")
    assert header == METRICS_FIELDS, f"unexpected metrics header in {path}"
    cols: dict[str, list] = {k: [] for k in header}
    for line in lines[1:]:
        for key, value in zip(header, line.split(",")):
            cols[key].append(value)
    return {
        "episode": np.array([int(x) for x in cols["episode"]]),
        "reward": np.array([float(x) for x in cols["reward"]]),
        "final_lateral": np.array([float(x) for x in cols["final_lateral"]]),
        "collision": np.array([int(x) for x in cols["collision"]]),
        "outcome": np.array(cols["outcome"]),
        "epsilon": np.array([float(x) for x in cols["epsilon"]]),
        "steps": np.array([int(x) for x in cols["steps"]]),
    }


def rolling_mean(values: np.ndarray, window: int = ROLLING_WINDOW) -> np.ndarray:
    """Mean over the trailing `window` entries; earlier entries use the prefix."""
    out = np.empty(len(values), dtype=np.float64)
    csum = np.concatenate([[0.0], np.cumsum(values, dtype=np.float64)])
    for i in range(len(values)):
        lo = max(0, i - window + 1)
        out[i] = (csum[i + 1] - csum[lo]) / (i + 1 - lo)
    return out


@dataclass
class CurveSet:
    """Per-episode training series for one strategy across seeds."""

    seeds: list[int]
    episodes: np.ndarray
    reward: np.ndarray            # (n_seeds, n_episodes), rolling-smoothed
    final_lateral: np.ndarray
    collision_rate: np.ndarray    # rolling window mean of the collision flag
    reward_raw: np.ndarray

    @staticmethod
    def from_run_dirs(seed_dirs: dict[int, Path], window: int = ROLLING_WINDOW) -> "CurveSet":
        seeds = sorted(seed_dirs)
        per_seed = [read_metrics(Path(seed_dirs[s]) / "metrics.csv") for s in seeds]
        n = min(len(m["episode"]) for m in per_seed)
        reward_raw = np.stack([m["reward"][:n] for m in per_seed])
        return CurveSet(
            seeds=seeds,
            episodes=per_seed[0]["episode"][:n],
            reward=np.stack([rolling_mean(m["reward"][:n], window) for m in per_seed]),
            final_lateral=np.stack([rolling_mean(m["final_lateral"][:n], window) for m in per_seed]),
            collision_rate=np.stack([rolling_mean(m["collision"][:n].astype(float), window) for m in per_seed]),
            reward_raw=reward_raw,
        )

    def write_csv(self, metric: str, path: Path) -> None:
        data = getattr(self, metric)
        mean = data.mean(axis=0)
        std = data.std(axis=0, ddof=0)
        with open(path, "w") as fh:
            fh.write("episode," + ",".join(f"seed{s}" for s in self.seeds) + ",mean,std\n")
            for i, e in enumerate(self.episodes):
                cells = [str(int(e))] + [repr(float(x)) for x in data[:, i]] + [repr(float(mean[i])), repr(float(std[i]))]
                fh.write(",".join(cells) + "\n")


# ------------------------------------------------------------------ report

def report(run_dir: Path) -> dict:
    """Aggregate a finished run directory into curves, tables, and figures.

    Expects out/<strategy>/seed*/metrics.csv from training and out/eval/
    <strategy>/ from evaluation. Raises ReportError listing anything missing.
    Re-running on the same directory reproduces identical files.
    """
    run_dir = Path(run_dir)
    report_dir = run_dir / "report"
    report_dir.mkdir(parents=True, exist_ok=True)

    missing = []
    curve_sets: dict[str, CurveSet] = {}
    for kind in (StrategyKind.PROPOSED, StrategyKind.VANILLA):
        sdir = run_dir / kind.value
        if not sdir.exists():
            continue
        seed_dirs = {}
        for child in sorted(sdir.glob("seed*")):
            if (child / "metrics.csv").exists():
                seed_dirs[int(child.name.removeprefix("seed"))] = child
            else:
                missing.append(str(child / "metrics.csv"))
        if seed_dirs:
            curve_sets[kind.value] = CurveSet.from_run_dirs(seed_dirs)
    if not curve_sets:
        missing.append(str(run_dir / "<strategy>/seed*/metrics.csv"))

    eval_reports: dict[str, dict] = {}
    for kind in StrategyKind:
        rpt = run_dir / "eval" / kind.value / "report.json"
        if rpt.exists():
            eval_reports[kind.value] = json.loads(rpt.read_text())

    if missing:
        raise ReportError("run directory is incomplete; missing: " + ", ".join(missing))

    for name, curves in curve_sets.items():
        curves.write_csv("reward", report_dir / f"curves_reward_{name}.csv")
        curves.write_csv("final_lateral", report_dir / f"curves_lateral_{name}.csv")
        curves.write_csv("collision_rate", report_dir / f"curves_collision_{name}.csv")

    if eval_reports:
        with open(report_dir / "eval_report.csv", "w") as fh:
            fh.write("strategy,collision_rate,success_rate,traffic_speed_mean,traffic_speed_std,n_runs\n")
            for name in ("proposed", "vanilla", "il"):
                if name in eval_reports:
                    r = eval_reports[name]
                    fh.write(
                        f"{name},{r['collision_rate']!r},{r['success_rate']!r},"
                        f"{r['traffic_speed_mean']!r},{r['traffic_speed_std']!r},{r['n_runs']}\n"
                    )

    from . import figures

    made = {"curves": sorted(curve_sets), "eval_strategies": sorted(eval_reports)}
    if curve_sets:
        figures.training_curves(curve_sets, report_dir / "fig_training_curves.png")
        made["fig_training_curves"] = "fig_training_curves.png"
    trace = _first_success_trace(run_dir)
    if trace is not None:
        figures.kinematic_traces(trace, report_dir / "fig_kinematics.png")
        made["fig_kinematics"] = "fig_kinematics.png"
    (report_dir / "report_manifest.json").write_text(json.dumps(made, indent=2, sort_keys=True))
    return made


def _first_success_trace(run_dir: Path) -> Optional[dict[str, np.ndarray]]:
    candidates = []
    for kind in ("proposed", "vanilla", "il"):
        candidates.append(run_dir / "eval" / kind)
        candidates.extend(sorted((run_dir / "eval" / kind).glob("seed*")))
    for eval_dir in candidates:
        runs = eval_dir / "runs.csv"
        if not runs.exists():
            continue
        for line in runs.read_text().strip().splitlines()[1:]:
            cells = line.split(",")
            if cells[2] == "success":
                trace_path = eval_dir / "traces" / f"run{int(cells[0]):03d}.csv"
                if trace_path.exists():
                    return read_trace(trace_path)
    return None


def read_trace(path: Path) -> dict[str, np.ndarray]:
    lines = Path(path).read_text().strip().splitlines()
    assert lines[0].split(",") == TRACE_FIELDS
    data = np.array([[float(x) for x in line.split(",")] for line in lines[1:]])
    return {name: data[:, i] for i, name in enumerate(TRACE_FIELDS)}
