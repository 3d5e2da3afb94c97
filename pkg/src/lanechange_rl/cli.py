"""Command-line interface: train, eval, report, demo record/validate/serve."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .trainer import TrainerConfig

log = logging.getLogger(__name__)

CONFIG_FIELD_TYPES = {
    "gamma": float,
    "learning_rate": float,
    "batch_size": int,
    "n_demo": int,
    "n_explore": int,
    "buffer_capacity": int,
    "demo_episodes": int,
    "episodes": int,
    "epsilon_init": float,
    "epsilon_cutoff": float,
    "epsilon_horizon": int,
    "checkpoint_interval": int,
    "max_decision_steps": int,
    "dueling_mean": lambda s: s.lower() in ("1", "true", "yes", "on"),
    # reward weights (env-level; recorded in demo headers and run manifests)
    "reward_right_change": float,
    "reward_collision": float,
    "reward_front_ttc": float,
    "reward_rear_ttc": float,
}

REWARD_KEY_MAP = {
    "reward_right_change": "right_change",
    "reward_collision": "collision",
    "reward_front_ttc": "front_ttc",
    "reward_rear_ttc": "rear_ttc",
}


def load_config_file(path: Path) -> dict:
    """Parse a key = value override file (see README for the key list)."""
    overrides = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not value:
            raise SystemExit(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        if key not in CONFIG_FIELD_TYPES:
            raise SystemExit(f"{path}:{lineno}: unknown config key {key!r}")
        overrides[key] = CONFIG_FIELD_TYPES[key](value)
    return overrides


def split_reward_overrides(overrides: dict) -> tuple[dict, dict | None]:
    """Separate reward-weight keys from trainer keys; None when untouched."""
    trainer = {k: v for k, v in overrides.items() if k not in REWARD_KEY_MAP}
    reward = {REWARD_KEY_MAP[k]: v for k, v in overrides.items() if k in REWARD_KEY_MAP}
    return trainer, (reward or None)


def parse_seeds(text: str) -> list[int]:
    """Seed list syntax: '0,1,2' or '0..4' (inclusive)."""
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lanechange-rl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a decision strategy")
    p_train.add_argument("--strategy", required=True, choices=["proposed", "vanilla", "il"])
    p_train.add_argument("--seeds", default="0..4", help="e.g. 0..4 or 0,1,2")
    p_train.add_argument("--episodes", type=int, default=1000)
    p_train.add_argument("--demos", type=Path, default=None, help="demo file (proposed/il)")
    p_train.add_argument("--out", type=Path, required=True)
    p_train.add_argument("--config", type=Path, default=None, help="key = value overrides")
    p_train.add_argument("--workers", type=int, default=1)

    p_eval = sub.add_parser("eval", help="evaluate a trained checkpoint greedily")
    p_eval.add_argument("--checkpoint", type=Path, required=True)
    p_eval.add_argument("--runs", type=int, default=30)
    p_eval.add_argument("--seed-base", type=int, default=9000)
    p_eval.add_argument("--out", type=Path, required=True)

    p_report = sub.add_parser("report", help="aggregate a run directory into curves and figures")
    p_report.add_argument("run_dir", type=Path)

    p_demo = sub.add_parser("demo", help="demonstration capture and tooling")
    demo_sub = p_demo.add_subparsers(dest="demo_command", required=True)

    p_rec = demo_sub.add_parser("record", help="record demonstration sessions")
    p_rec.add_argument("--seed", type=int, required=True)
    p_rec.add_argument("--mode", required=True, choices=["scripted", "human"])
    p_rec.add_argument("--out", type=Path, required=True)
    p_rec.add_argument("--count", type=int, default=1, help="sessions to record (seeds seed..seed+count-1)")
    p_rec.add_argument("--port", type=int, default=8700, help="human mode: websocket port")
    p_rec.add_argument("--config", type=Path, default=None, help="reward-weight overrides")

    p_val = demo_sub.add_parser("validate", help="re-simulate a demo file and verify digests")
    p_val.add_argument("file", type=Path)

    p_srv = demo_sub.add_parser("serve", help="run the keyboard session server")
    p_srv.add_argument("--port", type=int, default=8700)
    p_srv.add_argument("--seed", type=int, default=0)
    p_srv.add_argument("--count", type=int, default=1)
    p_srv.add_argument("--out", type=Path, default=None)
    return parser


def cmd_train(args) -> int:
    from .evaluation import StrategyKind, train_strategy

    overrides = load_config_file(args.config) if args.config else {}
    trainer_overrides, reward_weights = split_reward_overrides(overrides)
    trainer_overrides.setdefault("episodes", args.episodes)
    base = TrainerConfig(**trainer_overrides)
    seeds = parse_seeds(args.seeds)
    summary = train_strategy(
        StrategyKind(args.strategy),
        seeds=seeds,
        episodes=base.episodes,
        demo_file=args.demos,
        out_dir=args.out,
        base_config=base,
        workers=args.workers,
        reward_weights=reward_weights,
    )
    print(json.dumps({k: v for k, v in summary.items() if k != "runs"}, indent=2, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    from .evaluation import evaluate_checkpoint

    report, _rows = evaluate_checkpoint(
        args.checkpoint, n_runs=args.runs, seed_base=args.seed_base, out_dir=args.out
    )
    print(json.dumps(report.as_dict(), indent=2, sort_keys=True))
    return 0


def cmd_report(args) -> int:
    from .evaluation import report

    made = report(args.run_dir)
    print(json.dumps(made, indent=2, sort_keys=True))
    return 0


def cmd_demo_record(args) -> int:
    from .demo import export_demos, run_scripted_session
    from .mdp_env import RewardWeights

    weights = None
    if args.config:
        _, reward = split_reward_overrides(load_config_file(args.config))
        if reward:
            weights = RewardWeights(**{**RewardWeights().as_dict(), **reward})
    if args.mode == "scripted":
        records = [run_scripted_session(args.seed + k, weights=weights) for k in range(args.count)]
        export_demos(records, args.out)
        print(f"recorded {len(records)} scripted session(s) -> {args.out}")
        return 0
    from .demo_server import DemoServer

    with DemoServer(port=args.port, weights=weights) as server:
        print(f"waiting for the cockpit at {server.address} ...", flush=True)
        records = server.serve_sessions(args.seed, args.count, args.out)
    print(f"recorded {len(records)} human session(s) -> {args.out}")
    return 0 if records else 1


def cmd_demo_validate(args) -> int:
    from .demo import DemoFormatError, validate_demo_file

    try:
        summary = validate_demo_file(args.file)
    except DemoFormatError as exc:
        print(f"INVALID: {exc}")
        return 1
    print(f"OK: {summary['sessions']} session(s), {summary['steps']} steps replay exactly")
    return 0


def cmd_demo_serve(args) -> int:
    from .demo_server import DemoServer

    with DemoServer(port=args.port) as server:
        print(f"serving demo sessions at {server.address} (seed {args.seed}, count {args.count})", flush=True)
        records = server.serve_sessions(args.seed, args.count, args.out)
    print(f"completed {len(records)} session(s)")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    if args.command == "train":
        return cmd_train(args)
    if args.command == "eval":
        return cmd_eval(args)
    if args.command == "report":
        return cmd_report(args)
    if args.command == "demo":
        if args.demo_command == "record":
            return cmd_demo_record(args)
        if args.demo_command == "validate":
            return cmd_demo_validate(args)
        if args.demo_command == "serve":
            return cmd_demo_serve(args)
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
