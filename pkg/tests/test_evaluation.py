import json

import numpy as np
import pytest

from lanechange_rl.demo import export_demos, run_scripted_session, scripted_demonstrator
from lanechange_rl.evaluation import (
    ConfigError,
    CurveSet,
    EvalReport,
    ReportError,
    StrategyKind,
    _cross_entropy,
    evaluate,
    greedy_policy,
    read_metrics,
    read_trace,
    report,
    rolling_mean,
    split_by_episode,
    strategy_config,
    train_behavior_cloning,
    train_strategy,
)
from lanechange_rl.trainer import METRICS_FIELDS, Transition
from lanechange_rl.value_net import ArchSpec, forward, init_params

SMALL_ARCH = ArchSpec(conv_features=(4, 6, 8), trunk_units=32, branch_units=16)


def scripted_transitions(n_sessions=4):
    records = [run_scripted_session(seed) for seed in range(n_sessions)]
    out = []
    for r in records:
        out.extend(r.transitions())
    return out


# ---------------------------------------------------------------- config

def test_strategy_configs():
    proposed = strategy_config(StrategyKind.PROPOSED, 200)
    assert (proposed.n_demo, proposed.n_explore) == (16, 48)
    vanilla = strategy_config(StrategyKind.VANILLA, 200)
    assert (vanilla.n_demo, vanilla.n_explore) == (0, 64)
    assert vanilla.demo_episodes == 0


def test_train_strategy_demo_file_rules(tmp_path):
    with pytest.raises(ConfigError):
        train_strategy(StrategyKind.PROPOSED, [0], 10, None, tmp_path)
    with pytest.raises(ConfigError):
        train_strategy(StrategyKind.IL, [0], 10, None, tmp_path)
    demo = tmp_path / "d.demo"
    export_demos([run_scripted_session(0)], demo)
    with pytest.raises(ConfigError):
        train_strategy(StrategyKind.VANILLA, [0], 10, demo, tmp_path)


# ---------------------------------------------------------------- cloning

def test_split_by_episode_boundaries():
    transitions = scripted_transitions(5)
    rng = np.random.default_rng(0)
    train_set, val_set = split_by_episode(transitions, 0.2, rng)
    assert len(train_set) + len(val_set) == len(transitions)
    assert train_set and val_set
    # validation episodes end with exactly one done flag each
    assert sum(t.done for t in val_set) >= 1


def test_behavior_cloning_learns_the_demonstrator(tmp_path):
    transitions = scripted_transitions(6)
    params, history = train_behavior_cloning(
        transitions, net_seed=0, arch=SMALL_ARCH, max_epochs=40, patience=10
    )
    assert history["train_accuracy"] >= 0.8
    assert history["epochs"] <= 40
    assert history["best_epoch"] <= history["epochs"]


def test_softmax_readout_normalized():
    params = init_params(0, SMALL_ARCH)
    transitions = scripted_transitions(1)[:8]
    from lanechange_rl.evaluation import _bc_arrays, _softmax

    obs, _ = _bc_arrays(transitions)
    p = _softmax(forward(params, obs))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(p >= 0)


def test_duplicated_demos_leave_loss_unchanged():
    transitions = scripted_transitions(1)
    params = init_params(3, SMALL_ARCH)
    from lanechange_rl.evaluation import _bc_arrays

    obs, act = _bc_arrays(transitions)
    obs2 = np.concatenate([obs, obs])
    act2 = np.concatenate([act, act])
    ce1, acc1 = _cross_entropy(params, obs, act)
    ce2, acc2 = _cross_entropy(params, obs2, act2)
    assert ce1 == pytest.approx(ce2, rel=1e-6)
    assert acc1 == pytest.approx(acc2, abs=1e-9)


def test_single_class_demo_warns_but_trains(caplog):
    transitions = scripted_transitions(1)
    forced = [Transition(t.obs, 0, t.reward, t.next_obs, t.done, True) for t in transitions]
    with caplog.at_level("WARNING"):
        params, history = train_behavior_cloning(
            forced, net_seed=0, arch=SMALL_ARCH, learning_rate=2e-3, max_epochs=60, patience=20
        )
    assert "single action" in caplog.text
    assert history["train_accuracy"] >= 0.99  # constant class is trivially learnable


# ---------------------------------------------------------------- evaluate

def test_evaluate_counts_and_bounds(tmp_path):
    params = init_params(0, SMALL_ARCH)
    report_, rows = evaluate(greedy_policy(params), n_runs=4, seed_base=123, out_dir=tmp_path / "eval")
    assert report_.n_runs == 4
    assert 0.0 <= report_.collision_rate <= 100.0
    assert 0.0 <= report_.success_rate <= 100.0
    assert 20 / 3.6 - 1e-6 <= report_.traffic_speed_mean <= 50 / 3.6 + 1e-6
    assert len(rows) == 4
    assert (tmp_path / "eval" / "runs.csv").exists()
    assert (tmp_path / "eval" / "report.json").exists()
    trace = read_trace(tmp_path / "eval" / "traces" / "run000.csv")
    diffs = np.diff(trace["time"])
    assert np.all(np.abs(diffs - 0.02) < 1e-9)
    assert np.max(np.abs(trace["lateral_speed"])) < 1.3


def test_evaluate_is_deterministic(tmp_path):
    params = init_params(1, SMALL_ARCH)
    r1, rows1 = evaluate(greedy_policy(params), n_runs=3, seed_base=77)
    r2, rows2 = evaluate(greedy_policy(params), n_runs=3, seed_base=77)
    assert r1 == r2
    assert rows1 == rows2


# ---------------------------------------------------------------- curves

def test_rolling_mean_prefix_rule():
    values = np.arange(1, 121, dtype=float)
    rolled = rolling_mean(values, window=50)
    assert rolled[0] == 1.0
    assert rolled[9] == pytest.approx(values[:10].mean())
    assert rolled[100] == pytest.approx(values[51:101].mean())


def write_fake_metrics(path, n, seed):
    rng = np.random.default_rng(seed)
    lines = [",".join(METRICS_FIELDS)]
    for e in range(n):
        lines.append(
            f"{e},{rng.normal()!r},{rng.uniform(0, 14)!r},{int(rng.random() < 0.3)},"
            f"missed_exit,{0.5!r},{int(rng.integers(10, 100))}"
        )
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


def test_curveset_and_report_round_trip(tmp_path):
    run_dir = tmp_path / "run"
    for kind in ("proposed", "vanilla"):
        for seed in (0, 1):
            write_fake_metrics(run_dir / kind / f"seed{seed}" / "metrics.csv", 60, hash((kind, seed)) % 2**32)
    made = report(run_dir)
    assert set(made["curves"]) == {"proposed", "vanilla"}
    reward_csv = run_dir / "report" / "curves_reward_proposed.csv"
    assert reward_csv.exists()
    header = reward_csv.read_text().splitlines()[0]
    assert header == "episode,seed0,seed1,mean,std"
    assert (run_dir / "report" / "fig_training_curves.png").exists()

    before = {p.name: p.read_bytes() for p in (run_dir / "report").iterdir()}
    report(run_dir)
    after = {p.name: p.read_bytes() for p in (run_dir / "report").iterdir()}
    assert before == after  # report is a pure function of the run directory


def test_report_lists_missing_artifacts(tmp_path):
    run_dir = tmp_path / "run"
    (run_dir / "proposed" / "seed0").mkdir(parents=True)
    with pytest.raises(ReportError) as err:
        report(run_dir)
    assert "metrics.csv" in str(err.value)


def test_read_metrics_round_trip(tmp_path):
    path = tmp_path / "metrics.csv"
    write_fake_metrics(path, 10, 5)
    m = read_metrics(path)
    assert len(m["episode"]) == 10
    assert m["reward"].dtype == np.float64
    cs = CurveSet.from_run_dirs({0: tmp_path})
    assert cs.reward.shape == (1, 10)
