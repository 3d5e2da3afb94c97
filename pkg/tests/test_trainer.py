import numpy as np
import pytest

import lanechange_rl.trainer as trainer_mod
from lanechange_rl.demo import scripted_demonstrator
from lanechange_rl.mdp_env import LaneChangeEnv, dequantize
from lanechange_rl.trainer import (
    EpsilonSchedule,
    ReplayBuffer,
    TrainerConfig,
    Transition,
    choose_online,
    compute_loss,
    compute_targets,
    epsilon_at,
    make_trainer,
    run_demo_phase,
    sample_mixed_batch,
    select_action,
    train,
    train_step,
)
from lanechange_rl.value_net import ArchSpec, forward, init_params, param_distance

TINY = ArchSpec(
    in_frames=2, in_long=10, in_lat=9, conv_features=(3, 4), kernel=3, stride=2,
    trunk_units=16, branch_units=8, n_actions=5,
)

# reduced features but full-size input, for fast end-to-end trainer runs
SMALL_TRAIN_ARCH = ArchSpec(conv_features=(4, 6, 8), trunk_units=32, branch_units=16)


def u8_obs(rng, arch=TINY):
    return rng.integers(0, 256, size=(arch.in_frames, arch.in_long, arch.in_lat), dtype=np.uint8)


def random_transition(rng, is_demo=False, arch=TINY, done=None):
    return Transition(
        obs=u8_obs(rng, arch),
        action=int(rng.integers(5)),
        reward=float(rng.normal()),
        next_obs=u8_obs(rng, arch),
        done=bool(rng.random() < 0.2) if done is None else done,
        is_demo=is_demo,
    )


# ---------------------------------------------------------------- buffer

def test_buffer_fifo_eviction():
    buf = ReplayBuffer(capacity=5)
    rng = np.random.default_rng(0)
    ts = [random_transition(rng) for _ in range(8)]
    for t in ts:
        buf.push(t)
    assert len(buf) == 5
    assert buf.items() == ts[3:]
    assert buf.inserted == 8


def test_buffer_sampling_without_replacement():
    buf = ReplayBuffer(capacity=10)
    rng = np.random.default_rng(0)
    ts = [random_transition(rng) for _ in range(10)]
    for t in ts:
        buf.push(t)
    sample = buf.sample(np.random.default_rng(1), 10)
    assert len(sample) == 10
    assert {id(t) for t in sample} == {id(t) for t in ts}
    with pytest.raises(ValueError):
        buf.sample(np.random.default_rng(2), 11)


# ---------------------------------------------------------------- epsilon

def test_epsilon_endpoints_and_midpoint():
    s = EpsilonSchedule(1.0, 0.1, 800)
    assert epsilon_at(s, 0) == 1.0
    assert epsilon_at(s, 800) == 0.1
    assert epsilon_at(s, 5000) == 0.1
    assert epsilon_at(s, 400) == pytest.approx(0.55)
    with pytest.raises(ValueError):
        epsilon_at(s, -1)


def test_epsilon_monotone_nonincreasing():
    s = EpsilonSchedule(1.0, 0.1, 160)
    values = [epsilon_at(s, e) for e in range(300)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_config_default_horizon_is_80_percent():
    assert TrainerConfig(episodes=200).schedule.decay_horizon == 160
    assert TrainerConfig(episodes=1000).schedule.decay_horizon == 800


# ---------------------------------------------------------------- actions

def test_select_action_greedy_and_tiebreak(monkeypatch):
    params = init_params(0, TINY)
    monkeypatch.setattr(trainer_mod, "forward", lambda p, o: np.array([1.0, 5.0, 5.0, 0.0, 0.0]))
    rng = np.random.default_rng(0)
    assert select_action(params, None, 0.0, rng) == 1  # ties break to the lowest code


def test_select_action_epsilon_zero_matches_argmax():
    params = init_params(0, TINY)
    rng = np.random.default_rng(5)
    obs = dequantize(u8_obs(rng))
    assert select_action(params, obs, 0.0, rng) == int(np.argmax(forward(params, obs)))


def test_select_action_uniform_at_full_exploration():
    params = init_params(0, TINY)
    rng = np.random.default_rng(7)
    counts = np.zeros(5, dtype=int)
    n = 100_000
    for _ in range(n):
        counts[select_action(params, None, 1.0, rng)] += 1
    expected = n / 5
    sigma = np.sqrt(n * 0.2 * 0.8)
    assert np.all(np.abs(counts - expected) <= 3 * sigma)


def test_select_action_validates_epsilon():
    with pytest.raises(ValueError):
        select_action(init_params(0, TINY), None, 1.5, np.random.default_rng(0))


# ---------------------------------------------------------------- sampling

def make_state(n_demo=16, n_explore=48, arch=TINY, seed=0, **kw):
    cfg = TrainerConfig(n_demo=n_demo, n_explore=n_explore, **kw)
    return make_trainer(seed, cfg, arch=arch)


def test_mixed_batch_full_split():
    state = make_state()
    rng = np.random.default_rng(1)
    for _ in range(100):
        state.demo_buffer.push(random_transition(rng, is_demo=True))
        state.explore_buffer.push(random_transition(rng))
    batch = sample_mixed_batch(state)
    assert len(batch) == 64
    assert sum(t.is_demo for t in batch) == 16
    assert sum(not t.is_demo for t in batch) == 48
    assert state.warm_batch_mix == {(16, 48): 1}


def test_mixed_batch_deficit_filled_from_other_side():
    state = make_state()
    rng = np.random.default_rng(2)
    for _ in range(100):
        state.explore_buffer.push(random_transition(rng))
    batch = sample_mixed_batch(state)
    assert len(batch) == 64
    assert sum(t.is_demo for t in batch) == 0

    state2 = make_state()
    for _ in range(100):
        state2.demo_buffer.push(random_transition(rng, is_demo=True))
    batch2 = sample_mixed_batch(state2)
    assert len(batch2) == 64
    assert all(t.is_demo for t in batch2)


def test_mixed_batch_exact_capacity_uses_everything():
    state = make_state()
    rng = np.random.default_rng(3)
    demo = [random_transition(rng, is_demo=True) for _ in range(16)]
    explore = [random_transition(rng) for _ in range(48)]
    for t in demo:
        state.demo_buffer.push(t)
    for t in explore:
        state.explore_buffer.push(t)
    batch = sample_mixed_batch(state)
    assert {id(t) for t in batch} == {id(t) for t in demo + explore}


def test_mixed_batch_not_ready():
    state = make_state()
    rng = np.random.default_rng(4)
    assert sample_mixed_batch(state) is None
    for _ in range(63):
        state.explore_buffer.push(random_transition(rng))
    assert sample_mixed_batch(state) is None
    state.explore_buffer.push(random_transition(rng))
    assert sample_mixed_batch(state) is not None


# ---------------------------------------------------------------- loss

def oracle_loss(theta_online, theta_target, batch, gamma):
    """Independent brute-force TD targets and grouped loss, sample by sample."""
    demo_sq, conv_sq, tds = [], [], []
    for t in batch:
        q_next = forward(theta_online, dequantize(t.next_obs))
        a_star = 0
        for a in range(1, len(q_next)):
            if q_next[a] > q_next[a_star]:
                a_star = a
        bootstrap = forward(theta_target, dequantize(t.next_obs))[a_star]
        td = t.reward if t.done else t.reward + gamma * float(bootstrap)
        q = forward(theta_online, dequantize(t.obs))[t.action]
        sq = (td - float(q)) ** 2
        (demo_sq if t.is_demo else conv_sq).append(sq)
        tds.append(td)
    loss = 0.0
    if demo_sq:
        loss += sum(demo_sq) / len(demo_sq)
    if conv_sq:
        loss += sum(conv_sq) / len(conv_sq)
    return loss, tds


def test_loss_matches_bruteforce_oracle():
    theta1 = init_params(0, TINY, dtype=np.float64)
    theta2 = init_params(1, TINY, dtype=np.float64)
    rng = np.random.default_rng(42)
    for trial in range(50):
        n = int(rng.integers(1, 9))
        batch = [random_transition(rng, is_demo=bool(rng.random() < 0.5)) for _ in range(n)]
        loss, td = compute_loss(theta1, theta2, batch, 0.9)
        want_loss, want_td = oracle_loss(theta1, theta2, batch, 0.9)
        assert loss == pytest.approx(want_loss, rel=1e-10)
        np.testing.assert_allclose(td, want_td, rtol=1e-10)


def test_loss_oracle_on_sub_100_parameter_net():
    micro = ArchSpec(in_frames=1, in_long=4, in_lat=4, conv_features=(2,), kernel=3, stride=2,
                     trunk_units=4, branch_units=3, n_actions=2)
    assert micro.param_count <= 100
    theta1 = init_params(0, micro, dtype=np.float64)
    theta2 = init_params(1, micro, dtype=np.float64)
    rng = np.random.default_rng(3)
    for _ in range(20):
        n = int(rng.integers(1, 9))
        batch = []
        for _ in range(n):
            batch.append(
                Transition(
                    obs=rng.integers(0, 256, size=(1, 4, 4), dtype=np.uint8),
                    action=int(rng.integers(2)),
                    reward=float(rng.normal()),
                    next_obs=rng.integers(0, 256, size=(1, 4, 4), dtype=np.uint8),
                    done=bool(rng.random() < 0.3),
                    is_demo=bool(rng.random() < 0.5),
                )
            )
        loss, td = compute_loss(theta1, theta2, batch, 0.9)
        want_loss, want_td = oracle_loss(theta1, theta2, batch, 0.9)
        assert loss == pytest.approx(want_loss, rel=1e-10)
        np.testing.assert_allclose(td, want_td, rtol=1e-10)


def test_terminal_target_is_reward():
    theta1 = init_params(0, TINY, dtype=np.float64)
    theta2 = init_params(1, TINY, dtype=np.float64)
    rng = np.random.default_rng(0)
    t = random_transition(rng, done=True)
    _, td = compute_loss(theta1, theta2, [t], 0.9)
    assert td[0] == t.reward


def test_td_target_assembly():
    # td = r + gamma * Q_target(s', a*) with a* from the online net
    theta1 = init_params(3, TINY, dtype=np.float64)
    theta2 = init_params(4, TINY, dtype=np.float64)
    rng = np.random.default_rng(9)
    t = random_transition(rng, done=False)
    _, td = compute_loss(theta1, theta2, [t], 0.9)
    a_star = int(np.argmax(forward(theta1, dequantize(t.next_obs))))
    bootstrap = forward(theta2, dequantize(t.next_obs))[a_star]
    assert td[0] == pytest.approx(t.reward + 0.9 * float(bootstrap), rel=1e-12)


def test_identical_samples_split_doubles_single_group_loss():
    theta1 = init_params(0, TINY, dtype=np.float64)
    theta2 = init_params(1, TINY, dtype=np.float64)
    rng = np.random.default_rng(11)
    base = random_transition(rng)
    mixed = []
    for k in range(8):
        t = Transition(base.obs, base.action, base.reward, base.next_obs, base.done, is_demo=k < 4)
        mixed.append(t)
    single = [Transition(base.obs, base.action, base.reward, base.next_obs, base.done, False)] * 8
    loss_mixed, _ = compute_loss(theta1, theta2, mixed, 0.9)
    loss_single, _ = compute_loss(theta1, theta2, single, 0.9)
    assert loss_mixed == pytest.approx(2.0 * loss_single, rel=1e-12)


# ---------------------------------------------------------------- updates

def test_fair_coin_balance():
    state = make_state()
    n = 10_000
    for _ in range(n):
        choose_online(state)
    assert 0.4 * n <= state.updates_theta1 <= 0.6 * n
    assert 0.4 * n <= state.updates_theta2 <= 0.6 * n
    assert state.updates_theta1 + state.updates_theta2 == n


def test_target_network_insulated():
    state = make_state()
    rng = np.random.default_rng(5)
    batch = [random_transition(rng, is_demo=(i < 16)) for i in range(64)]
    for _ in range(4):
        before1 = state.theta1.vector.copy()
        before2 = state.theta2.vector.copy()
        updated_1 = state.updates_theta1
        train_step(state, batch)
        if state.updates_theta1 > updated_1:
            assert not np.array_equal(state.theta1.vector, before1)
            assert np.array_equal(state.theta2.vector, before2)
        else:
            assert np.array_equal(state.theta1.vector, before1)
            assert not np.array_equal(state.theta2.vector, before2)


# ---------------------------------------------------------------- phases

def test_demo_phase_fills_only_demo_buffer():
    cfg = TrainerConfig(demo_episodes=2, episodes=1)
    state = make_trainer(0, cfg, arch=SMALL_TRAIN_ARCH)
    env = LaneChangeEnv(n_vehicles=4)
    stored = run_demo_phase(state, env, scripted_demonstrator)
    assert stored > 0
    assert len(state.demo_buffer) == stored
    assert len(state.explore_buffer) == 0
    assert all(t.is_demo for t in state.demo_buffer.items())


def test_load_demo_transitions_rejects_non_demo():
    state = make_state()
    with pytest.raises(ValueError):
        trainer_mod.load_demo_transitions(state, [random_transition(np.random.default_rng(0))])


def test_train_runs_and_is_deterministic(tmp_path):
    def run(out):
        cfg = TrainerConfig(episodes=2, demo_episodes=1, checkpoint_interval=0)
        state = make_trainer(7, cfg, arch=SMALL_TRAIN_ARCH)
        env = LaneChangeEnv(n_vehicles=4)
        metrics = train(state, env, demo_policy=scripted_demonstrator, out_dir=out)
        return state, metrics, (out / "metrics.csv").read_bytes()

    s1, m1, bytes1 = run(tmp_path / "a")
    s2, m2, bytes2 = run(tmp_path / "b")
    assert bytes1 == bytes2
    assert m1 == m2
    assert len(m1) == 2
    assert param_distance(s1.theta1, s2.theta1) == 0.0
    assert param_distance(s1.theta2, s2.theta2) == 0.0
    assert (tmp_path / "a" / "manifest.json").exists()
    assert (tmp_path / "a" / "policy_final.qnet").exists()


def test_demo_purity_through_training(tmp_path):
    cfg = TrainerConfig(episodes=2, demo_episodes=2, checkpoint_interval=0)
    state = make_trainer(3, cfg, arch=SMALL_TRAIN_ARCH)
    env = LaneChangeEnv(n_vehicles=4)
    train(state, env, demo_policy=scripted_demonstrator)
    assert all(t.is_demo for t in state.demo_buffer.items())
    assert not any(t.is_demo for t in state.explore_buffer.items())
    if state.warm_batch_mix:
        assert set(state.warm_batch_mix) == {(16, 48)}


def test_vanilla_ablation_never_touches_demos():
    cfg = TrainerConfig(episodes=2, demo_episodes=0, n_demo=0, n_explore=64, checkpoint_interval=0)
    state = make_trainer(4, cfg, arch=SMALL_TRAIN_ARCH)
    env = LaneChangeEnv(n_vehicles=4)
    train(state, env)
    assert len(state.demo_buffer) == 0
    if state.warm_batch_mix:
        assert set(state.warm_batch_mix) == {(0, 64)}
