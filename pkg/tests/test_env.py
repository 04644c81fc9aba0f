import io
import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from marlcc.comms import ChannelModel
from marlcc.credit import CoalitionGame, counterfactual_value, shapley_exact
from marlcc.env import (
    ACTION_DIM,
    FEATURE_DIM,
    BeliefConfig,
    EnvConfig,
    FunctionPolicy,
    RewardSpec,
    ScenarioConfig,
    SnapshotOracle,
    TrainingConfig,
    evaluate,
    features,
    make_world,
    reset,
    restore,
    run_episode,
    run_training,
    snapshot,
    step,
    step_columns,
    zero_policy,
)
from marlcc.env.world import _sense_and_filter, systematic_rows
from marlcc.belief import systematic_indices
from marlcc.errors import PlacementError
from marlcc.learner import LearnerConfig


def small_cfg(n=3, horizon=30, kind="platoon", **kw):
    sc = ScenarioConfig(kind=kind, n_agents=n, horizon=horizon, **kw)
    return EnvConfig(sc, belief=BeliefConfig(n_particles=16))


def random_policy(seed, scale=1.0):
    rng = np.random.default_rng(seed)
    return FunctionPolicy(lambda f: scale * rng.standard_normal(f.shape[:-1] + (ACTION_DIM,)))


def states_equal(a, b):
    return all(
        np.array_equal(getattr(a, k), getattr(b, k), equal_nan=True)
        for k in ("x", "particles", "weights", "obs", "sensed_gap", "inbox", "inbox_tick", "pend_arrive", "tick")
    )


# ---------------------------------------------------------------------------
# configuration and reset


def test_config_validation():
    with pytest.raises(ValueError):
        ScenarioConfig(n_agents=0)
    with pytest.raises(ValueError):
        ScenarioConfig(dt=0.0)
    with pytest.raises(ValueError):
        ScenarioConfig(kind="roundabout")
    with pytest.raises(ValueError):
        RewardSpec(d_min=0.0)
    with pytest.raises(ValueError):
        RewardSpec(headway_weight=float("inf"))


def test_reset_same_seed_identical():
    a = make_world(small_cfg(), [7])
    b = make_world(small_cfg(), [7])
    assert states_equal(a, b)
    c = make_world(small_cfg(), [8])
    assert not np.array_equal(a.x, c.x)


def test_single_agent_platoon_at_origin():
    cfg = small_cfg(n=1, origin=(3.0, -2.0))
    w = make_world(cfg, [0])
    assert np.array_equal(w.x[0, 0, :2], [3.0, -2.0])
    assert w.layout.predecessor[0] == -1
    assert not features(w)[0, 0, 5]  # no neighbour information


@pytest.mark.parametrize("kind", ["platoon", "intersection", "lane-merge"])
def test_initial_gaps_respect_d_min(kind):
    cfg = small_cfg(n=5, kind=kind, spacing=20.0)
    w = make_world(cfg, list(range(20)))
    d = np.linalg.norm(w.x[:, :, None, :2] - w.x[:, None, :, :2], axis=-1)
    d[:, np.arange(5), np.arange(5)] = np.inf
    assert d.min() >= cfg.scenario.reward.d_min
    v = w.x[..., 2]
    assert v.min() >= 0.0 and v.max() <= 10.0


def test_infeasible_placement_raises():
    cfg = small_cfg(n=3, spacing=1.0, spacing_jitter=0.0)
    with pytest.raises(PlacementError):
        make_world(cfg, [0])


def test_initial_beliefs_centered_on_truth():
    cfg = EnvConfig(ScenarioConfig(n_agents=2), belief=BeliefConfig(n_particles=4000))
    w = make_world(cfg, [1])
    mean = w.particles[0].mean(axis=-1)
    sd = w.particles[0].std(axis=-1)
    np.testing.assert_allclose(mean, w.x[0], atol=0.1)
    np.testing.assert_allclose(sd, np.tile(cfg.belief.init_std, (2, 1)), rtol=0.1)


# ---------------------------------------------------------------------------
# rewards


def test_zero_cost_fixed_point():
    rw = RewardSpec(c0=0.0, c1=0.0, c2=0.01, cruise_speed=0.0)
    cfg = EnvConfig(
        ScenarioConfig(n_agents=3, horizon=5, spacing=rw.headway, spacing_jitter=0.0, v0_high=0.0, process_std=(0, 0, 0, 0), reward=rw),
        belief=BeliefConfig(n_particles=8),
    )
    w = make_world(cfg, [0])
    res = step(w, np.zeros((1, 3, 2)))
    np.testing.assert_array_equal(res.rewards, 0.0)
    assert res.R[0] == 0.0


def test_stationary_fuel_cost():
    rw = RewardSpec(c0=0.3, cruise_speed=0.0)
    sc = ScenarioConfig(n_agents=3, horizon=5, spacing=rw.headway, spacing_jitter=0.0, v0_high=0.0, process_std=(0, 0, 0, 0), reward=rw)
    w = make_world(EnvConfig(sc, belief=BeliefConfig(n_particles=8)), [0])
    res = step(w, np.zeros((1, 3, 2)))
    np.testing.assert_allclose(res.rewards, -0.3 * sc.dt, rtol=1e-12)


def test_safety_penalty_at_half_d_min():
    rw = RewardSpec(c0=0.0, c2=0.0, headway_weight=0.0, speed_weight=0.0, lateral_weight=0.0, effort_weight=0.0, safety_weight=2.0)
    sc = ScenarioConfig(n_agents=2, horizon=5, spacing_jitter=0.0, v0_high=0.0, process_std=(0, 0, 0, 0), reward=rw)
    w = make_world(EnvConfig(sc, belief=BeliefConfig(n_particles=8)), [0])
    w.x[0, 1, 0] = -rw.d_min / 2
    res = step(w, np.zeros((1, 2, 2)))
    # each agent is charged for its ordered pair
    np.testing.assert_allclose(res.rewards[0], -2.0 * (rw.d_min - rw.d_min / 2), rtol=1e-12)
    np.testing.assert_allclose(res.R[0], -2.0 * 2.0 * rw.d_min / 2, rtol=1e-12)


def test_collision_terminal_and_penalized_once():
    rw = RewardSpec(collision_penalty=500.0)
    sc = ScenarioConfig(n_agents=2, horizon=50, spacing=6.0, spacing_jitter=0.0, v0_low=0.0, v0_high=0.0, reward=rw)
    w = make_world(EnvConfig(sc, belief=BeliefConfig(n_particles=8)), [0])
    w.x[0, 1, 2] = 15.0  # follower at full speed towards a stopped leader
    logs = run_episode(w, zero_policy(), credit="none", record=True)
    lg = logs[0]
    assert lg.collision_count == 1
    assert lg.length < 50
    assert np.sum(lg.collisions > 0) == 1
    assert lg.collisions[-1] == 1
    assert np.all(lg.R[:-1] > -rw.collision_penalty)
    assert lg.R[-1] <= -2 * rw.collision_penalty
    assert w.done[0] and w.collided[0]


def test_rewards_sum_to_global():
    w = make_world(small_cfg(n=4, horizon=40), [0, 1, 2])
    pol = random_policy(0)
    while not w.done.all():
        res = step(w, pol.act(features(w)), credit="none")
        np.testing.assert_allclose(res.rewards.sum(-1), res.R, rtol=1e-9, atol=1e-12)


# ---------------------------------------------------------------------------
# snapshots and counterfactuals


def test_snapshot_restore_step_bit_identical():
    w = make_world(small_cfg(), [3])
    for _ in range(5):
        step(w, np.full((1, 3, 2), 0.2))
    snap = snapshot(w)
    a = np.random.default_rng(0).standard_normal((1, 3, 2))
    r1 = step(w, a, credit="exact")
    w2 = restore(snap)
    r2 = step(w2, a, credit="exact")
    assert states_equal(w, w2)
    for k in ("u", "rewards", "R", "phi", "msgs_sent", "msgs_dropped"):
        assert np.array_equal(getattr(r1, k), getattr(r2, k))
    # the snapshot itself is untouched
    w3 = restore(snap)
    assert np.array_equal(w3.tick, snap.tick)


def test_common_random_numbers():
    sc = ScenarioConfig(n_agents=2, horizon=10)
    w = make_world(EnvConfig(sc, belief=BeliefConfig(n_particles=8)), [5])
    snap = snapshot(w)
    wa, wb = restore(snap), restore(snap)
    ua = np.array([[[0.5, 0.0], [0.0, 0.0]]])
    ub = np.array([[[-0.5, 0.0], [0.0, 0.0]]])
    step(wa, ua)
    step(wb, ub)
    # agent 1 acted identically, so its true state is identical
    assert np.array_equal(wa.x[0, 1], wb.x[0, 1])
    assert not np.array_equal(wa.x[0, 0], wb.x[0, 0])
    # and both copies consumed the same number of draws
    assert wa.env_rng[0].bit_generator.state == wb.env_rng[0].bit_generator.state


def test_grand_coalition_value_equals_live_reward():
    w = make_world(small_cfg(n=3), [2])
    pol = random_policy(1)
    for _ in range(4):
        step(w, pol.act(features(w)))
    a = pol.act(features(w))
    snap = snapshot(w)
    oracle = SnapshotOracle(snap)
    v_full = counterfactual_value(oracle, a[0], [0, 1, 2])
    res = step(w, a, credit="exact")
    assert v_full == res.R[0]


def test_exact_credit_matches_oracle_game():
    w = make_world(small_cfg(n=3), [4])
    pol = random_policy(2)
    for _ in range(6):
        step(w, pol.act(features(w)))
    a = pol.act(features(w))
    oracle = SnapshotOracle(snapshot(w))
    game = CoalitionGame(3, lambda m: counterfactual_value(oracle, a[0], m), pure=False)
    ref = shapley_exact(game)
    res = step(w, a, credit="exact")
    np.testing.assert_allclose(res.phi[0], ref.phi, rtol=1e-9, atol=1e-9)
    v_all, v_none = game.value(0b111), game.value(0)
    assert abs(res.phi[0].sum() - (v_all - v_none)) <= 1e-9 * max(1.0, abs(v_all - v_none))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 5))
def test_exact_efficiency_property(seed, n):
    w = make_world(small_cfg(n=n), [seed])
    pol = random_policy(seed)
    step(w, pol.act(features(w)))
    a = pol.act(features(w))
    oracle = SnapshotOracle(snapshot(w))
    res = step(w, a, credit="exact")
    v_all = counterfactual_value(oracle, a[0], (1 << n) - 1)
    v_none = counterfactual_value(oracle, a[0], 0)
    assert v_all == res.R[0]
    assert abs(res.phi[0].sum() - (v_all - v_none)) <= 1e-9 * max(1.0, abs(v_all - v_none))


def test_mc_credit_unbiased_direction():
    w = make_world(small_cfg(n=3), [9])
    pol = random_policy(3)
    step(w, pol.act(features(w)))
    a = pol.act(features(w))
    snap = snapshot(w)
    exact = step(restore(snap), a, credit="exact").phi[0]
    mc = step(restore(snap), a, credit="mc", mc_samples=400).phi[0]
    np.testing.assert_allclose(mc, exact, atol=0.05 * np.abs(exact).max() + 1e-6)


def test_factorized_credit_equals_exact_when_fully_connected():
    cfg = small_cfg(n=3)
    w = make_world(cfg, [0])
    pol = random_policy(4)
    step(w, pol.act(features(w)))
    assert w.adjacency[0].sum() == 6
    a = pol.act(features(w))
    snap = snapshot(w)
    exact = step(restore(snap), a, credit="exact").phi[0]
    fact = step(restore(snap), a, credit="factorized").phi[0]
    np.testing.assert_allclose(fact, exact, rtol=1e-9, atol=1e-12)


def test_uniform_credit_splits_evenly():
    w = make_world(small_cfg(n=4, horizon=20), [0, 1])
    logs = run_episode(w, random_policy(5), credit="uniform", record=True)
    for lg in logs:
        np.testing.assert_allclose(lg.phi, np.repeat(lg.R[:, None] / 4, 4, axis=1), rtol=0, atol=0)
        np.testing.assert_allclose(lg.phi.sum(-1), lg.R, rtol=1e-12)


def test_oracle_without_snapshot_raises():
    from marlcc.errors import CounterfactualUnavailableError

    with pytest.raises(CounterfactualUnavailableError):
        SnapshotOracle(None)


# ---------------------------------------------------------------------------
# episodes


def test_zero_horizon_gives_empty_log():
    w = make_world(small_cfg(horizon=0), [0])
    lg = run_episode(w, zero_policy(), credit="none")[0]
    assert lg.length == 0
    assert lg.cumulative_reward == 0.0
    assert lg.to_csv().strip() == ",".join(step_columns(3))


def test_episode_determinism():
    cfg = small_cfg(n=3, horizon=40)
    csv = []
    for _ in range(2):
        w = make_world(cfg, [11])
        csv.append(run_episode(w, random_policy(6), credit="exact")[0].to_csv())
    assert csv[0] == csv[1]
    assert csv[0].splitlines()[0] == "tick,R,phi_1,phi_2,phi_3,collisions,msgs_sent,msgs_dropped"


def test_log_lengths_consistent():
    w = make_world(small_cfg(n=3, horizon=25), [0, 1, 2, 3])
    for lg in run_episode(w, random_policy(7), credit="exact", record=True):
        T = lg.length
        assert T <= 25
        assert lg.R.shape == (T,) and lg.phi.shape == (T, 3)
        assert lg.actions.shape == (T, 3, 2) and lg.collisions.shape == (T,)
        assert len(lg.to_csv().splitlines()) == T + 1


def test_solo_and_batched_lanes_identical():
    cfg = small_cfg(n=3, horizon=60)
    seeds = [0, 1, 2]
    batched = run_episode(make_world(cfg, seeds), zero_policy(), credit="exact")
    for s, lg in zip(seeds, batched):
        solo = run_episode(make_world(cfg, [s]), zero_policy(), credit="exact")[0]
        assert solo.to_csv() == lg.to_csv()


def test_reset_subset_of_lanes():
    cfg = small_cfg()
    w = make_world(cfg, [0, 1])
    x1 = w.x[1].copy()
    step(w, np.zeros((2, 3, 2)))
    reset(w, [0])
    fresh = make_world(cfg, [0])
    assert w.tick[0] == 0 and w.tick[1] == 1
    assert not np.array_equal(w.x[1], x1)
    assert not np.array_equal(w.x[0], fresh.x[0])  # second episode of the stream


def test_features_are_local():
    cfg = small_cfg(n=3)
    w = make_world(cfg, [0])
    f = features(w)
    assert f.shape == (1, 3, FEATURE_DIM)
    # moving the true state of agent 2 cannot change what agent 0 sees this tick
    w.x[0, 2] += 5.0
    assert np.array_equal(features(w), f)


def test_raw_and_fl_modes_run():
    for fl, mode in itertools.product([True, False], ["particle", "raw"]):
        cfg = EnvConfig(ScenarioConfig(n_agents=3, horizon=15), belief=BeliefConfig(n_particles=8, mode=mode), feedback_linearization=fl)
        lg = run_episode(make_world(cfg, [0]), random_policy(8), credit="exact")[0]
        assert np.all(np.isfinite(lg.R))


@pytest.mark.parametrize("kind", ["intersection", "lane-merge"])
def test_other_scenarios_run(kind):
    cfg = small_cfg(n=4, horizon=40, kind=kind)
    lg = run_episode(make_world(cfg, [0]), random_policy(9, 0.3), credit="exact")[0]
    assert lg.length > 0 and np.all(np.isfinite(lg.phi))


def test_lossy_channel_counts():
    cfg = EnvConfig(ScenarioConfig(n_agents=3, horizon=50), ChannelModel(p_loss=0.5), BeliefConfig(n_particles=8))
    lg = run_episode(make_world(cfg, [0]), zero_policy(), credit="none")[0]
    sent, dropped = lg.msgs_sent.sum(), lg.msgs_dropped.sum()
    assert sent > 0 and 0.3 < dropped / sent < 0.7


def test_systematic_rows_matches_reference():
    rng = np.random.default_rng(0)
    for _ in range(50):
        w = rng.random((3, 40)) ** 4
        w /= w.sum(-1, keepdims=True)
        off = rng.random(3)
        rows = systematic_rows(w, off)
        for k in range(3):
            fixed = type("Fixed", (), {"random": lambda self, o=off[k]: o})()
            np.testing.assert_array_equal(rows[k], systematic_indices(w[k], fixed))


# ---------------------------------------------------------------------------
# training


def tiny_learner(**kw):
    return LearnerConfig(hidden=(8, 8), batch_size=8, warmup=16, update_every=5, **kw)


def test_training_zero_episodes_empty():
    recs, _ = run_training(small_cfg(), tiny_learner(), TrainingConfig(episodes=0), [0, 1])
    assert [r.episodes for r in recs] == [0, 0]
    assert recs[0].to_csv().count("\n") == 1


def test_training_reproducible_and_lane_independent(tmp_path):
    cfg = small_cfg(n=2, horizon=20)
    tc = TrainingConfig(episodes=4, eval_interval=2, credit="exact")
    a, _ = run_training(cfg, tiny_learner(), tc, [0, 1])
    b, _ = run_training(cfg, tiny_learner(), tc, [0, 1])
    c, _ = run_training(cfg, tiny_learner(), tc, [1], out_dir=str(tmp_path))
    assert a[0].to_csv() == b[0].to_csv()
    assert a[1].to_csv() == c[0].to_csv()
    assert a[0].eval_episode == [1, 3]
    assert (tmp_path / "seed_1" / "checkpoints" / "final").exists()


def test_evaluate_is_deterministic():
    cfg = small_cfg(n=3, horizon=30)
    pol = FunctionPolicy(lambda f: -0.5 * f[..., :2])
    a = [lg.to_csv() for lg in evaluate(cfg, pol, [0, 1])]
    b = [lg.to_csv() for lg in evaluate(cfg, pol, [0, 1])]
    assert a == b


def test_degenerate_weights_recover():
    w = make_world(small_cfg(n=2), [0])
    w.weights[0, 0] = 0.0  # no particle carries any weight
    _sense_and_filter(w, np.array([True]), np.zeros((1, 2, 2)))
    assert w.degenerate[0, 0]
    assert np.all(np.isfinite(w.weights)) and np.isclose(w.weights[0, 0].sum(), 1.0)


def test_nonzero_baseline_matches_oracle():
    sc = ScenarioConfig(n_agents=3, horizon=30)
    cfg = EnvConfig(sc, belief=BeliefConfig(n_particles=16), credit_baseline=(-0.5, 0.1))
    w = make_world(cfg, [6])
    pol = random_policy(10)
    step(w, pol.act(features(w)))
    a = pol.act(features(w))
    oracle = SnapshotOracle(snapshot(w))
    base = np.tile([-0.5, 0.1], (3, 1))
    game = CoalitionGame(3, lambda m: counterfactual_value(oracle, a[0], m, base), pure=False)
    res = step(w, a, credit="exact")
    np.testing.assert_allclose(res.phi[0], shapley_exact(game).phi, rtol=1e-9, atol=1e-12)
