import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from marlcc.errors import CheckpointError
from marlcc.learner import (
    MLP,
    LearnerConfig,
    MultiAgentLearner,
    OUNoise,
    ReplayBuffer,
    StepSchedule,
    TabularMDP,
    bellman_operator_oracle,
    critic_value,
    entropy,
    init_mlp,
    load_checkpoint,
    make_critic,
    make_policy,
    mlp_backward,
    mlp_forward,
    policy_act,
    policy_mean,
    policy_update,
    save_checkpoint,
    td_update,
    value_iteration,
)
from marlcc.learner.actor_critic import (
    GAUSS_ENTROPY,
    Critic,
    GaussianPolicy,
    critic_loss_grad,
    gaussian_log_prob,
    policy_gradient_from_advantage,
)
from marlcc.learner.mlp import clip_by_global_norm, global_norm
from marlcc.learner.tabular import random_mdp

H = 1e-5


def fd_check(loss, params, grads, rtol=1e-4):
    """Central differences on every entry of every parameter array."""
    worst = 0.0
    for p, g in zip(params, grads):
        flat, gflat = p.reshape(-1), np.asarray(g).reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + H
            up = loss()
            flat[k] = old - H
            dn = loss()
            flat[k] = old
            num = (up - dn) / (2 * H)
            err = abs(num - gflat[k]) / max(abs(num), abs(gflat[k]), 1e-6)
            worst = max(worst, err)
    assert worst < rtol, worst


# --- MLP --------------------------------------------------------------------


def test_forward_zero_net():
    net = init_mlp([3, 4, 2], np.random.default_rng(0))
    for p in net.params():
        p[...] = 0.0
    np.testing.assert_array_equal(mlp_forward(net, np.ones(3)), np.zeros(2))


def test_forward_identity_net():
    net = MLP([1, 1], [np.ones((1, 1))], [np.zeros(1)])
    assert mlp_forward(net, np.array([3.0]))[0] == 3.0


def test_forward_deterministic_and_shape_check():
    net = init_mlp([4, 8, 8, 2], np.random.default_rng(1))
    x = np.random.default_rng(2).normal(size=(5, 4))
    assert np.array_equal(mlp_forward(net, x), mlp_forward(net, x))
    with pytest.raises(ValueError):
        mlp_forward(net, np.ones((5, 3)))


def test_backward_linear_and_dead_unit():
    net = MLP([1, 1], [np.array([[2.0]])], [np.zeros(1)])
    _, cache = mlp_forward(net, np.array([[3.0]]), cache=True)
    grads, gx = mlp_backward(net, cache, np.ones((1, 1)))
    assert grads[0][0, 0] == 3.0 and grads[1][0] == 1.0 and gx[0, 0] == 2.0
    # hidden unit with negative pre-activation passes no gradient
    net = MLP([1, 1, 1], [np.array([[1.0]]), np.array([[1.0]])], [np.array([-5.0]), np.zeros(1)])
    _, cache = mlp_forward(net, np.array([[1.0]]), cache=True)
    grads, gx = mlp_backward(net, cache, np.ones((1, 1)))
    assert grads[0][0, 0] == 0.0 and grads[1][0] == 0.0 and gx[0, 0] == 0.0


@pytest.mark.parametrize("seed", range(20))
def test_mlp_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = init_mlp([3, 6, 5, 2], rng)
    x = rng.normal(size=(4, 3))
    c = rng.normal(size=(4, 2))
    _, cache = mlp_forward(net, x, cache=True)
    grads, gx = mlp_backward(net, cache, c)
    fd_check(lambda: float((mlp_forward(net, x) * c).sum()), net.params(), grads)
    fd_check(lambda: float((mlp_forward(net, x) * c).sum()), [x], [gx])


@pytest.mark.parametrize("seed", range(20))
def test_ensemble_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    net = init_mlp([3, 5, 2], rng, ensemble=3)
    x = rng.normal(size=(3, 4, 3))
    c = rng.normal(size=(3, 4, 2))
    _, cache = mlp_forward(net, x, cache=True)
    grads, _ = mlp_backward(net, cache, c)
    fd_check(lambda: float((mlp_forward(net, x) * c).sum()), net.params(), grads)


def test_ensemble_members_are_independent():
    rng = np.random.default_rng(3)
    net = init_mlp([2, 4, 1], rng, ensemble=3)
    x = rng.normal(size=(3, 5, 2))
    y = mlp_forward(net, x)
    for e in range(3):
        single = MLP(net.sizes, [W[e] for W in net.weights], [b[e, 0] for b in net.biases])
        np.testing.assert_allclose(y[e], mlp_forward(single, x[e]), rtol=1e-14)


def test_clip_by_global_norm():
    g = [np.full((2, 2), 3.0), np.full(2, 4.0)]
    clipped, norm = clip_by_global_norm(g, 1.0)
    assert norm == pytest.approx(math.sqrt(4 * 9 + 2 * 16))
    assert global_norm(clipped) == pytest.approx(1.0)
    small, _ = clip_by_global_norm(g, 100.0)
    np.testing.assert_array_equal(small[0], g[0])
    ens = [np.stack([np.ones(3), 100 * np.ones(3)])]
    out, norms = clip_by_global_norm(ens, 10.0, ensemble=2)
    np.testing.assert_array_equal(out[0][0], np.ones(3))
    assert np.linalg.norm(out[0][1]) == pytest.approx(10.0)


# --- policy and critic gradients --------------------------------------------


@pytest.mark.parametrize("seed", range(20))
def test_critic_loss_gradient(seed):
    rng = np.random.default_rng(200 + seed)
    critic = make_critic(3, 2, (6,), rng)
    f, a, y = rng.normal(size=(5, 3)), rng.normal(size=(5, 2)), rng.normal(size=5)
    grads, _ = critic_loss_grad(critic, f, a, y)
    loss = lambda: 0.5 * float(np.mean((critic_value(critic, f, a) - y) ** 2))
    fd_check(loss, critic.net.params(), grads)


@pytest.mark.parametrize("seed", range(20))
def test_policy_objective_gradient(seed):
    rng = np.random.default_rng(300 + seed)
    policy = make_policy(3, 2, (6,), rng, log_std=rng.uniform(-1, 0.5))
    policy.log_std = policy.log_std + rng.normal(scale=0.2, size=2)
    f, a, adv = rng.normal(size=(5, 3)), rng.normal(size=(5, 2)), rng.normal(size=5)
    grads, g_ls = policy_gradient_from_advantage(policy, f, a, adv)
    obj = lambda: float(np.mean(gaussian_log_prob(policy_mean(policy, f), policy.log_std, a) * adv))
    fd_check(obj, policy.net.params() + [policy.log_std], grads + [g_ls])


def test_ensemble_policy_gradient_matches_members():
    rng = np.random.default_rng(4)
    pol = make_policy(3, 2, (5,), rng, ensemble=2)
    f, a, adv = rng.normal(size=(2, 4, 3)), rng.normal(size=(2, 4, 2)), rng.normal(size=(2, 4))
    grads, g_ls = policy_gradient_from_advantage(pol, f, a, adv)
    for e in range(2):
        single = GaussianPolicy(
            MLP(pol.net.sizes, [W[e] for W in pol.net.weights], [b[e, 0] for b in pol.net.biases]),
            pol.log_std[e, 0],
        )
        g1, l1 = policy_gradient_from_advantage(single, f[e], a[e], adv[e])
        for ge, gs in zip(grads, g1):
            np.testing.assert_allclose(ge[e].reshape(gs.shape), gs, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(g_ls[e, 0], l1, rtol=1e-12)


# --- acting and entropy -----------------------------------------------------


def zero_policy(feat=2, act=1, log_std=0.0):
    p = make_policy(feat, act, (4,), np.random.default_rng(0), log_std=log_std)
    for q in p.net.params():
        q[...] = 0.0
    return p


def test_act_deterministic_zero():
    a, lp = policy_act(zero_policy(), np.ones((3, 2)), None, np.random.default_rng(0), deterministic=True)
    np.testing.assert_array_equal(a, 0.0)


def test_act_vanishing_noise():
    p = zero_policy(log_std=-np.inf)
    assert p.log_std[0] == -5.0
    noise = OUNoise((3, 1), sigma=0.0)
    a, lp = policy_act(p, np.ones((3, 2)), noise, np.random.default_rng(0))
    assert np.all(np.abs(a) < 5 * math.exp(-5))
    assert np.all(np.isfinite(lp))


def test_act_log_prob_is_gaussian_component():
    p = zero_policy(log_std=0.3)
    rng = np.random.default_rng(5)
    a, lp = policy_act(p, np.ones((4, 2)), None, rng)
    np.testing.assert_allclose(lp, gaussian_log_prob(0.0, p.log_std, a), rtol=1e-12)


def test_ou_stationary_std():
    ou = OUNoise((1,), theta=0.15, sigma=0.2, dt=0.1)
    rng = np.random.default_rng(6)
    xs = np.empty(100_000)
    for k in range(100_000):
        xs[k] = ou.step(rng)[0]
    target = 0.2 / math.sqrt(2 * 0.15)
    assert target == pytest.approx(0.365, abs=1e-3)
    assert abs(xs[1000:].std() - target) <= 0.1 * target


def test_ou_zero_sigma_geometric_decay():
    ou = OUNoise((2,), sigma=0.0, dt=0.1)
    ou.state = np.array([1.0, -2.0])
    for k in range(1, 50):
        ou.step(np.random.default_rng(0))
        np.testing.assert_allclose(ou.state, np.array([1.0, -2.0]) * (1 - 0.015) ** k, rtol=1e-12)


def test_entropy_examples():
    p = zero_policy(log_std=0.0)
    assert float(entropy(p)) == pytest.approx(1.41894, abs=1e-5)
    p2 = zero_policy(act=2, log_std=0.0)
    assert float(entropy(p2)) == 2 * float(entropy(p))
    p3 = zero_policy(act=3, log_std=-9.0)
    assert float(entropy(p3)) == pytest.approx(3 * (GAUSS_ENTROPY - 5.0), abs=1e-12)


# --- critic update ----------------------------------------------------------


def test_td_regression_to_constant():
    rng = np.random.default_rng(7)
    critic = make_critic(2, 1, (16,), rng)
    policy = zero_policy()
    batch = (np.array([[0.5, -0.5]]), np.array([[0.2]]), np.array([1.7]), np.zeros((1, 2)), np.ones(1))
    for _ in range(5000):
        td_update(critic, batch, policy, 1e-2, 0.0)
    assert abs(critic_value(critic, batch[0], batch[1])[0] - 1.7) < 1e-3


def test_td_zero_everything_is_fixed():
    critic = make_critic(2, 1, (4,), np.random.default_rng(0))
    for p in critic.net.params():
        p[...] = 0.0
    before = [p.copy() for p in critic.net.params()]
    rng = np.random.default_rng(1)
    batch = (rng.normal(size=(8, 2)), rng.normal(size=(8, 1)), np.zeros(8), rng.normal(size=(8, 2)), np.zeros(8))
    _, td = td_update(critic, batch, zero_policy(), 0.1, 0.9)
    assert td == 0.0
    for p, q in zip(before, critic.net.params()):
        np.testing.assert_array_equal(p, q)


def test_td_tabular_chain_matches_value_iteration():
    # 3-state cycle 0 -> 1 -> 2 -> 0 with one action; one-hot features and a linear critic
    gamma = 0.9
    r = np.array([1.0, 0.0, 2.0])
    P = np.zeros((3, 1, 3))
    for s in range(3):
        P[s, 0, (s + 1) % 3] = 1.0
    V, Q = value_iteration(TabularMDP(P, r[:, None], gamma))
    critic = Critic(init_mlp([4, 1], np.random.default_rng(0)))
    eye = np.eye(3)
    batch = (eye, np.zeros((3, 1)), r, eye[[1, 2, 0]], np.zeros(3))
    policy = zero_policy(feat=3)
    for _ in range(20_000):
        td_update(critic, batch, policy, 0.1, gamma)
    np.testing.assert_allclose(critic_value(critic, eye, np.zeros((3, 1))), Q[:, 0], atol=1e-3)


def test_td_max_sample_bootstrap_upper_bounds_mean():
    rng = np.random.default_rng(8)
    critic = make_critic(2, 1, (8,), rng)
    policy = make_policy(2, 1, (4,), rng)
    batch = (rng.normal(size=(6, 2)), rng.normal(size=(6, 1)), np.zeros(6), rng.normal(size=(6, 2)), np.zeros(6))
    from marlcc.learner.actor_critic import td_targets

    ym = td_targets(critic, policy, batch[2], batch[3], batch[4], 0.9, "mean")
    yx = td_targets(critic, policy, batch[2], batch[3], batch[4], 0.9, "max-sample", rng)
    assert np.all(yx >= ym - 1e-15)


# --- actor update -----------------------------------------------------------


def test_policy_update_zero_advantage():
    rng = np.random.default_rng(9)
    policy = make_policy(2, 1, (4,), rng)
    before = [p.copy() for p in policy.net.params()] + [policy.log_std.copy()]
    batch = (rng.normal(size=(8, 2)), rng.normal(size=(8, 1)))
    policy_update(policy, lambda f, a: np.zeros(len(f)), batch, 0.1)
    for p, q in zip(before, policy.net.params() + [policy.log_std]):
        np.testing.assert_array_equal(p, q)


def test_policy_update_linear_in_advantage():
    rng = np.random.default_rng(10)
    base = make_policy(2, 1, (4,), rng)
    batch = (rng.normal(size=(8, 2)), rng.normal(size=(8, 1)))
    q = lambda f, a: 0.01 * a[..., 0] * f[..., 0]
    deltas = []
    for scale in (1.0, 2.0):
        pol = base.copy()
        policy_update(pol, lambda f, a, s=scale: s * q(f, a), batch, 1e-3)
        deltas.append([n - o for n, o in zip(pol.net.params(), base.net.params())])
    for d1, d2 in zip(*deltas):
        np.testing.assert_allclose(d2, 2 * d1, rtol=1e-9, atol=1e-18)


def test_bandit_moves_mean_to_optimum():
    rng = np.random.default_rng(11)
    policy = make_policy(1, 1, (8,), rng, log_std=0.0)
    q = lambda f, a: -((a[..., 0] - 2.0) ** 2)
    f = np.ones((64, 1))
    steps = 0
    for steps in range(1, 20_001):
        a, _ = policy_act(policy, f, None, rng)
        policy_update(policy, q, (f, a), 1e-2)
        if abs(policy_mean(policy, f[:1])[0, 0] - 2.0) < 0.1:
            break
    assert abs(policy_mean(policy, f[:1])[0, 0] - 2.0) < 0.1
    assert steps <= 20_000


# --- schedules, replay, tabular ---------------------------------------------


def test_robbins_monro_schedule():
    s = StepSchedule("robbins-monro", 1.0, 1.0)
    k = np.arange(1_000_000)
    alphas = 1.0 / (1.0 + k)
    assert s(0) == 1.0 and s(9) == 0.1
    assert alphas.sum() > 14.0  # harmonic partial sums grow like log K without bound
    assert (alphas**2).sum() < math.pi**2 / 6 + 1
    assert StepSchedule("constant", 0.5)(1000) == 0.5
    with pytest.raises(ValueError):
        StepSchedule("robbins-monro", 1.0, 0.0)
    with pytest.raises(ValueError):
        StepSchedule("cosine", 1.0)


def test_replay_fifo_eviction():
    buf = ReplayBuffer(5, 1, 1)
    for i in range(8):
        buf.add([i], [i], i, [i + 1], False)
    f, a, r, f2, d = buf.contents()
    assert len(buf) == 5
    np.testing.assert_array_equal(r, [3, 4, 5, 6, 7])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 20), st.integers(0, 60), st.integers(1, 30))
def test_replay_capacity_and_sampling(cap, n, batch):
    buf = ReplayBuffer(cap, 2, 1, n_agents=2)
    for i in range(n):
        buf.add(np.full((2, 2), i), np.full((2, 1), i), [i, -i], np.zeros((2, 2)), False)
    assert len(buf) == min(cap, n)
    if n:
        _, _, r, _, _ = buf.sample(batch, np.random.default_rng(n))
        assert r.shape == (2, min(batch, len(buf)))
        assert len(set(r[0].tolist())) == r.shape[1]  # no repeats within a batch
        np.testing.assert_array_equal(r[1], -r[0])
        assert set(r[0].tolist()) <= set(range(max(0, n - cap), n))


def test_bellman_examples():
    mdp = TabularMDP(np.ones((3, 2, 3)) / 3, np.zeros((3, 2)), 0.9)
    np.testing.assert_array_equal(bellman_operator_oracle(mdp, np.zeros(3)), 0.0)
    one = TabularMDP(np.ones((1, 2, 1)), np.array([[1.0, 3.0]]), 0.9)
    assert bellman_operator_oracle(one, [10.0])[0] == pytest.approx(12.0, abs=1e-12)


def test_bellman_contraction():
    rng = np.random.default_rng(12)
    mdp = random_mdp(10, 4, 0.9, rng)
    for _ in range(200):
        V, W = rng.normal(scale=10, size=(2, 10))
        lhs = np.max(np.abs(bellman_operator_oracle(mdp, V) - bellman_operator_oracle(mdp, W)))
        assert lhs <= 0.9 * np.max(np.abs(V - W)) + 1e-12


# --- checkpoints and the multi-agent wrapper --------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(13)
    net = init_mlp([3, 4, 2], rng, ensemble=2)
    save_checkpoint(tmp_path, {"policy": net}, {"log_std": rng.normal(size=(2, 1, 2))}, {"step": 5})
    nets, arrays, meta = load_checkpoint(tmp_path)
    for p, q in zip(net.params(), nets["policy"].params()):
        assert p.tobytes() == q.tobytes()
    assert meta["step"] == 5 and arrays["log_std"].shape == (2, 1, 2)
    with pytest.raises(CheckpointError, match=r"\[3, 8, 2\]"):
        load_checkpoint(tmp_path, {"policy": [3, 8, 2]})
    (tmp_path / "policy.bin").write_bytes(b"\x00" * 8)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)


def run_learner(seed):
    cfg = LearnerConfig(hidden=(8,), buffer_capacity=100, batch_size=16, warmup=20)
    L = MultiAgentLearner(3, 4, 2, cfg, [np.random.default_rng(seed)])
    rng = np.random.default_rng(seed + 1)
    f = rng.normal(size=(1, 3, 4))
    for t in range(60):
        a = L.act(f)
        f2 = rng.normal(size=(1, 3, 4))
        L.observe(f, a, rng.normal(size=(1, 3)), f2, t % 20 == 19)
        f = f2
    return L


def test_learner_step_bit_reproducible(tmp_path):
    A, B = run_learner(3), run_learner(3)
    assert A.updates[0] == 41
    for p, q in zip(A.policy.net.params() + A.critic.net.params(), B.policy.net.params() + B.critic.net.params()):
        assert p.tobytes() == q.tobytes()
    A.save(tmp_path)
    C = MultiAgentLearner(3, 4, 2, A.cfg, np.random.default_rng(0))
    C.load(tmp_path)
    f = np.ones((1, 3, 4))
    assert A.act(f, True).tobytes() == C.act(f, True).tobytes()
    D = MultiAgentLearner(2, 4, 2, A.cfg, np.random.default_rng(0))
    with pytest.raises(CheckpointError):
        D.load(tmp_path)
