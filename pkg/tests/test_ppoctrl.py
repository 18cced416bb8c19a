import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rffkd import ppoctrl
from rffkd.distill import DistillConfig, EpochMetrics
from rffkd.featurizer import build_dataset
from rffkd.models import Student, StudentConfig
from rffkd.numcore import Adam, backward, finite_difference_check, ops
from rffkd.ppoctrl import (ActionSample, ControllerConfig, ControllerState, PolicyNets, RolloutBuffer,
                           actor_loss, clipped_objective, dynamic_distill, entropy_bonus, gae, gaussian_entropy,
                           map_temperature, normalize_advantages, policy_update, reward, sample_action,
                           state_features)
from rffkd.sigmodel import ChannelConfig, DeviceFingerprint


def gae_oracle(rewards, values, v_next, gamma, lam):
    v = list(values) + [v_next]
    delta = [rewards[t] + gamma * v[t + 1] - v[t] for t in range(len(rewards))]
    return np.array([sum((gamma * lam) ** k * delta[t + k] for k in range(len(delta) - t))
                     for t in range(len(delta))])


# ---- state

def test_constant_history():
    s = state_features([0.5, 0.5, 0.5], [0.2, 0.2, 0.2], 1, 10, 5)
    assert (s.acc_mean, s.acc_std, s.acc_rate) == (0.5, 0.0, 0.0)


def test_linear_history_slope():
    s = state_features([0.1, 0.2, 0.3], [0.3, 0.2, 0.1], 0, 10, 3)
    assert s.acc_rate == pytest.approx(0.1, abs=1e-12)
    assert s.kl_rate == pytest.approx(-0.1, abs=1e-12)


def test_progress():
    assert state_features([0.1], [0.1], 50, 100, 5).progress == 0.5


def test_window_uses_last_k():
    s = state_features([9.0, 9.0, 1.0, 2.0, 3.0], [0.0] * 5, 0, 1, 3)
    assert s.acc_mean == pytest.approx(2.0)
    assert s.acc_std == pytest.approx(np.std([1.0, 2.0, 3.0]))


def test_empty_history_rejected():
    with pytest.raises(ValueError):
        state_features([], [0.1], 0, 1, 3)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=12), st.lists(st.floats(0, 5), min_size=1, max_size=12),
       st.integers(1, 8), st.integers(0, 50))
def test_state_invariants(acc, kl, k, epoch):
    s = state_features(acc, kl, epoch, 50, k)
    v = s.vector()
    assert v.shape == (7,) and np.all(np.isfinite(v))
    assert s.acc_std >= 0 and s.kl_std >= 0 and 0 <= s.progress <= 1
    w = np.asarray(acc[-min(k, len(acc)):])
    if w.size > 1:
        assert s.acc_rate == pytest.approx(np.polyfit(np.arange(w.size), w, 1)[0], abs=1e-9)


# ---- policy

def nets(seed=0, **kw):
    return PolicyNets(ControllerConfig(**kw), np.random.default_rng(seed))


def test_deterministic_limit():
    n = nets()
    n.actor["log_sigma.b"].data[:] = -100.0
    s = np.random.default_rng(1).normal(size=7)
    out = sample_action(s, n, np.random.default_rng(2))
    assert out.sigma == 1e-6
    assert out.action == pytest.approx(min(max(out.mu, 0.0), 1.0), abs=1e-5)


def test_sampling_reproducible():
    s = np.linspace(0, 1, 7)
    a = sample_action(s, nets(), np.random.default_rng(3))
    b = sample_action(s, nets(), np.random.default_rng(3))
    assert a == b


def test_log_prob_closed_form():
    out = sample_action(np.zeros(7), nets(), np.random.default_rng(4))
    z = (out.pre_clip - out.mu) / out.sigma
    assert out.log_prob == pytest.approx(-0.5 * z * z - math.log(out.sigma) - 0.5 * math.log(2 * math.pi),
                                         abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.booleans())
def test_action_in_unit_interval(seed, clamp):
    rng = np.random.default_rng(seed)
    n = nets(seed % 7, init_sigma=2.0)
    out = sample_action(rng.normal(size=7), n, rng, (0.01, 0.1) if clamp else None)
    assert 0.0 <= out.action <= 1.0
    if clamp:
        assert 0.01 <= out.sigma <= 0.1


def test_recomputed_log_prob_matches_sample():
    cfg = ControllerConfig()
    n = nets()
    rng = np.random.default_rng(5)
    buf = RolloutBuffer(4)
    for i in range(4):
        clamp = i >= 2
        s = rng.normal(size=7)
        smp = sample_action(s, n, rng, tuple(cfg.sigma_clip) if clamp else None)
        buf.push(s, smp, 0.0, 0.0, clamp)
    mu, log_sigma = n.heads(np.stack(buf.states), (cfg.sigma_clip, buf.clamped))
    lp = ops.gaussian_log_prob(np.array(buf.pre_clip), mu, log_sigma).data
    np.testing.assert_allclose(lp, buf.log_probs, atol=1e-12, rtol=0)
    ratio = clipped_objective(lp, np.array(buf.log_probs), np.ones(4), cfg.clip).data
    np.testing.assert_array_equal(ratio, np.ones(4))


# ---- temperature, reward

def test_map_temperature():
    assert map_temperature(0.0, 1, 10) == 1
    assert map_temperature(1.0, 1, 10) == 10
    assert map_temperature(0.5, 1, 9) == 5.0
    with pytest.raises(ValueError):
        map_temperature(1.2, 1, 10)


def test_reward_zero_point():
    cfg = ControllerConfig()
    assert reward(cfg.xi_base, cfg.k_target, 3.0, 3.0, cfg) == 0.0


def test_reward_hand_value():
    cfg = ControllerConfig()
    r = reward(0.9, 0.2, 4.0, 3.5, cfg)
    assert r == pytest.approx(0.1 - 0.5 * math.log(1.1) - 0.05, abs=1e-12)
    assert r == pytest.approx(0.002345, abs=1e-6)


def test_reward_clipped():
    cfg = ControllerConfig(reward_weights=(100.0, -0.5, -0.1))
    assert reward(1.0, 0.1, 1.0, 1.0, cfg) == 1.0
    assert reward(0.0, 0.1, 1.0, 1.0, cfg) == -1.0


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 2), st.floats(0, 1))
def test_reward_symmetric_in_kl_error(d, xi):
    cfg = ControllerConfig()
    assert reward(xi, cfg.k_target + d, 2, 2, cfg) == pytest.approx(reward(xi, cfg.k_target - d, 2, 2, cfg),
                                                                    abs=1e-12)


# ---- GAE

def test_gae_single_step():
    assert gae([1.5], [0.4], 0.0, 0.99)[0] == pytest.approx(1.1, abs=1e-15)


def test_gae_hand_value():
    adv = gae([1, 1, 1], [0.5, 0.5, 0.5], 0.0, 0.9, 1.0)
    np.testing.assert_allclose(adv, [2.21, 1.40, 0.5], atol=1e-12)


def test_gae_gamma_zero_is_td_residual():
    rng = np.random.default_rng(0)
    r, v = rng.normal(size=6), rng.normal(size=6)
    np.testing.assert_array_equal(gae(r, v, 0.7, 0.0), r - v)


def test_gae_matches_direct_sum_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n = int(rng.integers(1, 11))
        r, v = rng.normal(size=n), rng.normal(size=n)
        vn, gamma, lam = rng.normal(), rng.uniform(0.5, 1), rng.uniform(0, 1)
        assert np.max(np.abs(gae(r, v, vn, gamma, lam) - gae_oracle(r, v, vn, gamma, lam))) < 1e-12


def test_gae_length_mismatch():
    with pytest.raises(ValueError):
        gae([1, 2], [0.1], 0.0, 0.9)


# ---- surrogate and entropy

def test_clipped_objective_examples():
    def at(r, a):
        return clipped_objective(np.array([math.log(r)]), np.array([0.0]), np.array([a]), 0.2).data[0]

    assert at(1.0, 1.7) == 1.7
    assert at(1.5, 2.0) == pytest.approx(2.4, abs=1e-12)
    assert at(0.5, -1.0) == pytest.approx(-0.8, abs=1e-12)


def test_clipped_objective_grid_exact():
    kappa = 0.2
    lr = np.log(np.linspace(0.5, 1.5, 11))
    adv = np.linspace(-2, 2, 9)
    new, old, a = np.repeat(lr, adv.size), np.zeros(lr.size * adv.size), np.tile(adv, lr.size)
    got = clipped_objective(new, old, a, kappa).data
    r = np.exp(new - old)
    expected = np.where(a >= 0, np.where(r > 1 + kappa, (1 + kappa) * a, r * a),
                        np.where(r < 1 - kappa, (1 - kappa) * a, r * a))
    np.testing.assert_array_equal(got, expected)


def test_entropy_values():
    assert gaussian_entropy(1.0) == pytest.approx(1.418939, abs=1e-6)
    assert gaussian_entropy(0.05) == pytest.approx(-1.576794, abs=1e-6)
    with pytest.raises(ValueError):
        gaussian_entropy(0.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-4, 10), st.floats(1e-4, 10))
def test_entropy_increasing(a, b):
    if a < b:
        assert gaussian_entropy(a) < gaussian_entropy(b)


# ---- update

def filled_buffer(n_steps, seed=0, equal_rewards=False, cfg=None, weight_scale=None):
    cfg = cfg or ControllerConfig()
    n = PolicyNets(cfg, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    if weight_scale is not None:
        for p in n.actor_params():
            p.data = rng.normal(scale=weight_scale, size=p.shape)
    buf = RolloutBuffer(n_steps)
    for i in range(n_steps):
        s = rng.normal(size=7)
        smp = sample_action(s, n, rng)
        buf.push(s, smp, 1.0 if equal_rewards else rng.normal(), float(n.value(s).data[0]), False)
    return n, buf


def test_normalize_guard():
    np.testing.assert_array_equal(normalize_advantages(np.array([2.0, 2.0])), [0.0, 0.0])
    out = normalize_advantages(np.array([1.0, 3.0]))
    np.testing.assert_allclose(out, [-1.0, 1.0], atol=1e-7)


def test_equal_advantages_leave_entropy_gradient_only():
    cfg = ControllerConfig()
    n, buf = filled_buffer(1, seed=2, cfg=cfg)
    adv = normalize_advantages(np.array([0.7]))
    assert adv[0] == 0.0
    g_full = backward(actor_loss(n, buf, adv, cfg), n.actor_params())
    _, log_sigma = n.heads(np.stack(buf.states), (cfg.sigma_clip, buf.clamped))
    g_ent = backward(-(entropy_bonus(log_sigma).mean() * cfg.entropy_coef), n.actor_params())
    for a, b in zip(g_full, g_ent):
        np.testing.assert_allclose(a, b, atol=1e-15)


@pytest.mark.parametrize("seed", range(3))
def test_actor_loss_gradient_fd(seed):
    cfg = ControllerConfig()
    # random weights of ordinary scale; the small output-head init leaves some gradients
    # near 1e-9, where central differences are dominated by roundoff
    n, buf = filled_buffer(1, seed=seed, cfg=cfg, weight_scale=0.5)
    adv = np.array([0.8])
    for name, p in n.actor.items():
        def f(w, name=name):
            old = n.actor[name]
            n.actor[name] = w
            try:
                return actor_loss(n, buf, adv, cfg)
            finally:
                n.actor[name] = old

        assert finite_difference_check(f, p.data.copy()) < 1e-4, name


def run_update(seed):
    cfg = ControllerConfig()
    n, buf = filled_buffer(8, seed=seed, cfg=cfg)
    policy_update(buf, n, cfg, Adam(n.actor_params(), lr=cfg.lr), Adam(n.critic_params(), lr=cfg.lr), 0.3)
    return n, buf


def test_update_deterministic_and_clears_buffer():
    (a, buf_a), (b, _) = run_update(4), run_update(4)
    assert len(buf_a) == 0 and not buf_a.states and not buf_a.log_probs
    sa, sb = a.state_dict(), b.state_dict()
    for k in sa:
        np.testing.assert_array_equal(sa[k], sb[k])


def test_update_moves_weights():
    cfg = ControllerConfig()
    n, buf = filled_buffer(8, seed=6, cfg=cfg)
    before = n.state_dict()
    policy_update(buf, n, cfg, Adam(n.actor_params(), lr=cfg.lr), Adam(n.critic_params(), lr=cfg.lr))
    after = n.state_dict()
    assert any(not np.array_equal(before[k], after[k]) for k in before)


def test_buffer_capacity():
    buf = RolloutBuffer(1)
    smp = ActionSample(0.5, 0.5, 0.0, 0.5, 0.1)
    buf.push(np.zeros(7), smp, 0.0, 0.0, False)
    assert buf.full
    with pytest.raises(RuntimeError):
        buf.push(np.zeros(7), smp, 0.0, 0.0, False)


def test_config_validation():
    for bad in (dict(tau_min=5, tau_max=2), dict(gamma=0.0), dict(clip=1.0), dict(sigma_clip=(0.2, 0.1))):
        with pytest.raises(ValueError):
            ControllerConfig(**bad).validate()


# ---- dynamic loop

@pytest.fixture(scope="module")
def toy():
    fleet = [DeviceFingerprint(0, 0.6, 1.0, 50.0), DeviceFingerprint(1, 1.0, 4.0, 400.0)]
    ch = ChannelConfig(ricean_k=math.inf, noise_var=0.0, n_samples=512, los_phase=0.0)
    data = build_dataset(fleet, ch, 60, np.random.default_rng(0))
    teacher = Student(StudentConfig(num_classes=2), np.random.default_rng(9))
    return data, teacher.predict_logits(data.train.x)


def run_dynamic(toy, epochs=6, ccfg=None, beta=0.5):
    data, tl = toy
    s = Student(StudentConfig(channels=(4, 8), strides=(2, 2), num_classes=2), np.random.default_rng(0))
    ccfg = ccfg or ControllerConfig(horizon=4, a_base=0.5)
    res = dynamic_distill(s, tl, data, DistillConfig(epochs=epochs, beta=beta, kd_mode="dynamic"), ccfg,
                          np.random.default_rng(1), np.random.default_rng(2))
    return s, res


def test_dynamic_ranges_and_clamp(toy):
    ccfg = ControllerConfig(horizon=4, a_base=0.5, init_sigma=0.5)
    _, res = run_dynamic(toy, ccfg=ccfg)
    taus = res.controller.column("tau")
    assert len(taus) == 6 and all(ccfg.tau_min <= t <= ccfg.tau_max for t in taus)
    crossed = False
    for row in res.controller.rows:
        if crossed:
            assert 0.01 <= row["sigma"] <= 0.1 and row["clamped"]
        crossed = crossed or row["val_acc"] > ccfg.a_base
    assert res.trace.column("reward") == res.controller.column("reward")
    assert len(res.updates) == 2  # one full buffer of 4, then a partial one at the end


def test_dynamic_deterministic(toy):
    (s1, r1), (s2, r2) = run_dynamic(toy, epochs=3), run_dynamic(toy, epochs=3)
    assert r1.controller.rows == r2.controller.rows
    for k, v in s1.state_dict().items():
        np.testing.assert_array_equal(v, s2.params[k].data)


def test_dynamic_beta_zero_matches_supervised(toy):
    from rffkd.distill import train_supervised
    data, _ = toy
    s_dyn, _ = run_dynamic(toy, epochs=2, beta=0.0)
    s_sup = Student(StudentConfig(channels=(4, 8), strides=(2, 2), num_classes=2), np.random.default_rng(0))
    train_supervised(s_sup, data, DistillConfig(epochs=2, kd_mode="none"), np.random.default_rng(1))
    for k, v in s_sup.state_dict().items():
        np.testing.assert_array_equal(v, s_dyn.params[k].data)


def test_non_finite_telemetry_holds_tau(toy, monkeypatch):
    real = ppoctrl.distill_epoch
    calls = []

    def flaky(*args, **kw):
        m = real(*args, **kw)
        calls.append(1)
        if len(calls) == 2:
            return EpochMetrics(m.batch_acc, m.train_acc, m.ce, float("nan"), m.val_acc)
        return m

    monkeypatch.setattr(ppoctrl, "distill_epoch", flaky)
    _, res = run_dynamic(toy, epochs=4, ccfg=ControllerConfig(horizon=4, window=2))
    rows = res.controller.rows
    assert rows[1]["reward"] == 0.0 and res.trace.records[1].kl is None
    assert rows[2]["held"] and rows[2]["tau"] == rows[1]["tau"]
    assert rows[3]["held"] and rows[3]["tau"] == rows[1]["tau"]
    assert all(math.isfinite(r) for r in res.trace.column("reward"))


def test_controller_csv(tmp_path, toy):
    _, res = run_dynamic(toy, epochs=2)
    res.controller.to_csv(tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0].split(",") == list(ppoctrl.CONTROLLER_COLUMNS)
    assert len(lines) == 3


def test_state_type_fields():
    s = ControllerState(*range(7))
    assert list(s.vector()) == list(range(7))
