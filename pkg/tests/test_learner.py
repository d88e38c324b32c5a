import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from adaptive_cbf.learner.lagrange import LagrangeState, pid_lagrange_update, smooth_cost
from adaptive_cbf.learner.model import ActorCritic, ModelSpec, log_logistic_jacobian, logistic
from adaptive_cbf.learner.ppo import PPOConfig, clipped_surrogate, clipped_value_loss, normalize, ppo_loss, ppo_update
from adaptive_cbf.learner.rollout import RolloutBuffer, gae
from adaptive_cbf.numkit import Adam
from oracles import brute_returns, central_fd, isolated_loss, pid_trace, random_minibatch, random_model, relative_error

# --- model ---------------------------------------------------------------


def test_fresh_model_emits_half_gamma():
    model = ActorCritic(ModelSpec(7, 2, 2), np.random.default_rng(0))
    out = model.act(np.random.default_rng(1).normal(size=(4, 7)), np.random.default_rng(2), deterministic=True)
    np.testing.assert_array_equal(out.gamma, 0.5)


def test_deterministic_mode_returns_means():
    rng = np.random.default_rng(3)
    model = random_model(rng)
    obs = rng.normal(size=(6, 5))
    h = model.heads(obs)
    out = model.act(obs, rng, deterministic=True)
    np.testing.assert_array_equal(out.action, h["mu"])
    np.testing.assert_allclose(out.gamma, 1 / (1 + np.exp(-h["mg"])), rtol=1e-14)


@pytest.mark.parametrize("alpha", [0.0, 0.5])
def test_joint_log_prob_is_sum_of_head_densities(alpha):
    rng = np.random.default_rng(4)
    model = random_model(rng, alpha=alpha)
    obs = rng.normal(size=(5, 5))
    out = model.act(obs, rng)
    h = model.heads(obs)
    std_a = np.exp(model.params[model.slices["log_std_pi"]])
    std_g = np.exp(model.params[model.slices["log_std_gamma"]])
    lp_a = stats.norm.logpdf(out.action, h["mu"] + out.shift_a, std_a).sum(axis=1)
    lp_g = stats.norm.logpdf(out.g, h["mg"] + out.shift_g, std_g).sum(axis=1)
    # density of gamma itself: divide by the logistic derivative gamma (1 - gamma)
    lp_gamma = lp_g - np.log(out.gamma * (1 - out.gamma)).sum(axis=1)
    np.testing.assert_allclose(out.log_prob, lp_a + lp_gamma, rtol=1e-10)


@given(st.floats(-30, 30))
def test_logistic_and_jacobian(x):
    y = logistic(x)
    assert 0.0 <= y <= 1.0
    if abs(x) < 20:
        assert log_logistic_jacobian(x) == pytest.approx(np.log(y * (1 - y)), rel=1e-9, abs=1e-12)


def test_emitted_gamma_always_in_unit_interval():
    rng = np.random.default_rng(5)
    model = random_model(rng)
    model.params[model.slices["log_std_gamma"]] = 2.0
    out = model.act(rng.normal(size=(2000, 5)) * 10, rng)
    assert np.all((out.gamma >= 0) & (out.gamma <= 1))


def test_load_params_shape_check():
    model = ActorCritic(ModelSpec(3, 1, 1), np.random.default_rng(0))
    with pytest.raises(ValueError):
        model.load_params(np.zeros(3))
    p = model.params.copy() + 1
    model.load_params(p)
    np.testing.assert_array_equal(model.state_dict()["params"], p)


def test_ablation_model_has_no_policy_head():
    model = ActorCritic(ModelSpec(4, 0, 1, perturb_alpha=0.5), np.random.default_rng(0))
    assert model.pi_head is None and model.perturbed
    out = model.act(np.zeros((3, 4)), np.random.default_rng(1))
    assert out.action.shape == (3, 0)
    assert np.all(np.isfinite(out.log_prob))


# --- GAE -----------------------------------------------------------------


def test_gae_lambda_zero_is_td_error():
    rng = np.random.default_rng(0)
    r, v = rng.normal(size=20), rng.normal(size=20)
    dones = (rng.random(20) < 0.2).astype(float)
    adv, ret = gae(r, v, dones, 0.7, 0.99, 0.0)
    nxt = np.append(v[1:], 0.7)
    td = r + 0.99 * nxt * (1 - dones) - v
    assert np.array_equal(adv, td)
    assert np.array_equal(ret, adv + v)


@given(st.integers(0, 10_000))
def test_gae_lambda_one_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    T = int(rng.integers(1, 40))
    r, v = rng.normal(size=T), rng.normal(size=T)
    dones = np.zeros(T)
    dones[-1] = 1.0
    adv, _ = gae(r, v, dones, 123.0, 0.99, 1.0)
    np.testing.assert_allclose(adv, brute_returns(r, v, 0.99), rtol=0, atol=1e-10)


def test_gae_zeros_and_batched_shape():
    adv, ret = gae(np.zeros((5, 3)), np.zeros((5, 3)), np.zeros((5, 3)), np.zeros(3), 0.99, 0.95)
    assert adv.shape == (5, 3) and np.all(adv == 0) and np.all(ret == 0)
    with pytest.raises(ValueError):
        gae(np.zeros(3), np.zeros(4), np.zeros(3), 0.0, 0.99, 0.95)


def test_gae_episode_boundary_blocks_bootstrap():
    r = np.array([1.0, 0.0, 0.0])
    v = np.array([0.0, 5.0, 5.0])
    adv, _ = gae(r, v, np.array([1.0, 0.0, 0.0]), 0.0, 0.9, 0.95)
    assert adv[0] == 1.0  # the next state's value 5.0 belongs to a new episode


def test_rollout_buffer():
    rng = np.random.default_rng(0)
    model = random_model(rng, obs_dim=3, act_dim=2, n_gamma=1)
    buf = RolloutBuffer(4, 2, 3, 2, 1)
    for _ in range(4):
        obs = rng.normal(size=(2, 3))
        out = model.act(obs, rng)
        buf.add(obs, out, np.ones(2), np.zeros(2), np.zeros(2))
    assert buf.full
    with pytest.raises(IndexError):
        buf.add(obs, out, np.ones(2), np.zeros(2), np.zeros(2))
    batch = buf.finish(np.zeros(2), np.zeros(2), 0.99, 0.95)
    assert batch["obs"].shape == (8, 3) and batch["adv_r"].shape == (8,)
    assert np.all(batch["adv_c"] + batch["v_c"] == batch["ret_c"])
    bad = model.act(obs, rng)
    bad.log_prob[0] = np.nan
    with pytest.raises(FloatingPointError):
        RolloutBuffer(1, 2, 3, 2, 1).add(obs, bad, np.ones(2), np.zeros(2), np.zeros(2))


# --- PPO -----------------------------------------------------------------


def test_clip_arithmetic():
    val, d = clipped_surrogate(1.5, 1.0, 0.2)
    assert val == pytest.approx(1.2) and d == 0.0
    val, d = clipped_surrogate(1.5, -1.0, 0.2)
    assert val == -1.5 and d == -1.0
    val, d = clipped_surrogate(0.5, -1.0, 0.2)
    assert val == pytest.approx(-0.8) and d == 0.0
    val, d = clipped_surrogate(1.1, 2.0, 0.2)
    assert val == pytest.approx(2.2) and d == 2.0


@given(st.floats(0.01, 5), st.floats(-5, 5))
def test_clipped_ratio_never_exploited(ratio, adv):
    val, _ = clipped_surrogate(ratio, adv, 0.2)
    assert val <= np.clip(ratio, 0.8, 1.2) * adv + 1e-12
    assert val <= ratio * adv + 1e-12


def test_value_clipping():
    loss, grad = clipped_value_loss(np.array([2.0]), np.array([0.0]), np.array([1.0]), 0.2)
    # unclipped error 1.0 beats the clipped one (0.2 - 1.0)^2 = 0.64
    assert loss[0] == 1.0 and grad[0] == 2.0
    # overshooting the target: the clipped prediction 0.2 is worse and has no gradient
    loss, grad = clipped_value_loss(np.array([2.0]), np.array([0.0]), np.array([1.5]), 0.2)
    assert loss[0] == pytest.approx(1.69) and grad[0] == 0.0
    loss, grad = clipped_value_loss(np.array([3.0]), np.array([0.0]), np.array([1.0]), 0.2, clip=False)
    assert loss[0] == 4.0 and grad[0] == 4.0


def test_normalization_modes():
    a = np.array([1.0, 2.0, 3.0, 6.0])
    n = normalize(a)
    assert n.mean() == pytest.approx(0.0, abs=1e-12) and n.std() == pytest.approx(1.0, rel=1e-6)
    c = normalize(a, center=False)
    assert np.all(c > 0) and c.std() == pytest.approx(1.0, rel=1e-6)


def test_unit_ratio_gives_mean_advantage():
    rng = np.random.default_rng(0)
    model = random_model(rng)
    mb = random_minibatch(model, rng, logp_noise=0.0)
    info, _ = ppo_loss(model, mb, 0.0, PPOConfig(norm_adv=False, norm_cost=False), need_grad=False)
    assert info.L_R == pytest.approx(np.mean(mb["adv_r"]), rel=1e-12)
    assert info.L_C == pytest.approx(np.mean(mb["adv_c"]), rel=1e-12)
    assert info.approx_kl == pytest.approx(0.0, abs=1e-12) and info.clip_frac == 0.0


@pytest.mark.parametrize("alpha", [0.0, 0.5])
def test_lambda_zero_is_plain_ppo_bit_exact(alpha):
    rng = np.random.default_rng(1)
    model = random_model(rng, alpha=alpha)
    mb = random_minibatch(model, rng)
    cfg = PPOConfig()
    a_info, a_grad = ppo_loss(model, mb, 0.0, cfg, use_cost=True)
    b_info, b_grad = ppo_loss(model, mb, 0.0, cfg, use_cost=False)
    assert a_info.total == b_info.total
    assert np.array_equal(a_grad, b_grad)


def test_two_stream_symmetry():
    rng = np.random.default_rng(2)
    model = random_model(rng)
    mb = random_minibatch(model, rng)
    cfg = PPOConfig(norm_adv=False, norm_cost=False)
    swapped = dict(mb, adv_r=mb["adv_c"], adv_c=mb["adv_r"])
    a, _ = ppo_loss(model, mb, 0.7, cfg, need_grad=False)
    b, _ = ppo_loss(model, swapped, -0.7, cfg, need_grad=False)
    assert a.L_R == b.L_C and a.L_C == b.L_R


def test_lambda_scaling_option():
    rng = np.random.default_rng(3)
    model = random_model(rng)
    mb = random_minibatch(model, rng)
    plain, _ = ppo_loss(model, mb, 3.0, PPOConfig(vf_coef=0.0), need_grad=False)
    scaled, _ = ppo_loss(model, mb, 3.0, PPOConfig(vf_coef=0.0, lambda_scaling=True), need_grad=False)
    assert scaled.total == pytest.approx(plain.total / 4.0, rel=1e-12)


@pytest.mark.parametrize("part", ["L_R", "L_C", "critic", "entropy"])
@pytest.mark.parametrize("alpha,act_dim", [(0.0, 2), (0.5, 2), (0.5, 0)])
def test_loss_gradients_match_finite_differences(part, alpha, act_dim):
    rng = np.random.default_rng(hash((part, alpha, act_dim)) % 2**32)
    model = random_model(rng, act_dim=act_dim, alpha=alpha)
    mb = random_minibatch(model, rng)
    loss, grad = isolated_loss(part, model, mb)
    assert relative_error(grad, central_fd(loss, model.params)) < 1e-4


def test_update_improves_surrogate_and_anneals():
    rng = np.random.default_rng(4)
    model = random_model(rng)
    batch = random_minibatch(model, rng, batch=64, logp_noise=0.0)
    cfg = PPOConfig(n_minibatches=4, update_epochs=4)
    opt = Adam(model.n_params, lr=3e-4)
    before, _ = ppo_loss(model, batch, 0.5, cfg, need_grad=False)
    stats_ = ppo_update(model, opt, batch, 0.5, cfg, np.random.default_rng(0))
    after, _ = ppo_loss(model, batch, 0.5, cfg, need_grad=False)
    assert not stats_.aborted and stats_.n_minibatches == 16
    assert after.total < before.total
    assert stats_.grad_norm > 0
    frozen = model.params.copy()
    ppo_update(model, opt, batch, 0.5, cfg, np.random.default_rng(0), lr_scale=0.0)
    np.testing.assert_array_equal(model.params, frozen)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts_and_restores():
    rng = np.random.default_rng(5)
    model = random_model(rng)
    batch = random_minibatch(model, rng, batch=32)
    batch["ret_r"][3] = np.inf
    opt = Adam(model.n_params, lr=3e-4)
    snapshot = (model.params.copy(), opt.m.copy(), opt.v.copy(), opt.step_count)
    out = ppo_update(model, opt, batch, 0.5, PPOConfig(n_minibatches=2), np.random.default_rng(0))
    assert out.aborted
    np.testing.assert_array_equal(model.params, snapshot[0])
    np.testing.assert_array_equal(opt.m, snapshot[1])
    assert opt.step_count == snapshot[3]


def test_too_few_samples_for_minibatches():
    rng = np.random.default_rng(6)
    model = random_model(rng)
    with pytest.raises(ValueError):
        ppo_update(model, Adam(model.n_params), random_minibatch(model, rng, batch=4), 0.0, PPOConfig(),
                   np.random.default_rng(0))


# --- PID multiplier ------------------------------------------------------


def test_pid_on_limit_first_call_is_zero():
    st_ = LagrangeState()
    assert pid_lagrange_update(st_, 0.25, 0.25) == 0.0


def test_pid_hand_example():
    st_ = LagrangeState(kp=10, ki=0.1, kd=0.1, prev_cost=0.25)
    lam = pid_lagrange_update(st_, 0.35, 0.25)
    assert lam == pytest.approx(10 * 0.1 + 0.1 * 0.1 + 0.1 * 0.1, rel=1e-12)
    assert lam == pytest.approx(1.02, rel=1e-12)


def test_pid_ten_step_trace_exact():
    costs = [0.3, 0.5, 0.45, 0.2, 0.1, 0.0, 0.6, 0.9, 0.25, 0.26]
    st_ = LagrangeState(kp=10, ki=0.1, kd=0.1)
    got = [pid_lagrange_update(st_, j, 0.25) for j in costs]
    assert got == pid_trace(costs, 0.25, 10, 0.1, 0.1)
    assert got[0] == pytest.approx(10 * 0.05 + 0.1 * 0.05, rel=1e-12)
    assert got[1] == pytest.approx(10 * 0.25 + 0.1 * 0.30 + 0.1 * 0.2, rel=1e-12)
    assert all(0.0 <= x <= 100.0 for x in got)


def test_pid_persistent_violation():
    st_ = LagrangeState(kp=10, ki=0.1, kd=0.1, lam_max=5.0)
    integrals, lams = [], []
    for _ in range(200):
        lams.append(pid_lagrange_update(st_, 0.5, 0.25))
        integrals.append(st_.integral)
    assert np.all(np.diff(integrals) > 0)
    assert np.all(np.diff(lams) >= 0) and lams[-1] == 5.0


@given(st.lists(st.floats(0, 1), min_size=1, max_size=50))
def test_pid_lambda_bounds(costs):
    st_ = LagrangeState()
    for j in costs:
        lam = pid_lagrange_update(st_, j, 0.25)
        assert 0.0 <= lam <= 100.0 and st_.integral >= 0.0


def test_ema_convention():
    st_ = LagrangeState(ema_alpha=0.95)
    assert smooth_cost(st_, 0.4) == 0.4
    assert smooth_cost(st_, 0.0) == pytest.approx(0.05 * 0.4)
    with pytest.raises(ValueError):
        LagrangeState(ema_alpha=0.0)
    with pytest.raises(ValueError):
        LagrangeState(kp=-1)
