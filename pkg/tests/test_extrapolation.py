import numpy as np
import pytest

from lle import canonical as canon
from lle import diffusion as dif
from lle import extrapolation as lle
from lle import operators as ops
from lle.numerics import RngStream

from conftest import random_mixture


def mask_obs(prior, seed=100, sigma_y=0.05, keep=(0, 2, 4)):
    op = ops.mask_operator(prior.d, list(keep))
    truth = prior.sample(RngStream(seed), 1)[0]
    y = ops.observe(op, truth, sigma_y, RngStream(seed, 1))
    return ops.Observation(y=y, op=op, sigma_y=sigma_y), truth


# ---------------------------------------------------------------------------
# losses and plugin
# ---------------------------------------------------------------------------


def test_loss_is_squared_error():
    x = np.array([1.0, 2.0])
    gt = np.array([0.0, 0.0])
    assert lle.loss(x, gt) == 5.0
    with pytest.raises(ValueError):
        lle.loss(np.zeros(2), np.zeros(3))


def test_batch_loss_averages():
    xs = np.array([[1.0, 0.0], [0.0, 2.0]])
    gts = np.zeros((2, 2))
    assert lle.batch_loss(xs, gts) == pytest.approx(2.5)


def test_gradient_domain_plugin_shift_invariant():
    plugin = lle.GradientDomainPlugin()
    x = RngStream(101).standard_normal(8)
    ref = RngStream(102).standard_normal(8)
    v0, _ = plugin.value_and_grad(x, ref)
    v1, _ = plugin.value_and_grad(x + 3.0, ref)
    assert abs(v0 - v1) < 1e-12


def test_gradient_domain_plugin_grad_fd():
    plugin = lle.GradientDomainPlugin()
    stream = RngStream(103)
    x = stream.standard_normal(7)
    ref = stream.standard_normal(7)
    _, grad = plugin.value_and_grad(x, ref)
    h = 1e-6
    for i in range(7):
        e = np.zeros(7)
        e[i] = h
        fd = (plugin.value_and_grad(x + e, ref)[0] - plugin.value_and_grad(x - e, ref)[0]) / (2 * h)
        assert abs(grad[i] - fd) < 1e-6


def test_make_plugin_dispatch():
    assert lle.make_plugin("none") is None
    assert lle.make_plugin("gradient-domain").tag == "gradient-domain"
    with pytest.raises(ValueError):
        lle.make_plugin("lpips")


# ---------------------------------------------------------------------------
# combine and coefficients
# ---------------------------------------------------------------------------


def test_combine_identity_short_circuit():
    xhat = np.array([1.0, 2.0])
    hist = [np.array([5.0, 5.0])]
    out = lle.combine(np.array([0.0, 1.0]), hist, xhat)
    assert np.array_equal(out, xhat)
    assert out is not xhat  # a fresh copy, safe to mutate downstream


def test_combine_matches_manual_sum():
    stream = RngStream(104)
    hist = [stream.standard_normal(4) for _ in range(2)]
    xhat = stream.standard_normal(4)
    gamma = np.array([0.2, -0.3, 0.9])
    out = lle.combine(gamma, hist, xhat)
    expected = 0.9 * xhat + 0.2 * hist[0] - 0.3 * hist[1]
    assert np.max(np.abs(out - expected)) < 1e-14


def test_combine_length_check():
    with pytest.raises(ValueError):
        lle.combine(np.array([1.0]), [np.zeros(2)], np.zeros(2))


def test_combine_decoupled_requires_operator():
    with pytest.raises(ValueError):
        lle.combine(np.array([1.0]), [], np.zeros(4), gamma_perp=np.array([1.0]))


def test_combine_decoupled_replicated_equals_coupled():
    op = ops.mask_operator(5, [0, 3])
    stream = RngStream(105)
    hist = [stream.standard_normal(5)]
    xhat = stream.standard_normal(5)
    gamma = np.array([0.4, 0.7])
    coupled = lle.combine(gamma, hist, xhat)
    decoupled = lle.combine(gamma, hist, xhat, op=op, gamma_perp=gamma.copy())
    assert np.max(np.abs(coupled - decoupled)) < 1e-12


def test_coefficients_validation_and_identity(schedule):
    grid = dif.make_time_grid(schedule, 3)
    ident = lle.LLECoefficients.identity(grid)
    assert [g.tolist() for g in ident.gamma] == [[1.0], [0.0, 1.0], [0.0, 0.0, 1.0]]
    with pytest.raises(ValueError):
        lle.LLECoefficients(S=2, decoupled=False, timesteps=(1000, 500),
                            gamma=[np.array([1.0])])
    with pytest.raises(ValueError):
        lle.LLECoefficients(S=1, decoupled=False, timesteps=(1000,),
                            gamma=[np.array([np.nan])])


def test_coefficients_json_round_trip(schedule):
    grid = dif.make_time_grid(schedule, 3)
    stream = RngStream(106)
    gamma = [stream.standard_normal(i + 1) for i in range(3)]
    gperp = [stream.standard_normal(i + 1) for i in range(3)]
    coeffs = lle.LLECoefficients(S=3, decoupled=True, timesteps=grid.timesteps[:3],
                                 gamma=gamma, gamma_perp=gperp)
    back = lle.LLECoefficients.from_json(coeffs.to_json())
    assert back.S == 3 and back.decoupled
    for a, b in zip(back.gamma + back.gamma_perp, gamma + gperp):
        assert np.array_equal(a, b)


def test_coefficients_file_round_trip(tmp_path, schedule):
    grid = dif.make_time_grid(schedule, 2)
    coeffs = lle.LLECoefficients.identity(grid)
    path = tmp_path / "coeffs.json"
    coeffs.save(path)
    back = lle.LLECoefficients.load(path)
    assert back.timesteps == coeffs.timesteps


# ---------------------------------------------------------------------------
# per-timestep objective
# ---------------------------------------------------------------------------


def test_closed_form_matches_lstsq():
    stream = RngStream(107)
    bases = [stream.standard_normal((6, 4)) for _ in range(3)]
    x_gt = stream.standard_normal((6, 4))
    theta = lle.solve_ls_closed_form(bases, x_gt)
    B = np.stack([b.ravel() for b in bases], axis=1)
    expected, *_ = np.linalg.lstsq(B, x_gt.ravel(), rcond=None)
    assert np.max(np.abs(theta - expected)) < 1e-6


def test_gamma_gradient_fd():
    stream = RngStream(108)
    bases = [stream.standard_normal((4, 5)) for _ in range(3)]
    x_gt = stream.standard_normal((4, 5))
    theta = stream.standard_normal(3)
    plugin = lle.GradientDomainPlugin()
    grad = lle.loss_grad_gamma(bases, x_gt, theta, 0.3, plugin)
    h = 1e-6
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        fd = (
            lle.gamma_objective(bases, x_gt, theta + e, 0.3, plugin)
            - lle.gamma_objective(bases, x_gt, theta - e, 0.3, plugin)
        ) / (2 * h)
        assert abs(grad[j] - fd) < 1e-5


def test_train_timestep_monotone():
    stream = RngStream(109)
    bases = [stream.standard_normal((8, 3)) for _ in range(4)]
    x_gt = stream.standard_normal((8, 3))
    theta0 = np.array([0.0, 0.0, 0.0, 1.0])
    config = lle.TrainConfig(epochs=60, warmup=10)
    init_loss = lle.gamma_objective(bases, x_gt, theta0, 0.0, None)
    theta, trace = lle.train_timestep(bases, x_gt, theta0, config, lr_t=0.05, t_i=500)
    final = lle.gamma_objective(bases, x_gt, theta, 0.0, None)
    assert final <= init_loss + 1e-9
    assert trace[0] == pytest.approx(init_loss)
    assert min(trace) == pytest.approx(final)


def test_train_timestep_closed_form_is_optimal():
    stream = RngStream(110)
    bases = [stream.standard_normal((5, 4)) for _ in range(2)]
    x_gt = stream.standard_normal((5, 4))
    config = lle.TrainConfig(closed_form=True)
    theta, _ = lle.train_timestep(bases, x_gt, np.array([0.0, 1.0]), config, 0.01, 500)
    star = lle.solve_ls_closed_form(bases, x_gt)
    assert np.max(np.abs(theta - star)) < 1e-9


def test_train_timestep_detects_divergence():
    bases = [np.full((2, 2), np.nan)]
    with pytest.raises(lle.TrainingDivergedError):
        lle.train_timestep(bases, np.zeros((2, 2)), np.array([1.0]),
                           lle.TrainConfig(), 0.01, 250)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def test_init_first_timestep_is_identity():
    g = lle.init_coeffs(0, [], np.zeros((2, 3)), np.zeros((2, 3)),
                        "adaptive-linear", 0.5, RngStream(0))
    assert np.array_equal(g, [1.0])


def test_init_prefers_better_estimate():
    gt = np.zeros((4, 3))
    good = 0.01 * np.ones((4, 3))
    bad = np.ones((4, 3))
    stream = RngStream(111)
    # latest estimate better -> one-hot on it
    g = lle.init_coeffs(1, [bad], good, gt, "adaptive-linear", 0.5, stream)
    assert g[1] == 1.0 and abs(g[0]) < 0.01
    # previous better -> adaptive-linear puts the mass there
    g = lle.init_coeffs(1, [good], bad, gt, "adaptive-linear", 0.5, stream)
    assert g[0] == 1.0 and abs(g[1]) < 0.01


def test_init_soft_nonlinear_split():
    gt = np.zeros((4, 3))
    good = 0.01 * np.ones((4, 3))
    bad = np.ones((4, 3))
    g = lle.init_coeffs(1, [good], bad, gt, "soft-nonlinear", 0.8, RngStream(112))
    assert g[0] == pytest.approx(0.8)
    assert g[1] == pytest.approx(0.2)


def test_init_decoupled_duplicates():
    g = lle.init_coeffs(0, [], np.zeros((2, 2)), np.zeros((2, 2)),
                        "adaptive-linear", 0.5, RngStream(113), decoupled=True)
    assert np.array_equal(g, [1.0, 1.0])


# ---------------------------------------------------------------------------
# ground truth variants
# ---------------------------------------------------------------------------


def test_noisy_gt_restricted_to_spectral_algorithms(schedule, small_prior):
    obs, truth = mask_obs(small_prior)
    with pytest.raises(canon.ConfigurationError):
        lle.make_ground_truth(canon.default_params("DPS"), small_prior, schedule,
                              obs, truth, 500, 250, noisy_gt=True)


def test_noisy_gt_is_corrector_of_x0(schedule, small_prior):
    obs, truth = mask_obs(small_prior)
    params = canon.default_params("DDNM")
    got = lle.make_ground_truth(params, small_prior, schedule, obs, truth,
                                500, 250, noisy_gt=True)
    ctx = canon.StepContext(x_t=truth, t_i=500, t_prev=250, prior=small_prior,
                            schedule=schedule, stream=RngStream(0),
                            x0_sampled=truth.copy())
    expected = canon.corr_ddnm(ctx, obs, params)
    assert np.max(np.abs(got - expected)) < 1e-12


def test_clean_gt_is_reference(schedule, small_prior):
    obs, truth = mask_obs(small_prior)
    got = lle.make_ground_truth(canon.default_params("DPS"), small_prior, schedule,
                                obs, truth, 500, 250, noisy_gt=False)
    assert np.array_equal(got, truth)


# ---------------------------------------------------------------------------
# training and inference end to end
# ---------------------------------------------------------------------------


def small_training_setup(algorithm="DDNM", **tc_kwargs):
    prior = random_mixture(120, 6, 2)
    schedule = dif.linear_beta_schedule()
    op = ops.mask_operator(6, [0, 2, 4])
    sigma_y = 0.05
    params = canon.default_params(algorithm)
    grid = dif.make_time_grid(schedule, 3)
    defaults = dict(n_refs=8, ref_steps=60, epochs=30, warmup=10, base_seed=7)
    defaults.update(tc_kwargs)
    tc = lle.TrainConfig(**defaults)

    def obs_builder(x0_batch, stream):
        y = ops.observe(op, x0_batch, sigma_y, stream)
        return ops.Observation(y=y, op=op, sigma_y=sigma_y)

    return params, prior, schedule, op, obs_builder, grid, tc


def test_train_produces_monotone_traces():
    params, prior, schedule, op, obs_builder, grid, tc = small_training_setup()
    coeffs, traces = lle.train(params, prior, schedule, obs_builder, grid, tc)
    assert coeffs.S == 3
    assert set(traces) == set(grid.timesteps[:3])
    for t, trace in traces.items():
        assert min(trace) <= trace[0] + 1e-9


def test_train_decoupled_produces_two_vectors():
    params, prior, schedule, op, obs_builder, grid, tc = small_training_setup(
        decoupled=True, closed_form=True
    )
    coeffs, _ = lle.train(params, prior, schedule, obs_builder, grid, tc)
    assert coeffs.decoupled and len(coeffs.gamma_perp) == 3


def test_identity_inference_is_bit_identical_to_base():
    params, prior, schedule, op, obs_builder, grid, tc = small_training_setup("DPS")
    obs = obs_builder(prior.sample(RngStream(5), 1), RngStream(6))
    obs = ops.Observation(y=obs.y[0], op=op, sigma_y=obs.sigma_y)
    base = canon.run(params, prior, schedule, obs, grid, seed=31)
    ident = lle.LLECoefficients.identity(grid)
    via_lle = lle.infer(params, prior, schedule, obs, grid, ident, seed=31)
    assert np.array_equal(base, via_lle)


def test_trained_inference_runs_and_differs():
    params, prior, schedule, op, obs_builder, grid, tc = small_training_setup(
        closed_form=True
    )
    coeffs, _ = lle.train(params, prior, schedule, obs_builder, grid, tc)
    truth = prior.sample(RngStream(8), 1)[0]
    y = ops.observe(op, truth, 0.05, RngStream(9))
    obs = ops.Observation(y=y, op=op, sigma_y=0.05)
    out = lle.infer(params, prior, schedule, obs, grid, coeffs, seed=12)
    assert np.all(np.isfinite(out))
    base = canon.run(params, prior, schedule, obs, grid, seed=12)
    assert not np.array_equal(out, base)


def test_infer_rejects_grid_mismatch(schedule, small_prior):
    grid3 = dif.make_time_grid(schedule, 3)
    grid4 = dif.make_time_grid(schedule, 4)
    obs, _ = mask_obs(small_prior)
    coeffs = lle.LLECoefficients.identity(grid3)
    with pytest.raises(canon.ConfigurationError):
        lle.infer(canon.default_params("DDNM"), small_prior, schedule, obs,
                  grid4, coeffs, seed=1)


def test_train_config_omega_resolution():
    assert lle.TrainConfig().resolved_omega() == 0.0
    assert lle.TrainConfig(plugin="gradient-domain").resolved_omega() == 0.1
    assert lle.TrainConfig(plugin="gradient-domain", omega=0.7).resolved_omega() == 0.7


def test_generate_references_shape_and_determinism(schedule, small_prior):
    tc = lle.TrainConfig(n_refs=4, ref_steps=40)
    a = lle.generate_references(small_prior, schedule, tc, RngStream(2, 11))
    b = lle.generate_references(small_prior, schedule, tc, RngStream(2, 11))
    assert a.shape == (4, 6)
    assert np.array_equal(a, b)


def test_learning_rate_rules(schedule):
    grid = dif.make_time_grid(schedule, 4)
    const = lle._learning_rate(lle.TrainConfig(), schedule, grid, 0)
    assert const == pytest.approx(0.04 / 4)
    dyn = lle._learning_rate(lle.TrainConfig(lr_rule="dynamic"), schedule, grid, 2)
    assert dyn == pytest.approx(0.2 * schedule.alphabar(750) / 4)
    with pytest.raises(ValueError):
        lle._learning_rate(lle.TrainConfig(lr_rule="cosine"), schedule, grid, 0)
