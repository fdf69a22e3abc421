"""Canonical Sampler/Corrector/Noiser form of nine diffusion inverse solvers.

One iteration from t_i to t_{i-1} is: denoise (sampler), enforce observation
consistency (corrector), re-noise to the next level (noiser). The driver
`run` iterates this down a time grid; `run_with_combiner` additionally lets
a callback replace the corrected estimate before the noiser, which is how
the learned extrapolation plugs in without duplicating the data flow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffusion as dif
from . import operators as ops
from .numerics import RngStream

ALGORITHMS = (
    "DDRM",
    "DDNM",
    "DPS",
    "PiGDM",
    "REDdiff",
    "DiffPIR",
    "DMPS",
    "ReSample",
    "DAPS",
)


class UnsupportedOperatorError(TypeError):
    pass


class ConvergenceError(RuntimeError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass
class DAPSParams:
    k_ddim: int = 5
    n_langevin: int = 100
    eta0: float = 1e-4
    delta: float = 0.01
    sigma_langevin: float | None = None  # default max(sigma_y, 0.02)
    noiseless_linear: bool = False


@dataclass
class InnerOptParams:
    lr: float = 0.01
    momentum: float = 0.9
    steps: int = 50


@dataclass
class AlgoParams:
    """Algorithm tag plus the hyperparameters it consults (others ignored)."""

    algorithm: str = "DDNM"
    eta: float = 0.85
    eta_b: float = 1.0  # DDRM
    zeta: float = 1.0  # DPS
    xi: float = 1.0  # RED-diff learning rate
    lam: float = 1.0  # RED-diff / DiffPIR / DMPS weight
    gamma_rs: float = 100.0  # ReSample
    exact_hc: bool = False  # ReSample closed-form shortcut (linear ops only)
    daps: DAPSParams = field(default_factory=DAPSParams)
    inner_opt: InnerOptParams = field(default_factory=InnerOptParams)

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"unknown algorithm {self.algorithm!r}")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigurationError("eta must lie in [0, 1]")


def default_params(algorithm: str) -> AlgoParams:
    """Per-algorithm defaults mirroring the standard tuned settings."""
    presets = {
        "DDRM": dict(eta=0.85, eta_b=1.0),
        "DDNM": dict(eta=0.85),
        "DPS": dict(eta=1.0, zeta=1.0),
        "PiGDM": dict(eta=1.0),
        "REDdiff": dict(xi=1.0, lam=0.5),
        "DiffPIR": dict(eta=1.0, lam=7.0, inner_opt=InnerOptParams(lr=0.1, momentum=0.9, steps=50)),
        "DMPS": dict(eta=0.85, lam=1.0),
        "ReSample": dict(eta=1.0, gamma_rs=100.0, inner_opt=InnerOptParams(lr=0.01, momentum=0.9, steps=50)),
        "DAPS": dict(eta=0.0),
    }
    return AlgoParams(algorithm=algorithm, **presets[algorithm])


@dataclass
class StepContext:
    """Per-step bundle; eps is evaluated once and shared by corrector and noiser."""

    x_t: np.ndarray
    t_i: int
    t_prev: int
    prior: object
    schedule: dif.DiffusionSchedule
    stream: RngStream
    prev_xhat: np.ndarray | None = None
    x0_sampled: np.ndarray | None = None
    _eps: np.ndarray | None = None

    @property
    def eps_cached(self) -> np.ndarray:
        if self._eps is None:
            self._eps = dif.gmm_eps(self.prior, self.schedule, self.x_t, self.t_i)
        return self._eps


# ---------------------------------------------------------------------------
# Sampler
# ---------------------------------------------------------------------------


def sample_phi(params: AlgoParams, prior, schedule, ctx: StepContext) -> np.ndarray:
    """Denoised estimate x_{0,t_i}; single-step DDIM for all but DAPS."""
    if params.algorithm == "DAPS":
        x0 = dif.ddim_run(
            prior, schedule, ctx.x_t, ctx.t_i, params.daps.k_ddim, eta=0.0
        )
    else:
        ab = schedule.alphabar(ctx.t_i)
        x0 = (ctx.x_t - schedule.sigma(ctx.t_i) * ctx.eps_cached) / math.sqrt(ab)
    ctx.x0_sampled = x0
    return x0


# ---------------------------------------------------------------------------
# Correctors
# ---------------------------------------------------------------------------


def _require_linear(obs: ops.Observation, who: str) -> ops.LinearOperator:
    if not obs.is_linear:
        raise UnsupportedOperatorError(f"{who} requires a linear operator")
    return obs.op


def _residual_grad_x0(obs: ops.Observation, x0: np.ndarray) -> np.ndarray:
    """Gradient of ||y - A(x0)||^2 with respect to x0."""
    if obs.is_linear:
        return 2.0 * ops.apply_adjoint(obs.op, ops.apply(obs.op, x0) - obs.y)
    return 2.0 * ops.nl_vjp(obs.op, x0, ops.nl_apply(obs.op, x0) - obs.y)


def corr_ddnm(ctx: StepContext, obs: ops.Observation, params: AlgoParams) -> np.ndarray:
    """Null-space-preserving projection with noise-aware spectral scaling."""
    op = _require_linear(obs, "DDNM corrector")
    x0 = ctx.x0_sampled
    ab_prev = ctx.schedule.alphabar(ctx.t_prev)
    sig_prev = ctx.schedule.sigma(ctx.t_prev)
    if obs.sigma_y == 0.0:
        lam = np.ones(op.r)
    else:
        thresh = math.sqrt(ab_prev) * obs.sigma_y / op.s
        lam = np.where(
            sig_prev >= thresh,
            1.0,
            op.s * sig_prev * math.sqrt(max(0.0, 1.0 - params.eta**2))
            / (math.sqrt(ab_prev) * obs.sigma_y),
        )
    spectral_y = (obs.y @ op.U) / op.s
    innovation = spectral_y - x0 @ op.V
    return x0 + (lam * innovation) @ op.V.T


def corr_ddrm(ctx: StepContext, obs: ops.Observation, params: AlgoParams) -> np.ndarray:
    """Element-wise spectral correction; boundary ties go to the blend branch."""
    op = _require_linear(obs, "DDRM corrector")
    x0 = ctx.x0_sampled
    ab_prev = ctx.schedule.alphabar(ctx.t_prev)
    sig_prev = ctx.schedule.sigma(ctx.t_prev)
    xbar = x0 @ op.V
    ybar = (obs.y @ op.U) / op.s
    if obs.sigma_y == 0.0:
        middle = np.zeros(op.r, dtype=bool)
    else:
        middle = sig_prev < math.sqrt(ab_prev) * obs.sigma_y / op.s
    blend = (1.0 - params.eta_b) * xbar + params.eta_b * ybar
    if np.any(middle):
        snr_step = math.sqrt(max(0.0, 1.0 - params.eta**2)) * sig_prev / math.sqrt(ab_prev)
        noisy = xbar + snr_step * (ybar - xbar) / (obs.sigma_y / op.s)
        corrected = np.where(middle, noisy, blend)
    else:
        corrected = blend
    return x0 + (corrected - xbar) @ op.V.T


def corr_dps(ctx: StepContext, obs: ops.Observation, params: AlgoParams) -> np.ndarray:
    """Likelihood-gradient step through the exact denoiser Jacobian."""
    x0 = ctx.x0_sampled
    if params.zeta == 0.0:
        return x0.copy()
    g_x0 = _residual_grad_x0(obs, x0)
    # d x0/d x_t = (I - sqrt(1-ab) d eps/dx) / sqrt(ab); symmetric, so the
    # transpose-vector product is the same JVP.
    ab = ctx.schedule.alphabar(ctx.t_i)
    jvp = dif.gmm_eps_jvp(ctx.prior, ctx.schedule, ctx.x_t, ctx.t_i, g_x0)
    grad_xt = (g_x0 - ctx.schedule.sigma(ctx.t_i) * jvp) / math.sqrt(ab)
    zeta_t = params.zeta * math.sqrt(ab)
    ab_prev = ctx.schedule.alphabar(ctx.t_prev)
    return x0 - (zeta_t / math.sqrt(ab_prev)) * grad_xt


def corr_pigdm(ctx: StepContext, obs: ops.Observation, params: AlgoParams) -> np.ndarray:
    """Pseudoinverse-guided correction with diagonal solve in the U-basis."""
    op = _require_linear(obs, "PiGDM corrector")
    x0 = ctx.x0_sampled
    r2 = 1.0 - ctx.schedule.alphabar(ctx.t_i)
    if obs.sigma_y == 0.0 and r2 == 0.0:
        raise ConvergenceError("singular solve: sigma_y = 0 and r_t = 0")
    ratio = obs.sigma_y**2 / r2
    resid = obs.y - ops.apply(op, x0)
    # A^T (A A^T + ratio I)^-1 resid, diagonal on the range of U; the
    # U-complement part is annihilated by diag(s) V^T.
    w = (resid @ op.U) * (op.s / (op.s**2 + ratio)) @ op.V.T
    jw = dif.gmm_eps_jvp(ctx.prior, ctx.schedule, ctx.x_t, ctx.t_i, w)
    ab = ctx.schedule.alphabar(ctx.t_i)
    jtw = (w - ctx.schedule.sigma(ctx.t_i) * jw) / math.sqrt(ab)
    scale = math.sqrt(ab / ctx.schedule.alphabar(ctx.t_prev))
    return x0 + scale * jtw


def corr_reddiff(ctx: StepContext, obs: ops.Observation, params: AlgoParams) -> np.ndarray:
    """Gradient-descent corrector anchored at the previous corrected estimate."""
    x0 = ctx.x0_sampled
    p = ctx.prev_xhat if ctx.prev_xhat is not None else x0
    if params.xi == 0.0:
        return np.array(p, copy=True)
    step = x0 - p
    if params.lam != 0.0:
        step = step - params.lam * _residual_grad_x0(obs, x0)
    return p + params.xi * step


def _momentum_descent(objective_grad, x_init, lr, momentum, steps, loss_fn=None):
    """Plain SGD with momentum; optional divergence guard via loss_fn."""
    x = np.array(x_init, copy=True)
    vel = np.zeros_like(x)
    loss0 = loss_fn(x) if loss_fn is not None else None
    for _ in range(steps):
        vel = momentum * vel - lr * objective_grad(x)
        x = x + vel
        if loss_fn is not None:
            cur = loss_fn(x)
            if not np.isfinite(cur) or cur > 10.0 * max(loss0, 1e-30):
                raise ConvergenceError("inner optimizer diverged")
    return x


def corr_diffpir(ctx: StepContext, obs: ops.Observation, params: AlgoParams) -> np.ndarray:
    """Proximal corrector argmin ||y - A(x)||^2 + rho ||x - x0||^2."""
    x0 = ctx.x0_sampled
    ab = ctx.schedule.alphabar(ctx.t_i)
    rho = params.lam * obs.sigma_y**2 * ab / (1.0 - ab)
    if obs.is_linear:
        op = obs.op
        xbar = x0 @ op.V
        ybar = obs.y @ op.U
        if rho < 1e-12:
            # rho -> 0+ limit: exact projection x0 + A^+(y - A x0)
            corrected = ybar / op.s
        else:
            corrected = (op.s * ybar + rho * xbar) / (op.s**2 + rho)
        return x0 + (corrected - xbar) @ op.V.T
    # nonlinear: inner schedule-free AdamW on the proximal objective
    from .optim import ScheduleFreeAdamW

    def loss(x):
        r = ops.nl_apply(obs.op, x) - obs.y
        return float(np.sum(r * r) + rho * np.sum((x - x0) ** 2))

    def grad(x):
        return _residual_grad_x0(obs, x) + 2.0 * rho * (x - x0)

    opt = ScheduleFreeAdamW(np.array(x0, copy=True), lr=params.inner_opt.lr)
    loss0 = loss(x0)
    for _ in range(params.inner_opt.steps):
        opt.step(grad(opt.eval_point()))
        cur = loss(opt.params())
        if not np.isfinite(cur) or cur > 10.0 * max(loss0, 1e-30):
            raise ConvergenceError("DiffPIR inner optimizer diverged")
    return opt.params()


def corr_dmps(ctx: StepContext, obs: ops.Observation, params: AlgoParams) -> np.ndarray:
    """Noise-perturbed-likelihood score step in the SVD basis."""
    op = _require_linear(obs, "DMPS corrector")
    x0 = ctx.x0_sampled
    ab_i = ctx.schedule.alphabar(ctx.t_i)
    ab_prev = ctx.schedule.alphabar(ctx.t_prev)
    if params.lam == 0.0:
        return x0.copy()
    denom = obs.sigma_y**2 + (1.0 - ab_i) / ab_i * op.s**2
    if np.any(denom == 0.0):
        raise ConvergenceError("singular solve: sigma_y = 0 and alphabar = 1")
    innov = obs.y @ op.U - (ctx.x_t @ op.V) * op.s / math.sqrt(ab_i)
    score_y = ((innov / denom) * op.s) @ op.V.T / math.sqrt(ab_i)
    alpha_i = ab_i / ab_prev
    coef = params.lam * (1.0 - alpha_i) / math.sqrt(alpha_i) / math.sqrt(ab_prev)
    return x0 + coef * score_y


def corr_resample(ctx: StepContext, obs: ops.Observation, params: AlgoParams) -> np.ndarray:
    """Hard data consistency: argmin ||y - A(x)||^2 from x0 by momentum descent."""
    x0 = ctx.x0_sampled
    if params.exact_hc and obs.is_linear:
        op = obs.op
        return x0 + ops.pinv_apply(op, obs.y - ops.apply(op, x0))
    if params.inner_opt.steps == 0:
        return x0.copy()

    def loss(x):
        if obs.is_linear:
            r = ops.apply(obs.op, x) - obs.y
        else:
            r = ops.nl_apply(obs.op, x) - obs.y
        return float(np.sum(r * r))

    return _momentum_descent(
        lambda x: _residual_grad_x0(obs, x),
        x0,
        params.inner_opt.lr,
        params.inner_opt.momentum,
        params.inner_opt.steps,
        loss_fn=loss,
    )


def daps_step_size(daps: DAPSParams, t: int, T: int) -> float:
    """Annealed Langevin step eta_t = eta0 * (delta + (t/T)(1 - delta))."""
    return daps.eta0 * (daps.delta + (t / T) * (1.0 - daps.delta))


def corr_daps(
    ctx: StepContext,
    obs: ops.Observation,
    params: AlgoParams,
    x0_anchor: np.ndarray | None = None,
) -> np.ndarray:
    """Langevin chain targeting the anchored posterior around x_{0,t_i}."""
    daps = params.daps
    anchor = ctx.x0_sampled if x0_anchor is None else x0_anchor
    if daps.n_langevin == 0:
        return np.array(anchor, copy=True)
    sigma = daps.sigma_langevin
    if sigma is None:
        sigma = max(obs.sigma_y, 0.02)
    if sigma == 0.0 and not daps.noiseless_linear:
        raise ConfigurationError(
            "DAPS Langevin needs sigma > 0 unless the noiseless-linear variant is on"
        )
    eta_t = daps_step_size(daps, ctx.t_i, ctx.schedule.T)
    r2 = 1.0 - ctx.schedule.alphabar(ctx.t_i)
    x = np.array(anchor, copy=True)
    for _ in range(daps.n_langevin):
        grad = (x - anchor) / r2
        if daps.noiseless_linear:
            op = _require_linear(obs, "DAPS noiseless-linear variant")
            # data term (1/(2 eta_t)) ||A x - y||^2; the eta_t cancels in the update
            data_grad = ops.apply_adjoint(op, ops.apply(op, x) - obs.y) / eta_t
        else:
            data_grad = 0.5 * _residual_grad_x0(obs, x) / sigma**2
        x = x - eta_t * (grad + data_grad) + math.sqrt(2.0 * eta_t) * ctx.stream.standard_normal(x.shape)
    return x


CORRECTORS = {
    "DDRM": corr_ddrm,
    "DDNM": corr_ddnm,
    "DPS": corr_dps,
    "PiGDM": corr_pigdm,
    "REDdiff": corr_reddiff,
    "DiffPIR": corr_diffpir,
    "DMPS": corr_dmps,
    "ReSample": corr_resample,
    "DAPS": corr_daps,
}


# ---------------------------------------------------------------------------
# Noisers
# ---------------------------------------------------------------------------


def noiser_ddim(xhat: np.ndarray, ctx: StepContext, eta: float) -> np.ndarray:
    """sqrt(ab_prev) xhat + c1 eps_noise + c2 eps_theta(x_t, t_i)."""
    ab_prev = ctx.schedule.alphabar(ctx.t_prev)
    c1, c2 = dif.ddim_coeffs(ctx.schedule, ctx.t_i, ctx.t_prev, eta)
    out = math.sqrt(ab_prev) * xhat
    if c2 != 0.0:
        out = out + c2 * ctx.eps_cached
    if c1 != 0.0:
        out = out + c1 * ctx.stream.standard_normal(xhat.shape)
    return out


def noiser_dmps(xhat: np.ndarray, ctx: StepContext, eta: float) -> np.ndarray:
    """DMPS DDIM variant: c1 = eta*sigma_prev, c2 = sqrt(1-eta^2)*sigma_prev."""
    ab_prev = ctx.schedule.alphabar(ctx.t_prev)
    sig_prev = ctx.schedule.sigma(ctx.t_prev)
    c1 = eta * sig_prev
    c2 = math.sqrt(1.0 - eta * eta) * sig_prev
    out = math.sqrt(ab_prev) * xhat
    if c2 != 0.0:
        out = out + c2 * ctx.eps_cached
    if c1 != 0.0:
        out = out + c1 * ctx.stream.standard_normal(xhat.shape)
    return out


def noiser_direct(xhat: np.ndarray, ctx: StepContext) -> np.ndarray:
    """sqrt(ab_prev) xhat + sqrt(1 - ab_prev) eps."""
    ab_prev = ctx.schedule.alphabar(ctx.t_prev)
    sig_prev = ctx.schedule.sigma(ctx.t_prev)
    out = math.sqrt(ab_prev) * xhat
    if sig_prev != 0.0:
        out = out + sig_prev * ctx.stream.standard_normal(xhat.shape)
    return out


def _spectral_noiser(
    xhat: np.ndarray,
    ctx: StepContext,
    obs: ops.Observation,
    params: AlgoParams,
    range_std_low: np.ndarray,
    range_std_high: np.ndarray,
    middle: np.ndarray,
) -> np.ndarray:
    """Shared three-branch coordinatewise noiser of DDRM/DDNM in the V-basis."""
    op = obs.op
    ab_prev = ctx.schedule.alphabar(ctx.t_prev)
    sig_prev = ctx.schedule.sigma(ctx.t_prev)
    eta = params.eta
    eps = ctx.stream.standard_normal(xhat.shape)
    sqrt_ab = math.sqrt(ab_prev)
    # null-space branch (s_k = 0): deterministic eps_theta share plus fresh noise
    null_xhat = ops.project(op, xhat, "null")
    null_eps_theta = ops.project(op, ctx.eps_cached, "null")
    null_eps = ops.project(op, eps, "null")
    out_null = (
        sqrt_ab * null_xhat
        + math.sqrt(max(0.0, 1.0 - eta * eta)) * sig_prev * null_eps_theta
        + eta * sig_prev * null_eps
    )
    # range coordinates: per-k standard deviation by branch
    xbar = xhat @ op.V
    ebar = eps @ op.V
    std = np.where(middle, range_std_low, range_std_high)
    out_range = (sqrt_ab * xbar + std * ebar) @ op.V.T
    return out_null + out_range


def noiser_ddrm(xhat, ctx: StepContext, obs: ops.Observation, params: AlgoParams) -> np.ndarray:
    op = _require_linear(obs, "DDRM noiser")
    ab_prev = ctx.schedule.alphabar(ctx.t_prev)
    sig_prev = ctx.schedule.sigma(ctx.t_prev)
    if obs.sigma_y == 0.0:
        middle = np.zeros(op.r, dtype=bool)
    else:
        middle = sig_prev < math.sqrt(ab_prev) * obs.sigma_y / op.s
    rad = 1.0 - ab_prev - ab_prev * obs.sigma_y**2 * params.eta_b**2 / op.s**2
    rad = np.where(middle, 0.0, rad)
    if np.any(rad < -1e-12):
        raise ConfigurationError("DDRM noiser radicand is negative; check eta_b/sigma_y")
    std_high = np.sqrt(np.clip(rad, 0.0, None))
    std_low = np.full(op.r, params.eta * sig_prev)
    return _spectral_noiser(xhat, ctx, obs, params, std_low, std_high, middle)


def noiser_ddnm(xhat, ctx: StepContext, obs: ops.Observation, params: AlgoParams) -> np.ndarray:
    op = _require_linear(obs, "DDNM noiser")
    ab_prev = ctx.schedule.alphabar(ctx.t_prev)
    sig_prev = ctx.schedule.sigma(ctx.t_prev)
    if obs.sigma_y == 0.0:
        middle = np.zeros(op.r, dtype=bool)
    else:
        middle = sig_prev < math.sqrt(ab_prev) * obs.sigma_y / op.s
    rad = sig_prev**2 - obs.sigma_y**2 * ab_prev / op.s**2
    rad = np.where(middle, 0.0, rad)
    if np.any(rad < -1e-12):
        raise ConfigurationError("DDNM noiser radicand is negative; check sigma_y")
    std_high = np.sqrt(np.clip(rad, 0.0, None))
    std_low = np.full(op.r, params.eta * sig_prev)
    return _spectral_noiser(xhat, ctx, obs, params, std_low, std_high, middle)


def noiser_diffpir(xhat: np.ndarray, ctx: StepContext, eta: float) -> np.ndarray:
    """DDIM-style noiser with the effective eps recomputed from xhat."""
    ab_prev = ctx.schedule.alphabar(ctx.t_prev)
    ab_i = ctx.schedule.alphabar(ctx.t_i)
    sig_prev = ctx.schedule.sigma(ctx.t_prev)
    sig_i = ctx.schedule.sigma(ctx.t_i)
    out = math.sqrt(ab_prev) * xhat
    out = out + math.sqrt(1.0 - eta * eta) * (sig_prev / sig_i) * (
        ctx.x_t - math.sqrt(ab_i) * xhat
    )
    if eta != 0.0 and sig_prev != 0.0:
        out = out + eta * sig_prev * ctx.stream.standard_normal(xhat.shape)
    return out


def noiser_resample(xhat: np.ndarray, ctx: StepContext, params: AlgoParams) -> np.ndarray:
    """Stochastic encode of the sampler output, then posterior blend toward xhat."""
    ab_prev = ctx.schedule.alphabar(ctx.t_prev)
    ab_i = ctx.schedule.alphabar(ctx.t_i)
    sig_prev2 = 1.0 - ab_prev
    c1, c2 = dif.ddim_coeffs(ctx.schedule, ctx.t_i, ctx.t_prev, params.eta)
    x_prime = math.sqrt(ab_prev) * ctx.x0_sampled + c2 * ctx.eps_cached
    if c1 != 0.0:
        x_prime = x_prime + c1 * ctx.stream.standard_normal(xhat.shape)
    # sigma_rs^2 = gamma * sig_prev2 * (1 - ab_i/ab_prev) / ab_i; factoring out
    # sig_prev2 keeps the t_prev = 0 endpoint well-defined.
    g = params.gamma_rs * (1.0 - ab_i / ab_prev) / ab_i
    if g == 0.0:
        return x_prime
    w_hat = g / (g + 1.0)
    blend = w_hat * math.sqrt(ab_prev) * xhat + (1.0 - w_hat) * x_prime
    std = math.sqrt(sig_prev2 * w_hat)
    if std != 0.0:
        blend = blend + std * ctx.stream.standard_normal(xhat.shape)
    return blend


def apply_noiser(
    params: AlgoParams, ctx: StepContext, obs: ops.Observation, xhat: np.ndarray
) -> np.ndarray:
    algo = params.algorithm
    if algo == "DDRM":
        return noiser_ddrm(xhat, ctx, obs, params)
    if algo == "DDNM":
        return noiser_ddnm(xhat, ctx, obs, params)
    if algo in ("DPS", "PiGDM"):
        return noiser_ddim(xhat, ctx, params.eta)
    if algo == "DMPS":
        return noiser_dmps(xhat, ctx, params.eta)
    if algo in ("REDdiff", "DAPS"):
        return noiser_direct(xhat, ctx)
    if algo == "DiffPIR":
        return noiser_diffpir(xhat, ctx, params.eta)
    if algo == "ReSample":
        return noiser_resample(xhat, ctx, params)
    raise ConfigurationError(f"unknown algorithm {algo!r}")


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


def run_step(
    params: AlgoParams,
    prior,
    schedule,
    obs: ops.Observation,
    ctx: StepContext,
) -> tuple[np.ndarray, np.ndarray]:
    """One canonical iteration; returns (xhat, x at t_prev)."""
    sample_phi(params, prior, schedule, ctx)
    xhat = CORRECTORS[params.algorithm](ctx, obs, params)
    x_next = apply_noiser(params, ctx, obs, xhat)
    return xhat, x_next


def run_with_combiner(
    params: AlgoParams,
    prior,
    schedule,
    obs: ops.Observation,
    grid: dif.TimeGrid,
    stream: RngStream,
    combiner=None,
    x_init: np.ndarray | None = None,
) -> np.ndarray:
    """Iterate Phi -> h -> (combiner) -> Psi down the grid from x ~ N(0, I).

    combiner(i, history, xhat) may replace the corrected estimate before the
    noiser; history holds the combiner outputs of earlier steps (oldest
    first). Returns the final estimate at t_1 (identical to x_{t_0} for the
    DDIM-family noisers since alphabar_0 = 1).
    """
    d = prior.d
    ts = grid.timesteps
    if x_init is None:
        shape = (d,)
        x = stream.standard_normal(shape)
    else:
        x = np.array(x_init, copy=True)
    prev_est = None
    history: list[np.ndarray] = []
    for i in range(grid.S, 0, -1):
        idx = grid.S - i
        ctx = StepContext(
            x_t=x,
            t_i=ts[idx],
            t_prev=ts[idx + 1],
            prior=prior,
            schedule=schedule,
            stream=stream,
            prev_xhat=prev_est,
        )
        sample_phi(params, prior, schedule, ctx)
        xhat = CORRECTORS[params.algorithm](ctx, obs, params)
        est = combiner(i, history, xhat) if combiner is not None else xhat
        history.append(est)
        x = apply_noiser(params, ctx, obs, est)
        prev_est = est
    return history[-1]


def run(
    params: AlgoParams,
    prior,
    schedule,
    obs: ops.Observation,
    grid: dif.TimeGrid,
    seed: int,
    stream: RngStream | None = None,
) -> np.ndarray:
    """Base algorithm run (no extrapolation); returns the final estimate."""
    if stream is None:
        stream = RngStream(seed, stream_id=0)
    return run_with_combiner(params, prior, schedule, obs, grid, stream)
