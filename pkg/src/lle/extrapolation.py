"""Learnable linear extrapolation over the corrected estimates of earlier steps.

Training walks the time grid once. At each step it freezes the corrected
batch, optimizes a per-timestep coefficient vector so the linear combination
of all previous estimates best matches the ground truth, then pushes the
combined estimate through the noiser. Inference replays the same data flow
with the coefficients fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import canonical as canon
from . import diffusion as dif
from . import operators as ops
from .numerics import RngStream
from .optim import Adam, ScheduleFreeAdamW


class TrainingDivergedError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# perceptual-loss plugin interface
# ---------------------------------------------------------------------------


class GradientDomainPlugin:
    """Squared difference of first-order finite differences.

    Invariant to constant shifts; the default stand-in for a perceptual term.
    """

    tag = "gradient-domain"

    def value_and_grad(self, x: np.ndarray, ref: np.ndarray):
        dx = np.diff(x)
        dref = np.diff(ref)
        r = dx - dref
        val = float(np.sum(r * r))
        grad = np.zeros_like(x)
        grad[:-1] -= 2.0 * r
        grad[1:] += 2.0 * r
        return val, grad


def make_plugin(tag: str):
    if tag in (None, "none"):
        return None
    if tag == "gradient-domain":
        return GradientDomainPlugin()
    raise ValueError(f"unknown perceptual plugin {tag!r}")


def loss(x: np.ndarray, x_gt: np.ndarray, omega: float = 0.0, plugin=None) -> float:
    """||x - x_gt||^2 + omega * plugin(x, x_gt) for a single sample."""
    x = np.asarray(x, dtype=float)
    x_gt = np.asarray(x_gt, dtype=float)
    if x.shape != x_gt.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_gt.shape}")
    val = float(np.sum((x - x_gt) ** 2))
    if omega != 0.0 and plugin is not None:
        val += omega * plugin.value_and_grad(x, x_gt)[0]
    return val


def batch_loss(xs: np.ndarray, gts: np.ndarray, omega: float = 0.0, plugin=None) -> float:
    """Mean per-sample loss over a (N, d) batch."""
    return float(
        np.mean([loss(x, g, omega, plugin) for x, g in zip(np.atleast_2d(xs), np.atleast_2d(gts))])
    )


# ---------------------------------------------------------------------------
# coefficients
# ---------------------------------------------------------------------------


def _is_identity(gamma: np.ndarray) -> bool:
    return gamma[-1] == 1.0 and (gamma.size == 1 or not np.any(gamma[:-1]))


def combine(
    gamma: np.ndarray,
    history: list[np.ndarray],
    xhat: np.ndarray,
    op: ops.LinearOperator | None = None,
    gamma_perp: np.ndarray | None = None,
) -> np.ndarray:
    """gamma[-1] * xhat + sum_j gamma[j] * history[j] (oldest first).

    With gamma_perp present the combination is applied separately to range
    projections (gamma) and null projections (gamma_perp), then summed.
    """
    gamma = np.asarray(gamma, dtype=float)
    if gamma.size != len(history) + 1:
        raise ValueError(
            f"coefficient vector has {gamma.size} entries for {len(history)} history terms"
        )
    if gamma_perp is None:
        if _is_identity(gamma):
            return np.array(xhat, copy=True)
        out = gamma[-1] * xhat
        for g, h in zip(gamma[:-1], history):
            if g != 0.0:
                out = out + g * h
        return out
    if op is None:
        raise ValueError("decoupled combination requires the linear operator")
    gamma_perp = np.asarray(gamma_perp, dtype=float)
    bases = list(history) + [xhat]
    out = np.zeros_like(np.asarray(xhat, dtype=float))
    for gp, gq, b in zip(gamma, gamma_perp, bases):
        rng = ops.project(op, b, "range")
        out = out + gp * rng + gq * (b - rng)
    return out


@dataclass
class LLECoefficients:
    """Per-timestep linear-combination coefficients, coupled or decoupled."""

    S: int
    decoupled: bool
    timesteps: tuple[int, ...]  # t_S .. t_1
    gamma: list[np.ndarray]  # coupled, or range-space part when decoupled
    gamma_perp: list[np.ndarray] | None = None

    def __post_init__(self):
        if len(self.gamma) != self.S:
            raise ValueError("need one coefficient vector per trained timestep")
        for idx, g in enumerate(self.gamma):
            if np.asarray(g).size != idx + 1:
                raise ValueError(f"vector at position {idx} must have {idx + 1} entries")
            if not np.all(np.isfinite(g)):
                raise ValueError("coefficients must be finite")

    @classmethod
    def identity(cls, grid: dif.TimeGrid) -> "LLECoefficients":
        gammas = [np.eye(idx + 1)[idx] for idx in range(grid.S)]
        return cls(
            S=grid.S,
            decoupled=False,
            timesteps=grid.timesteps[: grid.S],
            gamma=gammas,
        )

    def extrapolate(self, i: int, history, xhat, op=None) -> np.ndarray:
        """Combined estimate at step i (i = S..1)."""
        idx = self.S - i
        gp = self.gamma_perp[idx] if self.decoupled else None
        return combine(self.gamma[idx], history, xhat, op=op, gamma_perp=gp)

    def to_json(self) -> str:
        import json

        obj = {
            "steps": self.S,
            "decoupled": self.decoupled,
            "timesteps": list(self.timesteps),
        }
        if self.decoupled:
            obj["gamma_par"] = [g.tolist() for g in self.gamma]
            obj["gamma_perp"] = [g.tolist() for g in self.gamma_perp]
        else:
            obj["gamma"] = [g.tolist() for g in self.gamma]
        return json.dumps(obj, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "LLECoefficients":
        import json

        obj = json.loads(text)
        decoupled = obj["decoupled"]
        if decoupled:
            gamma = [np.asarray(g, dtype=float) for g in obj["gamma_par"]]
            gperp = [np.asarray(g, dtype=float) for g in obj["gamma_perp"]]
        else:
            gamma = [np.asarray(g, dtype=float) for g in obj["gamma"]]
            gperp = None
        return cls(
            S=obj["steps"],
            decoupled=decoupled,
            timesteps=tuple(obj["timesteps"]),
            gamma=gamma,
            gamma_perp=gperp,
        )

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_json())

    @classmethod
    def load(cls, path) -> "LLECoefficients":
        with open(path) as f:
            return cls.from_json(f.read())


# ---------------------------------------------------------------------------
# objective pieces over gamma
# ---------------------------------------------------------------------------


def _project_bases(bases, op):
    par = [ops.project(op, b, "range") for b in bases]
    perp = [b - p for b, p in zip(bases, par)]
    return par, perp


def _combined(bases, theta, op, decoupled):
    J = len(bases)
    if not decoupled:
        out = theta[0] * bases[0]
        for g, b in zip(theta[1:], bases[1:]):
            out = out + g * b
        return out
    par, perp = _project_bases(bases, op)
    out = theta[0] * par[0] + theta[J] * perp[0]
    for j in range(1, J):
        out = out + theta[j] * par[j] + theta[J + j] * perp[j]
    return out


def gamma_objective(bases, x_gt, theta, omega, plugin, op=None, decoupled=False):
    """Mean training loss at coefficient vector theta (2J entries if decoupled)."""
    xt = _combined(bases, theta, op, decoupled)
    return batch_loss(xt, x_gt, omega, plugin)


def loss_grad_gamma(bases, x_gt, theta, omega, plugin=None, op=None, decoupled=False):
    """Exact gradient of the mean loss over theta; fixed-order summation."""
    N = x_gt.shape[0]
    xt = _combined(bases, theta, op, decoupled)
    resid = xt - x_gt
    sens = 2.0 * resid
    if omega != 0.0 and plugin is not None:
        pg = np.stack(
            [plugin.value_and_grad(xt[n], x_gt[n])[1] for n in range(N)], axis=0
        )
        sens = sens + omega * pg
    if not decoupled:
        return np.array([np.sum(sens * b) for b in bases]) / N
    par, perp = _project_bases(bases, op)
    g_par = [np.sum(sens * b) for b in par]
    g_perp = [np.sum(sens * b) for b in perp]
    return np.array(g_par + g_perp) / N


def solve_ls_closed_form(bases, x_gt, op=None, decoupled=False, reg=1e-10):
    """Normal-equations minimizer of the batch MSE; valid only when omega = 0."""

    def solve(bs):
        J = len(bs)
        G = np.empty((J, J))
        rhs = np.empty(J)
        for j in range(J):
            for k in range(j, J):
                G[j, k] = G[k, j] = np.sum(bs[j] * bs[k])
            rhs[j] = np.sum(bs[j] * x_gt)
        return np.linalg.solve(G + reg * np.eye(J), rhs)

    if not decoupled:
        return solve(bases)
    par, perp = _project_bases(bases, op)
    return np.concatenate([solve(par), solve(perp)])


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    n_refs: int = 50
    ref_steps: int = 999
    omega: float | None = None  # default 0.1 with a plugin, else 0
    plugin: str = "none"
    epochs: int = 100
    warmup: int = 50
    lr_rule: str = "constant"  # constant 0.04/S | dynamic 0.2*ab_{t_{i+1}}/S
    init_mode: str = "adaptive-linear"  # | soft-nonlinear
    noisy_gt: bool = False  # DDRM/DDNM only
    decoupled: bool = False
    closed_form: bool = False  # fast path, requires omega = 0
    optimizer: str = "schedule-free"  # | adam
    base_seed: int = 0

    def resolved_omega(self) -> float:
        if self.omega is not None:
            return self.omega
        return 0.1 if self.plugin not in (None, "none") else 0.0


def make_ground_truth(
    params: canon.AlgoParams,
    prior,
    schedule,
    obs: ops.Observation,
    x0: np.ndarray,
    t_i: int,
    t_prev: int,
    noisy_gt: bool = False,
    stream: RngStream | None = None,
) -> np.ndarray:
    """Training target at t_i: x0, or the algorithm's own corrector applied to x0."""
    if not noisy_gt:
        return np.array(x0, copy=True)
    if params.algorithm not in ("DDRM", "DDNM"):
        raise canon.ConfigurationError(
            "noisy ground truth is defined only for DDRM and DDNM"
        )
    ctx = canon.StepContext(
        x_t=x0,
        t_i=t_i,
        t_prev=t_prev,
        prior=prior,
        schedule=schedule,
        stream=stream if stream is not None else RngStream(0, 0),
        x0_sampled=np.array(x0, copy=True),
    )
    return canon.CORRECTORS[params.algorithm](ctx, obs, params)


def init_coeffs(
    idx: int,
    history,
    xhat,
    x_gt,
    mode: str,
    alphabar_ti: float,
    stream: RngStream,
    omega: float = 0.0,
    plugin=None,
    decoupled: bool = False,
) -> np.ndarray:
    """Adaptive initialization: one-hot on whichever of the two latest
    estimates has the smaller batch loss; other entries ~ N(0, 1e-6).
    """
    J = idx + 1
    gamma = 1e-3 * stream.standard_normal(J) if J > 1 else np.zeros(1)
    if J == 1:
        gamma[0] = 1.0
    else:
        loss_prev = batch_loss(history[-1], x_gt, omega, plugin)
        loss_hat = batch_loss(xhat, x_gt, omega, plugin)
        if loss_prev >= loss_hat:
            gamma[J - 1] = 1.0
        elif mode == "soft-nonlinear":
            gamma[J - 2] = alphabar_ti
            gamma[J - 1] = 1.0 - alphabar_ti
        elif mode == "adaptive-linear":
            gamma[J - 2] = 1.0
        else:
            raise ValueError(f"unknown init mode {mode!r}")
    if decoupled:
        return np.concatenate([gamma, gamma.copy()])
    return gamma


def train_timestep(
    bases,
    x_gt,
    init_theta,
    config: TrainConfig,
    lr_t: float,
    t_i: int,
    op=None,
):
    """Optimize the coefficient vector at one timestep.

    Returns (best theta, per-epoch loss trace). The best-by-training-loss
    snapshot guarantees final loss <= initial loss.
    """
    omega = config.resolved_omega()
    plugin = make_plugin(config.plugin)
    decoupled = config.decoupled

    def obj(theta):
        return gamma_objective(bases, x_gt, theta, omega, plugin, op, decoupled)

    theta = np.asarray(init_theta, dtype=float)
    best = theta.copy()
    best_loss = obj(theta)
    trace = [best_loss]
    if not math.isfinite(best_loss):
        raise TrainingDivergedError(f"non-finite loss at timestep {t_i}")
    if config.closed_form and omega == 0.0:
        cand = solve_ls_closed_form(bases, x_gt, op, decoupled)
        cand_loss = obj(cand)
        if cand_loss <= best_loss:
            best, best_loss = cand, cand_loss
        trace.append(best_loss)
        return best, trace
    if config.optimizer == "adam":
        opt = Adam(theta, lr=lr_t)
    else:
        opt = ScheduleFreeAdamW(theta, lr=lr_t, warmup=config.warmup)
    for _ in range(config.epochs):
        g = loss_grad_gamma(
            bases, x_gt, opt.eval_point(), omega, plugin, op, decoupled
        )
        cur = obj(opt.step(g))
        if not math.isfinite(cur):
            raise TrainingDivergedError(f"training diverged at timestep {t_i}")
        trace.append(cur)
        if cur < best_loss:
            best_loss = cur
            best = opt.params()
    return best, trace


def generate_references(prior, schedule, config: TrainConfig, stream: RngStream):
    """N reference samples via a ref_steps-step deterministic DDIM run."""
    x = stream.standard_normal((config.n_refs, prior.d))
    return dif.ddim_run(prior, schedule, x, schedule.T, config.ref_steps, eta=0.0)


def _learning_rate(config: TrainConfig, schedule, grid: dif.TimeGrid, idx: int) -> float:
    if config.lr_rule == "constant":
        return 0.04 / grid.S
    if config.lr_rule == "dynamic":
        t_next = grid.timesteps[max(idx - 1, 0)]
        return 0.2 * schedule.alphabar(t_next) / grid.S
    raise ValueError(f"unknown lr rule {config.lr_rule!r}")


def train(
    params: canon.AlgoParams,
    prior,
    schedule,
    obs_builder,
    grid: dif.TimeGrid,
    config: TrainConfig,
):
    """Walk the grid once, optimizing coefficients per timestep.

    obs_builder(x0_batch, stream) -> Observation with per-sample rows of y.
    Returns (LLECoefficients, loss traces keyed by timestep).
    """
    base = RngStream(config.base_seed)
    refs = generate_references(prior, schedule, config, base.child(11))
    observation = obs_builder(refs, base.child(12))
    op = observation.op if observation.is_linear else None
    if config.decoupled and op is None:
        raise canon.ConfigurationError("decoupled coefficients require a linear operator")
    omega = config.resolved_omega()
    plugin = make_plugin(config.plugin)
    traj = base.child(13)
    init_stream = base.child(14)
    x = traj.standard_normal((config.n_refs, prior.d))
    ts = grid.timesteps
    history: list[np.ndarray] = []
    gammas: list[np.ndarray] = []
    gammas_perp: list[np.ndarray] = []
    traces: dict[int, list[float]] = {}
    for idx in range(grid.S):
        i = grid.S - idx
        t_i, t_prev = ts[idx], ts[idx + 1]
        ctx = canon.StepContext(
            x_t=x,
            t_i=t_i,
            t_prev=t_prev,
            prior=prior,
            schedule=schedule,
            stream=traj,
            prev_xhat=history[-1] if history else None,
        )
        canon.sample_phi(params, prior, schedule, ctx)
        xhat = canon.CORRECTORS[params.algorithm](ctx, observation, params)
        x_gt = make_ground_truth(
            params, prior, schedule, observation, refs, t_i, t_prev, config.noisy_gt
        )
        theta0 = init_coeffs(
            idx,
            history,
            xhat,
            x_gt,
            config.init_mode,
            schedule.alphabar(t_i),
            init_stream,
            omega,
            plugin,
            config.decoupled,
        )
        bases = history + [xhat]
        lr_t = _learning_rate(config, schedule, grid, idx)
        theta, trace = train_timestep(bases, x_gt, theta0, config, lr_t, t_i, op)
        traces[t_i] = trace
        if config.decoupled:
            J = idx + 1
            g_par, g_perp = theta[:J], theta[J:]
            xtilde = combine(g_par, history, xhat, op=op, gamma_perp=g_perp)
            gammas.append(g_par)
            gammas_perp.append(g_perp)
        else:
            xtilde = combine(theta, history, xhat)
            gammas.append(theta)
        history.append(xtilde)
        x = canon.apply_noiser(params, ctx, observation, xtilde)
    coeffs = LLECoefficients(
        S=grid.S,
        decoupled=config.decoupled,
        timesteps=ts[: grid.S],
        gamma=gammas,
        gamma_perp=gammas_perp if config.decoupled else None,
    )
    return coeffs, traces


def infer(
    params: canon.AlgoParams,
    prior,
    schedule,
    obs: ops.Observation,
    grid: dif.TimeGrid,
    coeffs: LLECoefficients,
    seed: int,
    stream: RngStream | None = None,
) -> np.ndarray:
    """Fixed-coefficient inference; identity coefficients reproduce the base run."""
    if coeffs.S != grid.S:
        raise canon.ConfigurationError(
            f"coefficients trained for S={coeffs.S}, grid has S={grid.S}"
        )
    op = obs.op if obs.is_linear else None
    if coeffs.decoupled and op is None:
        raise canon.ConfigurationError("decoupled coefficients require a linear operator")
    if stream is None:
        stream = RngStream(seed, stream_id=0)

    def combiner(i, history, xhat):
        return coeffs.extrapolate(i, history, xhat, op=op)

    return canon.run_with_combiner(
        params, prior, schedule, obs, grid, stream, combiner=combiner
    )
