"""Estimators applied to simulated paths: tail averaging, Richardson-Romberg
extrapolation, bias/variance estimation and scaling fits."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .engine import Ensemble, Trajectory
from .errors import DesignError, PairingError, ResolutionError
from .rng import stream

BETA_ONLY = "beta-only"
ALPHA_AND_BETA = "alpha-and-beta"


def warmup(alpha: float, mu_x: float, multiple: int = 1, factor: float = 10.0) -> int:
    """Default burn-in ``ceil(factor / (alpha * mu_x))``, rounded up to ``multiple``."""
    t0 = math.ceil(factor / (alpha * mu_x))
    return -(-t0 // multiple) * multiple


@dataclass(eq=False)
class TailAverageResult:
    """Tail averages over ``[t0, t]`` with both endpoints included.

    The divisor is the number of averaged iterates, ``t - t0 + 1``.
    For ensemble input ``per_replica_x`` has one row per replica and
    ``x_tilde`` is their mean.
    """

    t0: int
    t: int
    x_tilde: np.ndarray
    y_tilde: np.ndarray
    alpha: float = float("nan")
    beta: float = float("nan")
    per_replica_x: np.ndarray | None = None
    per_replica_y: np.ndarray | None = None

    @property
    def n_replicas(self) -> int:
        return 1 if self.per_replica_x is None else self.per_replica_x.shape[0]

    @property
    def cov_x(self) -> np.ndarray | None:
        if self.per_replica_x is None or self.n_replicas < 2:
            return None
        return np.atleast_2d(np.cov(self.per_replica_x, rowvar=False))

    @property
    def cov_y(self) -> np.ndarray | None:
        if self.per_replica_y is None or self.n_replicas < 2:
            return None
        return np.atleast_2d(np.cov(self.per_replica_y, rowvar=False))


def _locate(t_rec: np.ndarray, t: int) -> int:
    pos = int(np.searchsorted(t_rec, t))
    if pos >= len(t_rec) or t_rec[pos] != t:
        raise ResolutionError(f"step {t} is not a recorded index")
    return pos


def _window(t_rec, x, y, x_tail, y_tail, tail_start, t0, t):
    """Tail averages from one recorded path (axis -2 is time)."""
    if not 0 <= t0 < t:
        raise ValueError(f"need 0 <= t0 < t, got t0={t0}, t={t}")
    if t > t_rec[-1]:
        raise ResolutionError(f"t={t} exceeds the last recorded index {t_rec[-1]}")
    if tail_start == t0 and x_tail is not None:
        k = _locate(t_rec, t)
        return x_tail[..., k, :], y_tail[..., k, :]
    try:
        i, k = _locate(t_rec, t0), _locate(t_rec, t)
    except ResolutionError:
        raise ResolutionError(
            f"window [{t0}, {t}] is not recorded at unit resolution; use record_every=1 "
            f"or set tail_start={t0} when simulating"
        ) from None
    if k - i != t - t0:
        raise ResolutionError(
            f"window [{t0}, {t}] is not recorded at unit resolution; use record_every=1 "
            f"or set tail_start={t0} when simulating"
        )
    return x[..., i:k + 1, :].mean(axis=-2), y[..., i:k + 1, :].mean(axis=-2)


def tail_average(data: Trajectory | Ensemble, t0: int, t: int) -> TailAverageResult:
    cfg = data.config
    if isinstance(data, Ensemble):
        bad = (data.diverged_at >= 0) & (data.diverged_at <= t)
        if bad.any():
            raise ResolutionError(f"{int(bad.sum())} replicas diverged before t={t}")
        px, py = _window(data.t, data.x, data.y, data.x_tail, data.y_tail, cfg.tail_start, t0, t)
        return TailAverageResult(t0, t, px.mean(axis=0), py.mean(axis=0), cfg.alpha, cfg.beta, px, py)
    if data.diverged:
        raise ResolutionError(f"trajectory diverged at t={data.diverged_at}")
    xt, yt = _window(data.t, data.x, data.y, data.x_tail, data.y_tail, cfg.tail_start, t0, t)
    return TailAverageResult(t0, t, xt, yt, cfg.alpha, cfg.beta)


def tail_average_curve(ens: Ensemble) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Running tail averages recorded during simulation: ``(t, x_tail, y_tail)`` for t >= tail_start."""
    if ens.x_tail is None:
        raise ResolutionError("ensemble was simulated without tail_start")
    keep = ens.t >= ens.config.tail_start
    return ens.t[keep], ens.x_tail[:, keep], ens.y_tail[:, keep]


@dataclass(eq=False)
class ExtrapolationResult:
    mode: str
    zeta_x: np.ndarray
    zeta_y: np.ndarray
    inputs: tuple
    per_replica_x: np.ndarray | None = None
    per_replica_y: np.ndarray | None = None


def _close(a, b):
    return math.isclose(a, b, rel_tol=1e-12, abs_tol=0.0)


def check_pairing(a_alpha, a_beta, b_alpha, b_beta, mode):
    if mode == ALPHA_AND_BETA:
        ok = _close(b_alpha, 2 * a_alpha) and _close(b_beta, 2 * a_beta)
        want = "(2*alpha, 2*beta)"
    elif mode == BETA_ONLY:
        ok = _close(b_alpha, a_alpha) and _close(b_beta, 2 * a_beta)
        want = "(alpha, 2*beta)"
    else:
        raise ValueError(f"unknown extrapolation mode {mode!r}")
    if not ok:
        raise PairingError(
            f"{mode} extrapolation pairs ({a_alpha}, {a_beta}) with {want}; got ({b_alpha}, {b_beta})"
        )


def extrapolate(a: TailAverageResult, b: TailAverageResult, mode: str = ALPHA_AND_BETA,
                check: bool = True) -> ExtrapolationResult:
    """Richardson-Romberg combination ``2 a - b``.

    ``a`` must come from ``(alpha, beta)`` and ``b`` from ``(2 alpha, 2 beta)``
    (``alpha-and-beta``) or ``(alpha, 2 beta)`` (``beta-only``). Ensemble
    inputs are combined replica by replica. ``check=False`` skips the
    stepsize check, which is only meaningful for synthetic inputs.
    """
    if check:
        check_pairing(a.alpha, a.beta, b.alpha, b.beta, mode)
    elif mode not in (ALPHA_AND_BETA, BETA_ONLY):
        raise ValueError(f"unknown extrapolation mode {mode!r}")
    if (a.t0, a.t) != (b.t0, b.t):
        raise PairingError(f"windows differ: [{a.t0}, {a.t}] vs [{b.t0}, {b.t}]")
    if a.n_replicas != b.n_replicas:
        raise PairingError(f"replica counts differ: {a.n_replicas} vs {b.n_replicas}")
    px = py = None
    if a.per_replica_x is not None:
        px = 2.0 * a.per_replica_x - b.per_replica_x
        py = 2.0 * a.per_replica_y - b.per_replica_y
        zx, zy = px.mean(axis=0), py.mean(axis=0)
    else:
        zx, zy = 2.0 * a.x_tilde - b.x_tilde, 2.0 * a.y_tilde - b.y_tilde
    return ExtrapolationResult(mode, zx, zy, (a, b), px, py)


def bootstrap(samples: np.ndarray, statistic, n_boot: int = 1000, seed: int = 0, level: float = 0.95):
    """Percentile bootstrap over rows of ``samples``: ``(se, (lo, hi))``."""
    samples = np.asarray(samples)
    gen = stream(seed, 0xB007)
    r = samples.shape[0]
    idx = gen.integers(0, r, size=(n_boot, r))
    reps = np.array([statistic(samples[i]) for i in idx])
    q = (1.0 - level) / 2.0
    return float(reps.std(ddof=1)), (float(np.quantile(reps, q)), float(np.quantile(reps, 1 - q)))


def _trace_cov(v: np.ndarray) -> float:
    return float(np.trace(np.atleast_2d(np.cov(v, rowvar=False))))


@dataclass(eq=False)
class BiasVarianceEstimate:
    """Ensemble estimates at window ``[t0, t]``.

    ``bias_*`` are cross-replica means of tail averages minus the reference.
    ``var_*`` are traces of the sample covariance of the iterates at ``t``
    (the spread of the chain itself, comparable with the stationary
    covariance). ``mse_*`` and ``spread_*`` describe the tail averages and
    satisfy ``mse = |bias|^2 + spread`` exactly.
    """

    t0: int
    t: int
    n_replicas: int
    bias_x: np.ndarray
    bias_x_se: np.ndarray
    bias_y: np.ndarray
    bias_y_se: np.ndarray
    bias_ybar: np.ndarray
    bias_ybar_se: np.ndarray
    var_x: float
    var_x_se: float
    var_x_ci: tuple
    var_y: float
    var_y_se: float
    var_y_ci: tuple
    mse_x: float
    mse_y: float
    spread_x: float
    spread_y: float
    low_replica_warning: bool = False
    extra: dict = field(default_factory=dict)


def estimate_bias_variance(ens: Ensemble, t0: int, t: int, x_ref=None, y_ref=None,
                           n_boot: int = 1000, seed: int = 0) -> BiasVarianceEstimate:
    inst = ens.instance
    x_ref = inst.x_star if x_ref is None else np.asarray(x_ref, float)
    y_ref = inst.y_star if y_ref is None else np.asarray(y_ref, float)
    r = ens.n_replicas
    low = r < 30
    if low:
        warnings.warn(f"only {r} replicas; standard errors and intervals are unreliable", stacklevel=2)
    ta = tail_average(ens, t0, t)
    px, py = ta.per_replica_x, ta.per_replica_y
    pybar = py - inst.y_star_of(px)
    ybar_ref = y_ref - inst.y_star_of(x_ref)
    sqrt_r = math.sqrt(r)

    def mean_se(v):
        return v.mean(axis=0), (v.std(axis=0, ddof=1) / sqrt_r if r > 1 else np.full(v.shape[1], np.nan))

    bx, bx_se = mean_se(px)
    by, by_se = mean_se(py)
    bb, bb_se = mean_se(pybar)
    k = _locate(ens.t, t)
    end_x, end_y = ens.x[:, k, :], ens.y[:, k, :]
    vx, vy = _trace_cov(end_x), _trace_cov(end_y)
    vx_se, vx_ci = bootstrap(end_x, _trace_cov, n_boot, seed)
    vy_se, vy_ci = bootstrap(end_y, _trace_cov, n_boot, seed + 1)
    dxs = px - x_ref
    dys = py - y_ref
    mse_x = float(np.mean(np.sum(dxs * dxs, axis=1)))
    mse_y = float(np.mean(np.sum(dys * dys, axis=1)))
    cx = px - bx
    cy = py - by
    spread_x = float(np.mean(np.sum(cx * cx, axis=1)))
    spread_y = float(np.mean(np.sum(cy * cy, axis=1)))
    return BiasVarianceEstimate(
        t0, t, r, bx - x_ref, bx_se, by - y_ref, by_se, bb - ybar_ref, bb_se,
        vx, vx_se, vx_ci, vy, vy_se, vy_ci, mse_x, mse_y, spread_x, spread_y, low,
    )


MODELS = ("linear", "affine", "power", "exponential")


@dataclass(eq=False)
class ScalingReport:
    quantity: str
    model: str
    grid: np.ndarray
    measured: np.ndarray
    se: np.ndarray
    fitted: np.ndarray
    params: np.ndarray
    param_names: list
    param_cov: np.ndarray
    residual_norm: float
    r_squared: float
    band: tuple | None = None
    passed: bool | None = None

    def param(self, name: str) -> float:
        return float(self.params[self.param_names.index(name)])

    def to_csv(self) -> str:
        lines = ["grid_value,measured,se,fitted,residual"]
        g = self.grid if self.grid.ndim == 1 else self.grid[:, -1]
        for gv, m, s, f in zip(g, self.measured, self.se, self.fitted):
            lines.append(",".join(format(float(v), ".17g") for v in (gv, m, s, f, m - f)))
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        def num(v):
            v = float(v)
            return v if math.isfinite(v) else None

        return {
            "quantity": self.quantity,
            "model": self.model,
            "grid": self.grid.tolist(),
            "measured": [num(v) for v in self.measured],
            "se": [num(v) for v in self.se],
            "fitted": [num(v) for v in self.fitted],
            "params": dict(zip(self.param_names, (num(v) for v in self.params))),
            "param_cov": [[num(v) for v in row] for row in self.param_cov],
            "residual_norm": num(self.residual_norm),
            "r_squared": num(self.r_squared),
            "band": None if self.band is None else list(self.band),
            "passed": self.passed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


def fit_scaling(grid, measured, se=None, model: str = "affine", quantity: str = "",
                band: tuple | None = None) -> ScalingReport:
    """Weighted least-squares fit of a scaling law.

    ``linear``: ``y = g @ c``; ``affine``: ``y = c0 + g @ c`` (``g`` may have
    several columns, e.g. ``(alpha, beta)``); ``power``: ``log y = c0 + p log g``;
    ``exponential``: ``log y = c0 + r g``. Weights are ``1/se^2`` when
    standard errors are supplied. ``band = (param_name, lo, hi)`` sets
    ``passed``.
    """
    if model not in MODELS:
        raise ValueError(f"unknown model {model!r}")
    g = np.asarray(grid, dtype=float)
    y = np.asarray(measured, dtype=float)
    n = y.shape[0]
    if n < 3:
        raise DesignError("need at least 3 grid points")
    g2 = g.reshape(n, -1)
    s = np.full(n, np.nan) if se is None else np.asarray(se, dtype=float)
    weighted = se is not None and np.all(s > 0)
    if model in ("power", "exponential"):
        if np.any(y <= 0):
            raise DesignError(f"{model} fit needs positive measurements")
        target = np.log(y)
        s_t = s / y
        col = np.log(g2[:, 0]) if model == "power" else g2[:, 0]
        if model == "power" and np.any(g2[:, 0] <= 0):
            raise DesignError("power fit needs a positive grid")
        X = np.column_stack([np.ones(n), col])
        names = ["log_scale", "exponent" if model == "power" else "rate"]
    else:
        target, s_t = y, s
        if model == "affine":
            X = np.column_stack([np.ones(n), g2])
            names = ["intercept"] + (["slope"] if g2.shape[1] == 1 else [f"slope_{i}" for i in range(g2.shape[1])])
        else:
            X = g2
            names = ["slope"] if g2.shape[1] == 1 else [f"slope_{i}" for i in range(g2.shape[1])]
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise DesignError("degenerate design matrix")
    w = 1.0 / s_t**2 if weighted else np.ones(n)
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(X * sw[:, None], target * sw, rcond=None)
    fit_t = X @ coef
    res = target - fit_t
    xtwx_inv = np.linalg.inv(X.T @ (X * w[:, None]))
    dof = n - X.shape[1]
    if weighted:
        cov = xtwx_inv
    else:
        s2 = float(res @ res) / dof if dof > 0 else 0.0
        cov = s2 * xtwx_inv
    ss_tot = float(np.sum(w * (target - np.average(target, weights=w)) ** 2))
    r2 = 1.0 - float(np.sum(w * res**2)) / ss_tot if ss_tot > 0 else 1.0
    fitted = np.exp(fit_t) if model in ("power", "exponential") else fit_t
    passed = None
    if band is not None:
        name, lo, hi = band
        v = float(coef[names.index(name)])
        passed = bool(lo <= v <= hi)
    return ScalingReport(quantity, model, g, y, s, fitted, coef, names, cov,
                         float(np.linalg.norm(y - fitted)), r2, band, passed)
