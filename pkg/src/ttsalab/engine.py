"""Trajectory simulation of the constant-stepsize linear TTSA recursion.

    x_{t+1} = x_t - alpha * (F(x_t, y_t) + w^x(x_t, y_t; xi_t))
    y_{t+1} = y_t - beta  * (G(x_t, y_t) + w^y(x_t, y_t; xi_t))

Random draws for a run come from ``rng.stream(seed, *stream)`` in a fixed
order: the initial point (if random), the initial state (if drawn from pi),
then one uniform per chain transition, consumed in chunks.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from . import kernels
from .chain import draw_from
from .errors import DimensionError, ValidationError
from .model import ProblemInstance
from .rng import stream

CHUNK = 1 << 16


@dataclass(frozen=True)
class SimConfig:
    """Run parameters.

    ``x0``/``y0`` give a fixed initial point; when omitted the start is uniform
    in the ball of ``radius`` around ``(x*, y*)``. ``xi0=None`` draws the
    initial state from the stationary law. When ``tail_start`` is set, running
    tail averages ``sum_{s=tail_start}^{t} z_s / (t - tail_start + 1)`` are
    recorded alongside the iterates.
    """

    alpha: float
    beta: float
    n_steps: int
    record_every: int | None = None
    seed: int = 0
    stream: tuple = ()
    x0: tuple | None = None
    y0: tuple | None = None
    xi0: int | None = None
    radius: float = 1.0
    tail_start: int | None = None

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ValidationError("stepsizes must be positive")
        if self.n_steps < 0:
            raise ValidationError("n_steps must be non-negative")
        if self.record_every is not None and self.record_every < 1:
            raise ValidationError("record_every must be at least 1")
        if (self.x0 is None) != (self.y0 is None):
            raise ValidationError("x0 and y0 must be given together")
        if self.tail_start is not None and not 0 <= self.tail_start <= self.n_steps:
            raise ValidationError("tail_start must lie in [0, n_steps]")

    @property
    def every(self) -> int:
        if self.record_every is not None:
            return self.record_every
        return 1 if self.n_steps <= 10_000 else 10

    def recorded_indices(self) -> np.ndarray:
        t = np.arange(0, self.n_steps + 1, self.every, dtype=np.int64)
        if t[-1] != self.n_steps:
            t = np.append(t, self.n_steps)
        return t


@dataclass(eq=False)
class Trajectory:
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    xi: np.ndarray
    config: SimConfig
    x_tail: np.ndarray | None = None
    y_tail: np.ndarray | None = None
    diverged_at: int | None = None

    @property
    def diverged(self) -> bool:
        return self.diverged_at is not None

    def to_csv(self) -> str:
        dx, dy = self.x.shape[1], self.y.shape[1]
        head = ["t", "xi"] + [f"x_{i}" for i in range(dx)] + [f"y_{i}" for i in range(dy)]
        lines = [",".join(head)]
        for k in range(len(self.t)):
            vals = [str(int(self.t[k])), str(int(self.xi[k]))]
            vals += [format(float(v), ".17g") for v in self.x[k]]
            vals += [format(float(v), ".17g") for v in self.y[k]]
            lines.append(",".join(vals))
        return "\n".join(lines) + "\n"


@dataclass(eq=False)
class Ensemble:
    """Replicas stacked on axis 0; rows after a divergence are NaN."""

    instance: ProblemInstance
    config: SimConfig
    t: np.ndarray
    x: np.ndarray  # (R, K, dx)
    y: np.ndarray  # (R, K, dy)
    xi: np.ndarray  # (R, K)
    x_tail: np.ndarray | None
    y_tail: np.ndarray | None
    diverged_at: np.ndarray  # (R,), -1 when finite throughout

    @property
    def n_replicas(self) -> int:
        return self.x.shape[0]

    def trajectory(self, k: int) -> Trajectory:
        div = int(self.diverged_at[k])
        keep = slice(None) if div < 0 else self.t <= div
        tail = lambda a: None if a is None else a[k][keep]  # noqa: E731
        return Trajectory(self.t[keep], self.x[k][keep], self.y[k][keep], self.xi[k][keep],
                          replace(self.config, stream=self.config.stream + (k,)),
                          tail(self.x_tail), tail(self.y_tail), None if div < 0 else div)


@dataclass(eq=False)
class CoupledPair:
    first: Trajectory
    second: Trajectory
    delta_x_norms: np.ndarray
    delta_y_norms: np.ndarray


def _initial(instance: ProblemInstance, config: SimConfig, gen) -> tuple[np.ndarray, int]:
    if config.x0 is not None:
        z0 = np.concatenate([np.asarray(config.x0, float), np.asarray(config.y0, float)])
        if z0.shape != (instance.d,):
            raise DimensionError("initial point does not match the instance dimensions")
    else:
        z0 = instance.z_star + _ball(gen, instance.d, config.radius)
    if config.xi0 is None:
        xi0 = draw_from(instance.chain.stationary, gen.random())
    else:
        xi0 = int(config.xi0)
        if not 0 <= xi0 < instance.n_states:
            raise IndexError(f"initial state {xi0} out of range")
    return z0, xi0


def _ball(gen, d, radius) -> np.ndarray:
    v = gen.standard_normal(d)
    v /= np.linalg.norm(v)
    return radius * gen.random() ** (1.0 / d) * v


class _Recorder:
    def __init__(self, config: SimConfig, d: int, z0: np.ndarray, xi0: int):
        k = len(config.recorded_indices())
        self.t = np.zeros(k, dtype=np.int64)
        self.z = np.full((k, d), np.nan)
        self.xi = np.zeros(k, dtype=np.int64)
        self.tail = np.full((k, d), np.nan)
        self.tail_start = -1 if config.tail_start is None else config.tail_start
        self.tail_sum = np.zeros(d)
        self.z[0] = z0
        self.xi[0] = xi0
        if self.tail_start == 0:
            self.tail_sum += z0
            self.tail[0] = z0
        self.pos = 1
        self.diverged_at = -1


def _advance(instance, config, gen, runs):
    """Drive every ``(z, recorder)`` in ``runs`` through the same state path."""
    mats, offs = instance.full_operators()
    ab = np.array([config.alpha, config.beta])
    cum = instance.chain.cumulative
    every = config.every
    state = int(runs[0][1].xi[0])
    t = 0
    while t < config.n_steps:
        n = min(CHUNK, config.n_steps - t)
        u = gen.random(n)
        new_state = state
        for z, rec in runs:
            if rec.diverged_at >= 0:
                continue
            new_state, rec.pos, div = kernels.ttsa_chunk(
                mats, offs, ab, instance.d_x, z, state, cum, u, t, every, config.n_steps,
                rec.tail_start, rec.tail_sum, rec.t, rec.z, rec.xi, rec.tail, rec.pos,
            )
            rec.diverged_at = div
        if all(rec.diverged_at >= 0 for _, rec in runs):
            break
        # a diverged replica stops early, so recompute the state path if needed
        if any(rec.diverged_at >= 0 for _, rec in runs):
            out = np.empty(n, dtype=np.int64)
            new_state = int(kernels.sample_path(cum, state, u, out))
        state = int(new_state)
        t += n


def _to_trajectory(instance, config, rec: _Recorder) -> Trajectory:
    dx = instance.d_x
    k = rec.pos
    tail = rec.tail_start >= 0
    return Trajectory(
        rec.t[:k].copy(), rec.z[:k, :dx].copy(), rec.z[:k, dx:].copy(), rec.xi[:k].copy(), config,
        rec.tail[:k, :dx].copy() if tail else None, rec.tail[:k, dx:].copy() if tail else None,
        None if rec.diverged_at < 0 else int(rec.diverged_at),
    )


def simulate(instance: ProblemInstance, config: SimConfig) -> Trajectory:
    """One trajectory of the raw recursion; blow-ups truncate and flag the path."""
    gen = stream(config.seed, *config.stream)
    z0, xi0 = _initial(instance, config, gen)
    rec = _Recorder(config, instance.d, z0, xi0)
    z = z0.copy()
    _advance(instance, config, gen, [(z, rec)])
    return _to_trajectory(instance, config, rec)


def _replica(instance, config, k):
    return simulate(instance, replace(config, stream=config.stream + (k,)))


def default_threads() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def simulate_ensemble(instance: ProblemInstance, config: SimConfig, n_replicas: int,
                      threads: int | None = None) -> Ensemble:
    """Independent replicas; replica ``k`` uses stream ``config.stream + (k,)``.

    Output does not depend on ``threads``.
    """
    if n_replicas < 1:
        raise ValidationError("n_replicas must be at least 1")
    threads = threads or default_threads()
    if threads == 1 or n_replicas == 1:
        trajs = [_replica(instance, config, k) for k in range(n_replicas)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            trajs = list(pool.map(lambda k: _replica(instance, config, k), range(n_replicas)))
    return _stack(instance, config, trajs)


def _stack(instance, config, trajs) -> Ensemble:
    t = config.recorded_indices()
    r, k = len(trajs), len(t)
    x = np.full((r, k, instance.d_x), np.nan)
    y = np.full((r, k, instance.d_y), np.nan)
    xi = np.full((r, k), -1, dtype=np.int64)
    has_tail = config.tail_start is not None
    xt = np.full_like(x, np.nan) if has_tail else None
    yt = np.full_like(y, np.nan) if has_tail else None
    div = np.full(r, -1, dtype=np.int64)
    for i, tr in enumerate(trajs):
        m = len(tr.t)
        x[i, :m], y[i, :m], xi[i, :m] = tr.x, tr.y, tr.xi
        if has_tail:
            xt[i, :m], yt[i, :m] = tr.x_tail, tr.y_tail
        if tr.diverged_at is not None:
            div[i] = tr.diverged_at
    return Ensemble(instance, config, t, x, y, xi, xt, yt, div)


def simulate_coupled(instance: ProblemInstance, config: SimConfig, init1=None, init2=None) -> CoupledPair:
    """Two trajectories driven by one shared state path.

    ``init1``/``init2`` are ``(x0, y0)`` pairs; a missing one is drawn from
    the ball around ``(x*, y*)`` (first, then second, from the run's stream).
    """
    gen = stream(config.seed, *config.stream)
    zs = []
    for init in (init1, init2):
        if init is None:
            zs.append(instance.z_star + _ball(gen, instance.d, config.radius))
        else:
            z = np.concatenate([np.asarray(init[0], float), np.asarray(init[1], float)])
            if z.shape != (instance.d,):
                raise DimensionError("initial point does not match the instance dimensions")
            zs.append(z)
    if config.xi0 is None:
        xi0 = draw_from(instance.chain.stationary, gen.random())
    else:
        xi0 = int(config.xi0)
    recs = [_Recorder(config, instance.d, z, xi0) for z in zs]
    runs = [(z.copy(), rec) for z, rec in zip(zs, recs)]
    _advance(instance, config, gen, runs)
    a, b = (_to_trajectory(instance, config, rec) for rec in recs)
    m = min(len(a.t), len(b.t))
    dxn = np.linalg.norm(a.x[:m] - b.x[:m], axis=1)
    # ybar = y - y*(x); the difference of two of them is dy + gain @ dx
    gain = instance.fast_gain
    dyn = np.linalg.norm((a.y[:m] - b.y[:m]) + (a.x[:m] - b.x[:m]) @ gain.T, axis=1)
    return CoupledPair(a, b, dxn, dyn)


@dataclass(eq=False)
class CoupledEnsemble:
    t: np.ndarray
    sq_delta_x: np.ndarray  # (R, K)
    sq_delta_y: np.ndarray

    @property
    def mean_sq_delta_x(self) -> np.ndarray:
        return self.sq_delta_x.mean(axis=0)

    @property
    def mean_sq_delta_y(self) -> np.ndarray:
        return self.sq_delta_y.mean(axis=0)


def simulate_coupled_ensemble(instance: ProblemInstance, config: SimConfig, n_pairs: int,
                              threads: int | None = None) -> CoupledEnsemble:
    """``n_pairs`` independent coupled pairs with random initial points."""
    def one(k):
        return simulate_coupled(instance, replace(config, stream=config.stream + (k,)))

    threads = threads or default_threads()
    if threads == 1:
        pairs = [one(k) for k in range(n_pairs)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            pairs = list(pool.map(one, range(n_pairs)))
    t = config.recorded_indices()
    sx = np.full((n_pairs, len(t)), np.nan)
    sy = np.full((n_pairs, len(t)), np.nan)
    for i, p in enumerate(pairs):
        m = len(p.delta_x_norms)
        sx[i, :m] = p.delta_x_norms**2
        sy[i, :m] = p.delta_y_norms**2
    return CoupledEnsemble(t, sx, sy)


@numba.njit(cache=True, nogil=True)
def _centered_chunk(delta, j12, j22, gain, w11, w12, w21, w22, u1, u2, x_star, b2_term,
                    alpha, beta, xb, yb, state, cum, uniforms, t_start, every, n_steps,
                    rec_t, rec_x, rec_y, rec_xi, pos):
    eye_x = np.eye(xb.shape[0])
    eye_y = np.eye(yb.shape[0])
    t = t_start
    for k in range(uniforms.shape[0]):
        x = xb + x_star
        y = yb - gain @ x - b2_term
        wx = w11[state] @ x + w12[state] @ y + u1[state]
        wy = w21[state] @ x + w22[state] @ y + u2[state]
        new_xb = (eye_x - alpha * delta) @ xb - alpha * (j12 @ yb) - alpha * wx
        new_yb = ((eye_y - beta * j22) @ yb - beta * wy
                  - alpha * (gain @ (j12 @ yb + delta @ xb + wx)))
        xb = new_xb
        yb = new_yb
        t += 1
        state = kernels.next_state(cum, state, uniforms[k])
        if t % every == 0 or t == n_steps:
            rec_t[pos] = t
            rec_x[pos] = xb
            rec_y[pos] = yb
            rec_xi[pos] = state
            pos += 1
    return xb, yb, state, pos


def simulate_centered(instance: ProblemInstance, config: SimConfig) -> Trajectory:
    """Run the recursion in centered coordinates ``xbar = x - x*``, ``ybar = y - y*(x)``.

    Consumes the same random draws as :func:`simulate`, so with equal configs
    the reconstructed raw iterates agree with ``simulate`` up to round-off.
    The returned trajectory holds ``xbar`` and ``ybar``.
    """
    gen = stream(config.seed, *config.stream)
    z0, state = _initial(instance, config, gen)
    dx = instance.d_x
    gain = instance.fast_gain
    b2_term = np.linalg.solve(instance.J22, instance.b2)
    xb = z0[:dx] - instance.x_star
    yb = z0[dx:] - instance.y_star_of(z0[:dx])
    t_rec = config.recorded_indices()
    k = len(t_rec)
    rec_t = np.zeros(k, dtype=np.int64)
    rec_x = np.full((k, dx), np.nan)
    rec_y = np.full((k, instance.d_y), np.nan)
    rec_xi = np.zeros(k, dtype=np.int64)
    rec_x[0], rec_y[0], rec_xi[0] = xb, yb, state
    pos = 1
    nz = instance.noise
    args = (instance.Delta, instance.J12, instance.J22, gain, nz.W11, nz.W12, nz.W21, nz.W22,
            nz.u1, nz.u2, instance.x_star, b2_term, config.alpha, config.beta)
    t = 0
    while t < config.n_steps:
        n = min(CHUNK, config.n_steps - t)
        xb, yb, state, pos = _centered_chunk(*args, xb, yb, state, instance.chain.cumulative, gen.random(n),
                                             t, config.every, config.n_steps, rec_t, rec_x, rec_y, rec_xi, pos)
        t += n
    return Trajectory(rec_t[:pos], rec_x[:pos], rec_y[:pos], rec_xi[:pos], config)
