"""Exact stationary moments of the joint chain ``(z_t, xi_t)``.

With ``z = (x, y)`` the recursion is ``z_{t+1} = A(xi_t) z_t + c(xi_t)``. For
a finite state space the conditional moments at stationarity solve the
forward balance equations

    pi(s') m(s') = sum_s P(s, s') pi(s) (A(s) m(s) + c(s))
    pi(s') S(s') = sum_s P(s, s') pi(s) (A S A^T + A m c^T + c m^T A^T + c c^T)(s)

which are solved here as dense linear systems. Internally everything is
expressed around ``z*`` (``e = z - z*``), which avoids cancellation when
forming covariances.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .chain import MarkovChain
from .errors import DesignError, OracleInfeasibleError, ValidationError
from .model import ProblemInstance


@dataclass(frozen=True, eq=False)
class LiftedSystem:
    instance: ProblemInstance
    alpha: float
    beta: float
    A: np.ndarray  # (n, d, d)
    c: np.ndarray  # (n, d)
    c_centered: np.ndarray  # (n, d): A(s) z* + c(s) - z*
    spectral_radius: float


def _step_diag(instance, alpha, beta):
    return np.concatenate([np.full(instance.d_x, alpha), np.full(instance.d_y, beta)])


def first_moment_operator(P: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Block matrix with block ``(s', s) = P[s, s'] A(s)`` acting on stacked ``pi(s) m(s)``."""
    n, d, _ = A.shape
    big = np.einsum("ab,aij->biaj", P, A)
    return big.reshape(n * d, n * d)


def second_moment_operator(P: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Block ``(s', s) = P[s, s'] kron(A(s), A(s))`` acting on stacked row-major ``vec(pi(s) S(s))``."""
    n, d, _ = A.shape
    kron = np.einsum("aij,akl->aikjl", A, A).reshape(n, d * d, d * d)
    big = np.einsum("ab,aij->biaj", P, kron)
    return big.reshape(n * d * d, n * d * d)


def _radius(op: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(op))))


def lift(instance: ProblemInstance, alpha: float, beta: float) -> LiftedSystem:
    """Joint-form per-state maps and the radius of the first-moment operator."""
    if alpha < 0 or beta < 0:
        raise ValidationError("stepsizes must be non-negative")
    mats, offs = instance.full_operators()
    h = _step_diag(instance, alpha, beta)
    eye = np.eye(instance.d)
    A = eye[None] - h[None, :, None] * mats
    c = -h[None, :] * offs
    zs = instance.z_star
    c_cent = np.einsum("sij,j->si", A, zs) + c - zs
    radius = _radius(first_moment_operator(instance.chain.kernel, A))
    if not radius < 1.0:
        raise OracleInfeasibleError(f"first-moment operator has spectral radius {radius:.12g} >= 1", radius)
    return LiftedSystem(instance, alpha, beta, A, c, c_cent, radius)


@dataclass(frozen=True, eq=False)
class FirstMoments:
    e: np.ndarray  # (n, d): E[(z - z*) 1{xi = s}]
    m: np.ndarray  # (n, d): E[z | xi = s]
    marginal_mean: np.ndarray
    bias_x: np.ndarray
    bias_y: np.ndarray  # E[y] - y*
    bias_ybar: np.ndarray  # E[y - y*(x)]
    residual: float


@dataclass(frozen=True, eq=False)
class StationaryMoments:
    alpha: float
    beta: float
    m: np.ndarray
    S: np.ndarray  # (n, d, d): E[z z^T | xi = s]
    marginal_mean: np.ndarray
    marginal_cov: np.ndarray
    bias_x: np.ndarray
    bias_y: np.ndarray
    bias_ybar: np.ndarray
    var_x_trace: float
    var_y_trace: float
    spectral_radius: float
    second_radius: float
    residuals: dict = field(default_factory=dict)
    conditional_cov: np.ndarray | None = None  # (n, d, d)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "beta": self.beta,
            "bias_x": [float(v) for v in self.bias_x],
            "bias_ybar": [float(v) for v in self.bias_ybar],
            "bias_y": [float(v) for v in self.bias_y],
            "var_x_trace": self.var_x_trace,
            "var_y_trace": self.var_y_trace,
            "spectral_radius": self.spectral_radius,
            "second_moment_radius": self.second_radius,
            "marginal_mean": [float(v) for v in self.marginal_mean],
            "residuals": dict(self.residuals),
        }


def stationary_first_moments(lifted: LiftedSystem, chain: MarkovChain | None = None) -> FirstMoments:
    inst = lifted.instance
    chain = chain or inst.chain
    P, pi = chain.kernel, chain.stationary
    A, cc = lifted.A, lifted.c_centered
    n, d = cc.shape
    T = first_moment_operator(P, A)
    rhs = np.einsum("ab,a,ai->bi", P, pi, cc).reshape(-1)
    e = np.linalg.solve(np.eye(n * d) - T, rhs).reshape(n, d)
    res = np.abs(e.reshape(-1) - T @ e.reshape(-1) - rhs).max()
    zs = inst.z_star
    m = zs[None] + e / pi[:, None]
    ebar = e.sum(axis=0)
    dx = inst.d_x
    bias_x = ebar[:dx]
    bias_y = ebar[dx:]
    bias_ybar = bias_y + inst.fast_gain @ bias_x
    scale = 1.0 + float(np.abs(m).max())
    return FirstMoments(e, m, zs + ebar, bias_x, bias_y, bias_ybar, float(res / scale))


def stationary_second_moments(lifted: LiftedSystem, chain: MarkovChain | None = None,
                              first: FirstMoments | None = None) -> StationaryMoments:
    inst = lifted.instance
    chain = chain or inst.chain
    first = first or stationary_first_moments(lifted, chain)
    P, pi = chain.kernel, chain.stationary
    A, cc, e = lifted.A, lifted.c_centered, first.e
    n, d = cc.shape
    T2 = second_moment_operator(P, A)
    radius2 = _radius(T2)
    if not radius2 < 1.0:
        raise OracleInfeasibleError(f"second-moment operator has spectral radius {radius2:.12g} >= 1", radius2)
    ae = np.einsum("sij,sj->si", A, e)
    src = (np.einsum("si,sj->sij", ae, cc) + np.einsum("si,sj->sij", cc, ae)
           + pi[:, None, None] * np.einsum("si,sj->sij", cc, cc))
    rhs = np.einsum("ab,aij->bij", P, src).reshape(-1)
    r = np.linalg.solve(np.eye(n * d * d) - T2, rhs)
    res = np.abs(r - T2 @ r - rhs).max()
    R = r.reshape(n, d, d)
    R = 0.5 * (R + R.transpose(0, 2, 1))

    zs = inst.z_star
    ebar = e.sum(axis=0)
    cov = R.sum(axis=0) - np.outer(ebar, ebar)
    cov = 0.5 * (cov + cov.T)
    em = e / pi[:, None]  # E[z - z* | s]
    cond_cov = R / pi[:, None, None] - np.einsum("si,sj->sij", em, em)
    S = (np.einsum("i,j->ij", zs, zs)[None] + np.einsum("si,j->sij", em, zs)
         + np.einsum("i,sj->sij", zs, em) + R / pi[:, None, None])
    dx = inst.d_x
    scale = 1.0 + float(np.abs(R / pi[:, None, None]).max())
    return StationaryMoments(
        lifted.alpha, lifted.beta, first.m, S, first.marginal_mean, cov,
        first.bias_x, first.bias_y, first.bias_ybar,
        float(np.trace(cov[:dx, :dx])), float(np.trace(cov[dx:, dx:])),
        lifted.spectral_radius, radius2,
        {"first_moment_balance": first.residual, "second_moment_balance": float(res / scale)},
        cond_cov,
    )


def stationary_moments(instance: ProblemInstance, alpha: float, beta: float) -> StationaryMoments:
    lifted = lift(instance, alpha, beta)
    return stationary_second_moments(lifted)


def stationary_bias(instance: ProblemInstance, alpha: float, beta: float) -> FirstMoments:
    """First moments only (cheaper than the full second-moment solve)."""
    return stationary_first_moments(lift(instance, alpha, beta))


@dataclass(frozen=True, eq=False)
class BiasExpansion:
    grid: np.ndarray  # (k, 2) rows of (alpha, beta)
    b1_x: np.ndarray
    b2_x: np.ndarray
    b1_y: np.ndarray
    b2_y: np.ndarray
    bias_x: np.ndarray  # (k, dx) oracle values
    bias_ybar: np.ndarray
    residual_x: np.ndarray  # (k,) norms of the linear-fit remainder
    residual_y: np.ndarray
    remainder_const: float  # max over grid of remainder / beta^2

    @property
    def remainder_ratio(self) -> np.ndarray:
        return np.maximum(self.residual_x, self.residual_y) / self.grid[:, 1] ** 2


def bias_expansion(instance: ProblemInstance, stepsize_grid) -> BiasExpansion:
    """Least-squares fit of ``bias(alpha, beta) ~ alpha * b1 + beta * b2`` per coordinate."""
    grid = np.asarray(stepsize_grid, dtype=float)
    if grid.ndim != 2 or grid.shape[1] != 2 or grid.shape[0] < 3:
        raise DesignError("need at least 3 (alpha, beta) grid points")
    if np.linalg.matrix_rank(grid, tol=1e-12 * np.abs(grid).max()) < 2:
        raise DesignError("grid varies alpha and beta jointly; the two directions are not identifiable")
    bx, by = [], []
    for a, b in grid:
        fm = stationary_bias(instance, a, b)
        bx.append(fm.bias_x)
        by.append(fm.bias_ybar)
    bx, by = np.array(bx), np.array(by)
    cx, *_ = np.linalg.lstsq(grid, bx, rcond=None)
    cy, *_ = np.linalg.lstsq(grid, by, rcond=None)
    rx = np.linalg.norm(bx - grid @ cx, axis=1)
    ry = np.linalg.norm(by - grid @ cy, axis=1)
    const = float(np.max(np.maximum(rx, ry) / grid[:, 1] ** 2))
    return BiasExpansion(grid, cx[0], cx[1], cy[0], cy[1], bx, by, rx, ry, const)
