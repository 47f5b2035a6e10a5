"""Dense linear-algebra primitives for the small matrices of a linear TTSA system.

Everything here works on plain ``numpy`` arrays of dimension well below 100.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import (
    ConditioningWarning,
    DimensionError,
    SingularityError,
    StabilityError,
    ValidationError,
)

COND_LIMIT = 1e12


def as_matrix(a, name="matrix") -> np.ndarray:
    """Coerce to a finite 2-D float array."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{name} has non-finite entries")
    return a


def _square(a, name="matrix") -> np.ndarray:
    a = as_matrix(a, name)
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {a.shape}")
    return a


def is_hurwitz(a) -> tuple[bool, float]:
    """Test whether every eigenvalue of ``a`` has strictly positive real part.

    This is the convention used for ``J22`` and ``Delta``: ``-a`` is Hurwitz.
    Returns ``(stable, margin)`` where ``margin = min Re(eig(a))``.
    """
    a = _square(a)
    if a.shape[0] == 0:
        return True, float("inf")
    margin = float(np.min(np.linalg.eigvals(a).real))
    # eigvals of a pure rotation come back as +-1e-17 noise; snap to zero
    if abs(margin) < 1e-14 * max(1.0, float(np.abs(a).max())):
        margin = 0.0
    return margin > 0.0, margin


def solve_lyapunov(a) -> np.ndarray:
    """Solve ``a.T @ Q + Q @ a = I`` by Kronecker vectorization.

    The returned ``Q`` is exactly symmetric. Raises ``StabilityError`` when
    ``a`` has an eigenvalue with non-positive real part, and warns with
    ``ConditioningWarning`` when the vectorized system is ill conditioned.
    """
    a = _square(a)
    stable, margin = is_hurwitz(a)
    if not stable:
        raise StabilityError(
            f"Lyapunov solve needs eigenvalues with positive real part (min real part {margin:.3g})",
            margin=margin,
        )
    d = a.shape[0]
    eye = np.eye(d)
    # row-major vec: vec(A^T Q) = (A^T kron I) vec(Q), vec(Q A) = (I kron A^T) vec(Q)
    big = np.kron(a.T, eye) + np.kron(eye, a.T)
    cond = np.linalg.cond(big)
    if cond > COND_LIMIT:
        warnings.warn(f"Lyapunov system condition number {cond:.3g}", ConditioningWarning, stacklevel=2)
    q = np.linalg.solve(big, eye.reshape(-1)).reshape(d, d)
    return 0.5 * (q + q.T)


def lyapunov_residual(a, q) -> float:
    a = np.asarray(a, dtype=float)
    return float(np.linalg.norm(a.T @ q + q @ a - np.eye(a.shape[0])))


def schatten_norm(a, order=1) -> float:
    """Schatten norm of order 1 (nuclear) or ``inf`` (operator norm)."""
    a = as_matrix(a)
    if a.size == 0:
        return 0.0
    s = np.linalg.svd(a, compute_uv=False)
    if order == 1:
        return float(s.sum())
    if order in (np.inf, "inf", "infinity"):
        return float(s[0])
    raise ValueError(f"unsupported Schatten order {order!r}")


def op_norm(a) -> float:
    return schatten_norm(a, np.inf)


@dataclass(frozen=True)
class SpectralConstants:
    mu_x: float
    mu_y: float
    kappa_x: float
    kappa_y: float
    j_max: float


@dataclass(frozen=True)
class DerivedSystem:
    delta: np.ndarray
    qx: np.ndarray
    qy: np.ndarray
    constants: SpectralConstants


def derived_constants(j11, j12, j21, j22) -> DerivedSystem:
    """Reduced operator ``Delta``, Lyapunov solutions and condition numbers."""
    j11 = _square(j11, "J11")
    j22 = _square(j22, "J22")
    j12 = as_matrix(j12, "J12")
    j21 = as_matrix(j21, "J21")
    dx, dy = j11.shape[0], j22.shape[0]
    if j12.shape != (dx, dy) or j21.shape != (dy, dx):
        raise DimensionError(
            f"coupling blocks have shapes {j12.shape}, {j21.shape}; expected {(dx, dy)}, {(dy, dx)}"
        )
    if np.linalg.cond(j22) > COND_LIMIT:
        raise SingularityError("J22 is numerically singular")
    ok, margin = is_hurwitz(j22)
    if not ok:
        raise StabilityError(f"J22 is not stable (min real eigenvalue part {margin:.3g})", "J22", margin)
    delta = j11 - j12 @ np.linalg.solve(j22, j21)
    ok, margin = is_hurwitz(delta)
    if not ok:
        raise StabilityError(f"Delta is not stable (min real eigenvalue part {margin:.3g})", "Delta", margin)
    qx = solve_lyapunov(delta)
    qy = solve_lyapunov(j22)
    j_max = max(op_norm(m) for m in (j11, j12, j21, j22))
    mu_x = 1.0 / op_norm(qx)
    mu_y = 1.0 / op_norm(qy)
    kappa_y = j_max / mu_y
    kappa_x = kappa_y * j_max / mu_x
    return DerivedSystem(delta, qx, qy, SpectralConstants(mu_x, mu_y, kappa_x, kappa_y, j_max))
