"""Finite exogenous Markov chains: kernels, stationary laws, mixing constants."""
from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ErgodicityError, ValidationError
from .rng import stream

log = logging.getLogger(__name__)

ROW_TOL = 1e-9
# deviations at this level are round-off, not mixing
_DEV_FLOOR = 1e-12
_MAX_HORIZON = 100_000


@dataclass(frozen=True, eq=False)
class MarkovChain:
    """Row-stochastic kernel ``P[i, j] = Pr(next = j | current = i)``.

    ``rho`` is the second-largest eigenvalue modulus and ``c_rho`` the smallest
    prefactor (at least 1) for which ``||e_i P^n - pi||_1 <= c_rho * rho**n``
    holds on every point mass over the certification horizon. Point masses
    suffice because the total-variation error is convex in the initial law.
    """

    kernel: np.ndarray
    stationary: np.ndarray
    rho: float
    c_rho: float
    cumulative: np.ndarray = field(repr=False)
    # the kernel exactly as supplied, before row renormalization; serializing
    # this keeps rebuilds bit-identical
    source_kernel: np.ndarray = field(repr=False, default=None)

    @property
    def n_states(self) -> int:
        return self.kernel.shape[0]

    def tv_deviation(self, n: int) -> float:
        """``max_i ||e_i P^n - pi||_1``."""
        pn = np.linalg.matrix_power(self.kernel, n)
        return float(np.abs(pn - self.stationary).sum(axis=1).max())


def _is_primitive(kernel: np.ndarray) -> bool:
    # Wielandt: a primitive n x n matrix has A^k > 0 for k = (n-1)^2 + 1
    n = kernel.shape[0]
    pattern = (kernel > 0).astype(np.int64)
    k = (n - 1) ** 2 + 1
    result = np.eye(n, dtype=np.int64)
    base = pattern
    while k:
        if k & 1:
            result = np.minimum(result @ base, 1)
        base = np.minimum(base @ base, 1)
        k >>= 1
    return bool(result.all())


def stationary_distribution(kernel: np.ndarray) -> np.ndarray:
    """Solve ``(P^T - I) pi = 0`` with the last equation replaced by ``sum(pi) = 1``."""
    n = kernel.shape[0]
    a = kernel.T - np.eye(n)
    a[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    pi = np.linalg.solve(a, rhs)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def certification_horizon(rho: float) -> int:
    """``4 * tau`` where ``tau`` is the first step with ``rho**tau < 1e-6``."""
    if rho <= 0.0:
        return 4
    tau = math.floor(math.log(1e-6) / math.log(rho)) + 1
    return min(4 * tau, _MAX_HORIZON)


def _fit_c_rho(kernel, pi, rho) -> float:
    horizon = certification_horizon(rho)
    c = 1.0
    pn = np.eye(kernel.shape[0])
    for n in range(1, horizon + 1):
        pn = pn @ kernel
        dev = float(np.abs(pn - pi).sum(axis=1).max())
        if dev <= _DEV_FLOOR:
            if rho == 0.0:
                continue
            break
        if rho == 0.0:
            raise ErgodicityError("kernel has zero second eigenvalue but does not mix in finite steps")
        c = max(c, dev / rho**n)
    return c


def build_chain(kernel) -> MarkovChain:
    p = np.array(kernel, dtype=float)
    source = p.copy()
    if p.ndim != 2 or p.shape[0] != p.shape[1] or p.shape[0] < 1:
        raise ValidationError(f"kernel must be a non-empty square matrix, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValidationError("kernel has non-finite entries")
    if np.any(p < 0):
        raise ValidationError("kernel has negative entries")
    rows = p.sum(axis=1)
    if np.any(np.abs(rows - 1.0) > ROW_TOL):
        raise ValidationError(f"kernel rows must sum to 1 (worst row sum {rows[np.argmax(np.abs(rows - 1))]!r})")
    p = p / rows[:, None]
    if not _is_primitive(p):
        raise ErgodicityError("kernel is reducible or periodic")
    pi = stationary_distribution(p)
    n = p.shape[0]
    if n == 1:
        rho = 0.0
    else:
        mods = np.sort(np.abs(np.linalg.eigvals(p)))[::-1]
        rho = float(mods[1])
        if rho < 1e-12:
            rho = 0.0
    c_rho = _fit_c_rho(p, pi, rho)
    cum = np.cumsum(p, axis=1)
    cum[:, -1] = 1.0
    p.setflags(write=False)
    pi.setflags(write=False)
    cum.setflags(write=False)
    source.setflags(write=False)
    return MarkovChain(p, pi, rho, c_rho, cum, source)


def random_chain(n_states: int, seed: int, min_entry: float = 0.01) -> MarkovChain:
    """Random strictly positive kernel with every entry at least ``min_entry``.

    Each row is an i.i.d. uniform draw, normalized, then mixed with the
    uniform floor: ``P = min_entry + (1 - n * min_entry) * u / sum(u)``.
    """
    if n_states < 1:
        raise ValidationError("n_states must be at least 1")
    if not 0.0 < min_entry or min_entry * n_states >= 1.0:
        raise ValidationError(f"min_entry={min_entry} infeasible for {n_states} states")
    gen = stream(seed, 0xC4A1)
    u = gen.random((n_states, n_states))
    p = min_entry + (1.0 - n_states * min_entry) * u / u.sum(axis=1, keepdims=True)
    return build_chain(p)


def mixing_time(chain: MarkovChain, alpha: float, mu_x: float) -> int:
    """``ceil(log(alpha * mu_x / c_rho) / log(rho))``, at least 1."""
    if chain.rho == 0.0:
        return 1
    ratio = alpha * mu_x / chain.c_rho
    if ratio >= 1.0:
        log.info("alpha*mu_x >= c_rho: chain mixes within one effective step")
        return 1
    tau = math.log(ratio) / math.log(chain.rho)
    return max(1, math.ceil(tau - 1e-9))


class ChainSampler:
    """Stateful sampler; confined to one worker."""

    def __init__(self, chain: MarkovChain, seed: int, state: int | None = None, key=()):
        self.chain = chain
        self._gen = stream(seed, *key)
        if state is None:
            state = draw_from(chain.stationary, self._gen.random())
        if not 0 <= state < chain.n_states:
            raise IndexError(f"state {state} out of range")
        self.state = int(state)

    def sample(self, n: int) -> np.ndarray:
        """The next ``n`` states (the current state is not repeated)."""
        out = np.empty(n, dtype=np.int64)
        self.state = int(kernels.sample_path(self.chain.cumulative, self.state, self._gen.random(n), out))
        return out


def draw_from(probs: np.ndarray, u: float) -> int:
    cum = np.cumsum(probs)
    idx = int(np.searchsorted(cum, u, side="right"))
    return min(idx, len(probs) - 1)


def kernel_to_csv(chain_or_kernel) -> str:
    p = getattr(chain_or_kernel, "kernel", chain_or_kernel)
    buf = io.StringIO()
    for row in np.asarray(p):
        buf.write(",".join(format(float(v), ".17g") for v in row) + "\n")
    return buf.getvalue()


def kernel_from_csv(text: str) -> np.ndarray:
    rows = [line for line in text.splitlines() if line.strip()]
    return np.array([[float(v) for v in line.split(",")] for line in rows])
