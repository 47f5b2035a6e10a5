"""Linear TTSA problem instances.

An instance bundles the mean-field blocks ``J11..J22``, offsets ``b1, b2``,
the exogenous chain, and per-state noise fields ``W_ij(s), u_i(s)``, together
with everything derived from them (fixed point, Lyapunov matrices, condition
numbers, noise scales).
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import spectral
from .chain import MarkovChain, build_chain, mixing_time, random_chain
from .errors import DimensionError, ValidationError
from .rng import stream
from .spectral import SpectralConstants, op_norm

log = logging.getLogger(__name__)

CENTER_TOL = 1e-12
# W is rescaled only when w_max exceeds J_max by more than this factor, which
# keeps re-assembly of an already processed instance bit-identical.
WMAX_SLACK = 1e-9

BLOCKS = ("W11", "W12", "W21", "W22")


@dataclass(frozen=True, eq=False)
class NoiseField:
    W11: np.ndarray  # (n, dx, dx)
    W12: np.ndarray  # (n, dx, dy)
    W21: np.ndarray  # (n, dy, dx)
    W22: np.ndarray  # (n, dy, dy)
    u1: np.ndarray  # (n, dx)
    u2: np.ndarray  # (n, dy)

    @property
    def w_max(self) -> float:
        return max(
            (op_norm(m) for block in (self.W11, self.W12, self.W21, self.W22) for m in block),
            default=0.0,
        )

    @property
    def u_max(self) -> float:
        return float(max(np.linalg.norm(self.u1, axis=1).max(), np.linalg.norm(self.u2, axis=1).max()))

    @classmethod
    def zeros(cls, n_states, dx, dy) -> "NoiseField":
        return cls(
            np.zeros((n_states, dx, dx)), np.zeros((n_states, dx, dy)),
            np.zeros((n_states, dy, dx)), np.zeros((n_states, dy, dy)),
            np.zeros((n_states, dx)), np.zeros((n_states, dy)),
        )


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    J11: np.ndarray
    J12: np.ndarray
    J21: np.ndarray
    J22: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    chain: MarkovChain
    noise: NoiseField
    x_star: np.ndarray
    y_star: np.ndarray
    Delta: np.ndarray
    Qx: np.ndarray
    Qy: np.ndarray
    constants: SpectralConstants
    sigma_x: float
    sigma_y: float
    seed_info: dict = field(default_factory=dict)

    @property
    def d_x(self) -> int:
        return self.J11.shape[0]

    @property
    def d_y(self) -> int:
        return self.J22.shape[0]

    @property
    def d(self) -> int:
        return self.d_x + self.d_y

    @property
    def n_states(self) -> int:
        return self.chain.n_states

    @property
    def z_star(self) -> np.ndarray:
        return np.concatenate([self.x_star, self.y_star])

    @property
    def fast_gain(self) -> np.ndarray:
        """``J22^{-1} J21``, so that ``y*(x) = y* - fast_gain @ (x - x*)``."""
        return np.linalg.solve(self.J22, self.J21)

    def y_star_of(self, x) -> np.ndarray:
        """Fast-timescale fixed point ``y*(x) = -J22^{-1}(J21 x + b2)``; batched over leading axes."""
        x = np.asarray(x, dtype=float)
        rhs = x @ self.J21.T + self.b2
        return -np.linalg.solve(self.J22, rhs.T).T if rhs.ndim > 1 else -np.linalg.solve(self.J22, rhs)

    def full_operators(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-state ``J + W(s)`` (n, d, d) and ``b + u(s)`` (n, d) in joint ``z = (x, y)`` form."""
        nz = self.noise
        top = np.concatenate([self.J11 + nz.W11, self.J12 + nz.W12], axis=2)
        bottom = np.concatenate([self.J21 + nz.W21, self.J22 + nz.W22], axis=2)
        mats = np.ascontiguousarray(np.concatenate([top, bottom], axis=1))
        offs = np.ascontiguousarray(np.concatenate([self.b1 + nz.u1, self.b2 + nz.u2], axis=1))
        return mats, offs

    def to_dict(self) -> dict[str, Any]:
        nz = self.noise
        doc = {
            "d_x": self.d_x,
            "d_y": self.d_y,
            "n_states": self.n_states,
            "J11": _flat(self.J11), "J12": _flat(self.J12),
            "J21": _flat(self.J21), "J22": _flat(self.J22),
            "b1": _flat(self.b1), "b2": _flat(self.b2),
            "kernel": _flat(self.chain.source_kernel),
        }
        for name in BLOCKS:
            doc[name] = [_flat(m) for m in getattr(nz, name)]
        doc["u1"] = [_flat(v) for v in nz.u1]
        doc["u2"] = [_flat(v) for v in nz.u2]
        doc["seed_info"] = dict(self.seed_info)
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"


def _flat(a) -> list[float]:
    return [float(v) for v in np.asarray(a, dtype=float).reshape(-1)]


def _center(block: np.ndarray, pi: np.ndarray, name: str) -> np.ndarray:
    mean = np.tensordot(pi, block, axes=1)
    if np.linalg.norm(mean) > CENTER_TOL:
        log.debug("re-centering %s (pi-mean norm %.3g)", name, np.linalg.norm(mean))
        block = block - mean
    return block


def noise_levels(noise: NoiseField, x, y) -> tuple[float, float]:
    """``max_s ||w^x(x, y; s)||`` and the same for ``w^y``; at the fixed point these are sigma_x, sigma_y."""
    wx = np.einsum("sij,j->si", noise.W11, x) + np.einsum("sij,j->si", noise.W12, y) + noise.u1
    wy = np.einsum("sij,j->si", noise.W21, x) + np.einsum("sij,j->si", noise.W22, y) + noise.u2
    return (math.sqrt(float(np.max(np.sum(wx * wx, axis=1)))),
            math.sqrt(float(np.max(np.sum(wy * wy, axis=1)))))


def assemble_instance(j11, j12, j21, j22, b1, b2, chain: MarkovChain, noise: NoiseField | None = None,
                      seed_info: dict | None = None) -> ProblemInstance:
    """Validate blocks, center the noise under ``pi`` and derive all constants.

    Raises ``StabilityError`` (naming ``J22`` or ``Delta``) when Assumption-1
    style stability fails, and ``DimensionError`` on any shape mismatch.
    """
    j11, j12, j21, j22 = (spectral.as_matrix(m, n) for m, n in
                          ((j11, "J11"), (j12, "J12"), (j21, "J21"), (j22, "J22")))
    dx, dy = j11.shape[0], j22.shape[0]
    if dx == 0 or dy == 0:
        raise DimensionError("both d_x and d_y must be positive")
    b1 = np.asarray(b1, dtype=float).reshape(-1)
    b2 = np.asarray(b2, dtype=float).reshape(-1)
    if b1.shape != (dx,) or b2.shape != (dy,):
        raise DimensionError(f"offset shapes {b1.shape}, {b2.shape} do not match d_x={dx}, d_y={dy}")
    derived = spectral.derived_constants(j11, j12, j21, j22)
    n = chain.n_states
    if noise is None:
        noise = NoiseField.zeros(n, dx, dy)
    shapes = {"W11": (n, dx, dx), "W12": (n, dx, dy), "W21": (n, dy, dx), "W22": (n, dy, dy),
              "u1": (n, dx), "u2": (n, dy)}
    arrays = {}
    for name, shape in shapes.items():
        a = np.asarray(getattr(noise, name), dtype=float)
        if a.shape != shape:
            raise DimensionError(f"noise block {name} has shape {a.shape}, expected {shape}")
        if not np.all(np.isfinite(a)):
            raise ValidationError(f"noise block {name} has non-finite entries")
        arrays[name] = _center(a, chain.stationary, name)
    noise = NoiseField(**arrays)
    j_max = derived.constants.j_max
    w_max = noise.w_max
    if w_max > j_max * (1.0 + WMAX_SLACK):
        scale = j_max / w_max
        log.info("rescaling W blocks by %.6g so that w_max <= J_max", scale)
        noise = NoiseField(*(getattr(noise, b) * scale for b in BLOCKS), noise.u1, noise.u2)

    x_star = -np.linalg.solve(derived.delta, b1 - j12 @ np.linalg.solve(j22, b2))
    y_star = -np.linalg.solve(j22, j21 @ x_star + b2)
    sigma_x, sigma_y = noise_levels(noise, x_star, y_star)
    return ProblemInstance(
        j11, j12, j21, j22, b1, b2, chain, noise, x_star, y_star,
        derived.delta, derived.qx, derived.qy, derived.constants,
        sigma_x, sigma_y, dict(seed_info or {}),
    )


def evaluate_operators(instance: ProblemInstance, x, y, xi: int):
    """``(F(x, y), G(x, y), w^x(x, y; xi), w^y(x, y; xi))``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != (instance.d_x,) or y.shape != (instance.d_y,):
        raise DimensionError("point dimensions do not match the instance")
    if not 0 <= xi < instance.n_states:
        raise IndexError(f"state {xi} out of range for {instance.n_states} states")
    nz = instance.noise
    f = instance.J11 @ x + instance.J12 @ y + instance.b1
    g = instance.J21 @ x + instance.J22 @ y + instance.b2
    wx = nz.W11[xi] @ x + nz.W12[xi] @ y + nz.u1[xi]
    wy = nz.W21[xi] @ x + nz.W22[xi] @ y + nz.u2[xi]
    return f, g, wx, wy


@dataclass(frozen=True)
class StepsizePair:
    alpha: float
    beta: float
    tau_alpha: int
    feasible: bool
    margins: tuple[float, float]


def validate_stepsizes(instance: ProblemInstance, alpha: float, beta: float,
                       c1: float = 1.0, c2: float = 1.0) -> StepsizePair:
    """Label ``(alpha, beta)`` against the two stepsize conditions; never refuses.

    ``m1 = c1 / (J_max kappa_y^2 kappa_x^2) - beta * tau_alpha`` and
    ``m2 = c2 / (kappa_y^3 kappa_x) - alpha / beta``.
    """
    if alpha <= 0 or beta <= 0:
        raise ValidationError("stepsizes must be positive")
    k = instance.constants
    tau = mixing_time(instance.chain, alpha, k.mu_x)
    m1 = c1 / (k.j_max * k.kappa_y**2 * k.kappa_x**2) - beta * tau
    m2 = c2 / (k.kappa_y**3 * k.kappa_x) - alpha / beta
    return StepsizePair(alpha, beta, tau, m1 >= 0 and m2 >= 0, (m1, m2))


def _stable_block(gen, d, lo, hi, skew):
    # U (diag(lam) + strictly upper N) U^T has eigenvalues exactly lam
    lam = lo + (hi - lo) * gen.random(d)
    q, r = np.linalg.qr(gen.standard_normal((d, d)))
    q = q * np.sign(np.diag(r))
    upper = np.triu(gen.standard_normal((d, d)), k=1) * skew
    return q @ (np.diag(lam) + upper) @ q.T


def random_instance(d_x: int, d_y: int, n_states: int, seed: int, *,
                    eig_range_delta=(0.5, 1.5), eig_range_j22=(0.5, 1.5),
                    noise_scale: float = 1.0, coupling_scale: float = 0.5,
                    min_entry: float = 0.01, skew: float = 0.25) -> ProblemInstance:
    """Generate a random instance satisfying the structural assumptions.

    ``Delta`` and ``J22`` are built with real eigenvalues drawn from the
    requested ranges; ``J11`` is backed out as ``Delta + J12 J22^{-1} J21``.
    Noise entries are i.i.d. ``N(0, noise_scale^2)`` before centering and the
    ``W_max <= J_max`` rescaling.
    """
    if d_x < 1 or d_y < 1:
        raise DimensionError("d_x and d_y must be at least 1")
    for lo, hi in (eig_range_delta, eig_range_j22):
        if not 0 < lo <= hi:
            raise ValidationError(f"invalid eigenvalue range ({lo}, {hi})")
    chain = random_chain(n_states, seed, min_entry)
    gen = stream(seed, 0x1A57)
    delta = _stable_block(gen, d_x, *eig_range_delta, skew)
    j22 = _stable_block(gen, d_y, *eig_range_j22, skew)
    scale = 1.0 / math.sqrt(max(d_x, d_y))
    j12 = coupling_scale * scale * gen.standard_normal((d_x, d_y))
    j21 = coupling_scale * scale * gen.standard_normal((d_y, d_x))
    j11 = delta + j12 @ np.linalg.solve(j22, j21)
    b1 = gen.standard_normal(d_x)
    b2 = gen.standard_normal(d_y)
    n = n_states
    noise = NoiseField(
        noise_scale * gen.standard_normal((n, d_x, d_x)),
        noise_scale * gen.standard_normal((n, d_x, d_y)),
        noise_scale * gen.standard_normal((n, d_y, d_x)),
        noise_scale * gen.standard_normal((n, d_y, d_y)),
        noise_scale * gen.standard_normal((n, d_x)),
        noise_scale * gen.standard_normal((n, d_y)),
    )
    info = {
        "generator": "random_instance", "seed": int(seed), "d_x": d_x, "d_y": d_y, "n_states": n_states,
        "eig_range_delta": list(eig_range_delta), "eig_range_j22": list(eig_range_j22),
        "noise_scale": noise_scale, "coupling_scale": coupling_scale, "min_entry": min_entry, "skew": skew,
    }
    return assemble_instance(j11, j12, j21, j22, b1, b2, chain, noise, info)


def _reshape(doc, key, shape):
    try:
        return np.asarray(doc[key], dtype=float).reshape(shape)
    except KeyError:
        raise ValidationError(f"instance document is missing {key!r}") from None
    except ValueError as exc:
        raise DimensionError(f"{key}: {exc}") from None


def raw_blocks(doc: dict) -> dict[str, np.ndarray]:
    """Parse an instance document into arrays without any validation beyond shapes."""
    try:
        dx, dy, n = int(doc["d_x"]), int(doc["d_y"]), int(doc["n_states"])
    except KeyError as exc:
        raise ValidationError(f"instance document is missing {exc.args[0]!r}") from None
    if dx < 1 or dy < 1:
        raise DimensionError("both d_x and d_y must be positive")
    shapes = {
        "J11": (dx, dx), "J12": (dx, dy), "J21": (dy, dx), "J22": (dy, dy), "b1": (dx,), "b2": (dy,),
        "kernel": (n, n), "W11": (n, dx, dx), "W12": (n, dx, dy), "W21": (n, dy, dx), "W22": (n, dy, dy),
        "u1": (n, dx), "u2": (n, dy),
    }
    return {k: _reshape(doc, k, s) for k, s in shapes.items()}


def instance_from_dict(doc: dict) -> ProblemInstance:
    a = raw_blocks(doc)
    chain = build_chain(a["kernel"])
    noise = NoiseField(a["W11"], a["W12"], a["W21"], a["W22"], a["u1"], a["u2"])
    return assemble_instance(a["J11"], a["J12"], a["J21"], a["J22"], a["b1"], a["b2"], chain, noise,
                             doc.get("seed_info") or {})


def instance_from_json(text: str) -> ProblemInstance:
    return instance_from_dict(json.loads(text))


def save_instance(instance: ProblemInstance, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(instance.to_json())


def load_instance(path) -> ProblemInstance:
    with open(path, encoding="utf-8") as fh:
        return instance_from_json(fh.read())
