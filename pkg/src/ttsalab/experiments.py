"""Experiment pipelines behind ``ttsalab run``.

Each analysis returns an :class:`AnalysisResult` holding a CSV table, a list
of scaling reports, an SVG chart and a summary dict. Ensembles and oracle
solves are cached per stepsize pair so analyses sharing a pair reuse them.
"""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import svg
from .engine import SimConfig, simulate_coupled_ensemble, simulate_ensemble
from .errors import OracleInfeasibleError, ValidationError
from .model import ProblemInstance, load_instance, random_instance
from .moments import stationary_moments
from .stats import ALPHA_AND_BETA, BETA_ONLY, estimate_bias_variance, fit_scaling, warmup

SCHEMA = 1
ANALYSES = ("bias-vs-beta", "bias-vs-alpha", "variance-vs-beta", "variance-vs-alpha",
            "ta-vs-rr", "coupling-decay", "oracle-comparison")


def _bits(v: float) -> tuple[int, int]:
    u = struct.unpack("<Q", struct.pack("<d", float(v)))[0]
    return u >> 32, u & 0xFFFFFFFF


@dataclass
class ExperimentConfig:
    instance: dict = field(default_factory=lambda: {"generate": {"d_x": 2, "d_y": 2, "n_states": 10, "seed": 7}})
    alphas: list = field(default_factory=lambda: [0.0001, 0.0003, 0.0005])
    betas: list = field(default_factory=lambda: [0.03, 0.04, 0.05, 0.06, 0.07])
    alpha_sweep: list = field(default_factory=lambda: [0.0001, 0.0002, 0.0003, 0.0004, 0.0005])
    beta_fixed: float = 0.05
    rr: dict = field(default_factory=lambda: {"alpha": 0.0003, "betas": [0.01, 0.02, 0.04, 0.08],
                                              "modes": [BETA_ONLY]})
    coupling: dict = field(default_factory=lambda: {"alpha": 0.0003, "beta": 0.02, "n_pairs": 200, "n_steps": None})
    oracle_grid: list = field(default_factory=lambda: [[0.0003, 0.02]])
    oracle_json: list = field(default_factory=list)
    n_steps: int = 2_000_000
    n_replicas: int = 200
    record_every: int = 10_000
    t0_factor: float = 10.0
    shared_noise: bool = False
    iterate: str = "both"
    analyses: list = field(default_factory=lambda: ["bias-vs-beta", "variance-vs-beta"])
    out: str = "out"
    seed: int = 0
    schema: int = SCHEMA

    def validate(self) -> None:
        if self.schema != SCHEMA:
            raise ValidationError(f"unsupported config schema {self.schema}")
        unknown = [a for a in self.analyses if a not in ANALYSES]
        if unknown:
            raise ValidationError(f"unknown analyses {unknown}")
        if not self.analyses:
            raise ValidationError("no analyses requested")
        needs = {
            "bias-vs-beta": (self.alphas, self.betas), "variance-vs-beta": (self.alphas, self.betas),
            "bias-vs-alpha": (self.alpha_sweep,), "variance-vs-alpha": (self.alpha_sweep,),
            "ta-vs-rr": (self.rr.get("betas"), self.rr.get("modes")), "oracle-comparison": (self.oracle_grid,),
        }
        for a in self.analyses:
            for grid in needs.get(a, ()):
                if not grid:
                    raise ValidationError(f"analysis {a} needs a non-empty grid")
        if self.n_replicas < 1 or self.n_steps < 1 or self.record_every < 1:
            raise ValidationError("simulation budget must be positive")
        if self.iterate not in ("x", "y", "both"):
            raise ValidationError("iterate must be x, y or both")
        if not ({"generate", "load"} & set(self.instance)):
            raise ValidationError("instance must specify 'generate' or 'load'")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(doc) - known
        if extra:
            raise ValidationError(f"unknown config keys {sorted(extra)}")
        cfg = cls(**doc)
        cfg.validate()
        return cfg


def preset(name: str) -> ExperimentConfig:
    """Named parameter grids for the standard figures; budgets not fixed here use package defaults."""
    if name in ("fig1", "fig2"):
        return ExperimentConfig(
            iterate="x" if name == "fig1" else "y",
            analyses=["bias-vs-beta", "variance-vs-beta", "bias-vs-alpha", "variance-vs-alpha"],
        )
    if name == "fig5":
        return ExperimentConfig(rr={"alpha": 0.0003, "betas": [0.01, 0.02, 0.04, 0.08], "modes": [BETA_ONLY]},
                                analyses=["ta-vs-rr"])
    if name == "fig6":
        return ExperimentConfig(rr={"alpha": 0.0003, "betas": [0.02], "modes": [BETA_ONLY, ALPHA_AND_BETA]},
                                analyses=["ta-vs-rr"])
    raise ValidationError(f"unknown preset {name!r}")


def build_instance(spec: dict, base_dir=".") -> ProblemInstance:
    if "load" in spec:
        path = spec["load"]
        return load_instance(path if os.path.isabs(path) else os.path.join(base_dir, path))
    g = dict(spec["generate"])
    kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in g.items()
          if k not in ("d_x", "d_y", "n_states", "seed")}
    return random_instance(g.get("d_x", 2), g.get("d_y", 2), g.get("n_states", 10), g.get("seed", 7), **kw)


@dataclass
class AnalysisResult:
    name: str
    csv: str
    reports: list
    svg: str
    summary: dict


class Runner:
    """Caches ensembles and oracle solves for one instance and budget."""

    def __init__(self, instance: ProblemInstance, config: ExperimentConfig, threads: int | None = None):
        self.instance = instance
        self.config = config
        self.threads = threads
        self._ens = {}
        self._oracle = {}

    def t0(self, alpha: float) -> int:
        c = self.config
        return warmup(alpha, self.instance.constants.mu_x, c.record_every, c.t0_factor)

    def sim_config(self, alpha, beta, tail_start) -> SimConfig:
        c = self.config
        key = (0,) if c.shared_noise else (1, *_bits(alpha), *_bits(beta))
        return SimConfig(alpha, beta, c.n_steps, record_every=c.record_every, seed=c.seed,
                         stream=key, tail_start=tail_start)

    def ensemble(self, alpha, beta, tail_start):
        k = (alpha, beta, tail_start)
        if k not in self._ens:
            self._ens[k] = simulate_ensemble(self.instance, self.sim_config(alpha, beta, tail_start),
                                             self.config.n_replicas, self.threads)
        return self._ens[k]

    def oracle(self, alpha, beta):
        k = (alpha, beta)
        if k not in self._oracle:
            try:
                self._oracle[k] = stationary_moments(self.instance, alpha, beta)
            except OracleInfeasibleError:
                self._oracle[k] = None
        return self._oracle[k]

    def divergence_fraction(self) -> float:
        fr = [float(np.mean(e.diverged_at >= 0)) for e in self._ens.values()]
        return max(fr, default=0.0)


def _norm_se(v, se):
    n = float(np.linalg.norm(v))
    if n == 0.0:
        return n, float(np.linalg.norm(se))
    return n, float(np.sqrt(np.sum((v * se) ** 2)) / n)


def _num(v) -> str:
    return "nan" if v is None else format(float(v), ".17g")


def measure_point(runner: Runner, alpha: float, beta: float) -> dict:
    t0 = runner.t0(alpha)
    ens = runner.ensemble(alpha, beta, t0)
    est = estimate_bias_variance(ens, t0, runner.config.n_steps, seed=runner.config.seed)
    orc = runner.oracle(alpha, beta)
    bx, bx_se = _norm_se(est.bias_x, est.bias_x_se)
    by, by_se = _norm_se(est.bias_y, est.bias_y_se)
    return {
        "alpha": alpha, "beta": beta, "estimate": est, "oracle": orc,
        "bias_x": (bx, bx_se, None if orc is None else float(np.linalg.norm(orc.bias_x))),
        "bias_y": (by, by_se, None if orc is None else float(np.linalg.norm(orc.bias_y))),
        "variance_x": (est.var_x, est.var_x_se, None if orc is None else orc.var_x_trace),
        "variance_y": (est.var_y, est.var_y_se, None if orc is None else orc.var_y_trace),
    }


def _iterates(config):
    return ("x", "y") if config.iterate == "both" else (config.iterate,)


def sweep(runner: Runner, quantity: str, over: str) -> AnalysisResult:
    """``quantity`` in {bias, variance}; ``over`` in {beta, alpha}."""
    c = runner.config
    curves = [(a, [(a, b) for b in c.betas]) for a in c.alphas] if over == "beta" else \
        [(c.beta_fixed, [(a, c.beta_fixed) for a in c.alpha_sweep])]
    lines = ["alpha,beta,iterate,measured,se,oracle"]
    reports, series = [], []
    summary = {"curves": []}
    for fixed, pts in curves:
        rows = [measure_point(runner, a, b) for a, b in pts]
        grid = [b for _, b in pts] if over == "beta" else [a for a, _ in pts]
        for it in _iterates(c):
            key = f"{quantity}_{it}"
            vals = [r[key] for r in rows]
            for (a, b), (m, s, o) in zip(pts, vals):
                lines.append(",".join([_num(a), _num(b), it, _num(m), _num(s), _num(o)]))
            meas = np.array([v[0] for v in vals])
            se = np.array([v[1] for v in vals])
            label = f"{'alpha' if over == 'beta' else 'beta'}={fixed:g}"
            # variance is linear in alpha through the origin, so fit a power law there
            model = "power" if quantity == "variance" and over == "alpha" else "affine"
            if len(grid) >= 3:
                if model == "power" and not np.all(meas > 0):
                    model = "affine"
                rep = fit_scaling(grid, meas, se if np.all(se > 0) else None, model,
                                  quantity=f"{key} vs {over} ({label})")
                reports.append(rep)
            series.append((f"{it} MC {label}", grid, list(meas), False))
            orc = [v[2] for v in vals]
            if all(o is not None for o in orc):
                series.append((f"{it} oracle {label}", grid, orc, True))
                if len(grid) >= 3:
                    reports.append(fit_scaling(grid, orc, None, model if np.all(np.array(orc) > 0) else "affine",
                                               quantity=f"oracle {key} vs {over} ({label})"))
            summary["curves"].append({"iterate": it, "fixed": fixed, over: grid, "measured": list(map(float, meas)),
                                      "se": list(map(float, se)), "oracle": orc})
    chart = svg.line_chart(series, title=f"{quantity} vs {over}", xlabel=over,
                           ylabel="|bias|" if quantity == "bias" else "Tr V")
    return AnalysisResult(f"{quantity}-vs-{over}", "\n".join(lines) + "\n", reports, chart, summary)


def rr_curves(runner: Runner, alpha: float, betas, modes) -> dict:
    """Absolute-error curves of tail averages (TA) and RR extrapolations.

    The error of a curve at step ``t`` is the distance from the replica mean
    of the estimator to the fixed point. Returns ``{label: (t, err_x, err_y)}``
    plus pairing metadata.
    """
    inst = runner.instance
    t0 = runner.t0(alpha)
    curves = {}
    meta = {}
    for beta in betas:
        base = runner.ensemble(alpha, beta, t0)
        keep = base.t >= t0
        t = base.t[keep]
        mx = base.x_tail[:, keep].mean(axis=0)
        my = base.y_tail[:, keep].mean(axis=0)
        curves[f"TA beta={beta:g}"] = (t, np.linalg.norm(mx - inst.x_star, axis=1),
                                       np.linalg.norm(my - inst.y_star, axis=1))
        meta[f"TA beta={beta:g}"] = {"kind": "TA", "alpha": alpha, "beta": beta}
        for mode in modes:
            a2 = 2 * alpha if mode == ALPHA_AND_BETA else alpha
            other = runner.ensemble(a2, 2 * beta, t0)
            ox = other.x_tail[:, keep].mean(axis=0)
            oy = other.y_tail[:, keep].mean(axis=0)
            tag = "RR beta" if mode == BETA_ONLY else "RR alpha+beta"
            label = f"{tag} beta={beta:g},{2 * beta:g}"
            curves[label] = (t, np.linalg.norm(2 * mx - ox - inst.x_star, axis=1),
                             np.linalg.norm(2 * my - oy - inst.y_star, axis=1))
            meta[label] = {"kind": mode, "alpha": alpha, "beta": beta, "paired_with": [a2, 2 * beta]}
    return {"curves": curves, "meta": meta, "t0": t0}


def tail_mean(t, err, n_steps, frac=0.1) -> float:
    sel = t >= (1.0 - frac) * n_steps
    return float(np.mean(err[sel]))


def ta_vs_rr(runner: Runner) -> AnalysisResult:
    c = runner.config
    alpha = c.rr["alpha"]
    betas = c.rr["betas"]
    modes = c.rr["modes"]
    res = rr_curves(runner, alpha, betas, modes)
    lines = ["t,curve,iterate,abs_error"]
    summary = {"alpha": alpha, "t0": res["t0"], "tail_fraction": 0.1, "tail_means": {}}
    series = []
    for label, (t, ex, ey) in res["curves"].items():
        for it, err in (("x", ex), ("y", ey)):
            if it in _iterates(c):
                for tv, ev in zip(t, err):
                    lines.append(f"{int(tv)},{label},{it},{_num(ev)}")
        summary["tail_means"][label] = {"x": tail_mean(t, ex, c.n_steps), "y": tail_mean(t, ey, c.n_steps),
                                        **res["meta"][label]}
        it0 = _iterates(c)[0]
        series.append((label, list(t), list(ex if it0 == "x" else ey), label.startswith("RR")))
    reports = []
    if len(betas) >= 3:
        for kind in ["TA"] + list(modes):
            labels = [k for k, m in res["meta"].items() if m["kind"] == kind]
            vals = [summary["tail_means"][k]["x"] for k in labels]
            if all(v > 0 for v in vals):
                reports.append(fit_scaling(betas, vals, None, "power", quantity=f"{kind} tail error (x) vs beta"))
    chart = svg.line_chart(series, title=f"TA vs RR (alpha={alpha:g})", xlabel="t", ylabel="absolute error",
                           logy=True)
    return AnalysisResult("ta-vs-rr", "\n".join(lines) + "\n", reports, chart, summary)


def coupling_decay(runner: Runner) -> AnalysisResult:
    c = runner.config
    cp = c.coupling
    alpha, beta = cp["alpha"], cp["beta"]
    mu_x = runner.instance.constants.mu_x
    n = cp.get("n_steps") or int(math.ceil(20.0 / (alpha * mu_x)))
    every = max(1, n // 200)
    cfg = SimConfig(alpha, beta, n, record_every=every, seed=c.seed, stream=(2,))
    ce = simulate_coupled_ensemble(runner.instance, cfg, cp.get("n_pairs", 200), runner.threads)
    msd = ce.mean_sq_delta_x
    sel = (ce.t >= n // 4) & (msd > 0)
    bound = -alpha * mu_x / 16.0
    rep = fit_scaling(ce.t[sel], msd[sel], None, "exponential", quantity="mean squared coupled distance (x)",
                      band=("rate", -math.inf, bound))
    lines = ["t,mean_sq_delta_x,mean_sq_delta_y"]
    for tv, a, b in zip(ce.t, msd, ce.mean_sq_delta_y):
        lines.append(f"{int(tv)},{_num(a)},{_num(b)}")
    summary = {"alpha": alpha, "beta": beta, "n_steps": n, "rate": rep.param("rate"), "rate_bound": bound,
               "r_squared": rep.r_squared, "window_start": int(n // 4)}
    chart = svg.line_chart([("E|dx|^2", list(ce.t), list(msd), False),
                            ("E|dybar|^2", list(ce.t), list(ce.mean_sq_delta_y), True)],
                           title="coupled-pair distance", xlabel="t", ylabel="mean squared distance", logy=True)
    return AnalysisResult("coupling-decay", "\n".join(lines) + "\n", [rep], chart, summary)


def load_oracle_json(paths) -> dict:
    out = {}
    for p in paths:
        with open(p, encoding="utf-8") as fh:
            doc = json.load(fh)
        out[(float(doc["alpha"]), float(doc["beta"]))] = doc
    return out


def oracle_comparison(runner: Runner, z_limit: float = 3.0) -> AnalysisResult:
    c = runner.config
    external = load_oracle_json(c.oracle_json)
    lines = ["alpha,beta,quantity,index,mc,se,oracle,z"]
    summary = {"points": [], "z_limit": z_limit}
    all_ok = True
    for a, b in c.oracle_grid:
        t0 = runner.t0(a)
        ens = runner.ensemble(a, b, t0)
        est = estimate_bias_variance(ens, t0, c.n_steps, seed=c.seed)
        if (a, b) in external:
            doc = external[(a, b)]
            ob_x, ob_yb = np.array(doc["bias_x"]), np.array(doc["bias_ybar"])
            ov_x, ov_y = doc["var_x_trace"], doc["var_y_trace"]
            source = "file"
        else:
            orc = runner.oracle(a, b)
            if orc is None:
                raise OracleInfeasibleError(f"oracle infeasible at ({a}, {b})")
            ob_x, ob_yb, ov_x, ov_y = orc.bias_x, orc.bias_ybar, orc.var_x_trace, orc.var_y_trace
            source = "computed"
        rows = []
        for i in range(len(ob_x)):
            rows.append(("bias_x", i, est.bias_x[i], est.bias_x_se[i], ob_x[i]))
        for i in range(len(ob_yb)):
            rows.append(("bias_ybar", i, est.bias_ybar[i], est.bias_ybar_se[i], ob_yb[i]))
        rows.append(("var_x_trace", 0, est.var_x, est.var_x_se, ov_x))
        rows.append(("var_y_trace", 0, est.var_y, est.var_y_se, ov_y))
        zs = []
        for q, i, m, s, o in rows:
            z = (m - o) / s if s > 0 else math.inf
            zs.append(z)
            lines.append(",".join([_num(a), _num(b), q, str(i), _num(m), _num(s), _num(o), _num(z)]))
        ok = bool(np.all(np.abs(zs) <= z_limit))
        all_ok &= ok
        summary["points"].append({"alpha": a, "beta": b, "source": source, "max_abs_z": float(np.max(np.abs(zs))),
                                  "passed": ok})
    summary["passed"] = all_ok
    labels = [f"{q}[{i}]" for q, i, *_ in rows] if c.oracle_grid else []
    chart = svg.line_chart([("|z| last point", list(range(len(zs))), [abs(z) for z in zs], False),
                            ("limit", [0, max(len(zs) - 1, 1)], [z_limit, z_limit], True)],
                           title="MC vs oracle z-scores", xlabel="quantity index (" + " ".join(labels) + ")",
                           ylabel="|z|")
    return AnalysisResult("oracle-comparison", "\n".join(lines) + "\n", [], chart, summary)


def run_analysis(runner: Runner, name: str) -> AnalysisResult:
    if name in ("bias-vs-beta", "bias-vs-alpha", "variance-vs-beta", "variance-vs-alpha"):
        quantity, _, over = name.partition("-vs-")
        return sweep(runner, quantity, over)
    if name == "ta-vs-rr":
        return ta_vs_rr(runner)
    if name == "coupling-decay":
        return coupling_decay(runner)
    if name == "oracle-comparison":
        return oracle_comparison(runner)
    raise ValidationError(f"unknown analysis {name!r}")
