"""``ttsalab`` command-line interface.

Exit codes: 0 on success, 1 on assumption or validation failures, 2 on
runtime failures (including divergence in more than half of the replicas).
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from importlib.metadata import PackageNotFoundError, version

import numpy as np

from . import experiments as ex
from .chain import build_chain
from .engine import SimConfig, simulate, simulate_coupled
from .errors import (DimensionError, ErgodicityError, OracleInfeasibleError, SingularityError,
                     StabilityError, TTSAError, ValidationError)
from .model import (NoiseField, ProblemInstance, assemble_instance, load_instance, raw_blocks,
                    random_instance, save_instance, validate_stepsizes)
from .moments import stationary_moments
from .spectral import is_hurwitz

log = logging.getLogger("ttsalab")

OK, INVALID, RUNTIME = 0, 1, 2
CENTER_CHECK_TOL = 1e-9


def tool_version() -> str:
    try:
        return version("ttsalab")
    except PackageNotFoundError:
        return "unknown"


def _clean(obj):
    """JSON-safe copy: numpy scalars and arrays become Python values, non-finite floats become null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def _dump(obj) -> str:
    return json.dumps(_clean(obj), indent=1, sort_keys=True) + "\n"


def _write(path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _fail(code: int, msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def _assumption_message(exc: Exception) -> str:
    if isinstance(exc, (StabilityError, SingularityError)):
        return f"Assumption 1 (stability) violated: {exc}"
    if isinstance(exc, ErgodicityError):
        return f"Assumption 2 (ergodic noise chain) violated: {exc}"
    if isinstance(exc, DimensionError):
        return f"dimension error: {exc}"
    return f"Assumption 3 (noise) or input validation failed: {exc}"


def constants_table(inst: ProblemInstance) -> str:
    k = inst.constants
    rows = [("mu_x", k.mu_x), ("mu_y", k.mu_y), ("kappa_x", k.kappa_x), ("kappa_y", k.kappa_y),
            ("J_max", k.j_max), ("sigma_x", inst.sigma_x), ("sigma_y", inst.sigma_y),
            ("rho", inst.chain.rho), ("c_rho", inst.chain.c_rho)]
    return "\n".join(f"{name:<8} {value:.6g}" for name, value in rows)


# -- gen ---------------------------------------------------------------------

def cmd_gen(args) -> int:
    spec = {"d_x": args.dx, "d_y": args.dy, "n_states": args.states, "seed": 0 if args.seed is None else args.seed,
            "noise_scale": args.noise_scale, "coupling_scale": args.coupling_scale, "min_entry": args.min_entry}
    if args.config:
        try:
            cfg = _read_config(args.config)
        except (OSError, ValueError, TTSAError) as exc:
            return _fail(INVALID, str(exc))
        if "generate" not in cfg.instance:
            return _fail(INVALID, "config instance source is not 'generate'")
        spec = {**cfg.instance["generate"], **({"seed": args.seed} if args.seed is not None else {})}
    try:
        inst = ex.build_instance({"generate": spec})
    except TTSAError as exc:
        return _fail(INVALID, _assumption_message(exc))
    out = args.out or "instance.json"
    save_instance(inst, out)
    print(constants_table(inst))
    print(f"wrote {out}")
    return OK


# -- check -------------------------------------------------------------------

def _read_json_bytes(path):
    with open(path, "rb") as fh:
        data = fh.read()
    text = data.decode("utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise ValidationError(f"parse error at byte {offset} (line {exc.lineno}, column {exc.colno}): {exc.msg}")


def structural_report(doc: dict) -> tuple[list[tuple[str, bool, str]], ProblemInstance | None]:
    """Per-assumption checks on the raw blocks of an instance document."""
    a = raw_blocks(doc)
    lines = []
    j22_ok, m22 = is_hurwitz(a["J22"])
    cond = np.linalg.cond(a["J22"])
    if not np.isfinite(cond) or cond > 1e12:
        j22_ok = False
    lines.append(("A1 J22 eigenvalues in right half-plane", j22_ok, f"min Re eig(J22) = {m22:.6g}"))
    delta = None
    if j22_ok:
        delta = a["J11"] - a["J12"] @ np.linalg.solve(a["J22"], a["J21"])
        d_ok, md = is_hurwitz(delta)
        lines.append(("A1 Delta eigenvalues in right half-plane", d_ok, f"min Re eig(Delta) = {md:.6g}"))
    else:
        lines.append(("A1 Delta eigenvalues in right half-plane", False, "not evaluated (J22 failed)"))
    chain = None
    try:
        chain = build_chain(a["kernel"])
        lines.append(("A2 noise chain irreducible and aperiodic", True,
                      f"rho = {chain.rho:.6g}, c_rho = {chain.c_rho:.6g}"))
    except (ErgodicityError, ValidationError) as exc:
        lines.append(("A2 noise chain irreducible and aperiodic", False, str(exc)))
    if chain is not None:
        pi = chain.stationary
        worst = max(float(np.linalg.norm(np.tensordot(pi, a[name], axes=1)))
                    for name in ("W11", "W12", "W21", "W22", "u1", "u2"))
        scale = max(1.0, max(float(np.abs(a[n]).max(initial=0.0)) for n in ("W11", "W12", "W21", "W22", "u1", "u2")))
        lines.append(("A3 noise centered under pi", worst <= CENTER_CHECK_TOL * scale,
                      f"largest pi-mean norm = {worst:.3g}"))
    else:
        lines.append(("A3 noise centered under pi", False, "not evaluated (A2 failed)"))
    noise = NoiseField(a["W11"], a["W12"], a["W21"], a["W22"], a["u1"], a["u2"])
    j_max = max(np.linalg.norm(a[n], 2) for n in ("J11", "J12", "J21", "J22"))
    w_max = noise.w_max
    lines.append(("A3 W_max <= J_max", w_max <= j_max * (1 + 1e-9), f"margin J_max - W_max = {j_max - w_max:.6g}"))
    inst = None
    if all(ok for _, ok, _ in lines):
        chain_obj = chain
        inst = assemble_instance(a["J11"], a["J12"], a["J21"], a["J22"], a["b1"], a["b2"], chain_obj, noise,
                                 doc.get("seed_info") or {})
    return lines, inst


def cmd_check(args) -> int:
    try:
        doc = _read_json_bytes(args.instance)
        lines, inst = structural_report(doc)
    except OSError as exc:
        return _fail(INVALID, str(exc))
    except TTSAError as exc:
        return _fail(INVALID, str(exc))
    for name, ok, detail in lines:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    passed = all(ok for _, ok, _ in lines)
    if inst is not None:
        print(constants_table(inst))
        if args.alpha is not None and args.beta is not None:
            sp = validate_stepsizes(inst, args.alpha, args.beta, args.c1, args.c2)
            m1, m2 = sp.margins
            print(f"stepsizes alpha={args.alpha:g} beta={args.beta:g} tau_alpha={sp.tau_alpha}")
            print(f"{'ok ' if m1 >= 0 else 'VIOLATED'}  beta * tau_alpha condition: margin {m1:.6g}")
            print(f"{'ok ' if m2 >= 0 else 'VIOLATED'}  alpha / beta ratio condition: margin {m2:.6g}")
            print(f"stepsize pair {'feasible' if sp.feasible else 'outside the sufficient conditions'}"
                  " (informational, does not affect the exit code)")
    return OK if passed else INVALID


# -- oracle ------------------------------------------------------------------

def _load(path) -> ProblemInstance:
    return load_instance(path)


def cmd_oracle(args) -> int:
    try:
        inst = _load(args.instance)
    except (OSError, ValueError, TTSAError) as exc:
        return _fail(INVALID, _assumption_message(exc) if isinstance(exc, TTSAError) else str(exc))
    try:
        sm = stationary_moments(inst, args.alpha, args.beta)
    except OracleInfeasibleError as exc:
        return _fail(INVALID, f"oracle infeasible, spectral radius {exc.radius:.12g}")
    except ValidationError as exc:
        return _fail(INVALID, str(exc))
    text = _dump(sm.to_dict())
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)
    info = sys.stderr if not args.out else sys.stdout
    print(f"|bias_x| = {np.linalg.norm(sm.bias_x):.6g}  |bias_ybar| = {np.linalg.norm(sm.bias_ybar):.6g}  "
          f"Tr Var x = {sm.var_x_trace:.6g}  Tr Var y = {sm.var_y_trace:.6g}  radius = {sm.spectral_radius:.12g}",
          file=info)
    return OK


# -- simulate / couple -------------------------------------------------------

def _sim_config(args) -> SimConfig:
    return SimConfig(args.alpha, args.beta, args.steps, record_every=args.record_every,
                     seed=0 if args.seed is None else args.seed, xi0=args.xi0, radius=args.radius)


def cmd_simulate(args) -> int:
    try:
        inst = _load(args.instance)
        cfg = _sim_config(args)
    except (OSError, ValueError, TTSAError) as exc:
        return _fail(INVALID, str(exc))
    traj = simulate(inst, cfg)
    _write(args.out or "trajectory.csv", traj.to_csv())
    if traj.diverged:
        return _fail(RUNTIME, f"trajectory diverged at t={traj.diverged_at}")
    return OK


def cmd_couple(args) -> int:
    try:
        inst = _load(args.instance)
        cfg = _sim_config(args)
    except (OSError, ValueError, TTSAError) as exc:
        return _fail(INVALID, str(exc))
    pair = simulate_coupled(inst, cfg)
    a, b = pair.first, pair.second
    dx, dy = inst.d_x, inst.d_y
    head = (["t", "xi"] + [f"x1_{i}" for i in range(dx)] + [f"y1_{i}" for i in range(dy)]
            + [f"x2_{i}" for i in range(dx)] + [f"y2_{i}" for i in range(dy)] + ["delta_x", "delta_ybar"])
    lines = [",".join(head)]
    m = len(pair.delta_x_norms)
    for k in range(m):
        vals = [str(int(a.t[k])), str(int(a.xi[k]))]
        vals += [format(float(v), ".17g") for v in (*a.x[k], *a.y[k], *b.x[k], *b.y[k],
                                                    pair.delta_x_norms[k], pair.delta_y_norms[k])]
        lines.append(",".join(vals))
    _write(args.out or "coupled.csv", "\n".join(lines) + "\n")
    if a.diverged or b.diverged:
        return _fail(RUNTIME, "coupled pair diverged")
    return OK


# -- run ---------------------------------------------------------------------

def _read_config(path) -> ex.ExperimentConfig:
    doc = _read_json_bytes(path)
    if not isinstance(doc, dict):
        raise ValidationError("config must be a JSON object")
    return ex.ExperimentConfig.from_dict(doc)


def _run_config(args) -> tuple[ex.ExperimentConfig, str]:
    base_dir = "."
    if args.config:
        cfg = _read_config(args.config)
        base_dir = os.path.dirname(os.path.abspath(args.config))
    elif args.preset:
        cfg = ex.preset(args.preset)
    else:
        raise ValidationError("run needs a config file or --preset")
    if args.preset and args.config:
        raise ValidationError("give either a config file or --preset, not both")
    if args.instance:
        cfg.instance = {"load": os.path.abspath(args.instance)}
    for name in ("n_steps", "n_replicas", "record_every"):
        v = getattr(args, name)
        if v is not None:
            setattr(cfg, name, v)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out:
        cfg.out = args.out
    cfg.validate()
    return cfg, base_dir


def cmd_run(args) -> int:
    try:
        cfg, base_dir = _run_config(args)
    except (OSError, ValueError, TTSAError) as exc:
        return _fail(INVALID, str(exc))
    try:
        os.makedirs(cfg.out, exist_ok=True)
        probe = os.path.join(cfg.out, ".write-test")
        _write(probe, "")
        os.remove(probe)
    except OSError as exc:
        return _fail(INVALID, f"output directory not writable: {exc}")
    timings = {}
    t_start = time.perf_counter()
    try:
        inst = ex.build_instance(cfg.instance, base_dir)
    except OSError as exc:
        return _fail(INVALID, str(exc))
    except TTSAError as exc:
        return _fail(INVALID, _assumption_message(exc))
    timings["instance"] = time.perf_counter() - t_start
    save_instance(inst, os.path.join(cfg.out, "instance.json"))
    _write(os.path.join(cfg.out, "config.json"), cfg.to_json())
    outputs = {"setup": ["config.json", "instance.json"]}
    status = {}
    code = OK
    runner = ex.Runner(inst, cfg, args.threads)
    for name in cfg.analyses:
        t0 = time.perf_counter()
        try:
            res = ex.run_analysis(runner, name)
        except (OracleInfeasibleError, ValidationError) as exc:
            status[name] = f"failed: {exc}"
            code = max(code, INVALID)
            break
        except Exception as exc:  # noqa: BLE001 - any stage failure is recorded, then reported
            status[name] = f"failed: {type(exc).__name__}: {exc}"
            code = RUNTIME
            break
        finally:
            timings[name] = time.perf_counter() - t0
        files = [f"{name}.csv", f"{name}.json", f"{name}.svg"]
        _write(os.path.join(cfg.out, files[0]), res.csv)
        _write(os.path.join(cfg.out, files[1]),
               _dump({"analysis": name, "reports": [r.to_dict() for r in res.reports], "summary": res.summary}))
        _write(os.path.join(cfg.out, files[2]), res.svg)
        outputs[name] = files
        frac = runner.divergence_fraction()
        if frac > 0.5:
            status[name] = f"failed: {frac:.0%} of replicas diverged"
            code = RUNTIME
            break
        status[name] = "ok"
        print(f"{name}: ok ({timings[name]:.1f} s)")
    timings["total"] = time.perf_counter() - t_start
    _write(os.path.join(cfg.out, "timings.json"), _dump(timings))
    streams = sorted(list(runner.sim_config(a, b, t).stream) for a, b, t in runner._ens)
    manifest = {
        "tool": "ttsalab",
        "version": tool_version(),
        "config": cfg.to_dict(),
        "seeds": {"global": cfg.seed, "ensemble_streams": streams,
                  "instance": inst.seed_info.get("seed")},
        "outputs": outputs,
        "status": status,
        "timings_file": "timings.json",
        "completed": code == OK,
    }
    _write(os.path.join(cfg.out, "manifest.json"), _dump(manifest))
    if code != OK:
        name = next(k for k, v in status.items() if v != "ok")
        return _fail(code, f"analysis {name} {status[name]}")
    return OK


# -- parser ------------------------------------------------------------------

def _global_flags(parser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=d, help="global seed")
    parser.add_argument("--threads", type=int, default=d, help="worker threads (default: available cores)")
    parser.add_argument("-o", "--out", default=d, help="output file or directory")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ttsalab", description="Linear two-timescale SA laboratory")
    _global_flags(p, suppress=False)
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=f"%(prog)s {tool_version()}")
    sub = p.add_subparsers(dest="command", required=True)
    shared = argparse.ArgumentParser(add_help=False)
    _global_flags(shared, suppress=True)

    g = sub.add_parser("gen", parents=[shared], help="generate a random instance")
    g.add_argument("--dx", type=int, default=2)
    g.add_argument("--dy", type=int, default=2)
    g.add_argument("--states", type=int, default=10)
    g.add_argument("--noise-scale", type=float, default=1.0)
    g.add_argument("--coupling-scale", type=float, default=0.5)
    g.add_argument("--min-entry", type=float, default=0.01)
    g.add_argument("--config", help="take the generator settings from an experiment config")
    g.set_defaults(func=cmd_gen)

    c = sub.add_parser("check", parents=[shared], help="check structural assumptions and label stepsizes")
    c.add_argument("instance")
    c.add_argument("--alpha", type=float)
    c.add_argument("--beta", type=float)
    c.add_argument("--c1", type=float, default=1.0)
    c.add_argument("--c2", type=float, default=1.0)
    c.set_defaults(func=cmd_check)

    r = sub.add_parser("run", parents=[shared], help="run an experiment config or preset")
    r.add_argument("config", nargs="?")
    r.add_argument("--preset", choices=["fig1", "fig2", "fig5", "fig6"])
    r.add_argument("-i", "--instance", help="instance JSON (overrides the config's instance source)")
    r.add_argument("--n-steps", dest="n_steps", type=int)
    r.add_argument("--n-replicas", dest="n_replicas", type=int)
    r.add_argument("--record-every", dest="record_every", type=int)
    r.set_defaults(func=cmd_run)

    o = sub.add_parser("oracle", parents=[shared], help="exact stationary moments")
    o.add_argument("instance")
    o.add_argument("--alpha", type=float, required=True)
    o.add_argument("--beta", type=float, required=True)
    o.set_defaults(func=cmd_oracle)

    for name, func, helptext in (("simulate", cmd_simulate, "single trajectory to CSV"),
                                 ("couple", cmd_couple, "coupled pair to CSV")):
        s = sub.add_parser(name, parents=[shared], help=helptext)
        s.add_argument("instance")
        s.add_argument("--alpha", type=float, required=True)
        s.add_argument("--beta", type=float, required=True)
        s.add_argument("--steps", type=int, default=10_000)
        s.add_argument("--record-every", dest="record_every", type=int)
        s.add_argument("--xi0", type=int)
        s.add_argument("--radius", type=float, default=1.0)
        s.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
