"""Command-line experiment runner: ``pdmp {simulate,stationary,reverse,validate,zoo list}``.

Config is one JSON document. Top-level keys::

    model         "tcp" | {"zoo": name, "params": {...}} | {"custom": {...}}
    seed          unsigned 64-bit integer (required; --seed overrides)
    horizon       path length T                      (default 500)
    n_paths       number of paths                    (default 200)
    solver        "grid" | "regenerative" | "closed" (default "grid")
    n_nodes       grid size                          (default 1024)
    tail          truncation tail mass               (default 1e-8)
    checks        subset of CHECKS                   (default: all)
    level         family-wise test level             (default 0.01)
    lambda_scale  multiply lambda* in the empirical intensity check
    kernel_stride keep every k-th node in kernel_star.csv (default 4)
    threads       worker threads for simulation
    outputs       output directory (--out-dir overrides)
    write_paths   write per-path CSVs in ``simulate`` (default true)
    name          label used in reports
    experiments   list of per-model configs (``validate`` only); the
                  other top-level keys act as defaults for every entry

Exit codes: 0 pass, 1 check failure, 2 usage or config error, 3 numerical failure.
"""

from __future__ import annotations

import os

# Multi-threaded BLAS may reorder reductions; pin it so output bytes never
# depend on the machine's core count.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import estimate, reversal, simulate, stationary, zoo
from .errors import ExplosionError, ModelSpecError, PdmpError, SolverError

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

CHECKS = ("stationary", "reversal", "duality", "adjoint", "corollary", "simulate_compare")
SOLVERS = ("grid", "regenerative", "closed")
CONFIG_KEYS = {
    "model", "seed", "horizon", "n_paths", "solver", "n_nodes", "tail", "checks", "level",
    "lambda_scale", "kernel_stride", "threads", "outputs", "write_paths", "name", "experiments",
}

# thresholds of the analytic checks
STATIONARY_LINF = 1e-3
NORMALIZATION_TOL = 1e-6
ROW_MASS_TOL = 1e-6
ROUTE_GAP_TOL = 1e-3
DUALITY_TOL = 1e-5
DUALITY_L1_TOL = 1e-4
ADJOINT_TOL = 1e-6
COROLLARY_TOL = 1e-5

DEFAULT_SUITE = {
    "seed": 20240607,
    "experiments": [{"model": "tcp"}, {"model": "renewal_age"}, {"model": "reflected_mg1"}],
}


class UsageError(Exception):
    pass


@dataclass
class Experiment:
    model_cfg: object
    seed: int
    horizon: float = 500.0
    n_paths: int = 200
    solver: str = "grid"
    n_nodes: int = stationary.DEFAULT_NODES
    tail: float = stationary.DEFAULT_TAIL
    checks: tuple = CHECKS
    level: float = estimate.DEFAULT_LEVEL
    lambda_scale: float = 1.0
    kernel_stride: int = 4
    threads: int = 1
    write_paths: bool = True
    name: str = ""
    spec: object = None
    model: object = field(default=None, repr=False)


# ---------------------------------------------------------------- config


def _parse_model(m):
    if isinstance(m, str):
        m = {"zoo": m}
    if not isinstance(m, dict) or len(set(m) & {"zoo", "custom"}) != 1:
        raise UsageError('model must be a zoo name, {"zoo": name, "params": {...}} or {"custom": {...}}')
    if "custom" in m:
        if set(m) != {"custom"}:
            raise UsageError(f"unknown model keys: {sorted(set(m) - {'custom'})}")
        return None, zoo.custom_model(m["custom"])
    extra = set(m) - {"zoo", "params"}
    if extra:
        raise UsageError(f"unknown model keys: {sorted(extra)}")
    spec = zoo.zoo_spec(m["zoo"], m.get("params"))
    return spec, zoo.zoo_build(spec)


def _seed(value):
    try:
        s = int(value)
    except (TypeError, ValueError):
        raise UsageError(f"seed must be an unsigned 64-bit integer, got {value!r}") from None
    if isinstance(value, float) or s < 0 or s >= 2**64:
        raise UsageError(f"seed must be an unsigned 64-bit integer, got {value!r}")
    return s


def _threads(cli_value, cfg_value):
    for v in (cli_value, cfg_value, os.environ.get("PDMP_THREADS")):
        if v is not None and v != "":
            try:
                n = int(v)
            except ValueError:
                raise UsageError(f"threads must be a positive integer, got {v!r}") from None
            if n < 1:
                raise UsageError(f"threads must be a positive integer, got {v!r}")
            return n
    return 1


def build_experiment(cfg, seed=None, threads=None):
    unknown = set(cfg) - CONFIG_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    if "model" not in cfg:
        raise UsageError("config needs a 'model'")
    seed = seed if seed is not None else cfg.get("seed")
    if seed is None:
        raise UsageError("a seed is required (config 'seed' or --seed)")
    checks = tuple(cfg.get("checks", CHECKS))
    bad = [c for c in checks if c not in CHECKS]
    if bad:
        raise UsageError(f"unknown checks {bad}; valid checks: {', '.join(CHECKS)}")
    solver = cfg.get("solver", "grid")
    if solver not in SOLVERS:
        raise UsageError(f"unknown solver {solver!r}; valid: {', '.join(SOLVERS)}")
    spec, model = _parse_model(cfg["model"])
    if solver == "closed" and spec is None:
        raise UsageError("solver 'closed' is only available for zoo models")
    n_paths = int(cfg.get("n_paths", 200))
    horizon = float(cfg.get("horizon", 500.0))
    if n_paths < 0 or not horizon > 0:
        raise UsageError("n_paths must be >= 0 and horizon > 0")
    name = str(cfg.get("name") or (spec.variant if spec else model.name))
    return Experiment(
        model_cfg=cfg["model"], seed=_seed(seed), horizon=horizon, n_paths=n_paths, solver=solver,
        n_nodes=int(cfg.get("n_nodes", stationary.DEFAULT_NODES)), tail=float(cfg.get("tail", stationary.DEFAULT_TAIL)),
        checks=checks, level=float(cfg.get("level", estimate.DEFAULT_LEVEL)),
        lambda_scale=float(cfg.get("lambda_scale", 1.0)), kernel_stride=max(int(cfg.get("kernel_stride", 4)), 1),
        threads=_threads(threads, cfg.get("threads")), write_paths=bool(cfg.get("write_paths", True)),
        name=name, spec=spec, model=model,
    )


def load_config(path):
    if path is None:
        return None
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    return cfg


# ---------------------------------------------------------------- output helpers


def _fmt(v):
    return "%.17g" % v


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    return obj


def _write(path, text):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def _write_json(path, obj):
    _write(path, json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def _csv(header, columns):
    rows = [",".join(header)]
    for vals in zip(*columns):
        rows.append(",".join(_fmt(v) for v in vals))
    return "\n".join(rows) + "\n"


# ---------------------------------------------------------------- building blocks


def solve(exp):
    if exp.solver == "closed":
        return stationary.closed_form_stationary(exp.spec, n_nodes=exp.n_nodes, tail=exp.tail)
    if exp.solver == "regenerative":
        return stationary.solve_stationary_regenerative(exp.model, n_nodes=exp.n_nodes, tail=exp.tail)
    return stationary.solve_stationary_grid(exp.model, n_nodes=exp.n_nodes, tail=exp.tail)


def write_density(out, d, model):
    _write(out / "density.csv", _csv(["x", "nu_prime"], [d.grid, d.values]))
    try:
        xi = stationary.embedded_laws(d, model).xi_norm
    except PdmpError:
        xi = 0.0
    meta = {k: v for k, v in d.metadata.items()}
    _write_json(out / "density.json", {
        "atoms": [{"x": loc, "mass": m} for loc, m in d.atoms],
        "sigma_gamma": d.boundary_mass,
        "xi_norm": xi,
        "normalization_error": d.normalization_error,
        "metadata": meta,
    })


def write_reversed(out, rev, stride):
    x = rev.grid
    _write(out / "reversed.csv", _csv(["x", "lambda_star", "boundary_jump_star"],
                                      [x, rev.lambda_star, rev.boundary_jump_star]))
    idx = np.arange(0, len(x), stride)
    K = rev.kernel_star[np.ix_(idx, idx)]
    xs, ys = np.meshgrid(x[idx], x[idx], indexing="ij")
    _write(out / "kernel_star.csv", _csv(["x", "y", "density"], [xs.ravel(), ys.ravel(), K.ravel()]))
    _write_json(out / "sigma_star.json", [
        {"x": loc, "mass": m,
         "landing_points": [{"x": b, "mass": v} for b, v in sorted(rev.boundary_kernel_star[loc][1].items())]}
        for loc, m in rev.sigma_star
    ])


def _closed_form_values(exp, d):
    if exp.spec is None:
        return None
    if exp.spec.variant == "reflected_mg1":
        c = stationary.closed_form_stationary(exp.spec, n_nodes=exp.n_nodes, window=(d.grid[0], d.grid[-1]))
        return c.values, c.atoms
    return zoo.closed_form_density(exp.spec, d.grid)


def check_stationary(exp, d):
    norm = abs(d.mass() - 1.0)
    details = {"normalization_error": norm, "solver": exp.solver}
    ok = norm <= NORMALIZATION_TOL
    ref = None if exp.solver == "closed" else _closed_form_values(exp, d)
    if ref is not None:
        vals, atoms = ref
        linf = float(np.max(np.abs(d.values - vals)))
        atom_gap = max([abs(d.atom_mass(loc) - m) for loc, m in atoms] or [0.0])
        details.update(linf_vs_closed_form=linf, atom_gap=atom_gap, tolerance=STATIONARY_LINF)
        ok = ok and linf <= STATIONARY_LINF and atom_gap <= STATIONARY_LINF
    else:
        res = stationary.equation_residual(exp.model, d)
        details["equation_residual"] = res
    return ok, details


def check_reversal(exp, d, rev):
    rows = reversal.kernel_normalization_report(rev)
    gap = reversal.route_gap(exp.model, d, rev=rev)
    dbl = reversal.double_reversal(exp.model, d, rev=rev)
    failed = [dg.detail for dg in rev.diagnostics if dg.status == "fail"]
    ok = rows.max_abs <= ROW_MASS_TOL and gap.max_rel <= ROUTE_GAP_TOL and not failed
    return ok, {"kernel_rows": rows.to_json(), "route_gap": gap.to_json(),
                "double_reversal": dbl.to_json(), "diagnostics": failed}


def check_duality(exp, d, rev):
    r = reversal.duality_residual(exp.model, d, rev=rev)
    l1 = r.details["l1_piQ_piWstar"]
    ok = r.max_abs <= DUALITY_TOL and l1 <= DUALITY_L1_TOL
    js = r.to_json()
    js["details"] = {k: v for k, v in r.details.items() if k != "rectangles"}
    return ok, js


def check_adjoint(exp):
    r = reversal.adjoint_check(exp.model)
    js = r.to_json()
    js["details"] = {"n_pairs": len(r.details["pairs"]), "nodes": reversal.ADJOINT_NODES,
                     "tail": reversal.ADJOINT_TAIL}
    return r.max_rel <= ADJOINT_TOL, js


def check_corollary(exp, d, rev):
    if not exp.model.increasing:
        return None, {"skipped": "corollary pairs are defined for increasing flows"}
    r = reversal.left_continuation_residual(exp.model, d, rev=rev)
    return r.max_rel <= COROLLARY_TOL, r.to_json()


def check_simulate_compare(exp, d, rev):
    trajs = simulate.simulate_batch(exp.model, exp.n_paths, exp.horizon, exp.seed, density=d, threads=exp.threads)
    cfg = estimate.CompareConfig(level=exp.level, lambda_scale=exp.lambda_scale, seed=exp.seed)
    reps = estimate.compare_reversed(trajs, rev, cfg)
    return all(r.passed for r in reps), [r.to_json() for r in reps]


# ---------------------------------------------------------------- commands


def cmd_simulate(exp, out):
    d = solve(exp)
    trajs = simulate.simulate_batch(exp.model, exp.n_paths, exp.horizon, exp.seed, density=d, threads=exp.threads)
    if exp.write_paths:
        for i, tr in enumerate(trajs):
            _write(out / "paths" / f"path_{i:04d}.csv", simulate.trajectory_csv(tr))
            _write_json(out / "paths" / f"path_{i:04d}.json", simulate.trajectory_meta(tr))
    counts = {k: sum(1 for tr in trajs for e in tr.events if e.kind == k) for k in simulate.KINDS}
    total = exp.n_paths * exp.horizon
    jumps = sum(1 for tr in trajs for e in tr.events if e.is_jump)
    _write_json(out / "summary.json", {
        "model": exp.name, "n_paths": exp.n_paths, "horizon": exp.horizon, "seed": exp.seed,
        "path_seeds": [tr.seed for tr in trajs], "event_counts": counts,
        "jump_rate": jumps / total if total else 0.0,
        "forced_rate": counts[simulate.FORCED] / total if total else 0.0,
    })
    return EXIT_OK


def cmd_stationary(exp, out):
    d = solve(exp)
    write_density(out, d, exp.model)
    return EXIT_OK


def _reverse_reports(exp, d, rev):
    reports = [reversal.kernel_normalization_report(rev).to_json(),
               reversal.route_gap(exp.model, d, rev=rev).to_json()]
    ok = True
    if "duality" in exp.checks:
        good, js = check_duality(exp, d, rev)
        reports.append(js)
        ok &= good
    if "corollary" in exp.checks and exp.model.increasing:
        good, js = check_corollary(exp, d, rev)
        reports.append(js)
        ok &= good
    if "adjoint" in exp.checks:
        good, js = check_adjoint(exp)
        reports.append(js)
        ok &= good
    return ok, reports


def cmd_reverse(exp, out):
    d = solve(exp)
    rev = reversal.derive_reversed(exp.model, d)
    write_density(out, d, exp.model)
    write_reversed(out, rev, exp.kernel_stride)
    ok, reports = _reverse_reports(exp, d, rev)
    _write_json(out / "reports.json", reports)
    return EXIT_OK if ok else EXIT_FAIL


def run_checks(exp):
    """Every configured check for one experiment: (all passed, result dict)."""
    d = solve(exp)
    rev = reversal.derive_reversed(exp.model, d)
    results = {}
    for name in exp.checks:
        if name == "stationary":
            ok, det = check_stationary(exp, d)
        elif name == "reversal":
            ok, det = check_reversal(exp, d, rev)
        elif name == "duality":
            ok, det = check_duality(exp, d, rev)
        elif name == "adjoint":
            ok, det = check_adjoint(exp)
        elif name == "corollary":
            ok, det = check_corollary(exp, d, rev)
        else:
            ok, det = check_simulate_compare(exp, d, rev)
        results[name] = {"pass": ok, "skipped": ok is None, "details": det}
    passed = all(r["pass"] is not False for r in results.values())
    return passed, results, d, rev


def _experiments(cfg, seed, threads):
    if "experiments" not in cfg:
        return [build_experiment(cfg, seed, threads)]
    base = {k: v for k, v in cfg.items() if k != "experiments"}
    out, names = [], {}
    for entry in cfg["experiments"]:
        if not isinstance(entry, dict):
            raise UsageError("each experiment must be a JSON object")
        if "experiments" in entry:
            raise UsageError("experiments cannot be nested")
        exp = build_experiment({**base, **entry}, seed, threads)
        k = names.get(exp.name, 0)
        names[exp.name] = k + 1
        if k:
            exp.name = f"{exp.name}_{k}"
        out.append(exp)
    return out


def cmd_validate(cfg, out, seed=None, threads=None):
    exps = _experiments(cfg, seed, threads)
    summary = []
    for exp in exps:
        passed, results, d, rev = run_checks(exp)
        write_density(out / exp.name, d, exp.model)
        write_reversed(out / exp.name, rev, exp.kernel_stride)
        summary.append({"name": exp.name, "model": exp.model_cfg, "seed": exp.seed, "pass": passed,
                        "checks": results})
        for name, r in results.items():
            status = "skip" if r["skipped"] else ("PASS" if r["pass"] else "FAIL")
            print(f"{exp.name:>16s} {name:<18s} {status}")
    all_ok = all(s["pass"] for s in summary)
    _write_json(out / "validate_report.json", {"pass": all_ok, "experiments": summary})
    return EXIT_OK if all_ok else EXIT_FAIL


def cmd_zoo_list():
    for name in sorted(zoo.DEFAULTS):
        print(f"{name}: {zoo.DESCRIPTIONS[name]}")
        print(f"    defaults: {json.dumps(zoo.DEFAULTS[name], sort_keys=True)}")
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def _parser():
    p = argparse.ArgumentParser(prog="pdmp", description="One-dimensional PDMP simulation and time reversal.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("simulate", "simulate stationary paths"), ("stationary", "solve for the stationary law"),
                        ("reverse", "derive the reversed parameters"), ("validate", "run the check suite")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", metavar="PATH", required=name != "validate")
        s.add_argument("--out-dir", metavar="PATH")
        s.add_argument("--seed", metavar="U64")
        s.add_argument("--threads", metavar="N")
    z = sub.add_parser("zoo", help="model zoo")
    z.add_argument("action", choices=["list"])
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    if args.command == "zoo":
        return cmd_zoo_list()
    try:
        cfg = load_config(args.config)
        if cfg is None:
            cfg = DEFAULT_SUITE
        seed = None if args.seed is None else _seed(args.seed)
        out = Path(args.out_dir or cfg.get("outputs") or "pdmp_out")
        if args.command == "validate":
            return cmd_validate(cfg, out, seed, args.threads)
        if "experiments" in cfg:
            raise UsageError("'experiments' is only valid for validate")
        exp = build_experiment(cfg, seed, args.threads)
        return {"simulate": cmd_simulate, "stationary": cmd_stationary, "reverse": cmd_reverse}[args.command](exp, out)
    except (UsageError, ModelSpecError) as exc:
        print(f"pdmp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SolverError, ExplosionError, PdmpError, ArithmeticError, ValueError) as exc:
        print(f"pdmp: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"pdmp: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
