"""``enki`` command-line harness.

    enki run|compare|verify-bound|sample-size --config CFG.json [--seed S] [--out DIR] [--method M ...]

Exit codes: 0 success, 1 bound dominance failure, 2 invalid config,
3 divergence. The BLAS thread count is taken from ``ENKI_NUM_THREADS``
(default 1); CSV output is byte-reproducible single-threaded.
"""

from __future__ import annotations

import argparse
import copy
import csv
import inspect
import io
import json
import os
import sys
import time
from pathlib import Path
from typing import Any

import numpy as np

SCHEMA_VERSION = 1
METHODS = ("vanilla", "mc1", "mc2", "chada", "nesterov", "anderson")

SOLVER_DEFAULTS = {
    "mu": 0.01,
    "noise_percent": 0.02,
    "eps_c": None,  # 1e-5 for linear problems, 1e-4 otherwise
    "I_max": 10_000,
    "q": 0.99,
    "eps_delta": 1e-15,
    "alpha_bound": 1e4,
    "K_recompute": 5,
    "warmup": 10,
    "alpha_method": "taylor",
    "beta": 0.8,
}

BOUND_DEFAULTS = {
    "n": 100,
    "mu": 0.01,
    "noise_percent": 0.02,
    "N_values": [5, 10, 15, 20, 25],
    "K_trials": 10_000,
    "eta": 0.99,
    "eps_grid": None,
    "corollary_mode": False,
    "restarts": 50,
}

SAMPLE_SIZE_DEFAULTS = {"eps": None, "p_target": 0.9, "c_m": 1.0, "eta": 0.99,
                        "corollary_mode": False}

TOP_KEYS = {"schema_version", "seed", "problem", "method", "methods", "solver", "bound",
            "sample_size"}


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


# ---------------------------------------------------------------- config

def _builder_params(name: str) -> dict:
    from .problems import BUILDERS
    sig = inspect.signature(BUILDERS[name])
    return {k: p.default for k, p in sig.parameters.items()}


def validate_config(cfg: Any, command: str) -> dict:
    """Return a normalised copy of ``cfg`` with defaults filled in."""
    errs: list[str] = []
    if not isinstance(cfg, dict):
        raise ConfigError(["config: must be a JSON object"])
    cfg = copy.deepcopy(cfg)
    if cfg.get("schema_version") != SCHEMA_VERSION:
        errs.append(f"schema_version: expected {SCHEMA_VERSION}, got {cfg.get('schema_version')!r}")
    for k in cfg:
        if k not in TOP_KEYS:
            errs.append(f"{k}: unknown field")
    seed = cfg.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        errs.append("seed: must be a non-negative integer")
    cfg["seed"] = seed

    if command in ("run", "compare"):
        prob = cfg.get("problem")
        if not isinstance(prob, dict) or "name" not in prob:
            errs.append("problem: object with a 'name' field is required")
        else:
            from .problems import BUILDERS
            name = prob["name"]
            if name not in BUILDERS:
                errs.append(f"problem.name: must be one of {sorted(BUILDERS)}")
            else:
                allowed = set(_builder_params(name)) - {"seed", "mu", "noise_percent"}
                for k, v in prob.items():
                    if k == "name":
                        continue
                    if k not in allowed:
                        errs.append(f"problem.{k}: unknown parameter for {name}")
                    elif k in ("n", "m", "N", "s") and (not isinstance(v, int) or v < 1):
                        errs.append(f"problem.{k}: must be a positive integer")
                if isinstance(prob.get("N", 2), int) and prob.get("N", 2) < 2:
                    errs.append("problem.N: need at least 2 particles")
        solver = dict(SOLVER_DEFAULTS)
        given = cfg.get("solver", {})
        if not isinstance(given, dict):
            errs.append("solver: must be an object")
            given = {}
        for k, v in given.items():
            if k not in SOLVER_DEFAULTS:
                errs.append(f"solver.{k}: unknown field")
            else:
                solver[k] = v
        errs += _check_solver(solver)
        cfg["solver"] = solver
        if command == "run":
            m = cfg.get("method", "vanilla")
            if m not in METHODS:
                errs.append(f"method: must be one of {list(METHODS)}")
            cfg["method"] = m
        else:
            ms = cfg.get("methods", list(METHODS[:4]))
            if not isinstance(ms, list) or len(ms) < 2:
                errs.append("methods: need a list of at least two methods")
            elif any(m not in METHODS for m in ms):
                errs.append(f"methods: entries must be from {list(METHODS)}")
            cfg["methods"] = ms
    elif command == "verify-bound":
        cfg["bound"] = _merge("bound", BOUND_DEFAULTS, cfg.get("bound", {}), errs)
        b = cfg["bound"]
        if not (isinstance(b["K_trials"], int) and b["K_trials"] >= 1):
            errs.append("bound.K_trials: must be an integer >= 1")
        if not (isinstance(b["N_values"], list) and b["N_values"]
                and all(isinstance(x, int) and x >= 1 for x in b["N_values"])):
            errs.append("bound.N_values: must be a non-empty list of positive integers")
        if not 0 < _num(b["eta"], -1) < 1:
            errs.append("bound.eta: must lie in (0, 1)")
        if not _num(b["mu"], -1) > 0:
            errs.append("bound.mu: must be positive")
        if b["eps_grid"] is not None and not (isinstance(b["eps_grid"], list) and
                                              all(_num(e, -1) > 0 for e in b["eps_grid"])):
            errs.append("bound.eps_grid: must be null or a list of positive numbers")
    elif command == "sample-size":
        cfg["bound"] = _merge("bound", BOUND_DEFAULTS, cfg.get("bound", {}), errs)
        cfg["sample_size"] = _merge("sample_size", SAMPLE_SIZE_DEFAULTS,
                                    cfg.get("sample_size", {}), errs)
        s = cfg["sample_size"]
        if not 0 < _num(s["p_target"], -1) < 1:
            errs.append("sample_size.p_target: must lie in (0, 1)")
        if s["eps"] is not None and not _num(s["eps"], -1) > 0:
            errs.append("sample_size.eps: must be positive or null (eps_max)")
        if not _num(s["c_m"], -1) > 0:
            errs.append("sample_size.c_m: must be positive")
    if errs:
        raise ConfigError(errs)
    return cfg


def _num(v, default):
    return v if isinstance(v, (int, float)) and not isinstance(v, bool) else default


def _merge(section, defaults, given, errs):
    out = dict(defaults)
    if not isinstance(given, dict):
        errs.append(f"{section}: must be an object")
        return out
    for k, v in given.items():
        if k not in defaults:
            errs.append(f"{section}.{k}: unknown field")
        else:
            out[k] = v
    return out


def _check_solver(s: dict) -> list[str]:
    e = []
    if not _num(s["mu"], -1) > 0:
        e.append("solver.mu: must be positive")
    if not _num(s["noise_percent"], -1) >= 0:
        e.append("solver.noise_percent: must be >= 0")
    if s["eps_c"] is not None and not _num(s["eps_c"], -1) > 0:
        e.append("solver.eps_c: must be positive or null")
    if not (isinstance(s["I_max"], int) and s["I_max"] >= 1):
        e.append("solver.I_max: must be an integer >= 1")
    if not 0 < _num(s["q"], -1) < 1:
        e.append("solver.q: must lie in (0, 1)")
    if not _num(s["eps_delta"], -1) > 0:
        e.append("solver.eps_delta: must be positive")
    if not _num(s["alpha_bound"], -1) > 1:
        e.append("solver.alpha_bound: must exceed 1")
    if not (isinstance(s["K_recompute"], int) and s["K_recompute"] >= 1):
        e.append("solver.K_recompute: must be an integer >= 1")
    if not (isinstance(s["warmup"], int) and s["warmup"] >= 0):
        e.append("solver.warmup: must be an integer >= 0")
    if s["alpha_method"] not in ("taylor", "fixed_point"):
        e.append("solver.alpha_method: must be 'taylor' or 'fixed_point'")
    if not 0 <= _num(s["beta"], -1) <= 0.8:
        e.append("solver.beta: must lie in [0, 0.8]")
    return e


# ------------------------------------------------------------- execution

def build_problem(cfg: dict):
    from .problems import BUILDERS
    prob = dict(cfg["problem"])
    name = prob.pop("name")
    s = cfg["solver"]
    return BUILDERS[name](**prob, mu=s["mu"], noise_percent=s["noise_percent"], seed=cfg["seed"])


def make_policy(method: str, s: dict):
    from .baselines import AndersonPolicy, ChadaPolicy, NesterovPolicy
    from .correction import DeltaParams, MC1Policy, MC2Policy
    from .iteration import VanillaPolicy
    params = DeltaParams(s["q"], s["eps_delta"], s["alpha_bound"])
    return {
        "vanilla": lambda: VanillaPolicy(),
        "mc1": lambda: MC1Policy(params, s["alpha_method"]),
        "mc2": lambda: MC2Policy(params, s["K_recompute"], s["warmup"], s["alpha_method"]),
        "chada": lambda: ChadaPolicy(s["beta"]),
        "nesterov": lambda: NesterovPolicy(),
        "anderson": lambda: AndersonPolicy(),
    }[method]()


def execute(cfg: dict, method: str, ip=None):
    from .iteration import Termination, run
    ip = build_problem(cfg) if ip is None else ip
    s = cfg["solver"]
    eps_c = s["eps_c"] if s["eps_c"] is not None else (1e-5 if ip.linear else 1e-4)
    t0 = time.perf_counter()
    res = run(ip.initial, ip.G, ip.noise, ip.d, Termination(eps_c, s["I_max"]),
              make_policy(method, s), truth=ip.truth)
    wall = time.perf_counter() - t0
    last = res.history[-1]
    summary = {
        "method": method,
        "iterations": res.iterations,
        "forward_evals": res.forward_evals,
        "final_loss": last["loss"],
        "rel_error_vs_truth": last.get("rel_error_vs_truth"),
        "stop_reason": res.stop_reason,
        "wall_time_s": wall,
    }
    return res, summary


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def cmd_run(cfg: dict, out: Path) -> int:
    res, summary = execute(cfg, cfg["method"])
    _write(out / "history.csv", res.history.to_csv())
    _write(out / "summary.json", _json({**summary, "seed": cfg["seed"], "config": cfg}))
    print(f"{cfg['method']}: {summary['iterations']} iterations ({summary['stop_reason']}), "
          f"final loss {summary['final_loss']:.6g}")
    return 0


COMPARE_COLUMNS = ("method", "iterations", "forward_evals", "final_loss", "rel_error_vs_truth",
                   "stop_reason")


def cmd_compare(cfg: dict, out: Path) -> int:
    from .iteration import fmt
    ip = build_problem(cfg)  # shared initial ensemble across methods
    rows = []
    for m in cfg["methods"]:
        res, summary = execute(cfg, m, ip)
        _write(out / f"history_{m}.csv", res.history.to_csv())
        rows.append(summary)
        print(f"{m:>9}: {summary['iterations']:6d} iterations, rel error "
              f"{summary['rel_error_vs_truth']:.4g}, {summary['wall_time_s']:.2f} s")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(COMPARE_COLUMNS)
    for r in rows:
        w.writerow([fmt(r[c]) if r[c] is not None else "" for c in COMPARE_COLUMNS])
    _write(out / "comparison.csv", buf.getvalue())
    _write(out / "comparison.json", _json({"seed": cfg["seed"], "config": cfg, "rows": rows}))
    return 0


def _bound_problem(b: dict, seed: int):
    from .bounds import bound_problem
    return bound_problem(n=b["n"], mu=b["mu"], noise_percent=b["noise_percent"], seed=seed)


def cmd_verify_bound(cfg: dict, out: Path) -> int:
    from .bounds import verify_bound
    b = cfg["bound"]
    p = _bound_problem(b, cfg["seed"])
    res = verify_bound(p, b["N_values"], b["K_trials"], cfg["seed"], b["eta"], b["eps_grid"],
                       b["corollary_mode"], b["restarts"])
    _write(out / "bound_grid.csv", res.to_csv())
    N, eps, margin = res.worst_cell()
    ok = res.dominance()
    k = res.consts
    _write(out / "bound_summary.json", _json({
        "seed": cfg["seed"], "config": cfg, "anchor_eps": res.anchor_eps,
        "constants": {"c": k.c, "c1": k.c1, "c2": k.c2, "eta": k.eta},
        "dominance": ok, "worst_cell": {"N": N, "eps": eps, "margin": margin},
    }))
    print(f"constants c={k.c:.6g} c1={k.c1:.6g} c2={k.c2:.6g}; anchor eps={res.anchor_eps:.6g}")
    print(f"dominance {'holds' if ok else 'FAILS'}; worst cell N={N} eps={eps:.6g} margin={margin:.4g}")
    return 0 if ok else 1


def cmd_sample_size(cfg: dict, out: Path) -> int:
    from .bounds import TERM_NAMES, eps_max, problem_norms, sample_size_report
    b, s = cfg["bound"], cfg["sample_size"]
    p = _bound_problem(b, cfg["seed"])
    nm = problem_norms(p)
    eps = s["eps"] if s["eps"] is not None else eps_max(p, s["eta"], s["corollary_mode"])
    rep = sample_size_report(eps, s["p_target"], (nm.C, nm.C_half), nm.Sigma_half, nm.n, nm.m,
                             s["c_m"])
    terms = {name: t for name, t in zip(TERM_NAMES, rep.terms)}
    _write(out / "sample_size.json", _json({
        "seed": cfg["seed"], "config": cfg, "eps": eps, "N_min": rep.N, "terms": terms,
        "argmax": TERM_NAMES[rep.argmax], "log_factor": rep.log_factor,
    }))
    print(f"N_min = {rep.N}  (eps={eps:.6g}, p={s['p_target']}, c_m={s['c_m']})")
    for i, (name, t) in enumerate(terms.items()):
        print(f"  {name:>22}: {t:.6g}{'  <- max' if i == rep.argmax else ''}")
    return 0


COMMANDS = {"run": cmd_run, "compare": cmd_compare, "verify-bound": cmd_verify_bound,
            "sample-size": cmd_sample_size}


def _threads() -> int:
    raw = os.environ.get("ENKI_NUM_THREADS", "1")
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
        return n
    except ValueError:
        raise ConfigError([f"ENKI_NUM_THREADS: must be a positive integer, got {raw!r}"])


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="enki", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, type=Path)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", type=Path, default=Path("enki_out"))
    ap.add_argument("--method", nargs="+", help="method for run, or methods for compare")
    args = ap.parse_args(argv)

    try:
        try:
            raw = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError([f"config: cannot read {args.config}: {exc}"])
        if isinstance(raw, dict):
            if args.seed is not None:
                raw["seed"] = args.seed
            if args.method:
                if args.command == "run":
                    raw["method"] = args.method[0]
                else:
                    raw["methods"] = [m for part in args.method for m in part.split(",") if m]
        cfg = validate_config(raw, args.command)
        nthreads = _threads()
    except ConfigError as exc:
        for msg in exc.problems:
            print(f"invalid config: {msg}", file=sys.stderr)
        return 2

    from threadpoolctl import threadpool_limits
    from .core import ForwardMapError
    from .iteration import DivergenceError
    with threadpool_limits(limits=nthreads):
        try:
            return COMMANDS[args.command](cfg, args.out)
        except (DivergenceError, ForwardMapError, FloatingPointError) as exc:
            print(f"divergence: {exc}", file=sys.stderr)
            return 3
        except (TypeError, ValueError) as exc:
            print(f"invalid config: {exc}", file=sys.stderr)
            return 2


if __name__ == "__main__":
    sys.exit(main())
