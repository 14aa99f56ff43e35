"""Command-line entry point: ``meanmatch {solve,calibrate,check,simulate,diagnose}``.

Exit codes: 0 success, 1 usage or configuration error, 2 calibration did not
converge, 3 solver hit ``max_iters``, 4 numerical fault, 5 a validation
(audit or Monte-Carlo comparison) failed.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import json
import logging
import sys
from pathlib import Path

from . import __version__, diagnostics, income, montecarlo, theory
from .config import ConfigError, RunConfig, data_path, load_config
from .grids import format_number, read_field_csv, write_field_csv
from .solver import (
    EquilibriumState,
    NumericalFaultError,
    SolverHealthError,
    solve_fixed_point,
)

EXIT_OK, EXIT_USAGE, EXIT_CALIBRATION, EXIT_NOT_CONVERGED, EXIT_FAULT, EXIT_VALIDATION = range(6)
FIELD_FILES = {"V_A": "V_A.csv", "V_B": "V_B.csv", "f_A": "f_A.csv", "f_B": "f_B.csv"}

logger = logging.getLogger("meanmatch")


class UsageError(Exception):
    pass


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _comment(cfg: RunConfig) -> str:
    return diagnostics.header_comment(cfg.hash)


def _write_manifest(out: Path, cfg: RunConfig | None, command: str, started: str, files, **extra) -> Path:
    manifest = {
        "command": command,
        "tool_version": __version__,
        "config": cfg.data if cfg else None,
        "config_hash": cfg.hash if cfg else None,
        "started": started,
        "finished": _now(),
        "files": [{"name": p.name, "sha256": _sha256(p)} for p in sorted(files)],
        **extra,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _emit(args, text: str) -> None:
    if not args.quiet:
        print(text)


def _load_cfg(args, default: str | None = None) -> RunConfig:
    source = args.config or (data_path(default) if default else None)
    if source is None:
        raise UsageError("--config is required")
    cfg = load_config(source)
    if args.seed is not None:
        cfg = RunConfig({**cfg.data, "seed": int(args.seed)})
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- solve ------------------------------------------------------------------

def write_solution(state: EquilibriumState, cfg: RunConfig, out: Path) -> list:
    comment = _comment(cfg)
    files = []
    for name, fname in FIELD_FILES.items():
        files.append(write_field_csv(getattr(state, name), out / fname, comment))
    trace = out / "residual_trace.csv"
    buf = io.StringIO()
    buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iter", "E", "E_VA", "E_VB", "E_fA", "E_fB"])
    for row in state.trace:
        w.writerow([row[0]] + [format_number(v) for v in row[1:]])
    trace.write_text(buf.getvalue(), encoding="utf-8")
    files.append(trace)
    cfg_path = out / "config.json"
    cfg_path.write_text(cfg.canonical + "\n", encoding="utf-8")
    files.append(cfg_path)
    return files


def load_run(run_dir) -> tuple:
    """Configuration and solved state stored by ``meanmatch solve``."""
    run = Path(run_dir)
    if not run.is_dir():
        raise UsageError(f"run directory not found: {run}")
    missing = [f for f in ("config.json", *FIELD_FILES.values()) if not (run / f).exists()]
    if missing:
        raise UsageError(f"run directory {run} is missing {', '.join(missing)}")
    cfg = load_config(run / "config.json")
    fields = {name: read_field_csv(run / fname) for name, fname in FIELD_FILES.items()}
    manifest = run / "manifest.json"
    meta = json.loads(manifest.read_text()) if manifest.exists() else {}
    state = EquilibriumState(**fields, iteration=int(meta.get("iterations", 0)),
                             residual=float(meta.get("residual", float("nan"))),
                             converged=bool(meta.get("converged", False)))
    return cfg, state


def cmd_solve(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    started = _now()
    params, grids, options = cfg.market(), cfg.grids(), cfg.solver_options()
    last = {}

    def keep(state):
        last["state"] = state

    try:
        state = solve_fixed_point(params, grids, options, callback=keep)
    except (NumericalFaultError, SolverHealthError) as exc:
        logger.error("numerical fault: %s", exc)
        files = write_solution(last["state"], cfg, out) if "state" in last else []
        _write_manifest(out, cfg, "solve", started, files, converged=False, fault=str(exc))
        return EXIT_FAULT
    files = write_solution(state, cfg, out)
    _write_manifest(out, cfg, "solve", started, files, converged=state.converged,
                    iterations=state.iteration, residual=state.residual)
    _emit(args, f"iterations {state.iteration}  residual {state.residual:.3e}  converged {state.converged}")
    return EXIT_OK if state.converged else EXIT_NOT_CONVERGED


# -- calibrate --------------------------------------------------------------

def cmd_calibrate(args) -> int:
    path = Path(args.quantiles) if args.quantiles else data_path("earnings_quantiles.csv")
    try:
        data = income.QuantileData.from_csv(path)
    except FileNotFoundError:
        raise UsageError(f"quantile file not found: {path}") from None
    except ValueError as exc:
        raise UsageError(f"bad quantile file {path}: {exc}") from None
    out = _out_dir(args)
    started = _now()
    families = income.FAMILIES if args.family == "both" else (income.normalize_family(args.family),)
    files, ok, lines = [], True, ["family  rrmse      iterations  converged  params"]
    for fam in families:
        res = income.calibrate(fam, data, max_iters=args.max_iters)
        p = out / f"calibration_{fam}.json"
        p.write_text(json.dumps(res.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        files.append(p)
        ok &= res.converged
        params = ", ".join(f"{k}={v:.6g}" for k, v in res.params.to_dict().items())
        lines.append(f"{fam:<7} {100 * res.rrmse:.4f}%   {res.iterations:<10}  {str(res.converged):<9}  {params}")
    _emit(args, "\n".join(lines))
    _write_manifest(out, None, "calibrate", started, files, quantiles=str(path), converged=ok)
    return EXIT_OK if ok else EXIT_CALIBRATION


# -- check ------------------------------------------------------------------

def _constants_table(c: theory.TheoryConstants, no_match: bool, nonempty: bool, uniq: dict) -> str:
    rows = [(k, v) for k, v in c.to_dict().items()]
    rows += [("no_match", no_match), ("nonempty", nonempty),
             ("uniqueness_I", uniq["cond_I"]), ("uniqueness_II", uniq["cond_II"])]
    return "\n".join(f"{k:<14} {v:.6g}" if isinstance(v, float) else f"{k:<14} {v}" for k, v in rows)


def cmd_check(args) -> int:
    if args.audit:
        cfg, state = load_run(args.audit)
        if args.config:
            cfg = _load_cfg(args)
    else:
        cfg, state = _load_cfg(args), None
    params, grids = cfg.market(), cfg.grids()
    consts = theory.constants_for(params, grids, nu=args.nu)
    _, no_match = theory.check_no_match(consts, grids.t)
    nonempty = theory.check_nonempty(consts)
    uniq = theory.check_uniqueness(consts)
    _emit(args, _constants_table(consts, no_match, nonempty, uniq))
    report = {"constants": consts.to_dict(), "no_match": no_match, "nonempty": nonempty, "uniqueness": uniq}
    code = EXIT_OK
    if state is not None:
        tol = theory.AuditTolerances(solver_tol=cfg.data["solver"]["tol"])
        checks = theory.audit_solution(state, consts, params, tol)
        report["audit"] = [c.to_dict() for c in checks]
        _emit(args, "\n".join(f"{'PASS' if c.passed else 'FAIL'}  {c.check_name:<24} {c.worst_value:.6g} "
                              f"at {c.worst_location}" for c in checks))
        if not theory.audit_passed(checks):
            code = EXIT_VALIDATION
    if args.out:
        out = _out_dir(args)
        (out / "check.json").write_text(json.dumps(report, indent=2, sort_keys=True, default=float) + "\n")
    return code


# -- simulate ---------------------------------------------------------------

def cmd_simulate(args) -> int:
    if not args.run:
        raise UsageError("simulate needs --run DIR with a solved equilibrium")
    cfg, state = load_run(args.run)
    if args.seed is not None:
        cfg = RunConfig({**cfg.data, "seed": int(args.seed)})
    sim = dict(cfg.data["simulate"])
    for key in ("agents", "replicates", "mode", "sampling", "bins"):
        value = getattr(args, key)
        if value is not None:
            sim[key] = value
    if sim["agents"] < 1 or sim["replicates"] < 1:
        raise UsageError("--agents and --replicates must be >= 1")
    cfg = RunConfig({**cfg.data, "simulate": sim})
    out = _out_dir(args)
    started = _now()
    params = cfg.market()
    sc = montecarlo.SimConfig(n_agents=sim["agents"], seed=cfg.seed, solution=state, params=params,
                              mode=sim["mode"], sampling=sim["sampling"])
    results = montecarlo.replicates(sc, sim["replicates"])
    report = montecarlo.compare_to_pde(results, state, params, n_bins=sim["bins"])
    times = state.V_A.time.nodes
    comment = _comment(cfg)
    files = [out / "mc_report.json", out / "mc_F.csv"]
    files[0].write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    F_rows = zip(times,
                 montecarlo.empirical_unmatched([r.pop_A for r in results], times),
                 montecarlo.pde_unmatched(state.f_A),
                 montecarlo.empirical_unmatched([r.pop_B for r in results], times),
                 montecarlo.pde_unmatched(state.f_B))
    diagnostics._write_rows(files[1], comment, ["t", "F_A_mc", "F_A_pde", "F_B_mc", "F_B_pde"], F_rows)
    if args.events:
        ev_cfg = montecarlo.SimConfig(**{**sc.__dict__, "log_events": True})
        log = montecarlo.simulate_market(ev_cfg).events
        p = out / "events.csv"
        p.write_text(f"# {comment}\n" + log.to_csv(), encoding="utf-8")
        files.append(p)
    _emit(args, json.dumps(report.to_dict(), indent=2))
    _write_manifest(out, cfg, "simulate", started, files, report=report.to_dict())
    return EXIT_OK if report.fraction_within_3SE >= 0.9 else EXIT_VALIDATION


# -- diagnose ---------------------------------------------------------------

def cmd_diagnose(args) -> int:
    if not args.run:
        raise UsageError("diagnose needs --run DIR with a solved equilibrium")
    cfg, state = load_run(args.run)
    out = _out_dir(args)
    manifest = diagnostics.export_figure_data(state, cfg.market(), out, config=cfg.data)
    _emit(args, f"wrote {len(manifest['files'])} files to {out}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="run configuration JSON")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--seed", type=_seed, default=argparse.SUPPRESS, help="override the config seed")
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="meanmatch", parents=[common],
                                     description="Mean field equilibria of two-sided matching markets.")
    parser.add_argument("--version", action="version", version=f"meanmatch {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", parents=[common], help="solve the equilibrium fixed point")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("calibrate", parents=[common], help="fit initial quality laws to quantiles")
    p.add_argument("--quantiles", help="CSV of prob,value rows (default: shipped earnings table)")
    p.add_argument("--family", default="both", choices=["both", "pln", "gp"])
    p.add_argument("--max-iters", type=_positive_int, default=5000)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("check", parents=[common], help="theory constants, conditions and audit")
    p.add_argument("--audit", metavar="RUN_DIR", help="audit a solved run directory")
    p.add_argument("--nu", type=float, default=theory.DEFAULT_NU)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("simulate", parents=[common], help="Monte-Carlo cross-check of a solved run")
    p.add_argument("--run", metavar="RUN_DIR")
    p.add_argument("--agents", type=int)
    p.add_argument("--replicates", type=int)
    p.add_argument("--mode", choices=montecarlo.MODES)
    p.add_argument("--sampling", choices=montecarlo.SAMPLING)
    p.add_argument("--bins", type=_positive_int)
    p.add_argument("--events", action="store_true", help="also write the event log of one replicate")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("diagnose", parents=[common], help="export figure data of a solved run")
    p.add_argument("--run", metavar="RUN_DIR")
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    for name, default in (("config", None), ("out", "meanmatch-out"), ("seed", None), ("quiet", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"meanmatch: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalFaultError, SolverHealthError) as exc:
        print(f"meanmatch: numerical fault: {exc}", file=sys.stderr)
        return EXIT_FAULT


__all__ = ["main", "build_parser", "load_run", "write_solution"]
