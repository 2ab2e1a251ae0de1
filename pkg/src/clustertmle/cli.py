"""Command-line interface.

Exit codes: 0 ok, 1 report write failure, 2 configuration error, 3 data
error, 4 estimation error.  Failures print one JSON object to stderr.
"""
from __future__ import annotations

import argparse
import hashlib
import io
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import pandas as pd

from . import __version__
from .config import ConfigError, config_hash, parse_config, plan_from_config, sim_from_config
from .inference import EstimationError
from .power import PowerParams, clusters_per_arm, clusters_per_arm_raw, power_curve, power_given_design
from .report import (ReportError, build_report, describe_tables, effects_frame, emit_report,
                     table_csv, table_json)
from .runner import PRESETS, PlanError, run_plan, run_preset
from .simulate import run_replicates
from .trial_data import DataError, load_trial

DATA_ENV = "CLUSTERTMLE_DATA"
EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_DATA, EXIT_ESTIMATION = 0, 1, 2, 3, 4


def bundled_data_dir() -> Path:
    return Path(str(resources.files("clustertmle") / "data" / "synthetic"))


def data_dir(arg: str | None) -> Path:
    return Path(arg or os.environ.get(DATA_ENV) or bundled_data_dir())


def _emit(frame: pd.DataFrame, fmt: str, out) -> None:
    out.write(table_json(frame) if fmt == "json" else table_csv(frame))


def _cmd_validate(a, out):
    trial = load_trial(data_dir(a.data))
    json.dump({"status": "ok", "participants": len(trial.participants),
               "clinics": len(trial.clinics), "rejected_rows": len(trial.rejected),
               "rejected": [list(r) for r in trial.rejected]}, out, indent=1)
    out.write("\n")
    return EXIT_OK


def _cmd_describe(a, out):
    tables = describe_tables(load_trial(data_dir(a.data)))
    if a.out:
        d = Path(a.out)
        d.mkdir(parents=True, exist_ok=True)
        for name, t in tables.items():
            (d / f"{name}.csv").write_text(table_csv(t))
            (d / f"{name}.json").write_text(table_json(t))
        return EXIT_OK
    for name, t in tables.items():
        out.write(f"# {name}\n")
        _emit(t, a.format, out)
    return EXIT_OK


def _cmd_analyze(a, out):
    if bool(a.preset) == bool(a.plan):
        raise ConfigError("give exactly one of --preset or --plan")
    if a.preset and a.preset not in PRESETS:
        raise ConfigError(f"unknown preset {a.preset!r}; choose from {', '.join(PRESETS)}")
    plan = plan_from_config(parse_config(a.plan)) if a.plan else None
    trial = load_trial(data_dir(a.data))
    if plan is not None:
        res = {"effects": run_plan(plan, trial)}
    else:
        res = run_preset(a.preset, trial)
    frame = effects_frame(res["effects"])
    if a.strict and frame.effect.isna().any():
        bad = frame[frame.effect.isna()]
        raise EstimationError("; ".join(f"{r.analysis}/{r.stratum}: {r.note}" for r in bad.itertuples()))
    _emit(frame, a.format, out)
    for name, t in res.get("tables", {}).items():
        out.write(f"# {name}\n")
        _emit(t, a.format, out)
    return EXIT_OK


def _cmd_power(a, out):
    try:
        p = PowerParams(pi0=a.pi0, relative_effect=a.rr, m=a.m, k=a.k, alpha=a.alpha,
                        power=a.power, sided=a.sided, small_sample_correction=a.correction)
        raw = clusters_per_arm_raw(p)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    c = clusters_per_arm(p)
    json.dump({"pi0": p.pi0, "pi1": p.pi1, "relative_effect": p.relative_effect, "m": p.m,
               "k": p.k, "alpha": p.alpha, "target_power": p.power, "sided": p.sided,
               "small_sample_correction": p.small_sample_correction,
               "clusters_per_arm_raw": round(raw, 6), "clusters_per_arm": c,
               "achieved_power": round(power_given_design(c, p), 6)}, out, indent=1)
    out.write("\n")
    if a.curve:
        _emit(power_curve(p, c=c), "csv", out)
    return EXIT_OK


def _cmd_simulate(a, out):
    cfg = parse_config(a.spec)
    spec, analyses = sim_from_config(cfg)
    kw = {}
    if a.reps is not None:
        kw["replicates"] = a.reps
    if a.seed is not None:
        kw["seed"] = a.seed
    spec = spec.with_(**kw)
    res = run_replicates(spec, analyses)
    reps_csv = table_csv(res.replicates)
    digest = hashlib.sha256(reps_csv.encode()).hexdigest()
    if a.out:
        d = Path(a.out)
        d.mkdir(parents=True, exist_ok=True)
        (d / "replicates.csv").write_text(reps_csv)
        (d / "summary.csv").write_text(table_csv(res.summary()))
        (d / "failures.csv").write_text(table_csv(res.failures))
    _emit(res.summary(), a.format, out)
    out.write(f"spec_digest: {spec.digest()}\n")
    out.write(f"output_hash: {digest}\n")
    return EXIT_OK


def _cmd_report(a, out):
    trial = load_trial(data_dir(a.data))
    presets = tuple(s for s in a.presets.split(",") if s) if a.presets else PRESETS
    bad = [p for p in presets if p not in PRESETS]
    if bad:
        raise ConfigError(f"unknown preset(s): {', '.join(bad)}")
    chash = config_hash(parse_config(a.config)) if a.config else ""
    bundle = build_report(trial, presets, seed=a.seed, config_hash=chash)
    files = emit_report(bundle, a.out)
    man = json.loads((Path(a.out) / "manifest.json").read_text())
    out.write(f"wrote {len(files)} files to {a.out}\nbundle_hash: {man['bundle_hash']}\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="clustertmle", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"clustertmle {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_data(p):
        p.add_argument("--data", help=f"trial directory (default ${DATA_ENV} or bundled synthetic data)")
        p.add_argument("--format", choices=("csv", "json"), default="csv")
        return p

    p = with_data(sub.add_parser("validate", help="schema check only"))
    p.set_defaults(fn=_cmd_validate)
    p = with_data(sub.add_parser("describe", help="baseline and ascertainment tables"))
    p.add_argument("--out", help="write tables to this directory instead of stdout")
    p.set_defaults(fn=_cmd_describe)
    p = with_data(sub.add_parser("analyze", help="run a preset or a plan file"))
    p.add_argument("--preset", help=", ".join(PRESETS))
    p.add_argument("--plan", help="plan configuration file")
    p.add_argument("--strict", action="store_true", help="exit 4 if any estimate is inestimable")
    p.set_defaults(fn=_cmd_analyze)
    p = sub.add_parser("power", help="clusters per arm for a proportion endpoint")
    p.add_argument("--pi0", type=float, default=0.65)
    p.add_argument("--rr", type=float, default=1.24)
    p.add_argument("--m", type=float, default=50)
    p.add_argument("--k", type=float, default=0.175)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--power", type=float, default=0.80)
    p.add_argument("--sided", choices=("one", "two"), default="two")
    p.add_argument("--correction", choices=("none", "plus_one"), default="none")
    p.add_argument("--curve", action="store_true", help="also print power against m and k")
    p.set_defaults(fn=_cmd_power)
    p = sub.add_parser("simulate", help="Monte Carlo operating characteristics")
    p.add_argument("--spec", required=True, help="simulation configuration file")
    p.add_argument("--reps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="also write replicate-level results here")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.set_defaults(fn=_cmd_simulate)
    p = sub.add_parser("report", help="write a report bundle directory")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--presets", help="comma list (default: all)")
    p.add_argument("--config", help="configuration file whose hash goes in the manifest")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_report)
    return ap


def _fail(code, exc, err):
    diag = {"status": "error", "exit_code": code, "error": type(exc).__name__, "message": str(exc)}
    extra = getattr(exc, "diagnostics", None)
    if extra:
        diag["diagnostics"] = extra
    err.write(json.dumps(diag, default=str) + "\n")
    return code


def main(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    ap = build_parser()
    try:
        a = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=err)
    try:
        return a.fn(a, out)
    except (ConfigError, PlanError) as exc:
        return _fail(EXIT_CONFIG, exc, err)
    except DataError as exc:
        return _fail(EXIT_DATA, exc, err)
    except EstimationError as exc:
        return _fail(EXIT_ESTIMATION, exc, err)
    except ReportError as exc:
        return _fail(EXIT_IO, exc, err)


def run(argv=None) -> tuple[int, str, str]:
    """Call :func:`main` capturing output (for tests and notebooks)."""
    out, err = io.StringIO(), io.StringIO()
    code = main(argv, out, err)
    return code, out.getvalue(), err.getvalue()


if __name__ == "__main__":
    sys.exit(main())
