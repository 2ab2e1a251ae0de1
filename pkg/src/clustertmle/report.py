"""Report bundles: tables and plot data as CSV + JSON with a hashed manifest.

A bundle directory holds ``<table>.csv`` and ``<table>.json`` for every
table, ``plot_<name>.csv`` for plot data and ``manifest.json``.  Floats
are written with 10 significant digits, so the same inputs give
byte-identical files.  The manifest records each file's sha256 and a
bundle hash over those.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import shutil
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from . import __version__
from .inference import EffectEstimate
from .power import PowerParams, clusters_per_arm, clusters_per_arm_raw, power_curve
from .runner import PRESETS, PlanError, PlanResult, run_preset, trial_digest
from .survival import km_by_group
from .trial_data import (PopulationSpec, Trial, ascertainment_table, baseline_table,
                         outcome_counts_table, select_population)

log = logging.getLogger(__name__)

FLOAT_DIGITS = 10
EFFECT_COLUMNS = ["analysis", "stratum", "endpoint", "population", "estimator", "note",
                  "effect", "scale", "ci_lo", "ci_hi", "p", "p_one_sided", "p_two_sided", "sided",
                  "direction", "se", "df", "psi1", "psi1_ci_lo", "psi1_ci_hi", "psi0", "psi0_ci_lo",
                  "psi0_ci_hi", "selected", "weights", "n_clusters", "n_obs", "flags",
                  "plan_hash", "data_hash", "seed"]
KM_COLUMNS = ["endpoint", "grouping", "group", "time", "surv", "n_risk", "n_event", "greenwood_var"]


class ReportError(RuntimeError):
    """A bundle could not be written completely."""


@dataclass
class ReportBundle:
    manifest: dict
    tables: dict[str, pd.DataFrame] = field(default_factory=dict)
    plots: dict[str, pd.DataFrame] = field(default_factory=dict)


# --------------------------------------------------------------------------
# assembling


def effects_frame(results: Sequence[PlanResult]) -> pd.DataFrame:
    rows = [r.row() for r in results]
    return pd.DataFrame(rows, columns=EFFECT_COLUMNS)


def stage1_frame(results: Sequence[PlanResult]) -> pd.DataFrame | None:
    parts = []
    for r in results:
        if r.stage1 is not None and len(r.stage1):
            s = r.stage1.copy()
            s.insert(0, "stratum", r.stratum)
            s.insert(0, "analysis", r.plan.name)
            parts.append(s)
    return pd.concat(parts, ignore_index=True) if parts else None


def describe_tables(trial: Trial, spec: PopulationSpec | None = None) -> dict[str, pd.DataFrame]:
    """Baseline characteristics, participant flow and outcome counts."""
    spec = spec or PopulationSpec.primary()
    aset = select_population(trial, spec)
    base = pd.concat([baseline_table(aset.frame, g)
                      for g in ("overall", "arm", "country", "country_arm", "clinic")],
                     ignore_index=True)
    counts = []
    for label, s in (("primary", spec), ("secondary", PopulationSpec.secondary())):
        c = outcome_counts_table(select_population(trial, s) if s is not spec else aset)
        c.insert(0, "population_label", label)
        counts.append(c)
    excl = pd.DataFrame([{"reason": k, "n": v} for k, v in aset.exclusions.items()],
                        columns=["reason", "n"])
    return {"baseline": base, "ascertainment": ascertainment_table(aset.classified),
            "outcome_counts": pd.concat(counts, ignore_index=True), "exclusions": excl}


def _km_plots(trial: Trial) -> dict[str, pd.DataFrame]:
    out = {}
    prim = select_population(trial, PopulationSpec.primary()).frame
    sec = select_population(trial, PopulationSpec.secondary()).frame
    for kind, frame in (("lapse", prim), ("death", sec), ("transfer", sec)):
        if frame.empty:
            out[f"km_{kind}"] = pd.DataFrame(columns=KM_COLUMNS)
            continue
        t = pd.concat([km_by_group(frame, kind, by) for by in (None, "arm")], ignore_index=True)
        t.insert(0, "endpoint", kind)
        out[f"km_{kind}"] = t
    return out


def _data_date(trial: Trial) -> str:
    d = pd.to_datetime(trial.participants.get("enrollment_date"), errors="coerce")
    if d is None or d.dropna().empty:
        return ""
    return d.max().date().isoformat()


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is None:
        return ""
    return datetime.fromtimestamp(int(epoch), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def build_report(trial: Trial, presets: Sequence[str] = PRESETS, *, seed: int = 0,
                 config_hash: str = "", power_params: PowerParams | None = None,
                 simulation: pd.DataFrame | None = None) -> ReportBundle:
    """Run ``presets`` on ``trial`` and collect every table and plot dataset.

    Each preset gives ``effects_<preset>`` (and ``stage1_<preset>`` when a
    two-stage estimator ran).  A preset that cannot run at all (for
    example an empty analysis set) yields an empty table with headers.
    """
    tables = describe_tables(trial)
    plots: dict[str, pd.DataFrame] = {}
    notes = {}
    for name in presets:
        try:
            out = run_preset(name, trial)
        except PlanError:
            raise
        except Exception as exc:  # noqa: BLE001 - a failed preset is reported, not fatal
            if len(trial.participants):
                raise
            out = {"effects": []}
            notes[name] = f"not run: {exc}"
        tables[f"effects_{name}"] = effects_frame(out["effects"])
        s1 = stage1_frame(out["effects"])
        if s1 is not None:
            tables[f"stage1_{name}"] = s1
        for k, v in out.get("tables", {}).items():
            tables[k] = v
        for k, v in out.get("plots", {}).items():
            plots[k] = v
        if out.get("note"):
            notes[name] = out["note"]
    if len(trial.participants):
        plots.update(_km_plots(trial))
    pp = power_params or PowerParams()
    tables["power"] = pd.DataFrame([{**pp.__dict__, "pi1": pp.pi1,
                                     "clusters_per_arm_raw": clusters_per_arm_raw(pp),
                                     "clusters_per_arm": clusters_per_arm(pp)}])
    plots["power_curve"] = power_curve(pp, c=clusters_per_arm(pp))
    if simulation is not None:
        tables["simulation"] = simulation
    manifest = {"tool": "clustertmle", "version": __version__, "config_hash": config_hash,
                "data_hash": trial_digest(trial), "seed": seed, "presets": list(presets),
                "generated": _timestamp(), "data_through": _data_date(trial), "notes": notes}
    return ReportBundle(manifest, tables, plots)


# --------------------------------------------------------------------------
# writing


def _fmt(v):
    if v is None:
        return None
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v) or math.isinf(v):
            return None
        return float(format(v, f".{FLOAT_DIGITS}g"))
    if isinstance(v, (tuple, list)):
        return [_fmt(x) for x in v]
    if v is pd.NA or v is pd.NaT:
        return None
    return str(v)


def _csv_cell(v):
    v = _fmt(v)
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, f".{FLOAT_DIGITS}g")
    return str(v)


def table_csv(frame: pd.DataFrame) -> str:
    out = frame.astype(object).map(_csv_cell) if len(frame) else frame
    return out.to_csv(index=False, lineterminator="\n")


def table_json(frame: pd.DataFrame) -> str:
    cols = [str(c) for c in frame.columns]
    rows = [{c: _fmt(v) for c, v in zip(cols, row)} for row in frame.itertuples(index=False)]
    return json.dumps({"columns": cols, "rows": rows}, indent=1, allow_nan=False) + "\n"


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def bundle_hash(files: dict[str, str]) -> str:
    return _sha("".join(f"{k} {files[k]}\n" for k in sorted(files)).encode())


def render(bundle: ReportBundle) -> dict[str, bytes]:
    """File name to contents, manifest included."""
    files: dict[str, bytes] = {}
    for name in sorted(bundle.tables):
        files[f"{name}.csv"] = table_csv(bundle.tables[name]).encode()
        files[f"{name}.json"] = table_json(bundle.tables[name]).encode()
    for name in sorted(bundle.plots):
        files[f"plot_{name}.csv"] = table_csv(bundle.plots[name]).encode()
    hashes = {k: _sha(v) for k, v in files.items()}
    manifest = {**bundle.manifest, "valid": True, "files": hashes,
                "bundle_hash": bundle_hash(hashes)}
    files["manifest.json"] = (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode()
    return files


def emit_report(bundle: ReportBundle, directory, *, _fail_after: int | None = None) -> list[Path]:
    """Write ``bundle`` to ``directory`` atomically.

    Files go to a sibling temporary directory that replaces ``directory``
    only once complete.  On failure ``directory`` holds a manifest with
    ``"valid": false`` and :class:`ReportError` is raised.
    ``_fail_after`` injects a failure after that many files (testing).
    """
    target = Path(directory)
    files = render(bundle)
    tmp = target.with_name(target.name + ".partial")
    try:
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir(parents=True)
        for i, (name, data) in enumerate(sorted(files.items())):
            if _fail_after is not None and i >= _fail_after:
                raise OSError("injected write failure")
            (tmp / name).write_bytes(data)
        old = target.with_name(target.name + ".old")
        if target.exists():
            if old.exists():
                shutil.rmtree(old)
            target.rename(old)
        tmp.rename(target)
        if old.exists():
            shutil.rmtree(old)
    except OSError as exc:
        shutil.rmtree(tmp, ignore_errors=True)
        try:
            target.mkdir(parents=True, exist_ok=True)
            (target / "manifest.json").write_text(json.dumps(
                {**bundle.manifest, "valid": False, "error": str(exc)}, indent=1, sort_keys=True) + "\n")
        except OSError:
            pass
        raise ReportError(f"report not written: {exc}") from exc
    return [target / n for n in sorted(files)]


def verify_report(directory) -> bool:
    """True if every file matches the manifest and the bundle hash holds."""
    d = Path(directory)
    try:
        man = json.loads((d / "manifest.json").read_text())
    except (OSError, ValueError):
        return False
    if not man.get("valid"):
        return False
    hashes = man.get("files", {})
    present = {p.name for p in d.iterdir()} - {"manifest.json"}
    if present != set(hashes):
        return False
    for name, h in hashes.items():
        if _sha((d / name).read_bytes()) != h:
            return False
    return bundle_hash(hashes) == man.get("bundle_hash")
