"""Flat ``key = value`` configuration files.

Blank lines and ``#`` comments are ignored.  ``include = other.cfg``
splices another file (relative to the including file) at that point; later
keys override earlier ones.  Unknown keys are errors.
"""
from __future__ import annotations

import hashlib
from datetime import date
from pathlib import Path

from .runner import AnalysisPlan, EndpointSpec, PlanError
from .simulate import SimAnalysis, TrialSimSpec
from .trial_data import PopulationSpec


class ConfigError(ValueError):
    """A configuration file is malformed."""


# key -> description (the documented schema)
PLAN_KEYS = {
    "name": "analysis name (required)",
    "endpoint": "viral_suppression | mortality | transfer | engaged_2y | retained | lapse | "
                "dtg_switch | joint_switch_and_suppression | satisfaction_mean",
    "threshold": "400 | 50 copies/mL",
    "horizon_months": "horizon for lapse / dtg_switch cumulative probabilities",
    "direction": "increase | decrease (default per endpoint)",
    "sided": "one | two (default per endpoint)",
    "population": "primary | secondary",
    "enrollment_cutoff": "ISO date or 'none'",
    "transfer_handling": "exclude | include | success | censor",
    "death_handling": "failure | censor",
    "missing_handling": "failure | adjust | exclude",
    "estimator": "two_stage | single_stage",
    "stage1": "empirical | tmle_missing | tmle_sequential",
    "adaptive": "true | false",
    "clinic_candidates": "comma list from none, n_youth_in_care_baseline, "
                         "baseline_suppression_proportion, both",
    "individual_candidates": "comma list from none, age, sex, baseline_suppressed",
    "weights": "equal | size",
    "scale": "risk_ratio | risk_difference",
    "subgroup": "variable=level (single-stage only)",
    "stratify_by": "dtg_switch | second_line | engaged_2y | postpartum_6m | postpartum_12m",
    "seed": "integer",
}

SIM_KEYS = {
    "clusters_per_arm": "clinics per arm",
    "m": "participants per clinic",
    "m_range": "lo,hi for variable clinic sizes",
    "pi0": "control proportion",
    "pi1": "intervention proportion",
    "relative_effect": "alternative to pi1: pi1 = pi0 * relative_effect",
    "k": "coefficient of variation of clinic proportions",
    "covariate_r2": "share of between-clinic logit variance explained by the clinic covariate",
    "individual_rho": "strength of the individual baseline covariate",
    "outcome_draw": "bernoulli | exact",
    "replicates": "number of replicates",
    "seed": "master seed",
    "estimators": "comma list from two_stage, single_stage",
    "adaptive": "true | false",
    "sided": "one | two",
    "alpha": "test level",
    "scale": "risk_ratio | risk_difference",
    "weights": "equal | size",
}


def parse_config(path, _seen=None) -> dict[str, str]:
    """Read ``path`` into an ordered ``{key: value}`` dict, expanding includes."""
    path = Path(path).resolve()
    seen = set() if _seen is None else _seen
    if path in seen:
        raise ConfigError(f"include cycle at {path}")
    seen = seen | {path}
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    out: dict[str, str] = {}
    for no, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path.name}:{no}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path.name}:{no}: empty key")
        if key == "include":
            out.update(parse_config(path.parent / value, seen))
        else:
            out[key] = value
    return out


def config_hash(cfg: dict[str, str]) -> str:
    text = "\n".join(f"{k}={cfg[k]}" for k in sorted(cfg))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _check_keys(cfg, allowed, kind):
    bad = sorted(set(cfg) - set(allowed))
    if bad:
        raise ConfigError(f"unknown {kind} key(s): {', '.join(bad)}")


def _bool(v, key):
    if v.lower() in ("true", "yes", "1", "on"):
        return True
    if v.lower() in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"{key}: expected true/false, got {v!r}")


def _num(v, key, kind=float):
    try:
        return kind(v)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {v!r}") from None


def _list(v):
    return tuple(s.strip() for s in v.split(",") if s.strip())


def plan_from_config(cfg: dict[str, str]) -> AnalysisPlan:
    _check_keys(cfg, PLAN_KEYS, "plan")
    if "name" not in cfg:
        raise ConfigError("plan needs a name")
    try:
        ep = EndpointSpec(
            cfg.get("endpoint", "viral_suppression"),
            _num(cfg.get("threshold", "400"), "threshold"),
            _num(cfg["horizon_months"], "horizon_months") if "horizon_months" in cfg else None,
            cfg.get("direction"), cfg.get("sided"))
        popname = cfg.get("population", "primary")
        pkw = {k: cfg[k] for k in ("transfer_handling", "death_handling", "missing_handling") if k in cfg}
        if "enrollment_cutoff" in cfg:
            v = cfg["enrollment_cutoff"]
            pkw["enrollment_cutoff"] = None if v.lower() == "none" else date.fromisoformat(v)
        if popname == "primary":
            pop = PopulationSpec.primary(**pkw)
        elif popname == "secondary":
            pop = PopulationSpec.secondary(**pkw)
        else:
            raise ConfigError(f"population: expected primary or secondary, got {popname!r}")
        kw = {}
        for k in ("estimator", "stage1", "weights", "scale", "stratify_by"):
            if k in cfg:
                kw[k] = cfg[k]
        if "adaptive" in cfg:
            kw["adaptive"] = _bool(cfg["adaptive"], "adaptive")
        for k in ("clinic_candidates", "individual_candidates"):
            if k in cfg:
                kw[k] = _list(cfg[k])
        if "subgroup" in cfg:
            var, _, lev = cfg["subgroup"].partition("=")
            if not lev:
                raise ConfigError("subgroup: expected variable=level")
            kw["subgroup"] = (var.strip(), lev.strip())
        if "seed" in cfg:
            kw["seed"] = _num(cfg["seed"], "seed", int)
        return AnalysisPlan(cfg["name"], ep, pop, **kw)
    except (PlanError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def sim_from_config(cfg: dict[str, str]) -> tuple[TrialSimSpec, list[SimAnalysis]]:
    _check_keys(cfg, SIM_KEYS, "simulation")
    kw = {}
    for k in ("clusters_per_arm", "m", "replicates", "seed"):
        if k in cfg:
            kw[k] = _num(cfg[k], k, int)
    for k in ("pi0", "pi1", "k", "covariate_r2", "individual_rho"):
        if k in cfg:
            kw[k] = _num(cfg[k], k)
    if "relative_effect" in cfg:
        if "pi1" in cfg:
            raise ConfigError("give pi1 or relative_effect, not both")
        kw["pi1"] = kw.get("pi0", 0.65) * _num(cfg["relative_effect"], "relative_effect")
    if "m_range" in cfg:
        lo, hi = (_num(s, "m_range", int) for s in _list(cfg["m_range"]))
        kw["m_range"] = (lo, hi)
    if "outcome_draw" in cfg:
        kw["outcome_draw"] = cfg["outcome_draw"]
    try:
        spec = TrialSimSpec(**kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    akw = {}
    if "adaptive" in cfg:
        akw["adaptive"] = _bool(cfg["adaptive"], "adaptive")
    for k in ("sided", "scale", "weights"):
        if k in cfg:
            akw[k] = cfg[k]
    if "alpha" in cfg:
        akw["alpha"] = _num(cfg["alpha"], "alpha")
    ests = _list(cfg.get("estimators", "two_stage,single_stage"))
    bad = [e for e in ests if e not in ("two_stage", "single_stage")]
    if bad:
        raise ConfigError(f"unknown estimator(s): {', '.join(bad)}")
    return spec, [SimAnalysis(name=e, estimator=e, **akw) for e in ests]
