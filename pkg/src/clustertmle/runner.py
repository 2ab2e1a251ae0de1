"""Analysis plans: endpoint definitions bound to populations and estimators.

A plan names an endpoint, a population, the estimator family and its
options.  :func:`run_plan` builds the outcome from the trial, dispatches to
the two-stage or single-stage estimator, and attaches provenance.  Named
presets cover every planned analysis.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from datetime import date
from typing import Callable, Sequence

import numpy as np
import pandas as pd

from . import __version__
from .inference import EffectEstimate, EstimationError
from .learners import LearnerSpec, make_design
from .survival import HORIZONS, km_by_group, two_stage_time_effect
from .tmle import adaptive_prespec_individual, tmle_effect_individual
from .trial_data import (DATABASE_CLOSURE, ENROLLMENT_CUTOFF, AnalysisSet, PopulationSpec, Trial,
                         _day, days, select_population)
from .two_stage import (CLINIC_CANDIDATES, INDIVIDUAL_ADJUSTMENT, endpoints_frame,
                        stage1_endpoints, two_stage_effect)

log = logging.getLogger(__name__)

ENDPOINT_KINDS = ("viral_suppression", "mortality", "transfer", "engaged_2y", "retained", "lapse",
                  "dtg_switch", "joint_switch_and_suppression", "satisfaction_mean")
DIRECTION = {"viral_suppression": "increase", "mortality": "decrease", "transfer": "increase",
             "engaged_2y": "increase", "retained": "increase", "lapse": "decrease",
             "dtg_switch": "increase", "joint_switch_and_suppression": "increase",
             "satisfaction_mean": "increase"}
SUBGROUP_VARIABLES = ("country", "sex", "age_group", "baseline_care_status",
                      "baseline_art_regimen", "baseline_suppression")
_SUBGROUP_COLUMN = {"country": "country", "sex": "sex", "age_group": "age_group",
                    "baseline_care_status": "baseline_care_status",
                    "baseline_art_regimen": "art_regimen_baseline",
                    "baseline_suppression": "baseline_suppressed_label"}
MEDIATORS = ("dtg_switch", "second_line", "engaged_2y", "postpartum_6m", "postpartum_12m")
PREDICTOR_ADJUSTMENT = ("country", "sex", "age", "baseline_care_status")
PREDICTORS = ("country", "sex", "age_group", "education", "employment", "marital_status",
              "has_children", "alcohol_use", "mobility", "baseline_care_status",
              "baseline_suppressed_label", "on_dtg_baseline")
LIKERT_BOUNDS = (1.0, 5.0)


class PlanError(ValueError):
    """A plan or preset is malformed."""


@dataclass(frozen=True)
class EndpointSpec:
    """Endpoint kind with its threshold/horizon, benefit direction and sidedness.

    ``direction`` and ``sided`` default per kind; time-to-event kinds with a
    ``horizon_months`` are analysed as Kaplan-Meier cumulative probabilities.
    """

    kind: str = "viral_suppression"
    threshold: float = 400
    horizon_months: float | None = None
    direction: str | None = None
    sided: str | None = None

    def __post_init__(self):
        if self.kind not in ENDPOINT_KINDS:
            raise PlanError(f"unknown endpoint kind {self.kind!r}")
        if self.threshold not in (400, 50):
            raise PlanError("threshold must be 400 or 50 copies/mL")
        if self.horizon_months is not None and self.kind not in ("lapse", "dtg_switch"):
            raise PlanError(f"{self.kind} has no horizon form")
        if self.kind == "lapse" and self.horizon_months is None:
            raise PlanError("lapse is analysed at a horizon; set horizon_months")
        if self.direction is None:
            object.__setattr__(self, "direction", DIRECTION[self.kind])
        if self.sided is None:
            two = self.kind == "dtg_switch" and self.horizon_months is not None
            object.__setattr__(self, "sided", "two" if two else "one")
        if self.direction not in ("increase", "decrease") or self.sided not in ("one", "two"):
            raise PlanError("direction must be increase|decrease and sided one|two")


@dataclass(frozen=True)
class AnalysisPlan:
    """An executable analysis.

    ``stage1``: empirical | tmle_missing | tmle_sequential (two-stage only).
    ``subgroup`` is ``(variable, level)``; subgroup analyses are always
    single-stage.  ``stratify_by`` names a post-baseline mediator (see
    :data:`MEDIATORS`) and yields one estimate per stratum.
    """

    name: str
    endpoint: EndpointSpec = EndpointSpec()
    population: PopulationSpec = PopulationSpec()
    estimator: str = "two_stage"
    stage1: str = "empirical"
    adaptive: bool = True
    clinic_candidates: tuple[str, ...] = ("none",) + CLINIC_CANDIDATES
    individual_candidates: tuple[str, ...] = ("none",) + INDIVIDUAL_ADJUSTMENT
    weights: str = "equal"
    scale: str = "risk_ratio"
    subgroup: tuple[str, str] | None = None
    stratify_by: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.estimator not in ("two_stage", "single_stage"):
            raise PlanError(f"unknown estimator {self.estimator!r}")
        if self.stage1 not in ("empirical", "tmle_missing", "tmle_sequential"):
            raise PlanError(f"unknown stage-1 method {self.stage1!r}")
        if self.subgroup is not None:
            if self.subgroup[0] not in SUBGROUP_VARIABLES:
                raise PlanError(f"subgroup variable {self.subgroup[0]!r} is not prespecified")
            if self.estimator != "single_stage":
                raise PlanError("subgroup analyses use the single-stage estimator")
        if self.stratify_by is not None and self.stratify_by not in MEDIATORS:
            raise PlanError(f"unknown stratification {self.stratify_by!r}")
        if self.weights not in ("equal", "size"):
            raise PlanError("weights must be equal or size")
        bad = set(self.clinic_candidates) - {"none", "both", *CLINIC_CANDIDATES}
        bad |= set(self.individual_candidates) - {"none", *INDIVIDUAL_ADJUSTMENT}
        if bad:
            raise PlanError(f"adjustment candidates outside the prespecified sets: {sorted(bad)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        pop = d["population"]
        for k in ("enrollment_cutoff", "database_closure"):
            pop[k] = None if pop[k] is None else str(pop[k])
        return d

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class PlanResult:
    plan: AnalysisPlan
    stratum: str
    estimate: EffectEstimate | None
    note: str = ""
    stage1: pd.DataFrame | None = None
    diagnostics: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def row(self) -> dict:
        base = {"analysis": self.plan.name, "stratum": self.stratum,
                "endpoint": self.plan.endpoint.kind, "population": self.plan.population.population,
                "estimator": self.plan.estimator, "note": self.note,
                "plan_hash": self.provenance.get("plan_hash", ""),
                "data_hash": self.provenance.get("data_hash", ""), "seed": self.plan.seed}
        if self.estimate is not None:
            base.update(self.estimate.to_dict())
        return base


_DIGESTS: dict = {}


def trial_digest(trial: Trial) -> str:
    """Content hash of the participant and clinic tables (cached per object)."""
    hit = _DIGESTS.get(id(trial))
    if hit is not None and hit[0] is trial:
        return hit[1]
    if len(_DIGESTS) >= 64:
        _DIGESTS.clear()
    d = _trial_digest(trial)
    _DIGESTS[id(trial)] = (trial, d)
    return d


def _trial_digest(trial: Trial) -> str:
    h = hashlib.sha256()
    for frame in (trial.participants, trial.clinics, trial.viral_loads, trial.contacts,
                  trial.births, trial.satisfaction):
        h.update(pd.util.hash_pandas_object(frame, index=False).to_numpy().tobytes())
        h.update(",".join(map(str, frame.columns)).encode())
    return h.hexdigest()[:16]


# --------------------------------------------------------------------------
# outcome construction


def _derived_columns(frame: pd.DataFrame) -> pd.DataFrame:
    f = frame.copy()
    f["age_group"] = np.where(f.age < 20, "15-19", "20-24")
    f["baseline_suppressed_label"] = f.baseline_suppressed.map(
        lambda v: "missing" if pd.isna(v) else ("suppressed" if v == 1 else "unsuppressed"))
    f["has_children"] = np.where(f.n_children.fillna(0) > 0, "yes", "no")
    f["on_dtg_baseline"] = np.where(f.art_regimen_baseline == "DTG", "yes", "no")
    return f


def _by_date(frame, col, limit_days):
    d = days(frame[col])
    return (~np.isnan(d)) & (d <= limit_days)


def build_outcome(aset: AnalysisSet, endpoint: EndpointSpec) -> pd.DataFrame:
    """Analysis frame with ``y`` and ``delta`` for a binary endpoint.

    Viral suppression uses the classification.  Mortality and transfer are
    events on or before the two-year mark (capped at closure).  Engagement
    and retention come from contacts before the window opens.  The joint
    endpoint needs a DTG switch on or before the endpoint viral load and
    suppression.  Population handling flags (transfers as successes,
    censoring at death) apply to every binary endpoint.
    """
    f = _derived_columns(aset.frame)
    spec = aset.spec
    kind = endpoint.kind
    closure = _day(spec.database_closure)
    horizon = np.minimum(f.mark_day.to_numpy(), closure)
    if kind == "viral_suppression" or endpoint.horizon_months is not None:
        return f
    delta = np.ones(len(f))
    if kind == "mortality":
        y = _by_date(f, "death_date", horizon).astype(float)
    elif kind == "transfer":
        y = _by_date(f, "transfer_date", horizon).astype(float)
    elif kind in ("engaged_2y", "retained"):
        y = f[kind].to_numpy(dtype=float)
    elif kind == "dtg_switch":
        y = _by_date(f, "dtg_switch_date", horizon).astype(float)
    elif kind == "joint_switch_and_suppression":
        sw = days(f.dtg_switch_date)
        y = ((~np.isnan(sw)) & (sw <= f.vl_day.to_numpy()) & (f.status == "Suppressed")).astype(float)
    else:
        raise PlanError(f"{kind} is not a binary endpoint")
    if kind in ("engaged_2y", "retained"):
        trans = f.transferred.to_numpy(dtype=bool)
        if spec.transfer_handling == "success":
            y[trans] = 1.0
        elif spec.transfer_handling == "censor":
            delta[trans] = 0.0
        if spec.death_handling == "censor":
            delta[_by_date(f, "death_date", np.inf) & (days(f.death_date) < f.start_day.to_numpy())] = 0.0
    f["y"] = np.where(delta == 1, y, np.nan)
    f["delta"] = delta
    return f


def _subgroup_filter(frame, subgroup):
    var, level = subgroup
    col = _SUBGROUP_COLUMN[var]
    return frame[frame[col].astype(str) == str(level)]


def _mediator_indicator(trial: Trial, frame: pd.DataFrame, mediator: str) -> np.ndarray:
    end = np.where(np.isnan(frame.vl_day.to_numpy()), frame.end_day.to_numpy(), frame.vl_day.to_numpy())
    if mediator == "dtg_switch":
        d = days(frame.dtg_switch_date)
        return (~np.isnan(d)) & (d <= end)
    if mediator == "second_line":
        d = days(frame.second_line_date)
        return (~np.isnan(d)) & (d <= end)
    if mediator == "engaged_2y":
        return frame.engaged_2y.to_numpy(dtype=bool)
    window = 183 if mediator == "postpartum_6m" else 365
    b = trial.births
    if b.empty:
        return np.zeros(len(frame), dtype=bool)
    pos = pd.Index(frame.participant_id).get_indexer(b.participant_id)
    ok = pos >= 0
    bd = days(b["date"])[ok]
    pos = pos[ok]
    hit = (bd <= end[pos]) & (bd >= end[pos] - window)
    out = np.zeros(len(frame), dtype=bool)
    out[pos[hit]] = True
    return out


# --------------------------------------------------------------------------
# estimation


def _individual_matrix(frame, name):
    if name == "none":
        return None
    return make_design(frame, [name], warn=False).values


def _single_stage(frame: pd.DataFrame, plan: AnalysisPlan, diagnostics: dict) -> EffectEstimate:
    ep = plan.endpoint
    delta = frame.delta.to_numpy(dtype=float)
    adjust = bool((delta == 0).any())
    obs = delta == 1
    cluster = frame.clinic_id.to_numpy()
    z = frame.arm.to_numpy(dtype=float)
    y = frame.y.to_numpy(dtype=float)
    selected = "none"
    if plan.adaptive:
        cands = {c: _individual_matrix(frame[obs], c) for c in plan.individual_candidates}
        selected, scores = adaptive_prespec_individual(cluster[obs], z[obs], y[obs], cands, plan.scale)
        diagnostics["cv_scores"] = scores
    W = None
    if selected != "none" or adjust:
        cols = [selected] if selected != "none" else []
        if adjust:
            cols = list(INDIVIDUAL_ADJUSTMENT)
        W = make_design(frame, cols, warn=False).values if cols else None
    return tmle_effect_individual(cluster, W, z, y, delta, plan.scale, adjust_missing=adjust,
                                  sided=ep.sided, direction=ep.direction, selected=selected)


def _two_stage(frame: pd.DataFrame, clinics: pd.DataFrame, plan: AnalysisPlan, diagnostics: dict):
    ep = plan.endpoint
    method = plan.stage1
    if method == "empirical" and (frame.delta == 0).any():
        method = "tmle_missing"
        diagnostics["stage1_method"] = "tmle_missing (censored or missing outcomes present)"
    present = clinics[clinics.clinic_id.isin(frame.clinic_id)]
    missing = sorted(set(clinics.clinic_id) - set(frame.clinic_id))
    if missing:
        raise EstimationError(
            f"no participants in clinic(s) {', '.join(missing)} for this cell; "
            "use the single-stage estimator for sparse strata")
    eps = stage1_endpoints(frame, method, clinics=present,
                           learners=LearnerSpec(seed=plan.seed))
    est, scores = two_stage_effect(eps, present, adaptive=plan.adaptive,
                                   candidates=plan.clinic_candidates, weights=plan.weights,
                                   scale=plan.scale, sided=ep.sided, direction=ep.direction)
    diagnostics["cv_scores"] = scores
    return est, endpoints_frame(eps)


def _estimate(trial: Trial, frame: pd.DataFrame, plan: AnalysisPlan, diagnostics: dict):
    ep = plan.endpoint
    if ep.horizon_months is not None:
        kind = "lapse" if ep.kind == "lapse" else "dtg_switch"
        est = two_stage_time_effect(frame, kind, ep.horizon_months,
                                    trial.clinics[trial.clinics.clinic_id.isin(frame.clinic_id)],
                                    adaptive=plan.adaptive, candidates=plan.clinic_candidates,
                                    weights=plan.weights, scale=plan.scale, sided=ep.sided,
                                    direction=ep.direction,
                                    closure=plan.population.database_closure)
        return est, None
    if plan.estimator == "single_stage":
        return _single_stage(frame, plan, diagnostics), None
    return _two_stage(frame, trial.clinics, plan, diagnostics)


def run_plan(plan: AnalysisPlan, trial: Trial) -> list[PlanResult]:
    """Execute ``plan``; one result per stratum (a single one without
    ``stratify_by``).  Inestimable cells come back with ``estimate=None``
    and the reason in ``note``."""
    ep = plan.endpoint
    if ep.kind == "satisfaction_mean":
        return [run_satisfaction(trial, plan=plan)["composite"]]
    pop = plan.population
    if ep.kind == "viral_suppression" and pop.vl_threshold != ep.threshold:
        pop = pop.with_(vl_threshold=ep.threshold)
    aset = select_population(trial, pop)
    frame = build_outcome(aset, ep)
    if ep.kind in ("dtg_switch", "joint_switch_and_suppression") or plan.stratify_by == "dtg_switch":
        frame = frame[frame.art_regimen_baseline != "DTG"]
    if plan.subgroup is not None:
        frame = _subgroup_filter(frame, plan.subgroup)
    prov = {"plan_hash": plan.digest(), "data_hash": trial_digest(trial), "seed": plan.seed,
            "version": __version__}
    strata = [("all", np.ones(len(frame), dtype=bool))]
    if plan.stratify_by is not None:
        ind = _mediator_indicator(trial, frame, plan.stratify_by)
        strata = [(f"{plan.stratify_by}=yes", ind), (f"{plan.stratify_by}=no", ~ind)]
    out = []
    for label, mask in strata:
        f = frame[mask].reset_index(drop=True)
        diag = {"n": int(len(f)), "exclusions": aset.exclusions}
        if len(f) == 0:
            out.append(PlanResult(plan, label, None, "inestimable: empty analysis set",
                                  diagnostics=diag, provenance=prov))
            continue
        try:
            est, s1 = _estimate(trial, f, plan, diag)
            note = ""
        except EstimationError as exc:
            est, s1, note = None, None, f"inestimable: {exc}"
        out.append(PlanResult(plan, label, est, note, s1, diag, prov))
    return out


# --------------------------------------------------------------------------
# predictor analyses


def _binarize(frame, predictor):
    """Exposure indicator and a description, or ``None`` with one level."""
    s = frame[predictor].astype(str)
    levels = sorted(s.unique())
    if len(levels) < 2:
        return None
    out = []
    for lev in levels[1:]:
        keep = s.isin([levels[0], lev]).to_numpy()
        out.append((f"{lev} vs {levels[0]}", keep, (s == lev).to_numpy(dtype=float)))
    return out


def _predictor_outcome(f: pd.DataFrame, variant: str):
    status = f.status.to_numpy()
    if variant == "failure":
        return (status != "Suppressed").astype(float), np.ones(len(f))
    if variant == "nonsuppression_or_death":
        y = np.isin(status, ["Unsuppressed", "Died"]).astype(float)
        return y, (status != "MissingVL").astype(float)
    if variant == "suppression":
        y = (status == "Suppressed").astype(float)
        return y, (~np.isin(status, ["MissingVL", "Died"])).astype(float)
    raise PlanError(f"unknown predictor outcome {variant!r}")


def run_predictor_analysis(trial: Trial, arm: int, predictors: Sequence[str] = PREDICTORS,
                           adjustment: Sequence[str] = PREDICTOR_ADJUSTMENT,
                           outcome: str = "failure",
                           population: PopulationSpec = PopulationSpec(),
                           exclude_missing: bool = False) -> pd.DataFrame:
    """Associations of baseline predictors with an outcome within one arm.

    Each predictor is the exposure in turn (each level against the first)
    and the remaining adjustment variables form the adjustment set.
    Exposure probabilities are estimated (the exposure is not randomized)
    and inference is clustered by clinic.  Predictors with one level are
    skipped and listed with a note.
    """
    pop = population.with_(missing_handling="exclude") if exclude_missing else population
    f = _derived_columns(select_population(trial, pop).frame)
    f = f[f.arm == arm].reset_index(drop=True)
    y, delta = _predictor_outcome(f, outcome)
    adjust_missing = bool((delta == 0).any())
    rows = []
    for pred in predictors:
        contrasts = _binarize(f, pred)
        if contrasts is None:
            rows.append({"arm": arm, "outcome": outcome, "predictor": pred, "contrast": "",
                         "adjusted": False, "note": "skipped: single level"})
            continue
        base = _SUBGROUP_COLUMN.get(pred, pred)
        adj = [a for a in adjustment if a != pred and a != base
               and not (pred == "age_group" and a == "age")]
        for label, keep, expo in contrasts:
            g = f[keep]
            for adjusted in (False, True):
                cols = adj if adjusted else []
                if adjust_missing:
                    cols = list(dict.fromkeys(cols + [c for c in INDIVIDUAL_ADJUSTMENT if c != pred]))
                W = make_design(g, cols, warn=False).values if cols else None
                row = {"arm": arm, "outcome": outcome, "predictor": pred, "contrast": label,
                       "adjusted": adjusted, "note": ""}
                try:
                    est = tmle_effect_individual(g.clinic_id.to_numpy(), W, expo[keep], y[keep],
                                                 delta[keep], "risk_ratio", g_z=None,
                                                 adjust_missing=adjust_missing, sided="two",
                                                 selected=",".join(cols) or "none")
                    row.update({k: v for k, v in est.to_dict().items()
                                if k in ("psi1", "psi0", "effect", "se", "ci_lo", "ci_hi",
                                         "p_two_sided", "n_obs", "n_clusters", "df", "flags")})
                except EstimationError as exc:
                    row["note"] = f"inestimable: {exc}"
                rows.append(row)
    return pd.DataFrame(rows)


# --------------------------------------------------------------------------
# DTG roll-out and other mediators


def switch_summary(trial: Trial, population: PopulationSpec) -> pd.DataFrame:
    """On-DTG-at-baseline and switched counts, overall and by arm and sex."""
    f = _derived_columns(select_population(trial, population).frame)
    sw = _mediator_indicator(trial, f, "dtg_switch")
    f = f.assign(switched=sw & (f.art_regimen_baseline != "DTG").to_numpy())
    rows = []
    groups = [("overall", "all", f)] + [("arm", str(k), g) for k, g in f.groupby("arm")] + \
             [("sex", str(k), g) for k, g in f.groupby("sex")]
    for gname, gval, g in groups:
        on = int((g.art_regimen_baseline == "DTG").sum())
        eligible = len(g) - on
        switched = int(g.switched.sum())
        rows.append({"grouping": gname, "group": gval, "n": len(g), "on_dtg_baseline": on,
                     "prop_on_dtg_baseline": on / len(g) if len(g) else np.nan,
                     "not_on_dtg": eligible, "switched": switched,
                     "prop_switched": switched / eligible if eligible else np.nan})
    return pd.DataFrame(rows)


def run_mediator_suite(trial: Trial, mediator: str, population: PopulationSpec = PopulationSpec(),
                       name_prefix: str | None = None) -> list[PlanResult]:
    """Viral suppression effects within strata of a post-baseline mediator.

    Strata can be sparse within clinics, so the single-stage estimator is
    used.
    """
    prefix = name_prefix or f"mediator_{mediator}"
    plan = AnalysisPlan(f"{prefix}_stratified_suppression", population=population,
                        estimator="single_stage", stratify_by=mediator)
    return run_plan(plan, trial)


def run_dtg_suite(trial: Trial, population: PopulationSpec = PopulationSpec()) -> dict:
    """Switch description, Kaplan-Meier curves, horizon effects (two-sided),
    suppression effects by switch status and the joint endpoint (one-sided).

    Participants on DTG at baseline are left out.  If none remain the suite
    is empty with a note.
    """
    aset = select_population(trial, population)
    elig = aset.frame[aset.frame.art_regimen_baseline != "DTG"]
    out: dict = {"summary": switch_summary(trial, population), "note": ""}
    if elig.empty:
        out.update(note="all participants on DTG at baseline: suite empty", km=pd.DataFrame(),
                   horizons=[], stratified=[], joint=[])
        return out
    out["km"] = pd.concat([km_by_group(elig, "dtg_switch", by, population.database_closure)
                           for by in (None, "arm", "sex", "clinic_id")], ignore_index=True)
    out["horizons"] = []
    for h in HORIZONS:
        plan = AnalysisPlan(f"dtg_switch_{h}m", EndpointSpec("dtg_switch", horizon_months=h),
                            population)
        out["horizons"] += run_plan(plan, trial)
    out["stratified"] = run_mediator_suite(trial, "dtg_switch", population, "dtg")
    out["joint"] = run_plan(AnalysisPlan("dtg_joint_switch_suppression",
                                         EndpointSpec("joint_switch_and_suppression"), population),
                            trial)
    return out


# --------------------------------------------------------------------------
# satisfaction


def satisfaction_scores(trial: Trial, reverse_coded: Sequence[str] = ("q3",),
                        scale_max: int = 5) -> pd.DataFrame:
    """Per-participant item scores (reverse-coded items flipped) and composite."""
    s = trial.satisfaction
    if s.empty:
        return pd.DataFrame(columns=["participant_id", "composite"])
    s = s.assign(score=np.where(s.question_id.isin(list(reverse_coded)),
                                scale_max + 1 - s.score, s.score).astype(float))
    wide = s.pivot_table(index="participant_id", columns="question_id", values="score",
                         aggfunc="mean")
    wide = wide[sorted(wide.columns)]
    wide["composite"] = wide.mean(axis=1)
    return wide.reset_index()


def run_satisfaction(trial: Trial, population: PopulationSpec | None = None,
                     reverse_coded: Sequence[str] = ("q3",), plan: AnalysisPlan | None = None) -> dict:
    """Clinic mean responses compared between arms on the difference scale.

    Returns ``{"composite": PlanResult, "items": [PlanResult, ...],
    "excluded_no_responses": int}``.
    """
    plan = plan or AnalysisPlan("satisfaction", EndpointSpec("satisfaction_mean"),
                                scale="mean_difference")
    plan = replace(plan, scale="mean_difference")
    pop = population or PopulationSpec.secondary()
    aset = select_population(trial, pop)
    scores = satisfaction_scores(trial, reverse_coded)
    f = aset.frame.merge(scores, on="participant_id", how="left")
    responded = f.composite.notna()
    n_excl = int((~responded).sum())
    f = f[responded].reset_index(drop=True)
    prov = {"plan_hash": plan.digest(), "data_hash": trial_digest(trial), "seed": plan.seed,
            "version": __version__}
    items = [c for c in scores.columns if c not in ("participant_id", "composite")]
    results = {}
    for col in ["composite"] + items:
        g = f[f[col].notna()].assign(y=lambda d, c=col: d[c], delta=1.0)
        clinics = trial.clinics[trial.clinics.clinic_id.isin(g.clinic_id)]
        diag = {"n": int(len(g)), "excluded_no_responses": n_excl}
        try:
            eps = stage1_endpoints(g, "empirical")
            est, sc = two_stage_effect(eps, clinics, adaptive=plan.adaptive,
                                       candidates=plan.clinic_candidates, weights=plan.weights,
                                       scale="mean_difference", bounds=LIKERT_BOUNDS, sided="one",
                                       direction="increase")
            diag["cv_scores"] = sc
            res = PlanResult(replace(plan, name=f"satisfaction_{col}"), col, est, "",
                             endpoints_frame(eps), diag, prov)
        except EstimationError as exc:
            res = PlanResult(replace(plan, name=f"satisfaction_{col}"), col, None,
                             f"inestimable: {exc}", None, diag, prov)
        results[col] = res
    return {"composite": results["composite"], "items": [results[c] for c in items],
            "excluded_no_responses": n_excl}


# --------------------------------------------------------------------------
# presets

_P = PopulationSpec.primary()
_S = PopulationSpec.secondary()


def _subgroup_plans(trial: Trial) -> list[AnalysisPlan]:
    f = _derived_columns(select_population(trial, _P).frame)
    plans = []
    for var in SUBGROUP_VARIABLES:
        for lev in sorted(f[_SUBGROUP_COLUMN[var]].astype(str).unique()):
            plans.append(AnalysisPlan(f"subgroup_{var}_{lev}", estimator="single_stage",
                                      subgroup=(var, lev)))
    return plans


PRESET_PLANS: dict[str, Callable[[Trial], list[AnalysisPlan]]] = {
    "primary": lambda t: [AnalysisPlan("primary")],
    "secondary_population": lambda t: [AnalysisPlan("secondary_population", population=_S)],
    "sensitivity_exclude_missing": lambda t: [AnalysisPlan(
        "sensitivity_exclude_missing", population=_P.with_(missing_handling="exclude"))],
    "sensitivity_adjust_missing": lambda t: [AnalysisPlan(
        "sensitivity_adjust_missing", population=_S.with_(missing_handling="adjust"),
        stage1="tmle_sequential")],
    "sensitivity_transfer_success": lambda t: [AnalysisPlan(
        "sensitivity_transfer_success", population=_S.with_(transfer_handling="success"))],
    "sensitivity_censor_death": lambda t: [AnalysisPlan(
        "sensitivity_censor_death", population=_P.with_(death_handling="censor"),
        stage1="tmle_missing")],
    "sensitivity_threshold_50": lambda t: [AnalysisPlan(
        "sensitivity_threshold_50", EndpointSpec(threshold=50))],
    "sensitivity_single_stage": lambda t: [AnalysisPlan("sensitivity_single_stage",
                                                        estimator="single_stage")],
    "sensitivity_size_weights": lambda t: [AnalysisPlan("sensitivity_size_weights", weights="size")],
    "subgroups": _subgroup_plans,
    "mortality": lambda t: [AnalysisPlan("mortality", EndpointSpec("mortality"),
                                         _S.with_(enrollment_cutoff=ENROLLMENT_CUTOFF),
                                         estimator="single_stage")],
    "transfers": lambda t: [AnalysisPlan("transfers", EndpointSpec("transfer"),
                                         _S.with_(enrollment_cutoff=ENROLLMENT_CUTOFF),
                                         estimator="single_stage")],
    "engagement": lambda t: [
        AnalysisPlan("engaged_2y", EndpointSpec("engaged_2y"), estimator="single_stage"),
        AnalysisPlan("engaged_2y_transfer_success_censor_death", EndpointSpec("engaged_2y"),
                     _S.with_(enrollment_cutoff=ENROLLMENT_CUTOFF, transfer_handling="success",
                              death_handling="censor"), estimator="single_stage"),
        AnalysisPlan("retained", EndpointSpec("retained"), estimator="single_stage")],
    "lapse": lambda t: [AnalysisPlan(f"lapse_{h}m", EndpointSpec("lapse", horizon_months=h))
                        for h in HORIZONS],
}
SPECIAL_PRESETS = ("dtg", "mediators", "predictors", "satisfaction")
PRESETS = tuple(PRESET_PLANS) + SPECIAL_PRESETS


def run_preset(name: str, trial: Trial) -> dict:
    """Run a named preset.

    Returns a dict of result lists and tables: ``effects`` (list of
    :class:`PlanResult`) plus preset-specific tables.
    """
    if name in PRESET_PLANS:
        res = []
        for plan in PRESET_PLANS[name](trial):
            res += run_plan(plan, trial)
        return {"effects": res}
    if name == "dtg":
        s = run_dtg_suite(trial)
        return {"effects": s["horizons"] + s["stratified"] + s["joint"],
                "tables": {"dtg_summary": s["summary"]}, "plots": {"km_dtg_switch": s["km"]},
                "note": s["note"]}
    if name == "mediators":
        res = []
        for m in MEDIATORS:
            if m != "dtg_switch":
                res += run_mediator_suite(trial, m)
        return {"effects": res}
    if name == "predictors":
        tabs = [run_predictor_analysis(trial, arm, outcome=o)
                for arm in (0, 1) for o in ("failure", "nonsuppression_or_death", "suppression")]
        return {"effects": [], "tables": {"predictors": pd.concat(tabs, ignore_index=True)}}
    if name == "satisfaction":
        s = run_satisfaction(trial)
        return {"effects": [s["composite"]] + s["items"],
                "tables": {"satisfaction_counts": pd.DataFrame(
                    [{"excluded_no_responses": s["excluded_no_responses"]}])}}
    raise PlanError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
