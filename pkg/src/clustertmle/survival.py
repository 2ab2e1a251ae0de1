"""Kaplan-Meier curves with trial censoring rules and two-stage horizon effects."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd

from . import kernels
from .inference import EffectEstimate, EstimationError
from .trial_data import (DATABASE_CLOSURE, ParticipantRecord, PopulationSpec, Trial, _day,
                         select_population)
from .two_stage import CLINIC_CANDIDATES, ClinicEndpoint, two_stage_effect

DAYS_PER_MONTH = 30.4375
HORIZONS = (6, 12, 18, 24)
EVENT_KINDS = ("dtg_switch", "second_line", "lapse", "transfer", "death")

# event column (calendar date or, for lapse, days from enrollment) and censoring sources
_RULES = {
    "dtg_switch": ("dtg_switch_date", ("death", "endpoint_vl", "closure")),
    "second_line": ("second_line_date", ("death", "endpoint_vl", "closure")),
    "lapse": ("lapse_day", ("death", "outmigration", "transfer", "window_start")),
    "transfer": ("transfer_date", ("death", "closure")),
    "death": ("death_date", ("outmigration", "transfer", "closure")),
}


@dataclass(frozen=True)
class TimeToEvent:
    time: float
    event: bool
    kind: str


@dataclass(frozen=True)
class KMCurve:
    """Product-limit estimate over distinct event times."""

    time: np.ndarray
    surv: np.ndarray
    n_risk: np.ndarray
    n_event: np.ndarray
    greenwood_var: np.ndarray
    n: int
    max_time: float

    def survival_at(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        k = np.searchsorted(self.time, t, side="right")
        s = np.concatenate([[1.0], self.surv])
        return s[k]

    def table(self) -> pd.DataFrame:
        return pd.DataFrame({"time": self.time, "surv": self.surv, "n_risk": self.n_risk,
                             "n_event": self.n_event, "greenwood_var": self.greenwood_var})


def _col_days(frame, col):
    from .trial_data import days
    return days(frame[col])


def event_time_arrays(frame: pd.DataFrame, kind: str,
                      closure=DATABASE_CLOSURE) -> tuple[np.ndarray, np.ndarray]:
    """Days from enrollment to event or censoring, and the event indicator.

    ``frame`` is :attr:`AnalysisSet.frame` (or ``classified``).  An event
    on the same day as a censoring counts as an event.  Times below one day
    are set to one day so every time is positive.
    """
    if kind not in _RULES:
        raise ValueError(f"unknown event kind {kind!r}")
    col, sources = _RULES[kind]
    enroll = frame.enroll_day.to_numpy(dtype=float)
    if col == "lapse_day":
        ev = frame.lapse_day.to_numpy(dtype=float)
    else:
        ev = _col_days(frame, col) - enroll
    n = enroll.size
    cens = np.full(n, np.inf)
    closure_rel = _day(closure) - enroll
    for src in sources:
        if src == "death":
            c = _col_days(frame, "death_date") - enroll
        elif src == "outmigration":
            c = _col_days(frame, "outmigration_date") - enroll
        elif src == "transfer":
            c = _col_days(frame, "transfer_date") - enroll
        elif src == "closure":
            c = closure_rel
        elif src == "window_start":
            c = frame.start_day.to_numpy(dtype=float) - enroll
        elif src == "endpoint_vl":
            # ascertainment date, or the end of the window when none was obtained
            vl = frame.vl_day.to_numpy(dtype=float)
            c = np.where(np.isnan(vl), frame.end_day.to_numpy(dtype=float), vl) - enroll
        cens = np.fmin(cens, np.where(np.isnan(c), np.inf, c))
    cens = np.minimum(cens, closure_rel)
    has_ev = ~np.isnan(ev)
    event = has_ev & (ev <= cens)
    time = np.where(event, ev, cens)
    return np.maximum(time, 1.0), event


def time_to_event(record: ParticipantRecord, kind: str, spec: PopulationSpec | None = None,
                  clinic_arm: int = 0) -> TimeToEvent:
    """Event time of one participant for event ``kind``."""
    from .trial_data import ClinicRecord
    spec = spec or PopulationSpec.secondary()
    clinic = ClinicRecord(record.clinic_id, record.country, clinic_arm, "s", 1, 0.5)
    t = Trial.from_records([record], [clinic])
    f = select_population(t, spec.with_(enrollment_cutoff=None)).classified
    time, ev = event_time_arrays(f, kind, spec.database_closure)
    return TimeToEvent(float(time[0]), bool(ev[0]), kind)


def km_fit(time, event) -> KMCurve:
    """Kaplan-Meier estimate; at tied times events precede censorings.

    ``greenwood_var`` is ``S(t)^2 * sum d / (n (n - d))``, NaN from the
    time the risk set is exhausted.
    """
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=bool)
    if time.size == 0:
        raise ValueError("km_fit needs at least one observation")
    order = np.lexsort((~event, time))
    t, s, r, d, g = kernels.km_table(np.ascontiguousarray(time[order]),
                                     np.ascontiguousarray(event[order]))
    # undefined once the risk set is exhausted (S = 0, Greenwood sum infinite)
    var = np.where(np.isinf(g), np.nan, s * s * np.where(np.isinf(g), 0.0, g))
    return KMCurve(t, s, r, d, var, int(time.size), float(time.max()))


def cumulative_at(curve: KMCurve, horizons_months: Sequence[float] = HORIZONS):
    """``F(h) = 1 - S(h)`` at month horizons (30.4375-day months).

    Returns ``(F, extrapolated)``; ``extrapolated`` marks horizons beyond the
    last observed time, where the last value is carried forward.
    """
    h = np.asarray(horizons_months, dtype=float) * DAYS_PER_MONTH
    return 1.0 - curve.survival_at(h), h > curve.max_time


def clinic_cumulative(frame: pd.DataFrame, kind: str, horizon_months: float,
                      clinics: pd.DataFrame | None = None, closure=DATABASE_CLOSURE):
    """Per-clinic KM cumulative probability at one horizon, as clinic endpoints."""
    time, event = event_time_arrays(frame, kind, closure)
    if clinics is not None:
        empty = sorted(set(clinics.clinic_id) - set(frame.clinic_id))
        if empty:
            raise EstimationError(f"clinic(s) with no subjects at risk at time 0: {', '.join(empty)}")
    out = []
    cid = frame.clinic_id.to_numpy()
    arm = frame.arm.to_numpy()
    for c in sorted(set(cid)):
        m = cid == c
        curve = km_fit(time[m], event[m])
        F, _ = cumulative_at(curve, [horizon_months])
        out.append(ClinicEndpoint(str(c), int(arm[m][0]), float(F[0]), int(m.sum())))
    return out


def two_stage_time_effect(frame: pd.DataFrame, kind: str, horizon_months: float,
                          clinics: pd.DataFrame | None = None, *, adaptive: bool = True,
                          candidates=("none",) + CLINIC_CANDIDATES, weights: str = "equal",
                          scale: str = "risk_ratio", sided: str = "two",
                          direction: str = "increase", closure=DATABASE_CLOSURE) -> EffectEstimate:
    """Two-stage effect on the cumulative probability of ``kind`` by the horizon."""
    eps = clinic_cumulative(frame, kind, horizon_months, clinics, closure)
    est, _ = two_stage_effect(eps, clinics, adaptive=adaptive, candidates=candidates,
                              weights=weights, scale=scale, sided=sided, direction=direction)
    return est


def km_by_group(frame: pd.DataFrame, kind: str, by: str | None = None,
                closure=DATABASE_CLOSURE) -> pd.DataFrame:
    """Step-function tables (time, S, at-risk, events) per group for plotting."""
    time, event = event_time_arrays(frame, kind, closure)
    keys = np.full(len(frame), "all", dtype=object) if by is None else frame[by].astype(str).to_numpy()
    parts = []
    for k in sorted(set(keys)):
        m = keys == k
        tab = km_fit(time[m], event[m]).table()
        tab.insert(0, "group", k)
        tab.insert(0, "grouping", by or "overall")
        parts.append(tab)
    cols = ["grouping", "group", "time", "surv", "n_risk", "n_event", "greenwood_var"]
    return pd.concat(parts, ignore_index=True) if parts else pd.DataFrame(columns=cols)
