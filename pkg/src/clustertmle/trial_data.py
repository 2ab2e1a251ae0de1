"""Participant and clinic data: ingestion, endpoint windows, classification,
analysis populations and descriptive tables.

Internally a trial is held column-wise (:class:`Trial`): one participants
frame plus long tables for the list-valued fields.  Classification works on
whole columns; the per-record functions are thin wrappers over the same code.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from datetime import date, timedelta
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

SCHEMA_VERSION = "1"
DATABASE_CLOSURE = date(2022, 3, 1)
ENROLLMENT_CUTOFF = date(2019, 12, 1)
TWO_YEAR_DAYS = 730
WINDOW_BEFORE = 90
WINDOW_AFTER = 180
SIX_MONTHS = 183
RETENTION_GAP = 120
SUPPRESSION_THRESHOLD = 400

STATUSES = ("Suppressed", "Unsuppressed", "Died", "MissingVL", "ExcludedOutmigrated",
            "ExcludedTransferred", "ExcludedWithdrawn", "ExcludedLateEnrollment")
CARE_STATUSES = ("recently_engaged", "engaged", "re_engaging")
ASCERTAINMENT = ("Outmigrated", "Transferred", "Measured", "Died", "Missing")

_EPOCH = np.datetime64("1970-01-01", "D")

# column -> (kind, required, description)
DATA_DICTIONARY = {
    "participant_id": ("str", True, "unique participant identifier"),
    "clinic_id": ("str", True, "enrolling clinic; must exist in the clinics file"),
    "enrollment_date": ("date", True, "ISO-8601 enrollment date"),
    "age": ("int", True, "age in years at enrollment"),
    "sex": ("cat", True, "female | male"),
    "country": ("cat", True, "Kenya | Uganda"),
    "education": ("cat", False, "none | primary | secondary_plus"),
    "employment": ("cat", False, "unemployed | informal | formal"),
    "marital_status": ("cat", False, "single | married | other"),
    "n_children": ("int", False, "number of children"),
    "alcohol_use": ("cat", False, "none | any"),
    "mobility": ("cat", False, "stable | mobile"),
    "art_regimen_baseline": ("cat", True, "EFV | NVP | DTG | PI | other (DTG marks on-DTG at baseline)"),
    "baseline_suppressed": ("bool", False, "1 | 0 | blank: HIV RNA < 400 at enrollment"),
    "baseline_care_status": ("cat", True, "recently_engaged | engaged | re_engaging"),
    "art_start_date": ("date", False, "ART start (checks baseline_care_status when present)"),
    "last_visit_date": ("date", False, "last clinic visit before enrollment"),
    "withdrawal_date": ("date", False, "formal withdrawal from the study"),
    "death_date": ("date", False, "date of death"),
    "outmigration_date": ("date", False, "date of moving outside the study region"),
    "transfer_date": ("date", False, "documented formal transfer of care"),
    "dtg_switch_date": ("date", False, "switch to dolutegravir"),
    "second_line_date": ("date", False, "switch to second-line therapy"),
    "birth_dates": ("dates", False, "';'-separated ISO dates of births"),
    "contact_dates": ("dates", False, "';'-separated ISO dates of clinic contacts"),
    "viral_loads": ("vls", False, "';'-separated DATE:COPIES pairs"),
    "satisfaction_responses": ("scores", False, "';'-separated QUESTION:SCORE pairs (1-5)"),
}

CLINIC_DICTIONARY = {
    "clinic_id": ("str", True, "clinic identifier"),
    "country": ("cat", True, "Kenya | Uganda"),
    "arm": ("int", True, "1 intervention, 0 control"),
    "stratum_id": ("str", True, "randomization stratum"),
    "n_youth_in_care_baseline": ("int", True, "youth in HIV care at baseline"),
    "baseline_suppression_proportion": ("float", True, "suppressed among engaged at baseline"),
}

EVENT_DATES = ("withdrawal_date", "death_date", "outmigration_date", "transfer_date",
               "dtg_switch_date", "second_line_date")
DATE_COLUMNS = ("enrollment_date", "art_start_date", "last_visit_date") + EVENT_DATES
BASELINE_VARIABLES = ("age", "sex", "country", "education", "employment", "marital_status",
                      "n_children", "alcohol_use", "mobility", "art_regimen_baseline",
                      "baseline_suppressed", "baseline_care_status")
NUMERIC_BASELINE = ("age", "n_children")


class DataError(ValueError):
    """Input data violates the schema or a hard invariant."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = list(diagnostics or [])


class UnevaluableError(DataError):
    """The endpoint window is empty."""


# --------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class ParticipantRecord:
    participant_id: str
    clinic_id: str
    enrollment_date: date
    age: int
    sex: str
    country: str
    art_regimen_baseline: str = "EFV"
    baseline_care_status: str = "engaged"
    education: str | None = None
    employment: str | None = None
    marital_status: str | None = None
    n_children: int | None = None
    alcohol_use: str | None = None
    mobility: str | None = None
    baseline_suppressed: bool | None = None
    art_start_date: date | None = None
    last_visit_date: date | None = None
    withdrawal_date: date | None = None
    death_date: date | None = None
    outmigration_date: date | None = None
    transfer_date: date | None = None
    dtg_switch_date: date | None = None
    second_line_date: date | None = None
    birth_dates: tuple[date, ...] = ()
    contact_dates: tuple[date, ...] = ()
    viral_loads: tuple[tuple[date, float], ...] = ()
    satisfaction_responses: tuple[tuple[str, int], ...] = ()

    @property
    def on_dtg_baseline(self) -> bool:
        return self.art_regimen_baseline == "DTG"


@dataclass(frozen=True)
class ClinicRecord:
    clinic_id: str
    country: str
    arm: int
    stratum_id: str
    n_youth_in_care_baseline: int
    baseline_suppression_proportion: float


@dataclass(frozen=True)
class EndpointWindow:
    two_year_mark: date
    start: date
    end: date
    database_closure: date = DATABASE_CLOSURE


@dataclass(frozen=True)
class EndpointClassification:
    status: str
    endpoint_vl: tuple[date, float] | None = None


@dataclass(frozen=True)
class PopulationSpec:
    """Which participants enter an analysis and how their outcomes count.

    ``primary`` excludes outmigrated and transferred participants and those
    enrolled on or after ``enrollment_cutoff``.  ``transfer_handling``:
    exclude | include | success | censor.  ``death_handling``: failure |
    censor.  ``missing_handling``: failure | adjust | exclude.  Censored and
    adjusted rows stay in the set with ``delta = 0``.
    """

    population: str = "primary"
    enrollment_cutoff: date | None = ENROLLMENT_CUTOFF
    vl_threshold: float = SUPPRESSION_THRESHOLD
    transfer_handling: str = "exclude"
    death_handling: str = "failure"
    missing_handling: str = "failure"
    database_closure: date = DATABASE_CLOSURE

    def __post_init__(self):
        if self.population not in ("primary", "secondary"):
            raise ValueError(f"population must be primary or secondary, not {self.population!r}")
        if self.transfer_handling not in ("exclude", "include", "success", "censor"):
            raise ValueError(f"bad transfer_handling {self.transfer_handling!r}")
        if self.death_handling not in ("failure", "censor"):
            raise ValueError(f"bad death_handling {self.death_handling!r}")
        if self.missing_handling not in ("failure", "adjust", "exclude"):
            raise ValueError(f"bad missing_handling {self.missing_handling!r}")
        if self.population == "primary" and self.transfer_handling != "exclude":
            raise ValueError("the primary population always excludes transfers")

    @classmethod
    def primary(cls, **kw) -> "PopulationSpec":
        return cls(population="primary", **kw)

    @classmethod
    def secondary(cls, **kw) -> "PopulationSpec":
        kw.setdefault("enrollment_cutoff", None)
        kw.setdefault("transfer_handling", "include")
        return cls(population="secondary", **kw)

    @property
    def excludes_outmigrated(self) -> bool:
        return self.population == "primary"

    def with_(self, **kw) -> "PopulationSpec":
        return replace(self, **kw)


# --------------------------------------------------------------------------
# columnar container


def _empty_long(cols):
    return pd.DataFrame({c: pd.Series(dtype=t) for c, t in cols.items()})


_VL_COLS = {"participant_id": object, "date": "datetime64[ns]", "copies": float}
_DATE_LONG = {"participant_id": object, "date": "datetime64[ns]"}
_SAT_COLS = {"participant_id": object, "question_id": object, "score": "int64"}


@dataclass(frozen=True)
class Trial:
    participants: pd.DataFrame
    clinics: pd.DataFrame
    viral_loads: pd.DataFrame = field(default_factory=lambda: _empty_long(_VL_COLS))
    contacts: pd.DataFrame = field(default_factory=lambda: _empty_long(_DATE_LONG))
    births: pd.DataFrame = field(default_factory=lambda: _empty_long(_DATE_LONG))
    satisfaction: pd.DataFrame = field(default_factory=lambda: _empty_long(_SAT_COLS))
    rejected: tuple = ()

    @classmethod
    def from_records(cls, records: Iterable[ParticipantRecord],
                     clinics: Iterable[ClinicRecord] | pd.DataFrame) -> "Trial":
        records = list(records)
        rows, vls, cons, births, sats = [], [], [], [], []
        for r in records:
            row = {k: getattr(r, k) for k in DATA_DICTIONARY
                   if k not in ("birth_dates", "contact_dates", "viral_loads", "satisfaction_responses")}
            rows.append(row)
            vls += [(r.participant_id, d, c) for d, c in r.viral_loads]
            cons += [(r.participant_id, d) for d in r.contact_dates]
            births += [(r.participant_id, d) for d in r.birth_dates]
            sats += [(r.participant_id, q, s) for q, s in r.satisfaction_responses]
        parts = _normalize_participants(pd.DataFrame(rows, columns=[
            k for k in DATA_DICTIONARY
            if k not in ("birth_dates", "contact_dates", "viral_loads", "satisfaction_responses")]))
        if not isinstance(clinics, pd.DataFrame):
            clinics = pd.DataFrame([c.__dict__ for c in clinics], columns=list(CLINIC_DICTIONARY))
        return cls(parts, _normalize_clinics(clinics),
                   _long(vls, _VL_COLS), _long(cons, _DATE_LONG), _long(births, _DATE_LONG),
                   _long(sats, _SAT_COLS))

    def record(self, participant_id: str) -> ParticipantRecord:
        return next(r for r in self.records([participant_id]))

    def records(self, ids: Sequence[str] | None = None) -> list[ParticipantRecord]:
        p = self.participants if ids is None else self.participants[
            self.participants.participant_id.isin(list(ids))]
        vl = _group_lists(self.viral_loads, lambda g: tuple(
            (d.date(), float(c)) for d, c in zip(g["date"], g["copies"])))
        co = _group_lists(self.contacts, lambda g: tuple(d.date() for d in g["date"]))
        bi = _group_lists(self.births, lambda g: tuple(d.date() for d in g["date"]))
        sa = _group_lists(self.satisfaction, lambda g: tuple(
            (str(q), int(s)) for q, s in zip(g["question_id"], g["score"])))
        out = []
        for row in p.to_dict("records"):
            kw = {}
            for k, v in row.items():
                if k not in DATA_DICTIONARY:
                    continue
                if k in DATE_COLUMNS:
                    v = None if pd.isna(v) else pd.Timestamp(v).date()
                elif k == "baseline_suppressed":
                    v = None if pd.isna(v) else bool(v)
                elif k in ("age", "n_children"):
                    v = None if pd.isna(v) else int(v)
                elif isinstance(v, float) and np.isnan(v):
                    v = None
                kw[k] = v
            pid = row["participant_id"]
            kw["viral_loads"] = vl.get(pid, ())
            kw["contact_dates"] = co.get(pid, ())
            kw["birth_dates"] = bi.get(pid, ())
            kw["satisfaction_responses"] = sa.get(pid, ())
            out.append(ParticipantRecord(**kw))
        return out

    def subset(self, mask) -> "Trial":
        """Trial restricted to participants where ``mask`` is true."""
        p = self.participants[np.asarray(mask, dtype=bool)].reset_index(drop=True)
        ids = set(p.participant_id)
        keep = lambda t: t[t.participant_id.isin(ids)].reset_index(drop=True)  # noqa: E731
        return Trial(p, self.clinics, keep(self.viral_loads), keep(self.contacts),
                     keep(self.births), keep(self.satisfaction), self.rejected)


def _group_lists(frame, fn):
    if frame.empty:
        return {}
    frame = frame.sort_values([c for c in frame.columns if c != "copies" and c != "score"], kind="mergesort")
    return {k: fn(g) for k, g in frame.groupby("participant_id", sort=False)}


def _long(rows, cols):
    if not rows:
        return _empty_long(cols)
    df = pd.DataFrame(rows, columns=list(cols))
    if "date" in df:
        df["date"] = pd.to_datetime(df["date"])
    return df.astype({k: v for k, v in cols.items() if k != "date"})


def _normalize_participants(p: pd.DataFrame) -> pd.DataFrame:
    p = p.copy()
    for c in DATE_COLUMNS:
        if c not in p:
            p[c] = pd.NaT
        p[c] = pd.to_datetime(p[c])
    for c in ("participant_id", "clinic_id"):
        p[c] = p[c].astype(str)
    if "baseline_suppressed" not in p:
        p["baseline_suppressed"] = np.nan
    p["baseline_suppressed"] = pd.to_numeric(p["baseline_suppressed"].map(
        lambda v: np.nan if v is None or (isinstance(v, float) and np.isnan(v)) else float(v)))
    for c in DATA_DICTIONARY:
        if c not in p and DATA_DICTIONARY[c][0] not in ("dates", "vls", "scores"):
            p[c] = None
    p["age"] = pd.to_numeric(p["age"])
    p["n_children"] = pd.to_numeric(p["n_children"])
    return p.reset_index(drop=True)


def _normalize_clinics(c: pd.DataFrame) -> pd.DataFrame:
    c = c.copy()
    c["clinic_id"] = c["clinic_id"].astype(str)
    c["stratum_id"] = c["stratum_id"].astype(str)
    c["arm"] = c["arm"].astype(int)
    c["n_youth_in_care_baseline"] = pd.to_numeric(c["n_youth_in_care_baseline"])
    c["baseline_suppression_proportion"] = c["baseline_suppression_proportion"].astype(float)
    return c.sort_values("clinic_id", kind="mergesort").reset_index(drop=True)


def validate_clinics(clinics: pd.DataFrame) -> list[str]:
    """Hard-invariant problems in a clinics table (empty list when valid)."""
    problems = []
    if clinics.clinic_id.duplicated().any():
        problems.append(f"duplicate clinic_id: {sorted(clinics.clinic_id[clinics.clinic_id.duplicated()])}")
    if not clinics.arm.isin([0, 1]).all():
        problems.append("arm must be 0 or 1")
    bsp = clinics.baseline_suppression_proportion
    if ((bsp < 0) | (bsp > 1)).any():
        problems.append("baseline_suppression_proportion outside [0, 1]")
    for s, g in clinics.groupby("stratum_id"):
        if (g.arm == 1).sum() != (g.arm == 0).sum():
            problems.append(f"stratum {s} has unequal arm counts")
    return problems


# --------------------------------------------------------------------------
# ingestion


def _parse_date(text, where):
    try:
        return date.fromisoformat(text.strip())
    except ValueError:
        raise DataError(f"unparseable date {text!r} at {where}") from None


def _split(text):
    return [t for t in (text or "").split(";") if t.strip()]


def load_participants(path, schema: dict = DATA_DICTIONARY) -> Trial:
    """Read a participants file into a :class:`Trial` without clinics.

    Schema problems (missing required column, unparseable date, duplicate
    id) raise :class:`DataError`.  Rows violating record invariants are
    dropped and reported in ``trial.rejected`` as ``(row, id, reason)``.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c, (_, req, _) in schema.items() if req and c not in header]
        if missing:
            raise DataError(f"missing required column(s): {', '.join(missing)}")
        raw = list(reader)
    seen: dict[str, int] = {}
    rows, vls, cons, births, sats, rejected = [], [], [], [], [], []
    for i, r in enumerate(raw, start=2):
        pid = (r.get("participant_id") or "").strip()
        if pid in seen:
            raise DataError(f"duplicate participant_id {pid!r} (rows {seen[pid]} and {i})")
        seen[pid] = i
        where = f"row {i} ({pid})"
        row = {}
        for c, (kind, req, _) in schema.items():
            v = (r.get(c) or "").strip()
            if kind == "date":
                row[c] = _parse_date(v, f"{where}, column {c}") if v else None
            elif kind in ("int", "float"):
                row[c] = float(v) if v else None
            elif kind == "bool":
                row[c] = None if v == "" else float(v in ("1", "true", "True", "yes"))
            elif kind == "str" or kind == "cat":
                row[c] = v or None
        rvl = [(pid, _parse_date(t.split(":")[0], f"{where}, viral_loads"), float(t.split(":")[1]))
               for t in _split(r.get("viral_loads"))]
        rco = [(pid, _parse_date(t, f"{where}, contact_dates")) for t in _split(r.get("contact_dates"))]
        rbi = [(pid, _parse_date(t, f"{where}, birth_dates")) for t in _split(r.get("birth_dates"))]
        rsa = [(pid, t.split(":")[0], int(t.split(":")[1])) for t in _split(r.get("satisfaction_responses"))]
        reason = _record_problem(row, rvl, rco)
        if reason:
            rejected.append((i, pid, reason))
            continue
        rows.append(row)
        vls += rvl
        cons += rco
        births += rbi
        sats += rsa
    cols = [c for c, (k, _, _) in schema.items() if k not in ("dates", "vls", "scores")]
    parts = _normalize_participants(pd.DataFrame(rows, columns=cols))
    for c in rejected:
        log.warning("rejected row %d (%s): %s", *c)
    return Trial(parts, _empty_clinics(), _long(vls, _VL_COLS), _long(cons, _DATE_LONG),
                 _long(births, _DATE_LONG), _long(sats, _SAT_COLS), tuple(rejected))


def _empty_clinics():
    return pd.DataFrame({c: pd.Series(dtype=object) for c in CLINIC_DICTIONARY})


def _record_problem(row, vls, contacts) -> str | None:
    enr = row["enrollment_date"]
    if enr is None:
        return "missing enrollment_date"
    for c in EVENT_DATES:
        if row.get(c) is not None and row[c] < enr:
            return f"{c} precedes enrollment_date"
    if any(d < enr for _, d, _ in vls):
        return "viral load dated before enrollment"
    if any(c < 0 for _, _, c in vls):
        return "negative viral load copies"
    if any(d < enr for _, d in contacts):
        return "contact dated before enrollment"
    if row.get("art_start_date") is not None and row["art_start_date"] > enr:
        return "art_start_date after enrollment"
    if row.get("art_start_date") is not None and row.get("baseline_care_status"):
        expected = classify_care_status(row["art_start_date"], row.get("last_visit_date"), enr)
        if expected != row["baseline_care_status"]:
            return f"baseline_care_status {row['baseline_care_status']} inconsistent with dates ({expected})"
    return None


def load_clinics(path) -> pd.DataFrame:
    path = Path(path)
    df = pd.read_csv(path, dtype={"clinic_id": str, "stratum_id": str})
    missing = [c for c, (_, req, _) in CLINIC_DICTIONARY.items() if req and c not in df]
    if missing:
        raise DataError(f"missing required clinic column(s): {', '.join(missing)}")
    df = _normalize_clinics(df)
    problems = validate_clinics(df)
    if problems:
        raise DataError("invalid clinics file", problems)
    return df


def load_trial(directory) -> Trial:
    """Load ``participants.csv`` and ``clinics.csv`` from ``directory``."""
    d = Path(directory)
    missing = [n for n in ("participants.csv", "clinics.csv") if not (d / n).is_file()]
    if missing:
        raise DataError(f"{d}: missing {', '.join(missing)}")
    t = load_participants(d / "participants.csv")
    clinics = load_clinics(d / "clinics.csv")
    return replace(t, clinics=clinics)


def _fmt_date(v):
    return "" if v is None or pd.isna(v) else pd.Timestamp(v).date().isoformat()


def _fmt_num(v):
    if v is None or pd.isna(v):
        return ""
    v = float(v)
    return str(int(v)) if v.is_integer() else repr(v)


def write_trial(trial: Trial, directory) -> None:
    """Write ``participants.csv`` and ``clinics.csv`` (deterministic bytes)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    joins = {
        "viral_loads": _joined(trial.viral_loads, lambda r: f"{_fmt_date(r[1])}:{_fmt_num(r[2])}"),
        "contact_dates": _joined(trial.contacts, lambda r: _fmt_date(r[1])),
        "birth_dates": _joined(trial.births, lambda r: _fmt_date(r[1])),
        "satisfaction_responses": _joined(trial.satisfaction, lambda r: f"{r[1]}:{int(r[2])}"),
    }
    p = trial.participants.sort_values("participant_id", kind="mergesort")
    with (d / "participants.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(DATA_DICTIONARY))
        for row in p.itertuples(index=False):
            row = row._asdict()
            out = []
            for c, (kind, _, _) in DATA_DICTIONARY.items():
                if c in joins:
                    out.append(joins[c].get(row["participant_id"], ""))
                elif kind == "date":
                    out.append(_fmt_date(row[c]))
                elif kind in ("int", "float", "bool"):
                    out.append(_fmt_num(row[c]))
                else:
                    out.append("" if row[c] is None or (isinstance(row[c], float) and np.isnan(row[c]))
                               else str(row[c]))
            w.writerow(out)
    c = trial.clinics.sort_values("clinic_id", kind="mergesort")
    with (d / "clinics.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(CLINIC_DICTIONARY))
        for row in c[list(CLINIC_DICTIONARY)].itertuples(index=False):
            w.writerow([_fmt_num(v) if isinstance(v, (int, float, np.integer, np.floating)) else str(v)
                        for v in row])


def _joined(frame, fmt):
    if frame.empty:
        return {}
    frame = frame.sort_values(list(frame.columns[:2]), kind="mergesort")
    out: dict[str, list[str]] = {}
    for r in frame.itertuples(index=False):
        out.setdefault(r[0], []).append(fmt(r))
    return {k: ";".join(v) for k, v in out.items()}


# --------------------------------------------------------------------------
# windows and classification


def days(values) -> np.ndarray:
    """Days since 1970-01-01 as float, NaN where missing."""
    arr = values if isinstance(values, pd.Series) else pd.Series(values)
    if not pd.api.types.is_datetime64_any_dtype(arr.dtype):
        arr = pd.to_datetime(arr, cache=False)
    raw = arr.to_numpy(dtype="datetime64[ns]")
    out = (raw.astype("datetime64[D]") - _EPOCH).astype(float)
    out[np.isnat(raw)] = np.nan
    return out


def _day(d: date | None) -> float:
    return np.nan if d is None else float((np.datetime64(d, "D") - _EPOCH).astype(int))


def _date(day: float) -> date | None:
    return None if np.isnan(day) else date(1970, 1, 1) + timedelta(days=int(day))


def window_days(enroll_day, closure_day):
    """Vectorized two-year mark, window start and end (in days)."""
    mark = np.asarray(enroll_day, dtype=float) + TWO_YEAR_DAYS
    return mark, mark - WINDOW_BEFORE, np.minimum(mark + WINDOW_AFTER, closure_day)


def endpoint_window(enrollment_date: date, closure: date = DATABASE_CLOSURE) -> EndpointWindow:
    """Endpoint window: 90 days before to 180 days after enrollment + 730 days,
    capped at database closure."""
    if enrollment_date >= closure:
        raise UnevaluableError(f"enrollment {enrollment_date} is not before closure {closure}")
    mark = enrollment_date + timedelta(days=TWO_YEAR_DAYS)
    start = mark - timedelta(days=WINDOW_BEFORE)
    end = min(mark + timedelta(days=WINDOW_AFTER), closure)
    if start >= end:
        raise UnevaluableError(f"empty endpoint window [{start}, {end}]: participant unevaluable")
    return EndpointWindow(mark, start, end, closure)


def classify_care_status(art_start_date: date, last_visit_date: date | None,
                         enrollment_date: date) -> str:
    if (enrollment_date - art_start_date).days <= SIX_MONTHS:
        return "recently_engaged"
    if last_visit_date is not None and 0 <= (enrollment_date - last_visit_date).days <= SIX_MONTHS:
        return "engaged"
    return "re_engaging"


def select_endpoint_vl(owner, vl_day, vl_copies, n, mark, start, end):
    """Per participant, the in-window viral load closest to the 2-year mark.

    ``owner`` maps each viral load row to a participant index.  Ties in
    distance go to the earlier date.  Returns ``(day, copies)`` arrays with
    NaN where there is no in-window measurement.
    """
    sel_day = np.full(n, np.nan)
    sel_cp = np.full(n, np.nan)
    if len(owner) == 0:
        return sel_day, sel_cp
    owner = np.asarray(owner)
    inw = (vl_day >= start[owner]) & (vl_day <= end[owner])
    o, d, c = owner[inw], vl_day[inw], vl_copies[inw]
    if o.size == 0:
        return sel_day, sel_cp
    order = np.lexsort((d, np.abs(d - mark[o]), o))
    o, d, c = o[order], d[order], c[order]
    first = np.ones(o.size, dtype=bool)
    first[1:] = o[1:] != o[:-1]
    sel_day[o[first]] = d[first]
    sel_cp[o[first]] = c[first]
    return sel_day, sel_cp


def classify_arrays(enroll, start, end, mark, withdrawn, death, outmig, transfer, vl_day, vl_copies,
                    spec: PopulationSpec):
    """Status label per participant from day-number arrays."""
    n = enroll.size
    cutoff = _day(spec.enrollment_cutoff) if spec.enrollment_cutoff else np.inf
    late = (enroll >= cutoff) | ~(start < end)
    outm = outmig <= end
    trans = transfer <= end
    has_vl = ~np.isnan(vl_day)
    died = ~np.isnan(death) & ((~has_vl & (death <= end)) | (has_vl & (death <= vl_day)))
    status = np.full(n, "MissingVL", dtype=object)
    status[has_vl & (vl_copies >= spec.vl_threshold)] = "Unsuppressed"
    status[has_vl & (vl_copies < spec.vl_threshold)] = "Suppressed"
    status[died] = "Died"
    if spec.transfer_handling == "exclude":
        status[trans] = "ExcludedTransferred"
    if spec.excludes_outmigrated:
        status[outm] = "ExcludedOutmigrated"
    status[late] = "ExcludedLateEnrollment"
    status[withdrawn] = "ExcludedWithdrawn"
    return status, outm, trans


def outcome_arrays(status, transferred, spec: PopulationSpec):
    """Outcome ``y`` and observation indicator ``delta`` for included rows.

    Rows dropped by ``missing_handling='exclude'`` get ``delta = -1``.
    """
    y = (status == "Suppressed").astype(float)
    delta = np.ones(status.size)
    if spec.death_handling == "censor":
        delta[status == "Died"] = 0.0
    if spec.missing_handling == "adjust":
        delta[status == "MissingVL"] = 0.0
    elif spec.missing_handling == "exclude":
        delta[status == "MissingVL"] = -1.0
    if spec.transfer_handling == "success":
        y[transferred] = 1.0
        delta[transferred] = 1.0
    elif spec.transfer_handling == "censor":
        delta[transferred] = 0.0
    y[delta == 0] = np.nan
    return y, delta


def _owner_index(long_frame, ids):
    pos = pd.Index(ids).get_indexer(long_frame.participant_id)
    ok = pos >= 0
    return pos[ok], ok


def classify_frame(trial: Trial, spec: PopulationSpec) -> pd.DataFrame:
    """Windows, endpoint viral load and status for every participant."""
    p = trial.participants
    n = len(p)
    closure = _day(spec.database_closure)
    enroll = days(p.enrollment_date)
    mark, start, end = window_days(enroll, closure)
    owner, ok = _owner_index(trial.viral_loads, p.participant_id)
    vld = days(trial.viral_loads["date"])[ok]
    vlc = trial.viral_loads["copies"].to_numpy(dtype=float)[ok]
    sel_day, sel_cp = select_endpoint_vl(owner, vld, vlc, n, mark, start, end)
    withdrawn = p.withdrawal_date.notna().to_numpy()
    death = days(p.death_date)
    status, outm, trans = classify_arrays(enroll, start, end, mark, withdrawn, death,
                                          days(p.outmigration_date), days(p.transfer_date),
                                          sel_day, sel_cp, spec)
    y, delta = outcome_arrays(status, trans, spec)
    return pd.DataFrame({
        "participant_id": p.participant_id.to_numpy(),
        "enroll_day": enroll, "mark_day": mark, "start_day": start, "end_day": end,
        "vl_day": sel_day, "vl_copies": sel_cp, "status": status,
        "outmigrated": outm, "transferred": trans, "y": y, "delta": delta,
    })


def classify_endpoint(record: ParticipantRecord, spec: PopulationSpec,
                      window: EndpointWindow) -> EndpointClassification:
    """Primary-endpoint status of one participant."""
    enroll = np.array([_day(record.enrollment_date)])
    start, end, mark = (np.array([_day(window.start)]), np.array([_day(window.end)]),
                        np.array([_day(window.two_year_mark)]))
    vl_day = np.array([_day(d) for d, _ in record.viral_loads], dtype=float)
    vl_cp = np.array([c for _, c in record.viral_loads], dtype=float)
    sd, sc = select_endpoint_vl(np.zeros(vl_day.size, dtype=int), vl_day, vl_cp, 1, mark, start, end)
    status, _, _ = classify_arrays(
        enroll, start, end, mark, np.array([record.withdrawal_date is not None]),
        np.array([_day(record.death_date)]), np.array([_day(record.outmigration_date)]),
        np.array([_day(record.transfer_date)]), sd, sc, spec)
    vl = None if np.isnan(sd[0]) else (_date(sd[0]), float(sc[0]))
    return EndpointClassification(str(status[0]), vl)


# --------------------------------------------------------------------------
# engagement


def engagement_arrays(owner, contact_day, enroll, start):
    """Engagement at two years, retention and lapse time per participant.

    Enrollment counts as a contact; contacts outside ``[enroll, start)`` are
    ignored.  A gap is the distance between consecutive contacts, and the
    trailing gap runs from the last contact to ``start``.  ``lapse`` is the
    number of days from enrollment to the end of the first gap exceeding 120
    days (NaN when none).
    """
    n = enroll.size
    idx = np.concatenate([np.arange(n), np.asarray(owner, dtype=int)])
    day = np.concatenate([enroll, np.asarray(contact_day, dtype=float)])
    keep = (day >= enroll[idx]) & (day < start[idx])
    idx, day = idx[keep], day[keep]
    order = np.lexsort((day, idx))
    idx, day = idx[order], day[order]
    engaged = np.zeros(n, dtype=bool)
    recent = day >= start[idx] - SIX_MONTHS
    engaged[idx[recent]] = True
    # append each participant's window start as a terminal point
    t_idx = np.concatenate([idx, np.arange(n)])
    t_day = np.concatenate([day, start])
    order = np.lexsort((np.concatenate([np.zeros(idx.size), np.ones(n)]), t_day, t_idx))
    t_idx, t_day = t_idx[order], t_day[order]
    same = np.zeros(t_idx.size, dtype=bool)
    same[1:] = t_idx[1:] == t_idx[:-1]
    gap = np.full(t_idx.size, 0.0)
    gap[1:] = t_day[1:] - t_day[:-1]
    long_gap = same & (gap > RETENTION_GAP)
    lapse = np.full(n, np.nan)
    hit_idx = t_idx[long_gap]
    hit_day = t_day[long_gap]
    if hit_idx.size:
        first = np.ones(hit_idx.size, dtype=bool)
        first[1:] = hit_idx[1:] != hit_idx[:-1]
        lapse[hit_idx[first]] = hit_day[first] - enroll[hit_idx[first]]
    retained = np.isnan(lapse)
    return engaged, retained, lapse


def engagement_indicators(record: ParticipantRecord, window: EndpointWindow) -> dict:
    enroll = np.array([_day(record.enrollment_date)])
    start = np.array([_day(window.start)])
    cd = np.array([_day(d) for d in record.contact_dates], dtype=float)
    e, r, lapse = engagement_arrays(np.zeros(cd.size, dtype=int), cd, enroll, start)
    return {"engaged_2y": bool(e[0]), "retained": bool(r[0]),
            "lapse_time": None if np.isnan(lapse[0]) else int(lapse[0])}


def engagement_frame(trial: Trial, classified: pd.DataFrame) -> pd.DataFrame:
    owner, ok = _owner_index(trial.contacts, trial.participants.participant_id)
    cd = days(trial.contacts["date"])[ok]
    e, r, lapse = engagement_arrays(owner, cd, classified.enroll_day.to_numpy(),
                                    classified.start_day.to_numpy())
    return pd.DataFrame({"participant_id": classified.participant_id.to_numpy(),
                         "engaged_2y": e, "retained": r, "lapse_day": lapse})


# --------------------------------------------------------------------------
# analysis populations


@dataclass(frozen=True)
class AnalysisSet:
    """Included participants joined to their clinic, with classifications."""

    frame: pd.DataFrame
    exclusions: dict
    spec: PopulationSpec
    classified: pd.DataFrame

    def __len__(self):
        return len(self.frame)


_POP_CACHE: dict = {}


def select_population(trial: Trial, spec: PopulationSpec) -> AnalysisSet:
    """Participants passing ``spec``'s filters, tagged with status and arm.

    ``exclusions`` counts removed participants by reason.  Every
    participant's clinic must exist in ``trial.clinics``.  Results are
    cached per (trial object, spec); callers get fresh frame copies.
    """
    hit = _POP_CACHE.get((id(trial), spec))
    if hit is None or hit[0] is not trial:
        if len(_POP_CACHE) >= 64:
            _POP_CACHE.clear()
        hit = (trial, _select_population(trial, spec))
        _POP_CACHE[(id(trial), spec)] = hit
    a = hit[1]
    return AnalysisSet(a.frame.copy(), dict(a.exclusions), a.spec, a.classified.copy())


def _select_population(trial: Trial, spec: PopulationSpec) -> AnalysisSet:
    p = trial.participants
    known = set(trial.clinics.clinic_id)
    orphans = sorted(set(p.clinic_id) - known)
    if orphans:
        raise DataError(f"participants reference unknown clinic(s): {', '.join(orphans)}")
    cl = classify_frame(trial, spec)
    eng = engagement_frame(trial, cl)
    full = pd.concat([p.reset_index(drop=True), cl.drop(columns="participant_id"),
                      eng.drop(columns="participant_id")], axis=1)
    arm = trial.clinics.set_index("clinic_id")
    full["arm"] = arm.arm.reindex(full.clinic_id).to_numpy()
    for c in ("n_youth_in_care_baseline", "baseline_suppression_proportion"):
        full[c] = arm[c].reindex(full.clinic_id).to_numpy()
    excluded = full.status.str.startswith("Excluded").to_numpy()
    dropped_missing = (full.delta == -1).to_numpy()
    exclusions = {s: int((full.status == s).sum()) for s in STATUSES if s.startswith("Excluded")}
    exclusions["MissingExcluded"] = int((dropped_missing & ~excluded).sum())
    frame = full[~excluded & ~dropped_missing].reset_index(drop=True)
    return AnalysisSet(frame, exclusions, spec, full)


# --------------------------------------------------------------------------
# descriptive tables


def _groups(frame, grouping):
    if grouping == "overall":
        yield "overall", "all", frame
    elif grouping == "country_arm":
        for (c, a), g in frame.groupby(["country", "arm"], sort=True):
            yield "country_arm", f"{c}:{a}", g
    else:
        col = {"arm": "arm", "country": "country", "clinic": "clinic_id"}[grouping]
        for k, g in frame.groupby(col, sort=True):
            yield grouping, str(k), g


def ascertainment_table(classified: pd.DataFrame) -> pd.DataFrame:
    """Participant-flow categories overall and by arm.

    ``classified`` is :attr:`AnalysisSet.classified` (or any frame with
    ``status``, ``outmigrated``, ``transferred``, ``vl_day``, ``arm``);
    withdrawn and late-enrolled participants are left out.  Categories are
    mutually exclusive, assigned in the order Outmigrated, Transferred,
    Measured, Died, Missing.
    """
    f = classified[~classified.status.isin(["ExcludedWithdrawn", "ExcludedLateEnrollment"])]
    cat = np.full(len(f), "Missing", dtype=object)
    cat[(f.status == "Died").to_numpy()] = "Died"
    cat[f.status.isin(["Suppressed", "Unsuppressed"]).to_numpy()] = "Measured"
    cat[f.transferred.to_numpy(dtype=bool)] = "Transferred"
    cat[f.outmigrated.to_numpy(dtype=bool)] = "Outmigrated"
    f = f.assign(category=cat)
    rows = []
    for gname, gval, g in list(_groups(f, "overall")) + list(_groups(f, "arm")):
        n = len(g)
        for c in ASCERTAINMENT:
            k = int((g.category == c).sum())
            rows.append({"grouping": gname, "group": gval, "category": c, "n": k,
                         "proportion": k / n if n else float("nan")})
    return pd.DataFrame(rows, columns=["grouping", "group", "category", "n", "proportion"])


def outcome_counts_table(analysis: AnalysisSet) -> pd.DataFrame:
    """Arm-specific counts of suppressed / unsuppressed / died / missing."""
    f = analysis.frame
    labels = {"Suppressed": "suppressed", "Unsuppressed": "unsuppressed", "Died": "died",
              "MissingVL": "missing"}
    rows = []
    for gname, gval, g in list(_groups(f, "overall")) + list(_groups(f, "arm")):
        n = len(g)
        for s, lab in labels.items():
            k = int((g.status == s).sum())
            rows.append({"population": analysis.spec.population, "grouping": gname, "group": gval,
                         "outcome": lab, "n": k, "proportion": k / n if n else float("nan")})
    return pd.DataFrame(rows)


def baseline_table(frame: pd.DataFrame, grouping: str = "overall",
                   variables: Sequence[str] = BASELINE_VARIABLES) -> pd.DataFrame:
    """Medians and IQR for numeric variables, counts and percentages otherwise."""
    rows = []
    for gname, gval, g in _groups(frame, grouping):
        for v in variables:
            s = g[v]
            if v in NUMERIC_BASELINE:
                x = s.dropna().to_numpy(dtype=float)
                q = np.quantile(x, [0.25, 0.5, 0.75]) if x.size else [np.nan] * 3
                rows.append({"grouping": gname, "group": gval, "variable": v, "level": "",
                             "n": int(x.size), "percent": np.nan,
                             "median": q[1], "q1": q[0], "q3": q[2]})
            else:
                lab = s.map(lambda z: "missing" if z is None or (isinstance(z, float) and np.isnan(z))
                            else (str(int(z)) if isinstance(z, (float, np.floating)) else str(z)))
                total = len(lab)
                for lev in sorted(lab.unique()):
                    k = int((lab == lev).sum())
                    rows.append({"grouping": gname, "group": gval, "variable": v, "level": lev,
                                 "n": k, "percent": 100.0 * k / total, "median": np.nan,
                                 "q1": np.nan, "q3": np.nan})
    return pd.DataFrame(rows, columns=["grouping", "group", "variable", "level", "n", "percent",
                                       "median", "q1", "q3"])
