from datetime import date, timedelta

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, strategies as st

from clustertmle.trial_data import (DataError, ParticipantRecord, PopulationSpec, Trial,
                                    UnevaluableError, classify_care_status, classify_endpoint,
                                    days, endpoint_window, engagement_indicators, load_trial,
                                    select_population, write_trial)

import golden

PRIMARY_400 = PopulationSpec.primary()
PRIMARY_50 = PopulationSpec.primary(vl_threshold=50)
SECONDARY = PopulationSpec.secondary()


def _bulk_status(spec):
    trial = Trial.from_records(golden.RECORDS, golden.CLINICS)
    c = select_population(trial, spec).classified
    return dict(zip(c.participant_id, c.status))


@pytest.mark.parametrize("col,spec", [(0, PRIMARY_400), (1, PRIMARY_50), (2, SECONDARY)])
def test_golden_bulk_labels(col, spec):
    got = _bulk_status(spec)
    bad = {pid: (got[pid], exp[col]) for pid, exp in golden.EXPECTED.items() if got[pid] != exp[col]}
    assert not bad


@pytest.mark.parametrize("rec", golden.RECORDS, ids=lambda r: r.participant_id)
def test_golden_record_labels(rec):
    exp = golden.EXPECTED[rec.participant_id]
    for col, spec in enumerate((PRIMARY_400, PRIMARY_50, SECONDARY)):
        try:
            w = endpoint_window(rec.enrollment_date, spec.database_closure)
        except UnevaluableError:
            assert exp[col] == "ExcludedLateEnrollment"
            continue
        assert classify_endpoint(rec, spec, w).status == exp[col]


@pytest.mark.parametrize("pid", sorted(golden.ENGAGEMENT))
def test_golden_engagement(pid):
    rec = next(r for r in golden.RECORDS if r.participant_id == pid)
    got = engagement_indicators(rec, endpoint_window(rec.enrollment_date))
    assert (got["engaged_2y"], got["retained"], got["lapse_time"]) == golden.ENGAGEMENT[pid]


def test_golden_engagement_bulk_matches_record_path():
    trial = Trial.from_records(golden.RECORDS, golden.CLINICS)
    c = select_population(trial, SECONDARY).classified.set_index("participant_id")
    for pid, (eng, ret, lapse) in golden.ENGAGEMENT.items():
        assert bool(c.loc[pid, "engaged_2y"]) == eng
        assert bool(c.loc[pid, "retained"]) == ret
        assert (np.isnan(c.loc[pid, "lapse_day"]) if lapse is None else c.loc[pid, "lapse_day"] == lapse)


def test_window_is_capped_at_closure():
    w = endpoint_window(date(2019, 12, 15))
    assert w.two_year_mark == date(2021, 12, 14)
    assert w.start == date(2021, 9, 15)
    assert w.end == date(2022, 3, 1)


def test_window_uncapped():
    w = endpoint_window(golden.E)
    assert (w.two_year_mark, w.start, w.end) == (golden.MARK, date(2021, 3, 2), date(2021, 11, 27))


def test_unevaluable_window():
    with pytest.raises(UnevaluableError):
        endpoint_window(date(2021, 6, 1))
    with pytest.raises(UnevaluableError):
        endpoint_window(date(2022, 3, 1))


def test_selected_vl_reported():
    rec = next(r for r in golden.RECORDS if r.participant_id == "g10")
    out = classify_endpoint(rec, PRIMARY_400, endpoint_window(rec.enrollment_date))
    assert out.endpoint_vl == (date(2021, 6, 20), 100.0)


@pytest.mark.parametrize("art_gap,visit_gap,expected", [
    (183, None, "recently_engaged"),
    (184, 183, "engaged"),
    (184, 184, "re_engaging"),
    (400, None, "re_engaging"),
    (400, 0, "engaged"),
])
def test_care_status(art_gap, visit_gap, expected):
    e = date(2020, 1, 1)
    last = None if visit_gap is None else e - timedelta(days=visit_gap)
    assert classify_care_status(e - timedelta(days=art_gap), last, e) == expected


def test_days_handles_missing_and_strings():
    out = days(pd.Series(["1970-01-02", None, "1970-01-01"]))
    assert out[0] == 1 and np.isnan(out[1]) and out[2] == 0


def test_exclusion_counts(small_trial):
    a = select_population(small_trial, PRIMARY_400)
    n_excl = sum(v for k, v in a.exclusions.items() if k.startswith("Excluded"))
    assert n_excl + len(a) == len(small_trial.participants)
    assert not a.frame.status.str.startswith("Excluded").any()


def test_select_population_returns_copies(small_trial):
    a = select_population(small_trial, PRIMARY_400)
    a.frame.loc[:, "y"] = -1.0
    b = select_population(small_trial, PRIMARY_400)
    assert (b.frame.y != -1.0).all() or b.frame.y.isna().all()


def test_unknown_clinic_rejected():
    rec = ParticipantRecord("x1", "NOPE", date(2019, 6, 1), 20, "male", "Kenya")
    with pytest.raises(DataError):
        select_population(Trial.from_records([rec], golden.CLINICS), PRIMARY_400)


def test_missing_handling_modes(small_trial):
    base = select_population(small_trial, PRIMARY_400).frame
    adj = select_population(small_trial, PRIMARY_400.with_(missing_handling="adjust")).frame
    exc = select_population(small_trial, PRIMARY_400.with_(missing_handling="exclude"))
    miss = (base.status == "MissingVL")
    assert miss.any()
    assert (base.y[miss] == 0).all()
    assert adj.delta[adj.status == "MissingVL"].eq(0).all()
    assert len(exc) == len(base) - miss.sum()
    assert exc.exclusions["MissingExcluded"] == miss.sum()


def test_death_censoring():
    f = select_population(Trial.from_records(golden.RECORDS, golden.CLINICS),
                          PRIMARY_400.with_(death_handling="censor")).frame
    assert f.delta[f.status == "Died"].eq(0).all()
    assert f.y[f.status == "Died"].isna().all()


def test_transfer_success():
    f = select_population(Trial.from_records(golden.RECORDS, golden.CLINICS),
                          SECONDARY.with_(transfer_handling="success")).frame.set_index("participant_id")
    assert f.loc["g18", "y"] == 1.0


def test_primary_requires_transfer_exclusion():
    with pytest.raises(ValueError):
        PopulationSpec.primary(transfer_handling="include")


def test_round_trip(tmp_path, small_trial):
    write_trial(small_trial, tmp_path)
    back = load_trial(tmp_path)
    cols = ["participant_id", "clinic_id", "enroll_day", "vl_day", "vl_copies", "status", "y",
            "delta", "engaged_2y", "retained", "lapse_day", "arm"]
    a = select_population(small_trial, PRIMARY_400).classified[cols]
    b = select_population(back, PRIMARY_400).classified[cols]
    pd.testing.assert_frame_equal(a, b)


def test_load_missing_directory(tmp_path):
    with pytest.raises(DataError):
        load_trial(tmp_path / "nothing")


def _append_row(tmp_path, trial, **changes):
    write_trial(trial, tmp_path)
    p = tmp_path / "participants.csv"
    lines = p.read_text().splitlines()
    header = lines[0].split(",")
    row = lines[1].split(",")
    for k, v in changes.items():
        row[header.index(k)] = v
    p.write_text("\n".join(lines + [",".join(row)]) + "\n")


def test_load_unparseable_date_is_schema_error(tmp_path, small_trial):
    _append_row(tmp_path, small_trial, participant_id="broken", enrollment_date="not-a-date")
    with pytest.raises(DataError, match="broken"):
        load_trial(tmp_path)


def test_load_duplicate_id_is_schema_error(tmp_path, small_trial):
    _append_row(tmp_path, small_trial)
    with pytest.raises(DataError, match="duplicate"):
        load_trial(tmp_path)


def test_load_rejects_invariant_violations(tmp_path, small_trial):
    _append_row(tmp_path, small_trial, participant_id="early", death_date="2000-01-01")
    t = load_trial(tmp_path)
    assert len(t.participants) == len(small_trial.participants)
    assert [r[1] for r in t.rejected] == ["early"]
    assert "death_date precedes" in t.rejected[0][2]


offsets = st.integers(min_value=-200, max_value=400)


@given(st.lists(st.tuples(offsets, st.floats(0, 1e5)), min_size=0, max_size=6),
       st.integers(0, 700))
def test_classification_invariants(vls, enroll_shift):
    e = date(2019, 1, 1) + timedelta(days=enroll_shift)
    mark = e + timedelta(days=730)
    rec = ParticipantRecord("h", "K1", e, 20, "female", "Kenya",
                            viral_loads=tuple((mark + timedelta(days=o), c) for o, c in vls))
    try:
        w = endpoint_window(e)
    except UnevaluableError:
        return
    out = classify_endpoint(rec, SECONDARY, w)
    inwin = [(mark + timedelta(days=o), c) for o, c in vls
             if w.start <= mark + timedelta(days=o) <= w.end]
    if not inwin:
        assert out.status == "MissingVL" and out.endpoint_vl is None
        return
    best = min(inwin, key=lambda v: (abs((v[0] - mark).days), v[0]))
    assert out.endpoint_vl[0] == best[0]
    assert out.status == ("Suppressed" if out.endpoint_vl[1] < 400 else "Unsuppressed")
