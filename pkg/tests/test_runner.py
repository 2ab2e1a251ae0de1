from datetime import date, timedelta

import numpy as np
import pytest

from clustertmle.runner import (PRESETS, AnalysisPlan, EndpointSpec, PlanError, run_plan,
                                run_preset, run_satisfaction, satisfaction_scores, trial_digest)
from clustertmle.trial_data import ClinicRecord, ParticipantRecord, PopulationSpec, Trial

MARK_OFFSET = timedelta(days=730)


def _trial(n_clinics=6, per=8, sat=None, **kw):
    clinics, recs = [], []
    for j in range(n_clinics):
        arm = j % 2
        clinics.append(ClinicRecord(f"K{j}", "Kenya", arm, f"s{j // 2}", 100 + 13 * j, 0.5 + 0.04 * j))
        for i in range(per):
            e = date(2019, 6, 1) + timedelta(days=i)
            vl = ((e + MARK_OFFSET, 20.0 if (i + j) % 3 else 900.0),)
            extra = dict(kw)
            if sat is not None:
                extra["satisfaction_responses"] = sat(arm)
            recs.append(ParticipantRecord(f"p{j}_{i}", f"K{j}", e, 18 + i % 6,
                                          "female" if i % 2 else "male", "Kenya",
                                          viral_loads=vl, **extra))
    return Trial.from_records(recs, clinics)


def test_plan_validation():
    with pytest.raises(PlanError):
        EndpointSpec("nope")
    with pytest.raises(PlanError):
        EndpointSpec(threshold=200)
    with pytest.raises(PlanError):
        EndpointSpec("lapse")
    with pytest.raises(PlanError):
        AnalysisPlan("x", subgroup=("sex", "female"))
    with pytest.raises(PlanError):
        AnalysisPlan("x", estimator="single_stage", subgroup=("shoe_size", "9"))
    with pytest.raises(PlanError):
        AnalysisPlan("x", clinic_candidates=("none", "age"))
    with pytest.raises(PlanError):
        run_preset("nope", _trial())


def test_endpoint_defaults():
    assert EndpointSpec().direction == "increase" and EndpointSpec().sided == "one"
    assert EndpointSpec("mortality").direction == "decrease"
    assert EndpointSpec("lapse", horizon_months=12).direction == "decrease"
    assert EndpointSpec("dtg_switch", horizon_months=12).sided == "two"


def test_primary_plan_provenance(small_trial):
    (res,) = run_plan(AnalysisPlan("primary"), small_trial)
    assert res.estimate is not None and res.note == ""
    row = res.row()
    assert row["plan_hash"] == AnalysisPlan("primary").digest()
    assert row["data_hash"] == trial_digest(small_trial)
    assert row["n_clusters"] == len(small_trial.clinics)
    assert row["df"] == len(small_trial.clinics) - 2


def test_plan_digest_changes_with_plan():
    assert AnalysisPlan("a").digest() != AnalysisPlan("a", weights="size").digest()
    assert AnalysisPlan("a").digest() == AnalysisPlan("a").digest()


def test_mortality_without_deaths_is_inestimable():
    res = run_preset("mortality", _trial())["effects"]
    assert len(res) == 1 and res[0].estimate is None
    assert res[0].note.startswith("inestimable")


def test_satisfaction_one_point_shift_gives_difference_one():
    # q3 is reverse-coded: raw 2 scores 4, raw 3 scores 3
    def answers(arm):
        if arm:
            return (("q1", 4), ("q2", 4), ("q3", 2))
        return (("q1", 3), ("q2", 3), ("q3", 3))

    t = _trial(sat=answers)
    s = run_satisfaction(t)
    est = s["composite"].estimate
    assert est.scale == "mean_difference"
    assert est.effect == pytest.approx(1.0, abs=1e-10)
    assert est.psi1 == pytest.approx(4.0, abs=1e-10) and est.psi0 == pytest.approx(3.0, abs=1e-10)
    assert [r.estimate.effect for r in s["items"]] == pytest.approx([1.0, 1.0, 1.0], abs=1e-10)
    assert s["excluded_no_responses"] == 0


def test_satisfaction_scores_reverse_coding():
    t = _trial(n_clinics=2, per=1, sat=lambda arm: (("q1", 5), ("q3", 5)))
    sc = satisfaction_scores(t)
    assert sc.q3.tolist() == [1.0, 1.0] and sc.composite.tolist() == [3.0, 3.0]


def test_empty_analysis_set_is_reported():
    t = _trial()
    plan = AnalysisPlan("late", population=PopulationSpec.primary(enrollment_cutoff=date(2019, 1, 1)))
    (res,) = run_plan(plan, t)
    assert res.estimate is None and "empty analysis set" in res.note


def test_stratified_plan_gives_one_row_per_stratum(small_trial):
    res = run_plan(AnalysisPlan("by_engaged", estimator="single_stage", stratify_by="engaged_2y"),
                   small_trial)
    assert len(res) >= 2
    assert len({r.stratum for r in res}) == len(res)


def test_subgroup_plan(small_trial):
    (res,) = run_plan(AnalysisPlan("f", estimator="single_stage", subgroup=("sex", "female")),
                      small_trial)
    assert res.estimate is not None
    assert res.estimate.n_obs < len(small_trial.participants)


@pytest.mark.parametrize("name", ["primary", "sensitivity_single_stage", "lapse", "engagement"])
def test_presets_run(name, small_trial):
    out = run_preset(name, small_trial)
    assert out["effects"]
    for r in out["effects"]:
        assert r.estimate is not None or r.note.startswith("inestimable")


def test_all_presets_listed():
    assert {"primary", "dtg", "mediators", "predictors", "satisfaction"} <= set(PRESETS)


def test_bundled_primary_is_plausible(bundled_trial):
    (res,) = run_plan(AnalysisPlan("primary"), bundled_trial)
    est = res.estimate
    assert est.n_clusters == 28 and est.df == 26
    assert est.ci[0] < est.effect < est.ci[1]
    assert 0 <= est.p_one_sided <= 1 and np.isfinite(est.se)
