import numpy as np
import pandas as pd
import pytest
from hypothesis import given, strategies as st

from clustertmle.inference import EstimationError
from clustertmle.two_stage import (ClinicEndpoint, adaptive_prespec, clinic_weights,
                                   stage1_endpoints, stage2_effect, two_stage_effect)


def _endpoints(values, arms, sizes=None):
    sizes = sizes or [50] * len(values)
    return [ClinicEndpoint(f"c{i:02d}", a, v, m) for i, (v, a, m) in enumerate(zip(values, arms, sizes))]


def _clinics(eps, **cols):
    df = pd.DataFrame({"clinic_id": [e.clinic_id for e in eps], "arm": [e.arm for e in eps]})
    for k, v in cols.items():
        df[k] = v
    return df


def _random_design(seed, N=20):
    rng = np.random.default_rng(seed)
    arms = [i % 2 for i in range(N)]
    vals = rng.uniform(0.3, 0.9, N)
    sizes = rng.integers(20, 80, N).tolist()
    return _endpoints(vals.tolist(), arms, sizes), rng


def test_stage1_empirical_value():
    frame = pd.DataFrame({"clinic_id": ["a"] * 10 + ["b"] * 4, "arm": [1] * 10 + [0] * 4,
                          "y": [1] * 7 + [0] * 3 + [1, 0, 0, 0], "delta": 1.0})
    eps = stage1_endpoints(frame)
    assert [e.value for e in eps] == [0.7, 0.25]
    assert eps[0].n_included == 10


def test_stage1_ignores_unmeasured_rows():
    frame = pd.DataFrame({"clinic_id": ["a"] * 5, "arm": 1, "y": [1, 1, 0, np.nan, np.nan],
                          "delta": [1, 1, 1, 0, 0]})
    e = stage1_endpoints(frame)[0]
    assert e.value == pytest.approx(2 / 3) and e.n_measured == 3 and e.n_included == 5


def test_stage1_zero_participant_clinic_is_error():
    frame = pd.DataFrame({"clinic_id": ["a", "a"], "arm": [1, 1], "y": [1.0, 0.0]})
    clinics = pd.DataFrame({"clinic_id": ["a", "b"], "arm": [1, 0]})
    with pytest.raises(EstimationError, match="zero included"):
        stage1_endpoints(frame, clinics=clinics)


@pytest.mark.parametrize("weights", ["equal", "size"])
@pytest.mark.parametrize("scale", ["risk_ratio", "risk_difference"])
def test_unadjusted_equals_weighted_arm_contrast(weights, scale):
    eps, _ = _random_design(1)
    est = stage2_effect(eps, None, "none", weights, scale)
    a = clinic_weights(sorted(eps, key=lambda e: e.clinic_id), weights)
    v = np.array([e.value for e in sorted(eps, key=lambda e: e.clinic_id)])
    z = np.array([e.arm for e in sorted(eps, key=lambda e: e.clinic_id)])
    p1 = np.sum(a[z == 1] * v[z == 1]) / np.sum(a[z == 1])
    p0 = np.sum(a[z == 0] * v[z == 0]) / np.sum(a[z == 0])
    assert abs(est.psi1 - p1) <= 1e-10 and abs(est.psi0 - p0) <= 1e-10
    target = p1 / p0 if scale == "risk_ratio" else p1 - p0
    assert abs(est.effect - target) <= 1e-10
    assert est.df == len(eps) - 2


def test_order_invariance():
    eps, rng = _random_design(2)
    clinics = _clinics(eps, baseline_suppression_proportion=rng.uniform(0.4, 0.8, len(eps)),
                       n_youth_in_care_baseline=rng.integers(50, 300, len(eps)))
    a, sa = two_stage_effect(eps, clinics)
    perm = rng.permutation(len(eps))
    b, sb = two_stage_effect([eps[i] for i in perm], clinics.iloc[perm])
    assert a.effect == b.effect and a.se == b.se and a.selected == b.selected and sa == sb


def test_identical_endpoints_null():
    eps = _endpoints([0.6] * 10, [i % 2 for i in range(10)])
    rr = stage2_effect(eps, scale="risk_ratio")
    rd = stage2_effect(eps, scale="risk_difference")
    assert rr.effect == pytest.approx(1.0, abs=1e-12)
    assert rd.effect == pytest.approx(0.0, abs=1e-12)
    assert rr.p_one_sided >= 0.5 and rd.p_two_sided == 1.0


def test_size_weights_have_mean_one():
    eps = _endpoints([0.5] * 4, [0, 1, 0, 1], [10, 30, 20, 40])
    np.testing.assert_allclose(clinic_weights(eps, "size"), [0.4, 1.2, 0.8, 1.6])
    np.testing.assert_array_equal(clinic_weights(eps, "equal"), np.ones(4))


def test_constant_candidate_skipped():
    eps, rng = _random_design(3)
    clinics = _clinics(eps, baseline_suppression_proportion=0.7,
                       n_youth_in_care_baseline=rng.integers(50, 300, len(eps)))
    sel, scores = adaptive_prespec(eps, clinics)
    assert "baseline_suppression_proportion" not in scores
    assert set(scores) == {"none", "n_youth_in_care_baseline"}


def test_adaptive_picks_prognostic_covariate():
    rng = np.random.default_rng(4)
    N = 28
    x = rng.normal(size=N)
    vals = 1 / (1 + np.exp(-(0.6 + 0.8 * x + rng.normal(scale=0.1, size=N))))
    eps = _endpoints(vals.tolist(), [i % 2 for i in range(N)])
    clinics = _clinics(eps, baseline_suppression_proportion=x,
                       n_youth_in_care_baseline=rng.normal(size=N))
    est, scores = two_stage_effect(eps, clinics)
    assert est.selected == "baseline_suppression_proportion"
    assert scores["baseline_suppression_proportion"] < scores["none"]
    unadj = stage2_effect(eps, clinics, "none")
    assert est.se < unadj.se


def test_adaptive_rejects_unknown_candidate():
    eps, _ = _random_design(5)
    with pytest.raises(ValueError):
        adaptive_prespec(eps, _clinics(eps), ("none", "age"))


def test_needs_both_arms_and_three_clinics():
    with pytest.raises(EstimationError):
        stage2_effect(_endpoints([0.5, 0.6, 0.7], [1, 1, 1]))
    with pytest.raises(EstimationError):
        stage2_effect(_endpoints([0.5, 0.6], [1, 0]))


def test_zero_control_risk_ratio_is_error():
    with pytest.raises(EstimationError, match="risk ratio undefined"):
        stage2_effect(_endpoints([0.0, 0.0, 0.5, 0.6], [0, 0, 1, 1]), scale="risk_ratio")


def test_bounds_rescale_continuous_endpoint():
    eps = _endpoints([2.0, 3.0, 4.0, 4.5, 1.5, 3.5], [0, 1, 0, 1, 0, 1])
    est = stage2_effect(eps, scale="mean_difference", bounds=(1, 5))
    assert est.psi1 == pytest.approx((3.0 + 4.5 + 3.5) / 3, abs=1e-10)
    assert est.psi0 == pytest.approx((2.0 + 4.0 + 1.5) / 3, abs=1e-10)
    with pytest.raises(EstimationError):
        stage2_effect(eps, scale="mean_difference", bounds=(2, 5))


@given(st.lists(st.floats(0.05, 0.95), min_size=6, max_size=20))
def test_ci_contains_estimate(vals):
    eps = _endpoints(vals, [i % 2 for i in range(len(vals))])
    est = stage2_effect(eps, scale="risk_difference", sided="two")
    assert est.ci[0] <= est.effect <= est.ci[1]
    assert 0 <= est.p <= 1
