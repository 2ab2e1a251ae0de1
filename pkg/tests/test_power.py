import math

import pytest
from hypothesis import given, strategies as st
from scipy import stats

from clustertmle.power import (PowerParams, clusters_per_arm, clusters_per_arm_raw,
                               detectable_effect, power_curve, power_given_design,
                               two_proportion_n)

D = PowerParams()


def test_hand_computed_raw_value():
    pi0, pi1, m, k = 0.65, 0.65 * 1.24, 50, 0.175
    z = stats.norm.ppf(0.975) + stats.norm.ppf(0.8)
    v = pi0 * (1 - pi0) / m + pi1 * (1 - pi1) / m + k * k * (pi0 ** 2 + pi1 ** 2)
    assert clusters_per_arm_raw(D) == pytest.approx(z * z * v / (pi0 - pi1) ** 2, rel=1e-14)
    assert clusters_per_arm(D) == 14


def test_plus_one():
    p = D.with_(small_sample_correction="plus_one")
    assert clusters_per_arm_raw(p) == pytest.approx(clusters_per_arm_raw(D) + 1)
    assert clusters_per_arm(p) == 15


def test_power_inverts_sample_size():
    raw = clusters_per_arm_raw(D)
    assert power_given_design(raw, D) == pytest.approx(0.8, abs=1e-12)


def test_k_term_scales_quadratically():
    big = PowerParams(m=1e12, k=0.2)
    small = PowerParams(m=1e12, k=0.1)
    assert clusters_per_arm_raw(big) / clusters_per_arm_raw(small) == pytest.approx(4.0, rel=1e-9)


def test_null_effect_rejected():
    with pytest.raises(ValueError):
        clusters_per_arm_raw(D.with_(relative_effect=1.0))


@pytest.mark.parametrize("bad", [dict(pi0=1.2), dict(relative_effect=0.9), dict(k=-1),
                                 dict(sided="three"), dict(small_sample_correction="x")])
def test_invalid_params(bad):
    with pytest.raises(ValueError):
        PowerParams(**bad)


@given(st.floats(20, 500), st.floats(0.0, 0.3))
def test_monotone_in_m_and_k(m, k):
    p = D.with_(m=m, k=k)
    assert power_given_design(14, p.with_(m=m * 2)) >= power_given_design(14, p)
    assert power_given_design(14, p.with_(k=k + 0.05)) <= power_given_design(14, p)


def test_curve_shape():
    c = power_curve(D)
    assert set(c.k) == {0.125, 0.175}
    assert (c.groupby("k").power.diff().dropna() > 0).all()


def test_detectable_effect_round_trip():
    rr = detectable_effect(14, D)
    assert power_given_design(14, D.with_(relative_effect=rr)) == pytest.approx(0.8, abs=1e-6)
    assert rr < 1.24


def test_individual_randomization_needs_fewer_people():
    assert two_proportion_n(D) < 14 * 50
    assert math.isfinite(two_proportion_n(D))
