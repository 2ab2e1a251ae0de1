"""Sample size and power for cluster-randomized trials with proportion endpoints.

The number of clusters per arm is

    c = corr + (z_alpha + z_beta)^2 * V / (pi0 - pi1)^2,
    V = pi0 (1 - pi0) / m + pi1 (1 - pi1) / m + k^2 (pi0^2 + pi1^2),

rounded up, where ``k`` is the between-cluster coefficient of variation of
the true cluster proportions and ``corr`` is 1 or 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import optimize, stats


@dataclass(frozen=True)
class PowerParams:
    pi0: float = 0.65
    relative_effect: float = 1.24
    m: float = 50
    k: float = 0.175
    alpha: float = 0.05
    power: float = 0.80
    sided: str = "two"
    small_sample_correction: str = "none"

    def __post_init__(self):
        if not 0 < self.pi0 < 1:
            raise ValueError("pi0 must lie in (0, 1)")
        if self.relative_effect < 1:
            raise ValueError("relative_effect must be >= 1")
        if self.k < 0 or self.m < 1:
            raise ValueError("need k >= 0 and m >= 1")
        if self.sided not in ("one", "two"):
            raise ValueError("sided must be 'one' or 'two'")
        if self.small_sample_correction not in ("none", "plus_one"):
            raise ValueError("small_sample_correction must be 'none' or 'plus_one'")

    @property
    def pi1(self) -> float:
        return min(self.pi0 * self.relative_effect, 1.0)

    @property
    def correction(self) -> int:
        return 1 if self.small_sample_correction == "plus_one" else 0

    def with_(self, **kw) -> "PowerParams":
        return replace(self, **kw)


def _z_alpha(p: PowerParams) -> float:
    return stats.norm.ppf(1 - p.alpha / (2 if p.sided == "two" else 1))


def _variance_term(p: PowerParams) -> float:
    pi0, pi1 = p.pi0, p.pi1
    return pi0 * (1 - pi0) / p.m + pi1 * (1 - pi1) / p.m + p.k ** 2 * (pi0 ** 2 + pi1 ** 2)


def clusters_per_arm_raw(p: PowerParams) -> float:
    """Unrounded formula value, including the correction term."""
    if p.pi1 == p.pi0:
        raise ValueError("pi1 equals pi0: no finite number of clusters detects a null effect")
    z = _z_alpha(p) + stats.norm.ppf(p.power)
    return p.correction + z * z * _variance_term(p) / (p.pi0 - p.pi1) ** 2


def clusters_per_arm(p: PowerParams) -> int:
    """Clusters per arm, rounded up."""
    return int(math.ceil(clusters_per_arm_raw(p) - 1e-12))


def power_given_design(c: float, p: PowerParams) -> float:
    """Power with ``c`` clusters per arm (inverts the sample-size formula)."""
    if c < 2:
        raise ValueError("need at least two clusters per arm")
    eff = max(c - p.correction, 0.0)
    z_beta = math.sqrt(eff * (p.pi0 - p.pi1) ** 2 / _variance_term(p)) - _z_alpha(p)
    return float(stats.norm.cdf(z_beta))


def power_curve(p: PowerParams, c: int = 14, m_values: Sequence[float] = (20, 30, 40, 50, 75, 100, 150, 200),
                k_values: Sequence[float] = (0.125, 0.175)) -> pd.DataFrame:
    """Power against participants per cluster for each ``k`` (plot data)."""
    rows = []
    for k in k_values:
        for m in m_values:
            q = p.with_(k=k, m=m)
            rows.append({"k": k, "m": m, "clusters_per_arm": c,
                         "power": power_given_design(c, q),
                         "required_clusters_per_arm": clusters_per_arm(q)})
    return pd.DataFrame(rows)


def detectable_effect(c: int, p: PowerParams, hi: float = 3.0) -> float:
    """Smallest relative effect reaching the target power with ``c`` clusters per arm."""
    top = min(hi, 1.0 / p.pi0)
    gap = lambda rr: power_given_design(c, p.with_(relative_effect=rr)) - p.power
    if gap(top) < 0:
        return float("nan")
    return float(optimize.brentq(gap, 1.0 + 1e-9, top, xtol=1e-12))


def two_proportion_n(p: PowerParams) -> float:
    """Per-arm sample size for an individually randomized two-proportion test."""
    z = _z_alpha(p) + stats.norm.ppf(p.power)
    return z * z * (p.pi0 * (1 - p.pi0) + p.pi1 * (1 - p.pi1)) / (p.pi0 - p.pi1) ** 2
