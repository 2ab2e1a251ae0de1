"""Synthetic trials and Monte Carlo operating characteristics.

Clinic control-arm proportions are logit-normal, ``p_i(0) = expit(mu + sigma
b_i)`` with ``(mu, sigma)`` calibrated so the proportions have mean ``pi0``
and coefficient of variation ``k``.  ``b_i`` mixes a standardized clinic
covariate (share ``covariate_r2``) with noise.  Treated proportions are
``min(p_i(0) * pi1 / pi0, 1)``.  Each participant carries a uniform latent
``U`` and has potential outcomes ``Y(a) = 1{U < p_i(a)}``, so the sample
risk ratio is known exactly in every replicate.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time as _time
from dataclasses import asdict, dataclass, field, replace
from datetime import date, timedelta
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import optimize, special, stats

from .inference import EstimationError
from .tmle import adaptive_prespec_individual, tmle_effect_individual
from .trial_data import Trial, _normalize_clinics, _normalize_participants, _long, _VL_COLS, \
    _DATE_LONG, _SAT_COLS
from .two_stage import CLINIC_CANDIDATES, ClinicEndpoint, two_stage_effect

log = logging.getLogger(__name__)

_GH_X, _GH_W = np.polynomial.hermite_e.hermegauss(80)
_GH_W = _GH_W / _GH_W.sum()
SATISFACTION_ITEMS = ("q1", "q2", "q3", "q4", "q5")
REVERSE_CODED = ("q3",)
CARE = ("recently_engaged", "engaged", "re_engaging")


@dataclass(frozen=True)
class TrialSimSpec:
    """Data-generating process for synthetic trials.

    ``m`` is the number of analysable participants per clinic; ``m_range``
    (inclusive) overrides it with clinic sizes drawn uniformly.
    ``outcome_draw="exact"`` places exactly ``round(m p)`` successes in each
    clinic (no sampling noise).  ``missing_fraction`` and ``death_fraction``
    split failures into missing-VL and died categories (outcome unchanged).
    ``covariate_r2`` is the share of between-clinic logit variance explained
    by the clinic covariate reported as ``baseline_suppression_proportion``;
    ``individual_rho`` ties ``baseline_suppressed`` to the latent outcome.
    """

    clusters_per_arm: int = 14
    m: int = 50
    m_range: tuple[int, int] | None = None
    pi0: float = 0.65
    pi1: float = 0.65
    k: float = 0.175
    covariate_r2: float = 0.0
    individual_rho: float = 0.3
    outcome_draw: str = "bernoulli"
    missing_fraction: float = 0.0
    death_fraction: float = 0.0
    excluded_fraction: float = 0.0
    dtg_baseline: float = 0.2
    dtg_rate: tuple[float, float] = (0.0015, 0.002)
    satisfaction_shift: float = 0.0
    replicates: int = 1000
    seed: int = 7

    def __post_init__(self):
        for name in ("pi0", "pi1"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.k < 0 or self.clusters_per_arm < 1 or self.replicates < 1 or self.m < 1:
            raise ValueError("need k >= 0, clusters_per_arm >= 1, m >= 1 and replicates >= 1")
        if not 0 <= self.covariate_r2 <= 1:
            raise ValueError("covariate_r2 must lie in [0, 1]")
        if self.outcome_draw not in ("bernoulli", "exact"):
            raise ValueError("outcome_draw must be 'bernoulli' or 'exact'")
        if self.missing_fraction + self.death_fraction > 1:
            raise ValueError("missing_fraction + death_fraction must not exceed 1")

    def with_(self, **kw) -> "TrialSimSpec":
        return replace(self, **kw)

    def digest(self) -> str:
        text = json.dumps(asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# calibration


def _logitnormal_moments(mu, sigma):
    p = special.expit(mu + sigma * _GH_X)
    m1 = float(np.dot(_GH_W, p))
    m2 = float(np.dot(_GH_W, p * p))
    return m1, max(m2 - m1 * m1, 0.0)


def _mu_for_mean(pi, sigma):
    return optimize.brentq(lambda mu: _logitnormal_moments(mu, sigma)[0] - pi, -40, 40, xtol=1e-12)


def calibrate_logitnormal(pi: float, k: float, tol: float = 1e-6) -> tuple[float, float]:
    """``(mu, sigma)`` with ``E[expit(mu + sigma Z)] = pi`` and CV ``k``."""
    if k == 0:
        return float(special.logit(pi)), 0.0
    cv_max = np.sqrt((1 - pi) / pi)
    if k >= cv_max * 0.999:
        raise ValueError(f"k={k} is infeasible for mean {pi} (CV must stay below {cv_max:.3f})")

    def cv_gap(sigma):
        mu = _mu_for_mean(pi, sigma)
        m1, v = _logitnormal_moments(mu, sigma)
        return np.sqrt(v) / m1 - k

    hi = 1.0
    while cv_gap(hi) < 0:
        hi *= 2
        if hi > 64:
            raise ValueError(f"k={k} is infeasible for mean {pi}")
    sigma = optimize.brentq(cv_gap, 1e-9, hi, xtol=tol * 1e-3, rtol=1e-12)
    return _mu_for_mean(pi, sigma), float(sigma)


# --------------------------------------------------------------------------
# replicate draws


@dataclass(frozen=True)
class SimArrays:
    """One replicate in analysis-ready form (included participants only)."""

    clinic_id: np.ndarray
    arm: np.ndarray
    stratum_id: np.ndarray
    n_youth: np.ndarray
    bsp: np.ndarray
    p0: np.ndarray
    p1: np.ndarray
    cluster: np.ndarray       # clinic index per participant
    u: np.ndarray
    age: np.ndarray
    female: np.ndarray
    baseline_suppressed: np.ndarray
    y0: np.ndarray
    y1: np.ndarray

    @property
    def z(self) -> np.ndarray:
        return self.arm[self.cluster].astype(float)

    @property
    def y(self) -> np.ndarray:
        return np.where(self.z == 1, self.y1, self.y0)

    def truth(self, weights: str = "clinic") -> tuple[float, float]:
        """Sample ``(psi1, psi0)``: clinic-weighted or participant-pooled."""
        if weights == "clinic":
            n = np.bincount(self.cluster)
            return (float(np.mean(np.bincount(self.cluster, self.y1) / n)),
                    float(np.mean(np.bincount(self.cluster, self.y0) / n)))
        return float(self.y1.mean()), float(self.y0.mean())


def _rng(spec: TrialSimSpec, replicate: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, replicate])


def synth_arrays(spec: TrialSimSpec, replicate: int) -> SimArrays:
    """Analysis-ready draw for replicate ``replicate`` (deterministic)."""
    rng = _rng(spec, replicate)
    c = spec.clusters_per_arm
    N = 2 * c
    mu, sigma = calibrate_logitnormal(spec.pi0, spec.k)
    x = rng.standard_normal(N)
    u_c = rng.standard_normal(N)
    r = np.sqrt(spec.covariate_r2)
    b = r * x + np.sqrt(1 - spec.covariate_r2) * u_c
    p0 = special.expit(mu + sigma * b)
    p1 = np.minimum(p0 * spec.pi1 / spec.pi0, 1.0)
    # pair clinics into strata and randomize within each pair
    arm = np.empty(N, dtype=int)
    flips = rng.integers(0, 2, c)
    arm[0::2] = flips
    arm[1::2] = 1 - flips
    stratum = np.repeat([f"s{j + 1:02d}" for j in range(c)], 2)
    bsp = special.expit(mu + sigma * r * x) if sigma > 0 else np.full(N, spec.pi0)
    n_youth = rng.integers(80, 400, N)
    if spec.m_range is None:
        sizes = np.full(N, spec.m)
    else:
        sizes = rng.integers(spec.m_range[0], spec.m_range[1] + 1, N)
    cluster = np.repeat(np.arange(N), sizes)
    n = cluster.size
    if spec.outcome_draw == "exact":
        u = np.empty(n)
        start = 0
        for j, s in enumerate(sizes):
            u[start:start + s] = (rng.permutation(s) + 0.5) / s
            start += s
    else:
        u = rng.random(n)
    y0 = (u < p0[cluster]).astype(float)
    y1 = (u < p1[cluster]).astype(float)
    age = rng.integers(15, 25, n)
    female = (rng.random(n) < 0.6).astype(float)
    rho = spec.individual_rho
    latent = -rho * stats.norm.ppf(np.clip(u, 1e-12, 1 - 1e-12)) + np.sqrt(1 - rho ** 2) * rng.standard_normal(n)
    bs = (latent > stats.norm.ppf(0.4)).astype(float)
    ids = np.array([f"C{j + 1:02d}" for j in range(N)], dtype=object)
    return SimArrays(ids, arm, stratum, n_youth, bsp, p0, p1, cluster, u, age, female, bs, y0, y1)


def clinics_frame(a: SimArrays) -> pd.DataFrame:
    return _normalize_clinics(pd.DataFrame({
        "clinic_id": a.clinic_id, "country": np.where(np.arange(a.arm.size) < a.arm.size // 2, "Kenya", "Uganda"),
        "arm": a.arm, "stratum_id": a.stratum_id, "n_youth_in_care_baseline": a.n_youth,
        "baseline_suppression_proportion": np.round(a.bsp, 6)}))


def _iso(d0: date, offs):
    return [d0 + timedelta(days=int(o)) for o in offs]


def synth_trial(spec: TrialSimSpec, replicate: int = 0) -> Trial:
    """Full participant and clinic tables for one replicate.

    Included participants reproduce :func:`synth_arrays` exactly under the
    primary population (their endpoint equals the drawn outcome).  A share
    ``excluded_fraction`` of extra participants is added who are withdrawn,
    outmigrated, transferred or enrolled after the cutoff.
    """
    a = synth_arrays(spec, replicate)
    rng = np.random.default_rng([spec.seed, replicate, 1])
    clinics = clinics_frame(a)
    country = clinics.set_index("clinic_id").country
    n = a.cluster.size
    n_extra = int(round(spec.excluded_fraction * n))
    rows, vls, cons, births, sats = [], [], [], [], []
    base = date(2019, 4, 1)
    y = a.y
    z = a.z
    fail_kind = rng.random(n)
    for i in range(n + n_extra):
        extra = i >= n
        j = a.cluster[i] if not extra else int(rng.integers(0, a.arm.size))
        pid = f"P{i + 1:05d}"
        cid = a.clinic_id[j]
        enroll = base + timedelta(days=int(rng.integers(0, 240)))
        female = a.female[i] if not extra else float(rng.random() < 0.6)
        row = {"participant_id": pid, "clinic_id": cid, "enrollment_date": enroll,
               "age": int(a.age[i]) if not extra else int(rng.integers(15, 25)),
               "sex": "female" if female else "male", "country": country[cid],
               "education": ("none", "primary", "secondary_plus")[int(rng.integers(0, 3))],
               "employment": ("unemployed", "informal", "formal")[int(rng.integers(0, 3))],
               "marital_status": ("single", "married", "other")[int(rng.integers(0, 3))],
               "n_children": int(rng.poisson(0.8)),
               "alcohol_use": "any" if rng.random() < 0.2 else "none",
               "mobility": "mobile" if rng.random() < 0.15 else "stable",
               "art_regimen_baseline": "DTG" if rng.random() < spec.dtg_baseline else
               ("EFV", "NVP", "PI")[int(rng.integers(0, 3))],
               "baseline_suppressed": (a.baseline_suppressed[i] if not extra else float(rng.random() < 0.6))}
        if rng.random() < 0.03:
            row["baseline_suppressed"] = None
        care = int(rng.integers(0, 3))
        row["art_start_date"] = enroll - timedelta(days=int(rng.integers(0, 150) if care == 0 else rng.integers(200, 2000)))
        row["last_visit_date"] = (None if care == 2 else
                                  enroll - timedelta(days=int(rng.integers(10, 170) if care == 1 else rng.integers(5, 60))))
        if care == 2 and rng.random() < 0.5:
            row["last_visit_date"] = enroll - timedelta(days=int(rng.integers(200, 400)))
        row["baseline_care_status"] = CARE[care]
        mark = enroll + timedelta(days=730)
        wstart = mark - timedelta(days=90)
        if extra:
            kind = int(rng.integers(0, 4))
            when = enroll + timedelta(days=int(rng.integers(60, 700)))
            if kind == 0:
                row["withdrawal_date"] = when
            elif kind == 1:
                row["outmigration_date"] = when
            elif kind == 2:
                row["transfer_date"] = when
            else:
                row["enrollment_date"] = date(2019, 12, 1) + timedelta(days=int(rng.integers(0, 90)))
                enroll = row["enrollment_date"]
                mark = enroll + timedelta(days=730)
                wstart = mark - timedelta(days=90)
                row["art_start_date"] = enroll - timedelta(days=30)
                row["last_visit_date"] = None
                row["baseline_care_status"] = "recently_engaged"
            vls.append((pid, mark + timedelta(days=int(rng.integers(-60, 100))), float(rng.integers(20, 5000))))
        else:
            closure_gap = (date(2022, 3, 1) - mark).days
            offset = int(rng.integers(-80, min(170, closure_gap + 1)))
            vl_date = mark + timedelta(days=offset)
            if y[i] == 1:
                vls.append((pid, vl_date, float(rng.choice([20.0, 40.0, float(rng.integers(50, 400))]))))
            else:
                fk = fail_kind[i]
                if fk < spec.death_fraction:
                    row["death_date"] = enroll + timedelta(days=int(rng.integers(420, 700)))
                elif fk < spec.death_fraction + spec.missing_fraction:
                    if rng.random() < 0.5:
                        vls.append((pid, wstart - timedelta(days=int(rng.integers(10, 200))),
                                    float(rng.integers(20, 2000))))
                else:
                    vls.append((pid, vl_date, float(rng.integers(400, 100000))))
        # interim viral loads before the window
        vls.append((pid, enroll + timedelta(days=int(rng.integers(150, 400))), float(rng.integers(20, 3000))))
        # clinic contacts every 30-135 days until the window opens
        t = 0
        horizon = (wstart - enroll).days
        if rng.random() < 0.15:
            horizon = int(rng.integers(30, horizon))
        while True:
            t += int(rng.integers(30, 136 if rng.random() < 0.3 else 110))
            if t >= horizon:
                break
            cons.append((pid, enroll + timedelta(days=t)))
        if row["art_regimen_baseline"] != "DTG":
            rate = spec.dtg_rate[int(z[i]) if not extra else 0]
            ts = rng.exponential(1.0 / rate)
            if ts < 760:
                row["dtg_switch_date"] = enroll + timedelta(days=int(ts) + 1)
        if rng.random() < 0.03:
            row["second_line_date"] = enroll + timedelta(days=int(rng.integers(100, 700)))
        if female and rng.random() < 0.12:
            births.append((pid, enroll + timedelta(days=int(rng.integers(100, 800)))))
        if rng.random() < 0.8:
            shift = spec.satisfaction_shift * (z[i] if not extra else 0)
            for q in SATISFACTION_ITEMS:
                s = int(np.clip(np.rint(3.4 + shift + rng.normal(0, 0.9)), 1, 5))
                if q in REVERSE_CODED:
                    s = 6 - s
                sats.append((pid, q, s))
        rows.append(row)
    parts = _normalize_participants(pd.DataFrame(rows))
    return Trial(parts, clinics, _long(vls, _VL_COLS), _long(cons, _DATE_LONG),
                 _long(births, _DATE_LONG), _long(sats, _SAT_COLS))



# --------------------------------------------------------------------------
# Monte Carlo


@dataclass(frozen=True)
class SimAnalysis:
    """One estimator configuration evaluated in every replicate."""

    name: str = "two_stage"
    estimator: str = "two_stage"
    adaptive: bool = True
    scale: str = "risk_ratio"
    sided: str = "one"
    alpha: float = 0.05
    weights: str = "equal"
    clinic_candidates: tuple[str, ...] = ("none",) + CLINIC_CANDIDATES
    individual_candidates: tuple[str, ...] = ("none", "age", "sex", "baseline_suppressed")


def _individual_covariate(a: SimArrays, name: str):
    return {"age": a.age.astype(float), "sex": a.female,
            "baseline_suppressed": a.baseline_suppressed}[name]


def analyse_replicate(a: SimArrays, cfg: SimAnalysis) -> dict:
    """Estimate from one replicate's arrays; returns a flat result row."""
    if cfg.estimator == "two_stage":
        n = np.bincount(a.cluster)
        yc = np.bincount(a.cluster, a.y) / n
        eps = [ClinicEndpoint(cid, int(arm), float(v), int(k))
               for cid, arm, v, k in zip(a.clinic_id, a.arm, yc, n)]
        clinics = clinics_frame(a) if cfg.adaptive else None
        est, _ = two_stage_effect(eps, clinics, adaptive=cfg.adaptive, candidates=cfg.clinic_candidates,
                                  weights=cfg.weights, scale=cfg.scale, sided=cfg.sided)
        truth = a.truth("clinic" if cfg.weights == "equal" else "pooled")
    else:
        z, y = a.z, a.y
        selected = "none"
        W = None
        if cfg.adaptive:
            cands = {c: (None if c == "none" else _individual_covariate(a, c))
                     for c in cfg.individual_candidates}
            selected, _ = adaptive_prespec_individual(a.cluster, z, y, cands, cfg.scale)
            W = cands[selected]
        est = tmle_effect_individual(a.cluster, W, z, y, None, cfg.scale, sided=cfg.sided,
                                     selected=selected)
        truth = a.truth("pooled")
    t1, t0 = truth
    true_effect = t1 / t0 if cfg.scale == "risk_ratio" else t1 - t0
    return {"analysis": cfg.name, "effect": est.effect, "se": est.se, "ci_lo": est.ci[0],
            "ci_hi": est.ci[1], "p": est.p, "selected": est.selected, "psi1": est.psi1,
            "psi0": est.psi0, "true_effect": true_effect}


@dataclass(frozen=True)
class SimResult:
    spec: TrialSimSpec
    analyses: tuple[SimAnalysis, ...]
    replicates: pd.DataFrame
    failures: pd.DataFrame
    elapsed: float = 0.0

    def summary(self) -> pd.DataFrame:
        return summarize(self.replicates, self.failures, self.analyses, self.spec)


def run_replicates(spec: TrialSimSpec, analyses: Sequence[SimAnalysis] = (SimAnalysis(),),
                   replicates: Sequence[int] | None = None) -> SimResult:
    """Run every analysis on each replicate's data.

    ``replicates`` selects a subset of replicate indices (for partitioned
    runs); results for a replicate do not depend on which others are run.
    """
    idx = range(spec.replicates) if replicates is None else replicates
    rows, fails = [], []
    t0 = _time.perf_counter()
    for r in idx:
        a = synth_arrays(spec, r)
        for cfg in analyses:
            try:
                row = analyse_replicate(a, cfg)
            except (EstimationError, np.linalg.LinAlgError, FloatingPointError) as exc:
                fails.append({"replicate": r, "analysis": cfg.name, "error": str(exc)})
                continue
            row["replicate"] = r
            rows.append(row)
    cols = ["replicate", "analysis", "effect", "se", "ci_lo", "ci_hi", "p", "selected", "psi1",
            "psi0", "true_effect"]
    return SimResult(spec, tuple(analyses), pd.DataFrame(rows, columns=cols),
                     pd.DataFrame(fails, columns=["replicate", "analysis", "error"]),
                     _time.perf_counter() - t0)


def summarize(reps: pd.DataFrame, failures: pd.DataFrame, analyses, spec) -> pd.DataFrame:
    """Rejection rate, bias, coverage, variance and selection frequencies."""
    out = []
    for cfg in analyses:
        g = reps[reps.analysis == cfg.name]
        n = len(g)
        nf = int((failures.analysis == cfg.name).sum()) if len(failures) else 0
        if n == 0:
            out.append({"analysis": cfg.name, "n": 0, "failures": nf})
            continue
        rej = (g.p < cfg.alpha).to_numpy()
        cover = ((g.ci_lo <= g.true_effect) & (g.true_effect <= g.ci_hi)).to_numpy()
        if cfg.scale == "risk_ratio":
            est, tru = np.log(g.effect.to_numpy()), np.log(g.true_effect.to_numpy())
        else:
            est, tru = g.effect.to_numpy(), g.true_effect.to_numpy()
        err = est - tru
        row = {"analysis": cfg.name, "n": n, "failures": nf, "failure_rate": nf / (n + nf),
               "rejection": rej.mean(), "rejection_mcse": np.sqrt(rej.mean() * (1 - rej.mean()) / n),
               "coverage": cover.mean(), "coverage_mcse": np.sqrt(cover.mean() * (1 - cover.mean()) / n),
               "bias": err.mean(), "bias_mcse": err.std(ddof=1) / np.sqrt(n) if n > 1 else np.nan,
               "variance": est.var(ddof=1) if n > 1 else np.nan,
               "error_variance": err.var(ddof=1) if n > 1 else np.nan,
               "mean_se": g.se.mean()}
        for lab, k in g.selected.value_counts().sort_index().items():
            row[f"selected[{lab}]"] = k / n
        out.append(row)
    return pd.DataFrame(out)


def operating_characteristics(spec: TrialSimSpec,
                              analyses: Sequence[SimAnalysis] = (SimAnalysis(),)) -> pd.DataFrame:
    """Summary of :func:`run_replicates` (needs at least 100 replicates)."""
    if spec.replicates < 100:
        raise ValueError("operating characteristics need at least 100 replicates")
    res = run_replicates(spec, analyses)
    summ = res.summary()
    bad = summ[summ.get("failure_rate", 0) >= 0.01] if "failure_rate" in summ else summ.iloc[:0]
    if len(bad):
        log.warning("replicate failure rate >= 1%% for: %s", ", ".join(bad.analysis))
    return summ


# the synthetic trial shipped with the package (28 clinics, variable sizes)
BUNDLED_SPEC = TrialSimSpec(pi1=0.65 * 1.2, m_range=(35, 65), excluded_fraction=0.1,
                            death_fraction=0.2, missing_fraction=0.3, satisfaction_shift=0.3,
                            replicates=1, seed=2022)
