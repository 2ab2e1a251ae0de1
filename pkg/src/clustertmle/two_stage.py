"""Two-Stage TMLE: clinic-level endpoints, then a clinic-level arm contrast.

Stage 1 reduces each clinic to one endpoint ``Y_i``.  Stage 2 fits a
logistic working regression of ``Y_i`` on arm (plus at most one clinic
covariate), targets it with clever covariates ``Z/0.5`` and ``(1-Z)/0.5``
and averages the counterfactual predictions with clinic weights ``alpha_i``
(mean 1).  Inference uses the clinic-level influence curve with ``N - 2``
degrees of freedom.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import stats

from .inference import EffectEstimate, EstimationError, check_ratio_arms, effect_from_ic
from .learners import LearnerSpec, expit, fit_glm, logit, make_design
from .tmle import _argmin_with_ties, fluctuate, tmle_mean_missing, tmle_sequential

log = logging.getLogger(__name__)

CLINIC_CANDIDATES = ("n_youth_in_care_baseline", "baseline_suppression_proportion")
INDIVIDUAL_ADJUSTMENT = ("age", "sex", "baseline_suppressed")
G_Z = 0.5


@dataclass(frozen=True)
class ClinicEndpoint:
    clinic_id: str
    arm: int
    value: float
    n_included: int
    se: float | None = None
    ci: tuple[float, float] | None = None
    n_measured: int | None = None


def _check_clinics_present(frame, clinics):
    if clinics is None:
        return
    have = set(frame.clinic_id)
    empty = sorted(set(clinics.clinic_id) - have)
    if empty:
        raise EstimationError(
            f"clinic(s) with zero included participants: {', '.join(empty)}; "
            "choose a population spec that retains them or drop them explicitly")


def stage1_endpoints(frame: pd.DataFrame, method: str = "empirical", *, outcome: str = "y",
                     delta: str = "delta", clinics: pd.DataFrame | None = None,
                     covariates: Sequence[str] = INDIVIDUAL_ADJUSTMENT,
                     mediator: str = "outmigrated", learners: LearnerSpec = LearnerSpec(),
                     bounds=None, level: float = 0.95) -> list[ClinicEndpoint]:
    """One endpoint per clinic from an individual-level analysis frame.

    ``frame`` needs ``clinic_id``, ``arm``, the outcome column and (unless
    every row is measured) a ``delta`` column with 1 for measured rows.
    ``empirical`` is the mean among measured rows; ``tmle_missing`` and
    ``tmle_sequential`` run a TMLE inside each clinic adjusting for
    ``covariates`` (and ``mediator`` for the sequential form).  Clinics in
    ``clinics`` without any rows raise :class:`EstimationError`.
    """
    if method not in ("empirical", "tmle_missing", "tmle_sequential"):
        raise ValueError(f"unknown stage-1 method {method!r}")
    _check_clinics_present(frame, clinics)
    z = stats.norm.ppf(1 - (1 - level) / 2)
    d_all = frame[delta].to_numpy(dtype=float) if delta in frame else np.ones(len(frame))
    out = []
    for cid, g in frame.groupby("clinic_id", sort=True):
        idx = g.index.to_numpy()
        pos = frame.index.get_indexer(idx)
        d = d_all[pos]
        y = g[outcome].to_numpy(dtype=float)
        arms = g.arm.unique()
        if arms.size != 1:
            raise EstimationError(f"clinic {cid} has participants in both arms")
        obs = d == 1
        if not obs.any():
            raise EstimationError(f"clinic {cid} has no measured outcomes")
        if method == "empirical":
            val = float(y[obs].mean())
            se = float(y[obs].std(ddof=1) / np.sqrt(obs.sum())) if obs.sum() > 1 else float("nan")
        else:
            W = make_design(g, list(covariates), warn=False)
            if method == "tmle_missing":
                fit = tmle_mean_missing(W, d, y, learners, bounds)
            else:
                fit = tmle_sequential(W, g[mediator].to_numpy(dtype=float), d, y, learners, bounds)
            val, se = fit.estimate, fit.se
        ci = (val - z * se, val + z * se) if np.isfinite(se) else None
        out.append(ClinicEndpoint(str(cid), int(arms[0]), val, len(g), se, ci, int(obs.sum())))
    return out


def endpoints_frame(endpoints: Sequence[ClinicEndpoint]) -> pd.DataFrame:
    rows = [{"clinic_id": e.clinic_id, "arm": e.arm, "value": e.value, "n_included": e.n_included,
             "n_measured": e.n_measured, "se": e.se,
             "ci_lo": e.ci[0] if e.ci else np.nan, "ci_hi": e.ci[1] if e.ci else np.nan}
            for e in endpoints]
    return pd.DataFrame(rows, columns=["clinic_id", "arm", "value", "n_included", "n_measured",
                                       "se", "ci_lo", "ci_hi"])


def clinic_weights(endpoints: Sequence[ClinicEndpoint], weights: str = "equal") -> np.ndarray:
    """``alpha_i``: all ones, or proportional to ``n_included`` with mean 1."""
    n = len(endpoints)
    if weights == "equal":
        return np.ones(n)
    if weights == "size":
        m = np.array([e.n_included for e in endpoints], dtype=float)
        if (m <= 0).any():
            raise EstimationError("size weights need n_included > 0 in every clinic")
        return m * n / m.sum()
    raise ValueError(f"unknown weight scheme {weights!r}")


def _candidate_matrix(endpoints, clinics, label):
    """Clinic covariate columns for ``label`` in endpoint order (standardized)."""
    n = len(endpoints)
    if label == "none":
        return np.empty((n, 0))
    cols = list(CLINIC_CANDIDATES) if label == "both" else [label]
    if clinics is None:
        raise ValueError("clinic covariates requested but no clinics table given")
    c = clinics.set_index("clinic_id")
    ids = [e.clinic_id for e in endpoints]
    X = c.loc[ids, cols].to_numpy(dtype=float)
    sd = X.std(axis=0)
    return (X - X.mean(axis=0)) / np.where(sd > 0, sd, 1.0)


def _scaled(endpoints, bounds):
    y = np.array([e.value for e in endpoints], dtype=float)
    if bounds is None:
        a, span = 0.0, 1.0
    else:
        a, span = bounds[0], bounds[1] - bounds[0]
    ys = (y - a) / span
    if (ys < -1e-12).any() or (ys > 1 + 1e-12).any():
        raise EstimationError("clinic endpoints fall outside the declared bounds")
    return np.clip(ys, 0.0, 1.0), a, span


def _working_fit(Z, C, ys, alpha):
    X = np.column_stack([Z, C])
    q = fit_glm(X, ys, weights=alpha)
    X1 = X.copy()
    X1[:, 0] = 1.0
    X0 = X.copy()
    X0[:, 0] = 0.0
    return q, X, X1, X0


def stage2_arms(Z, C, ys, alpha, g_z: float = G_Z):
    """Targeted arm-specific values and clinic-level influence curves."""
    Z = np.asarray(Z, dtype=float)
    q, X, X1, X0 = _working_fit(Z, C, ys, alpha)
    qz, q1, q0 = q.predict(X), q.predict(X1), q.predict(X0)
    H1 = Z / g_z
    H0 = (1.0 - Z) / (1.0 - g_z)
    eps = fluctuate(logit(qz), np.column_stack([H1, H0]), ys, weights=alpha)
    q1s = expit(logit(q1) + eps[0] / g_z)
    q0s = expit(logit(q0) + eps[1] / (1.0 - g_z))
    qzs = np.where(Z == 1, q1s, q0s)
    psi1 = float(np.mean(alpha * q1s))
    psi0 = float(np.mean(alpha * q0s))
    ic1 = alpha * (H1 * (ys - qzs) + q1s) - psi1
    ic0 = alpha * (H0 * (ys - qzs) + q0s) - psi0
    return psi1, psi0, ic1, ic0, q.flags


def stage2_effect(endpoints: Sequence[ClinicEndpoint], clinics: pd.DataFrame | None = None,
                  selected: str = "none", weights: str = "equal", scale: str = "risk_ratio", *,
                  bounds=None, sided: str = "one", direction: str = "increase",
                  level: float = 0.95) -> EffectEstimate:
    """Clinic-level TMLE contrast of arms with adjustment ``selected``.

    ``bounds=(a, b)`` declares the range of a continuous endpoint; the
    targeting runs on the rescaled [0, 1] values and the arm estimates are
    reported on the original scale.
    """
    endpoints = sorted(endpoints, key=lambda e: e.clinic_id)
    N = len(endpoints)
    Z = np.array([e.arm for e in endpoints], dtype=float)
    if not ((Z == 1).any() and (Z == 0).any()):
        raise EstimationError("both arms need at least one clinic")
    if N < 3:
        raise EstimationError("need at least three clinics for N - 2 degrees of freedom")
    alpha = clinic_weights(endpoints, weights)
    ys, a, span = _scaled(endpoints, bounds)
    check_ratio_arms(ys[Z == 1], ys[Z == 0], scale)
    C = _candidate_matrix(endpoints, clinics, selected)
    psi1, psi0, ic1, ic0, qflags = stage2_arms(Z, C, ys, alpha)
    n_obs = int(sum(e.n_included for e in endpoints))
    return effect_from_ic(a + span * psi1, a + span * psi0, span * ic1, span * ic0, scale, N - 2,
                          sided=sided, direction=direction, level=level, selected=selected,
                          weights=weights, estimator="two_stage", n_clusters=N, n_obs=n_obs,
                          flags=qflags)


def _loo_ic(Z, C, ys, alpha, scale, g_z=G_Z):
    """Held-out influence values: clinic ``i`` scored by a fit without it."""
    N = Z.size
    out = np.empty(N)
    for i in range(N):
        tr = np.arange(N) != i
        if not ((Z[tr] == 1).any() and (Z[tr] == 0).any()):
            return None
        q, X, X1, X0 = _working_fit(Z[tr], C[tr], ys[tr], alpha[tr])
        p1_tr = q.predict(X1)
        p0_tr = q.predict(X0)
        psi1 = float(np.sum(alpha[tr] * p1_tr) / np.sum(alpha[tr]))
        psi0 = float(np.sum(alpha[tr] * p0_tr) / np.sum(alpha[tr]))
        xi = np.concatenate([[Z[i]], C[i]])[None, :]
        x1 = xi.copy()
        x1[0, 0] = 1.0
        x0 = xi.copy()
        x0[0, 0] = 0.0
        qz, q1, q0 = q.predict(xi)[0], q.predict(x1)[0], q.predict(x0)[0]
        ic1 = alpha[i] * (Z[i] / g_z * (ys[i] - qz) + q1) - psi1
        ic0 = alpha[i] * ((1 - Z[i]) / (1 - g_z) * (ys[i] - qz) + q0) - psi0
        if scale == "risk_ratio":
            if psi1 <= 0 or psi0 <= 0:
                return None
            out[i] = ic1 / psi1 - ic0 / psi0
        else:
            out[i] = ic1 - ic0
    return out


def adaptive_prespec(endpoints: Sequence[ClinicEndpoint], clinics: pd.DataFrame | None,
                     candidates: Sequence[str] = ("none",) + CLINIC_CANDIDATES,
                     scale: str = "risk_ratio", weights: str = "equal", bounds=None):
    """Clinic covariate minimizing the leave-one-out CV influence-curve variance.

    For each candidate, clinic ``i`` is held out, the working regression of
    ``Y`` on arm + candidate is fit on the remaining clinics, and the squared
    influence value of clinic ``i`` is recorded; the score is their mean.
    Constant candidates are skipped.  Ties go to ``"none"``, then to the
    earliest candidate.

    Returns ``(selected, {candidate: cv_variance})``.
    """
    allowed = {"none", "both", *CLINIC_CANDIDATES}
    bad = [c for c in candidates if c not in allowed]
    if bad:
        raise ValueError(f"candidates outside the prespecified set: {bad}")
    endpoints = sorted(endpoints, key=lambda e: e.clinic_id)
    N = len(endpoints)
    if N < 4:
        raise EstimationError("adaptive pre-specification needs at least four clinics")
    Z = np.array([e.arm for e in endpoints], dtype=float)
    alpha = clinic_weights(endpoints, weights)
    ys, _, _ = _scaled(endpoints, bounds)
    cands = list(candidates) if "none" in candidates else ["none", *candidates]
    scores: dict[str, float] = {}
    for label in cands:
        C = _candidate_matrix(endpoints, clinics, label)
        if C.shape[1] and np.any(np.ptp(C, axis=0) == 0):
            log.info("candidate %s is constant across clinics; skipped", label)
            continue
        ic = _loo_ic(Z, C, ys, alpha, scale)
        if ic is None:
            log.info("candidate %s not evaluable under leave-one-out; skipped", label)
            continue
        scores[label] = float(np.mean(ic ** 2))
    if not scores:
        return "none", scores
    return _argmin_with_ties(scores), scores


def two_stage_effect(endpoints: Sequence[ClinicEndpoint], clinics: pd.DataFrame | None = None, *,
                     adaptive: bool = True,
                     candidates: Sequence[str] = ("none",) + CLINIC_CANDIDATES,
                     weights: str = "equal", scale: str = "risk_ratio", bounds=None,
                     sided: str = "one", direction: str = "increase", level: float = 0.95):
    """Stage 2 with (optionally) adaptive choice of the clinic covariate.

    Returns ``(EffectEstimate, cv_scores)``.
    """
    scores: dict[str, float] = {}
    selected = "none"
    if adaptive and clinics is not None and len(endpoints) >= 4:
        selected, scores = adaptive_prespec(endpoints, clinics, candidates, scale, weights, bounds)
    est = stage2_effect(endpoints, clinics, selected, weights, scale, bounds=bounds, sided=sided,
                        direction=direction, level=level)
    return est, scores
