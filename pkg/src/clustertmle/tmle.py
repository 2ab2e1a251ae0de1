"""Targeted minimum loss-based estimators for point-treatment targets.

* :func:`tmle_mean_missing` -- mean of an outcome subject to missingness.
* :func:`tmle_sequential` -- the same with a post-baseline covariate (e.g.
  outmigration) between baseline and measurement.
* :func:`tmle_effect_individual` -- pooled individual-level arm contrast with
  cluster-aggregated influence curves.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .inference import EffectEstimate, EstimationError, check_ratio_arms, effect_from_ic
from .learners import (LearnerSpec, DesignMatrix, _as_matrix, bound, expit, fit_glm,
                       fit_learner, logit)

log = logging.getLogger(__name__)

G_LO, G_HI = 0.025, 0.975
FLUCTUATION_RIDGE = 1e-6


@dataclass(frozen=True)
class TmleFit:
    """A targeted estimate with its per-observation influence curve."""

    estimate: float
    ic: np.ndarray
    epsilon: np.ndarray
    g_min: float = 1.0
    g_max: float = 1.0
    n_truncated: int = 0
    flags: tuple[str, ...] = field(default=())

    @property
    def se(self) -> float:
        from .inference import ic_se
        return ic_se(self.ic)[0] if self.ic.size > 1 else float("nan")


def fluctuate(offset, H, y, weights=None) -> np.ndarray:
    """Logistic fluctuation ``logit Q* = offset + H @ eps`` fitted by MLE.

    Columns of ``H`` that are identically zero get ``eps = 0``.  Solves the
    score ``sum w H (y - Q*) = 0`` to Newton precision.
    """
    H = _as_matrix(H)
    n, k = H.shape
    eps = np.zeros(k)
    active = np.flatnonzero(np.any(H != 0, axis=0))
    if n == 0 or active.size == 0:
        return eps
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    Ha = np.ascontiguousarray(H[:, active])
    y = np.asarray(y, dtype=float)
    offset = np.asarray(offset, dtype=float)
    try:
        beta, conv, _ = kernels.irls(Ha, y, w, offset, np.zeros(active.size), 500, 1e-12)
    except np.linalg.LinAlgError:
        conv = False
    if not conv:
        # outcome at a boundary (e.g. all ones): the MLE diverges, so shrink
        log.debug("fluctuation did not converge; refitting with ridge %g", FLUCTUATION_RIDGE)
        beta, _, _ = kernels.irls(Ha, y, w, offset, np.full(active.size, FLUCTUATION_RIDGE),
                                  500, 1e-12)
    eps[active] = beta
    return eps


def _bounded_g(model_pred):
    g = np.clip(model_pred, G_LO, G_HI)
    return g, int(np.sum((model_pred < G_LO) | (model_pred > G_HI)))


def _scale(y, bounds):
    if bounds is None:
        return np.asarray(y, dtype=float), 0.0, 1.0
    a, b = bounds
    return (np.asarray(y, dtype=float) - a) / (b - a), a, b - a


def tmle_mean_missing(W, delta, y, learners: LearnerSpec = LearnerSpec(), bounds=None) -> TmleFit:
    """Mean of ``y`` when it is only observed where ``delta == 1``.

    Outcome regression E[Y | delta=1, W] and measurement probability
    P(delta=1 | W) are fitted with ``learners``; the latter is bounded to
    [0.025, 0.975] unless every row is measured (then it is exactly 1).
    ``bounds=(a, b)`` rescales a continuous outcome to [0, 1] for targeting
    and back afterwards.
    """
    delta = np.asarray(delta, dtype=float)
    obs = delta == 1
    if not obs.any():
        raise EstimationError("no measured outcomes: the mean cannot be estimated")
    Wm = _as_matrix(W) if W is not None else np.empty((delta.size, 0))
    cont = W.continuous if isinstance(W, DesignMatrix) else None
    ys, a, span = _scale(np.where(obs, y, 0.0), bounds)
    q_model = fit_learner(learners, Wm[obs], ys[obs], cont)
    qbar = q_model.predict(Wm)
    flags: tuple[str, ...] = ()
    if obs.all():
        g = np.ones(delta.size)
        n_trunc = 0
    else:
        g, n_trunc = _bounded_g(fit_learner(learners, Wm, delta, cont).predict(Wm))
        if n_trunc:
            flags += ("g_truncated",)
    H = 1.0 / g
    eps = fluctuate(logit(qbar[obs]), H[obs], ys[obs])
    qstar = expit(logit(qbar) + eps[0] * H)
    psi = float(qstar.mean())
    ic = delta * H * (ys - qstar) + qstar - psi
    return TmleFit(a + span * psi, span * ic, eps, float(g.min()), float(g.max()), n_trunc, flags)


def tmle_sequential(W, M, delta, y, learners: LearnerSpec = LearnerSpec(), bounds=None) -> TmleFit:
    """Mean of ``y`` with a post-baseline covariate ``M`` preceding measurement.

    Inner step: targeted E[Y | delta=1, W, M] with clever covariate
    1 / P(delta=1 | W, M).  Outer step: regression of the targeted inner
    prediction on ``W`` followed by an intercept fluctuation.  The estimate
    is the mean of the outer prediction; the influence curve sums both
    steps' contributions.
    """
    delta = np.asarray(delta, dtype=float)
    obs = delta == 1
    if not obs.any():
        raise EstimationError("no measured outcomes: the mean cannot be estimated")
    n = delta.size
    Wm = _as_matrix(W) if W is not None else np.empty((n, 0))
    M = np.asarray(M, dtype=float).reshape(n, -1)
    WM = np.column_stack([Wm, M])
    keep = np.ptp(WM, axis=0) > 0 if n else np.zeros(WM.shape[1], bool)
    WM = WM[:, keep]
    Wk = Wm[:, np.ptp(Wm, axis=0) > 0] if Wm.shape[1] and n else Wm
    ys, a, span = _scale(np.where(obs, y, 0.0), bounds)

    q2 = fit_learner(learners, WM[obs], ys[obs]).predict(WM)
    flags: tuple[str, ...] = ()
    if obs.all():
        g = np.ones(n)
        n_trunc = 0
    else:
        g, n_trunc = _bounded_g(fit_learner(learners, WM, delta).predict(WM))
        if n_trunc:
            flags += ("g_truncated",)
    H = 1.0 / g
    eps2 = fluctuate(logit(q2[obs]), H[obs], ys[obs])
    q2star = expit(logit(q2) + eps2[0] * H)

    q1 = fit_learner(learners, Wk, q2star).predict(Wk)
    eps1 = fluctuate(logit(q1), np.ones((n, 1)), q2star)
    q1star = expit(logit(q1) + eps1[0])
    psi = float(q1star.mean())
    ic = delta * H * (ys - q2star) + (q2star - q1star) + (q1star - psi)
    return TmleFit(a + span * psi, span * ic, np.concatenate([eps2, eps1]), float(g.min()),
                   float(g.max()), n_trunc, flags)


def cluster_ic(ic, cluster):
    """Aggregate per-observation influence values to one value per cluster.

    Returns ``(J / n) * sum_{i in j} ic_i`` per cluster ``j``, which has the
    same mean as ``ic`` and whose sample variance over clusters, divided by
    ``J``, estimates the variance of the pooled estimator.
    """
    _, inv = np.unique(np.asarray(cluster), return_inverse=True)
    J = inv.max() + 1
    return np.bincount(inv, weights=ic, minlength=J) * J / ic.size


@dataclass(frozen=True)
class PointTreatmentFit:
    psi1: float
    psi0: float
    ic1: np.ndarray
    ic0: np.ndarray
    epsilon: np.ndarray
    flags: tuple[str, ...] = ()


def tmle_point_treatment(W, Z, y, delta=None, g_z=0.5, learners: LearnerSpec | None = None,
                         adjust_missing: bool = False, bounds=None) -> PointTreatmentFit:
    """Targeted E[Y(1)] and E[Y(0)] for a binary exposure ``Z``.

    ``g_z`` is the known P(Z=1) (a randomized design) or ``None`` to estimate
    it by logistic regression on ``W``.  Without ``learners`` the outcome
    regression is a main-terms GLM of Y on (Z, W).  Rows with ``delta == 0``
    lack an outcome; with ``adjust_missing`` their absence is modelled by
    P(delta=1 | Z, W), otherwise they are dropped (complete case).
    """
    Z = np.asarray(Z, dtype=float)
    n = Z.size
    Wm = _as_matrix(W) if W is not None else np.empty((n, 0))
    if delta is None:
        delta = np.ones(n)
    delta = np.asarray(delta, dtype=float)
    y = np.where(delta == 1, np.asarray(y, dtype=float), 0.0)
    if not adjust_missing and not (delta == 1).all():
        keep = delta == 1
        Z, Wm, y, delta = Z[keep], Wm[keep], y[keep], delta[keep]
        n = Z.size
    if not ((Z == 1).any() and (Z == 0).any()):
        raise EstimationError("both exposure levels must be present")
    obs = delta == 1
    ys, a, span = _scale(y, bounds)
    X = np.column_stack([Z, Wm])
    X1 = X.copy()
    X1[:, 0] = 1.0
    X0 = X.copy()
    X0[:, 0] = 0.0
    if learners is None:
        q = fit_glm(X[obs], ys[obs])
    else:
        q = fit_learner(learners, X[obs], ys[obs])
    qz, q1, q0 = q.predict(X), q.predict(X1), q.predict(X0)

    flags: tuple[str, ...] = ()
    if g_z is None:
        gz, nt = _bounded_g(fit_glm(Wm, Z).predict(Wm) if Wm.shape[1] else np.full(n, Z.mean()))
        if nt:
            flags += ("g_truncated",)
    else:
        gz = np.full(n, float(g_z))
    if adjust_missing and not obs.all():
        gd_model = fit_glm(X, delta) if learners is None else fit_learner(learners, X, delta)
        gd, nt = _bounded_g(gd_model.predict(X))
        gd1, _ = _bounded_g(gd_model.predict(X1))
        gd0, _ = _bounded_g(gd_model.predict(X0))
        if nt:
            flags += ("g_truncated",)
    else:
        gd = gd1 = gd0 = np.ones(n)
    H1 = Z / (gz * gd)
    H0 = (1.0 - Z) / ((1.0 - gz) * gd)
    eps = fluctuate(logit(qz[obs]), np.column_stack([H1, H0])[obs], ys[obs])
    q1s = expit(logit(q1) + eps[0] / (gz * gd1))
    q0s = expit(logit(q0) + eps[1] / ((1.0 - gz) * gd0))
    qzs = np.where(Z == 1, q1s, q0s)
    psi1, psi0 = float(q1s.mean()), float(q0s.mean())
    ic1 = delta * H1 * (ys - qzs) + q1s - psi1
    ic0 = delta * H0 * (ys - qzs) + q0s - psi0
    return PointTreatmentFit(a + span * psi1, a + span * psi0, span * ic1, span * ic0, eps, flags)


def tmle_effect_individual(cluster, W, Z, y, delta=None, target: str = "risk_ratio", *,
                           g_z=0.5, learners: LearnerSpec | None = None, adjust_missing: bool = False,
                           sided: str = "one", direction: str = "increase", selected: str = "none",
                           bounds=None) -> EffectEstimate:
    """Pooled (single-stage) TMLE of an individual-level arm contrast.

    Influence-curve values are aggregated within clusters and the variance is
    taken across clusters, with ``J - 2`` degrees of freedom for ``J``
    clusters.
    """
    cluster = np.asarray(cluster)
    Z = np.asarray(Z, dtype=float)
    c_arm = {}
    for c, z in zip(cluster, Z):
        c_arm.setdefault(c, set()).add(z)
    if not any(1.0 in s for s in c_arm.values()) or not any(0.0 in s for s in c_arm.values()):
        raise EstimationError("an arm has zero clusters")
    if delta is None:
        delta = np.ones(Z.size)
    delta = np.asarray(delta, dtype=float)
    if not adjust_missing:
        keep = delta == 1
        cluster, Z, y, delta = cluster[keep], Z[keep], np.asarray(y)[keep], delta[keep]
        W = None if W is None else _as_matrix(W)[keep]
    obs = delta == 1
    ys = _scale(np.asarray(y, dtype=float)[obs], bounds)[0]
    check_ratio_arms(ys[Z[obs] == 1], ys[Z[obs] == 0], target)
    fit = tmle_point_treatment(W, Z, y, delta, g_z, learners, adjust_missing, bounds)
    ic1 = cluster_ic(fit.ic1, cluster)
    ic0 = cluster_ic(fit.ic0, cluster)
    J = ic1.size
    if J < 3:
        raise EstimationError("need at least three clusters for cluster-level inference")
    return effect_from_ic(fit.psi1, fit.psi0, ic1, ic0, target, J - 2, sided=sided,
                          direction=direction, selected=selected, estimator="single_stage",
                          n_clusters=J, n_obs=int(Z.size), flags=fit.flags, weights="individual")


def _held_out_ic(q, Xte, Zte, yte, g_z, psi1, psi0, scale):
    X1 = Xte.copy()
    X1[:, 0] = 1.0
    X0 = Xte.copy()
    X0[:, 0] = 0.0
    qz, q1, q0 = q.predict(Xte), q.predict(X1), q.predict(X0)
    ic1 = Zte / g_z * (yte - qz) + q1 - psi1
    ic0 = (1.0 - Zte) / (1.0 - g_z) * (yte - qz) + q0 - psi0
    if scale == "risk_ratio":
        return ic1 / psi1 - ic0 / psi0
    return ic1 - ic0


def adaptive_prespec_individual(cluster, Z, y, candidates: dict, scale: str = "risk_ratio",
                                g_z: float = 0.5):
    """Choose the individual-level adjustment set with the smallest
    leave-one-cluster-out cross-validated influence-curve variance.

    ``candidates`` maps a label to a covariate matrix (``None`` or zero
    columns for the unadjusted estimator).  Held-out influence values are
    summed within the held-out cluster, squared, and averaged over clusters.
    Ties go to ``"none"``, then to the earlier candidate.

    Returns ``(label, {label: cv_variance})``.
    """
    cluster = np.asarray(cluster)
    Z = np.asarray(Z, dtype=float)
    y = np.asarray(y, dtype=float)
    n = Z.size
    labels, inv = np.unique(cluster, return_inverse=True)
    J = labels.size
    scores: dict[str, float] = {}
    for name, Wc in candidates.items():
        Wm = np.empty((n, 0)) if Wc is None else _as_matrix(Wc)
        if Wm.shape[1] and np.all(np.ptp(Wm, axis=0) == 0):
            log.info("candidate %s is constant; skipped", name)
            continue
        X = np.column_stack([Z, Wm])
        total = 0.0
        ok = True
        for j in range(J):
            te = inv == j
            tr = ~te
            if not ((Z[tr] == 1).any() and (Z[tr] == 0).any()):
                ok = False
                break
            q = fit_glm(X[tr], y[tr])
            X1 = X[tr].copy()
            X1[:, 0] = 1.0
            X0 = X[tr].copy()
            X0[:, 0] = 0.0
            psi1, psi0 = q.predict(X1).mean(), q.predict(X0).mean()
            ic = _held_out_ic(q, X[te], Z[te], y[te], g_z, psi1, psi0, scale)
            total += (ic.sum() * J / n) ** 2
        if ok:
            scores[name] = total / J
    if not scores:
        return "none", scores
    return _argmin_with_ties(scores), scores


def _argmin_with_ties(scores: dict, rel_tol: float = 1e-12) -> str:
    best = min(scores.values())
    tied = [k for k, v in scores.items() if v <= best + rel_tol * max(abs(best), 1e-300)]
    return "none" if "none" in tied else tied[0]
