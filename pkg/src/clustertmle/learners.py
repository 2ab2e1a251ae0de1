"""Prediction learners for TMLE nuisance regressions.

Three base learners (logistic GLM, natural-spline GAM, mean) and a
cross-validated convex ensemble over them.  All predictions are bounded to
``[PRED_LO, PRED_HI]`` so downstream clever covariates stay finite.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from . import kernels

log = logging.getLogger(__name__)

PRED_LO, PRED_HI = 0.005, 0.995
SEPARATION_RIDGE = 1e-4
GAM_RIDGE = 1e-4
MAX_ITER = 100
COEF_TOL = 1e-8


def bound(p):
    return np.clip(p, PRED_LO, PRED_HI)


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def expit(x):
    x = np.asarray(x, dtype=float)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def bernoulli_risk(y, p):
    """Mean negative Bernoulli log-likelihood with bounded predictions."""
    p = bound(p)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


# --------------------------------------------------------------------------
# design matrices


@dataclass(frozen=True)
class DesignMatrix:
    """Encoded covariates.  The intercept is implicit: learners add it."""

    values: np.ndarray
    names: tuple[str, ...]
    continuous: np.ndarray  # bool per column; eligible for spline expansion
    dropped: tuple[str, ...] = ()

    @property
    def shape(self):
        return self.values.shape


def make_design(frame: pd.DataFrame, columns: Sequence[str], warn: bool = True) -> DesignMatrix:
    """Encode ``columns`` of ``frame`` into a float design.

    Categorical (object / category / bool-with-labels) columns become one-hot
    indicators with the first sorted level as reference; numeric columns with
    more than two distinct values are standardized.  Missing values are
    imputed (mode / median) with an added ``<col>_missing`` indicator.
    Constant and linearly dependent columns are dropped, with a warning
    unless ``warn`` is false.
    """
    n = len(frame)
    cols: list[np.ndarray] = []
    names: list[str] = []
    cont: list[bool] = []
    for c in columns:
        s = frame[c]
        miss = s.isna().to_numpy()
        numeric = pd.api.types.is_numeric_dtype(s) and not pd.api.types.is_bool_dtype(s)
        if pd.api.types.is_bool_dtype(s):
            s = s.astype(float)
            numeric = True
        if numeric:
            v = s.to_numpy(dtype=float)
            if miss.any():
                fill = np.nanmedian(v) if (~miss).any() else 0.0
                v = np.where(miss, fill, v)
            distinct = np.unique(v)
            if distinct.size > 2:
                sd = v.std()
                v = (v - v.mean()) / sd if sd > 0 else v - v.mean()
                cont.append(True)
            else:
                cont.append(False)
            cols.append(v)
            names.append(c)
        else:
            v = s.to_numpy(dtype=object)
            if miss.any():
                v = v.copy()
                observed = pd.Series(v[~miss])
                v[miss] = observed.value_counts().sort_index().idxmax() if observed.size else None
            levels = sorted({x for x in v if x is not None}, key=str)
            for lev in levels[1:]:
                cols.append((v == lev).astype(float))
                names.append(f"{c}={lev}")
                cont.append(False)
        if miss.any():
            cols.append(miss.astype(float))
            names.append(f"{c}_missing")
            cont.append(False)
    X = np.column_stack(cols) if cols else np.empty((n, 0))
    keep, dropped = _independent_columns(X, names)
    if dropped:
        (log.warning if warn else log.debug)("dropping constant or collinear design columns: %s", ", ".join(dropped))
    return DesignMatrix(np.ascontiguousarray(X[:, keep]), tuple(np.array(names, dtype=object)[keep]),
                        np.array(cont, dtype=bool)[keep], tuple(dropped))


def _independent_columns(X, names):
    """Greedy rank check with the intercept included first."""
    n = X.shape[0]
    keep: list[int] = []
    dropped: list[str] = []
    basis = np.ones((n, 1))
    for j in range(X.shape[1]):
        x = X[:, j]
        if n == 0 or np.ptp(x) == 0:
            dropped.append(names[j])
            continue
        trial = np.column_stack([basis, x])
        if np.linalg.matrix_rank(trial, tol=1e-9 * max(1.0, np.abs(trial).max()) * n) < trial.shape[1]:
            dropped.append(names[j])
            continue
        basis = trial
        keep.append(j)
    return np.array(keep, dtype=int), dropped


def _as_matrix(X):
    if isinstance(X, DesignMatrix):
        return X.values
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    return X


# --------------------------------------------------------------------------
# base learners


@dataclass(frozen=True)
class FittedLearner:
    kind: str
    coef: np.ndarray
    converged: bool = True
    n_iter: int = 0
    flags: tuple[str, ...] = ()
    basis: object = None

    def linear_predictor(self, X, offset=None):
        X = _as_matrix(X)
        if self.kind == "mean":
            eta = np.full(X.shape[0], self.coef[0])
        else:
            Z = self.basis(X) if self.basis is not None else X
            eta = self.coef[0] + Z @ self.coef[1:]
        return eta if offset is None else eta + offset

    def predict(self, X, offset=None):
        return bound(expit(self.linear_predictor(X, offset)))


def _with_intercept(X):
    return np.ascontiguousarray(np.column_stack([np.ones(X.shape[0]), X]))


def _collapse(X, y, w):
    """Merge rows sharing a covariate pattern (summed weights, weighted mean
    outcome).  The logistic likelihood is unchanged, so the MLE is too."""
    n, p = X.shape
    if n < 64:
        return X, y, w
    codes = np.zeros(n, dtype=np.int64)
    radix = 1
    for j in range(p):
        lev, c = np.unique(X[:, j], return_inverse=True)
        radix *= lev.size
        if 4 * lev.size > n or radix > 2 ** 40:
            return X, y, w
        codes = codes * lev.size + c.ravel()
    _, first, inv = np.unique(codes, return_index=True, return_inverse=True)
    if 4 * first.size > n:
        return X, y, w
    inv = inv.ravel()
    wg = np.bincount(inv, weights=w, minlength=first.size)
    yg = np.bincount(inv, weights=w * y, minlength=first.size) / wg
    return np.ascontiguousarray(X[first]), yg, wg


def fit_glm(X, y, ridge: float = 0.0, weights=None, offset=None) -> FittedLearner:
    """Main-terms logistic regression fitted by IRLS.

    ``y`` is binary (fractional values in [0, 1] are accepted and fitted by
    quasi-likelihood).  Non-convergence or a singular information matrix is
    treated as separation: the fit is redone with ridge ``1e-4`` on the slopes
    and flagged ``"separation"``.  A constant outcome gives an intercept-only
    fit at the bounded empirical logit.
    """
    X = _as_matrix(X)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    if n == 0:
        raise ValueError("fit_glm needs at least one observation")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    if offset is None and np.ptp(y) == 0:
        coef = np.zeros(p + 1)
        coef[0] = logit(bound(np.average(y, weights=w)))
        return FittedLearner("glm", coef, True, 0, ("constant_outcome",))
    if offset is None:
        X, y, w = _collapse(X, y, w)
        off = np.zeros(X.shape[0])
    Xi = _with_intercept(X)
    flags: tuple[str, ...] = ()
    pen = np.full(p + 1, ridge)
    pen[0] = 0.0
    try:
        beta, conv, it = kernels.irls(Xi, y, w, off, pen, MAX_ITER, COEF_TOL)
    except np.linalg.LinAlgError:
        beta, conv, it = None, False, MAX_ITER
    if not conv and ridge < SEPARATION_RIDGE:
        pen[1:] = SEPARATION_RIDGE
        flags = ("separation",)
        beta, conv, it = kernels.irls(Xi, y, w, off, pen, MAX_ITER, COEF_TOL)
    return FittedLearner("glm", np.asarray(beta), bool(conv), int(it), flags)


def fit_mean(y, weights=None) -> FittedLearner:
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        raise ValueError("fit_mean needs at least one observation")
    m = np.average(y, weights=weights)
    return FittedLearner("mean", np.array([logit(bound(m))]))


class _InteractionBasis:
    def __init__(self, p):
        self.pairs = [(i, j) for i in range(p) for j in range(i + 1, p)]

    def __call__(self, X):
        if not self.pairs:
            return X
        extra = np.column_stack([X[:, i] * X[:, j] for i, j in self.pairs])
        return np.column_stack([X, extra])


def fit_glm_interaction(X, y, ridge: float = 0.0) -> FittedLearner:
    """Logistic GLM with all pairwise products of the columns."""
    X = _as_matrix(X)
    basis = _InteractionBasis(X.shape[1])
    Z = basis(X)
    keep, _ = _independent_columns(Z, [str(i) for i in range(Z.shape[1])])
    sel = _Select(basis, keep)
    fit = fit_glm(sel(X), y, ridge=ridge)
    return FittedLearner("glm_interaction", fit.coef, fit.converged, fit.n_iter, fit.flags, sel)


class _Select:
    def __init__(self, inner, keep):
        self.inner, self.keep = inner, keep

    def __call__(self, X):
        Z = self.inner(X) if self.inner is not None else X
        return Z[:, self.keep]


def natural_spline_columns(x, knots):
    """Truncated-power natural cubic spline basis, without the constant.

    With K knots this returns K - 1 columns: ``x`` followed by K - 2
    nonlinear terms that are linear beyond the boundary knots.
    """
    x = np.asarray(x, dtype=float)
    K = len(knots)
    if K < 2:
        return np.empty((x.size, 0))
    cols = [x]
    last = knots[-1]

    def d(k):
        return (np.maximum(x - knots[k], 0.0) ** 3 - np.maximum(x - last, 0.0) ** 3) / (last - knots[k])

    d_penult = d(K - 2)
    for k in range(K - 2):
        cols.append(d(k) - d_penult)
    return np.column_stack(cols)


class SplineBasis:
    """Expands continuous columns into natural spline columns; standardizes them."""

    def __init__(self, X, continuous, spline_df):
        self.continuous = np.asarray(continuous, dtype=bool)
        self.knots: dict[int, np.ndarray] = {}
        self.reduced = False
        n_knots = spline_df + 1
        for j in np.flatnonzero(self.continuous):
            x = X[:, j]
            k = np.unique(np.quantile(x, np.linspace(0.0, 1.0, n_knots)))
            if k.size < n_knots:
                self.reduced = True
            self.knots[j] = k
        raw = self._raw(X)
        self.center = raw.mean(axis=0) if raw.shape[0] else np.zeros(raw.shape[1])
        sd = raw.std(axis=0) if raw.shape[0] else np.ones(raw.shape[1])
        self.scale = np.where(sd > 0, sd, 1.0)
        self.keep = np.flatnonzero(sd > 0)

    def _raw(self, X):
        parts = []
        for j in range(X.shape[1]):
            if j in self.knots:
                parts.append(natural_spline_columns(X[:, j], self.knots[j]))
            else:
                parts.append(X[:, j:j + 1])
        return np.column_stack(parts) if parts else np.empty((X.shape[0], 0))

    def __call__(self, X):
        Z = (self._raw(X) - self.center) / self.scale
        return Z[:, self.keep]


def fit_gam(X, y, spline_df: int = 4, continuous=None) -> FittedLearner:
    """Additive logistic model: natural cubic splines on continuous columns.

    Each continuous column gets ``spline_df + 1`` quantile knots (boundary
    knots at the extremes), i.e. ``spline_df`` basis columns; the expanded
    design is fitted with ridge ``1e-4``.  With no continuous columns this is
    exactly :func:`fit_glm`.
    """
    if continuous is None:
        continuous = X.continuous if isinstance(X, DesignMatrix) else None
    X = _as_matrix(X)
    if continuous is None:
        continuous = np.array([np.unique(X[:, j]).size > 2 for j in range(X.shape[1])], dtype=bool)
    continuous = np.asarray(continuous, dtype=bool)
    if not continuous.any():
        g = fit_glm(X, y)
        return FittedLearner("gam", g.coef, g.converged, g.n_iter, g.flags, g.basis)
    basis = SplineBasis(X, continuous, spline_df)
    g = fit_glm(basis(X), y, ridge=GAM_RIDGE)
    flags = g.flags + (("knots_reduced",) if basis.reduced else ())
    return FittedLearner("gam", g.coef, g.converged, g.n_iter, flags, basis)


def fit_candidate(kind: str, X, y, continuous=None) -> FittedLearner:
    if kind == "glm":
        return fit_glm(X, y)
    if kind == "gam":
        return fit_gam(X, y, continuous=continuous)
    if kind == "mean":
        return fit_mean(y)
    if kind == "glm_interaction":
        return fit_glm_interaction(X, y)
    raise ValueError(f"unknown learner {kind!r}")


# --------------------------------------------------------------------------
# Super Learner


@dataclass(frozen=True)
class LearnerSpec:
    """Which candidates to combine and how.

    ``method`` is ``"convex"`` (simplex-weighted ensemble) or ``"discrete"``
    (pick the single best candidate by CV risk).
    """

    candidates: tuple[str, ...] = ("glm", "gam", "mean")
    folds: int = 10
    seed: int = 0
    method: str = "convex"


@dataclass(frozen=True)
class EnsembleModel:
    candidates: tuple[str, ...]
    learners: tuple[FittedLearner, ...]
    weights: np.ndarray
    cv_risk: np.ndarray
    ensemble_cv_risk: float
    folds: int
    seed: int
    flags: tuple[str, ...] = field(default=())

    def predict(self, X):
        X = _as_matrix(X)
        p = np.zeros(X.shape[0])
        for w, m in zip(self.weights, self.learners):
            if w > 0:
                p += w * m.predict(X)
        return bound(p)


def stratified_folds(y, V: int, seed: int) -> np.ndarray:
    """Seeded fold labels balanced within outcome strata (``y >= 0.5``)."""
    y = np.asarray(y, dtype=float)
    n = y.size
    rng = np.random.default_rng(seed)
    folds = np.empty(n, dtype=np.int64)
    strata = y >= 0.5
    start = 0
    for s in (False, True):
        idx = rng.permutation(np.flatnonzero(strata == s))
        folds[idx] = (np.arange(idx.size) + start) % V
        start += idx.size
    return folds


def super_learner(X, y, candidates: Sequence[str] = ("glm", "gam", "mean"), V: int = 10,
                  seed: int = 0, method: str = "convex", continuous=None) -> EnsembleModel:
    """Cross-validated ensemble of candidate learners.

    Held-out predictions from ``V`` stratified folds give each candidate's CV
    risk (mean Bernoulli NLL).  Convex weights are then chosen to minimize the
    CV risk of the combined prediction, starting from the best single
    candidate, and every candidate is refit on the full data.  ``V`` larger
    than the sample size falls back to leave-one-out.
    """
    if not candidates:
        raise ValueError("super_learner needs at least one candidate")
    if V < 2:
        raise ValueError("V must be at least 2")
    if continuous is None and isinstance(X, DesignMatrix):
        continuous = X.continuous
    X = _as_matrix(X)
    y = np.asarray(y, dtype=float)
    n = y.size
    flags: tuple[str, ...] = ()
    if n < V:
        V = n
        flags = ("leave_one_out",)
    K = len(candidates)
    Z = np.empty((n, K))
    if n >= 2:
        folds = stratified_folds(y, V, seed)
        for v in range(V):
            test = folds == v
            train = ~test
            for k, kind in enumerate(candidates):
                m = fit_candidate(kind, X[train], y[train], continuous)
                Z[test, k] = m.predict(X[test])
    else:
        Z[:] = bound(y.mean())
    risks = np.array([bernoulli_risk(y, Z[:, k]) for k in range(K)])
    best = int(np.argmin(risks))
    w0 = np.zeros(K)
    w0[best] = 1.0
    if K == 1 or method == "discrete":
        w = w0
    elif method == "convex":
        w = kernels.simplex_weights(np.ascontiguousarray(Z), y, w0, 1e-8, 1000)
    else:
        raise ValueError(f"unknown ensemble method {method!r}")
    ens_risk = bernoulli_risk(y, Z @ w)
    if ens_risk > risks[best]:
        w, ens_risk = w0, risks[best]
    learners = tuple(fit_candidate(kind, X, y, continuous) for kind in candidates)
    return EnsembleModel(tuple(candidates), learners, w, risks, float(ens_risk), V, seed, flags)


def fit_learner(spec: LearnerSpec, X, y, continuous=None) -> EnsembleModel:
    return super_learner(X, y, spec.candidates, spec.folds, spec.seed, spec.method, continuous)
