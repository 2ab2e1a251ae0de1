"""Numeric inner loops.

Every kernel exists in two forms: ``*_numpy`` (plain numpy, always available)
and the compiled form chosen at import time.  The public names (``irls``,
``km_table``, ``simplex_weights``) point at the compiled form when numba is
active and at the numpy form otherwise.
"""
import numpy as np

from ._accel import USING_NUMBA, jit

__all__ = ["irls", "km_table", "simplex_weights", "USING_NUMBA"]


def _objective(eta, y, w, penalty, beta):
    """Penalized negative log-likelihood and ``exp(-|eta|)`` (reused for mu)."""
    # softplus(eta) - y * eta, overflow-safe
    e = np.exp(-np.abs(eta))
    val = w @ (np.log1p(e) + np.maximum(eta, 0.0) - y * eta) + 0.5 * (penalty @ (beta * beta))
    return float(val), e


def irls_numpy(X, y, w, offset, penalty, max_iter, tol):
    """Penalized logistic (quasi-binomial) regression by Newton/IRLS.

    Minimizes ``sum w * nll(y, expit(X @ b + offset)) + 0.5 * sum(penalty * b**2)``.
    ``y`` may be fractional in [0, 1].  Step halving guards against overshoot
    on near-separable data.

    Returns ``(beta, converged, n_iter)``; convergence is declared when the
    largest accepted coefficient change drops below ``tol``.
    """
    n, p = X.shape
    beta = np.zeros(p)
    eta = offset.copy()
    obj, e = _objective(eta, y, w, penalty, beta)
    diag = np.arange(p)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = np.where(eta >= 0.0, 1.0, e) / (1.0 + e)
        wv = w * mu * (1.0 - mu)
        grad = X.T @ (w * (y - mu)) - penalty * beta
        H = X.T @ (X * wv[:, None])
        H[diag, diag] += penalty
        step = np.linalg.solve(H, grad)
        t = 1.0
        new_beta = beta + step
        new_eta = X @ new_beta + offset
        new_obj, new_e = _objective(new_eta, y, w, penalty, new_beta)
        for _ in range(40):
            if new_obj <= obj + 1e-12 * (1.0 + abs(obj)):
                break
            t *= 0.5
            new_beta = beta + t * step
            new_eta = X @ new_beta + offset
            new_obj, new_e = _objective(new_eta, y, w, penalty, new_beta)
        change = np.max(np.abs(new_beta - beta))
        beta, eta, obj, e = new_beta, new_eta, new_obj, new_e
        if change < tol:
            converged = True
            break
    return beta, converged, it


def irls_loop(X, y, w, offset, penalty, max_iter, tol):
    """Explicit-loop form of :func:`irls_numpy` (the one numba compiles)."""
    n, p = X.shape
    beta = np.zeros(p)
    eta = offset.copy()
    new_eta = np.empty(n)
    grad = np.empty(p)
    H = np.empty((p, p))
    obj = 0.0
    for r in range(n):
        a = eta[r]
        obj += w[r] * (np.log1p(np.exp(-abs(a))) + max(a, 0.0) - y[r] * a)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        grad[:] = 0.0
        H[:, :] = 0.0
        for r in range(n):
            a = eta[r]
            if a >= 0.0:
                mu = 1.0 / (1.0 + np.exp(-a))
            else:
                ea = np.exp(a)
                mu = ea / (1.0 + ea)
            res = w[r] * (y[r] - mu)
            wv = w[r] * mu * (1.0 - mu)
            for j in range(p):
                xj = X[r, j]
                grad[j] += xj * res
                for k in range(j + 1):
                    H[j, k] += xj * X[r, k] * wv
        for j in range(p):
            grad[j] -= penalty[j] * beta[j]
            H[j, j] += penalty[j]
            for k in range(j):
                H[k, j] = H[j, k]
        step = np.linalg.solve(H, grad)
        t = 1.0
        new_obj = 0.0
        for attempt in range(41):
            new_obj = 0.0
            for j in range(p):
                b = beta[j] + t * step[j]
                new_obj += 0.5 * penalty[j] * b * b
            for r in range(n):
                a = offset[r]
                for j in range(p):
                    a += X[r, j] * (beta[j] + t * step[j])
                new_eta[r] = a
                new_obj += w[r] * (np.log1p(np.exp(-abs(a))) + max(a, 0.0) - y[r] * a)
            if new_obj <= obj + 1e-12 * (1.0 + abs(obj)) or attempt == 40:
                break
            t *= 0.5
        change = 0.0
        for j in range(p):
            d = t * step[j]
            beta[j] += d
            change = max(change, abs(d))
        eta[:] = new_eta
        obj = new_obj
        if change < tol:
            converged = True
            break
    return beta, converged, it


def km_table_loop(times, events):
    """Product-limit table from time-sorted data (events before censorings at ties).

    Returns arrays over distinct event times:
    ``(time, surv, n_risk, n_event, greenwood_sum)`` where
    ``greenwood_sum`` is the running sum of d / (n (n - d)).
    """
    n = times.shape[0]
    out_t = np.empty(n)
    out_s = np.empty(n)
    out_r = np.empty(n)
    out_d = np.empty(n)
    out_g = np.empty(n)
    k = 0
    s = 1.0
    g = 0.0
    at_risk = n
    i = 0
    while i < n:
        t = times[i]
        d = 0
        c = 0
        while i < n and times[i] == t:
            if events[i]:
                d += 1
            else:
                c += 1
            i += 1
        if d > 0:
            s *= 1.0 - d / at_risk
            if at_risk > d:
                g += d / (at_risk * (at_risk - d))
            else:
                g = np.inf
            out_t[k] = t
            out_s[k] = s
            out_r[k] = at_risk
            out_d[k] = d
            out_g[k] = g
            k += 1
        at_risk -= d + c
    return out_t[:k], out_s[:k], out_r[:k], out_d[:k], out_g[:k]


def km_table_numpy(times, events):
    """Vectorized equivalent of :func:`km_table_loop`."""
    uniq, inv = np.unique(times, return_inverse=True)
    d = np.bincount(inv, weights=events.astype(np.float64), minlength=uniq.size)
    total = np.bincount(inv, minlength=uniq.size).astype(np.float64)
    n_risk = times.size - np.concatenate(([0.0], np.cumsum(total)[:-1]))
    keep = d > 0
    t, d, r = uniq[keep], d[keep], n_risk[keep]
    s = np.cumprod(1.0 - d / r)
    with np.errstate(divide="ignore"):
        g = np.cumsum(np.where(r > d, d / (r * (r - d)), np.inf))
    return t.astype(np.float64), s, r, d, g


def simplex_weights_loop(Z, y, w0, tol, max_sweeps):
    """Minimize mean Bernoulli NLL of ``Z @ w`` over the probability simplex.

    Pairwise coordinate descent: each move shifts mass between two candidates
    and is solved exactly (bisection on the convex line derivative).  Starts at
    ``w0``; a move is only kept if it lowers the objective, so the result is
    never worse than the start.
    """
    K = Z.shape[1]
    w = w0.copy()
    p = Z @ w
    for _ in range(max_sweeps):
        moved = 0.0
        for i in range(K):
            for j in range(K):
                if i == j:
                    continue
                lo = -w[i]
                hi = w[j]
                if hi - lo <= 0.0:
                    continue
                dz = Z[:, i] - Z[:, j]
                if np.max(np.abs(dz)) == 0.0:
                    continue
                g_lo = np.mean(((1.0 - y) / (1.0 - (p + lo * dz)) - y / (p + lo * dz)) * dz)
                g_hi = np.mean(((1.0 - y) / (1.0 - (p + hi * dz)) - y / (p + hi * dz)) * dz)
                if g_lo >= 0.0:
                    t = lo
                elif g_hi <= 0.0:
                    t = hi
                else:
                    a = lo
                    b = hi
                    for _k in range(100):
                        m = 0.5 * (a + b)
                        gm = np.mean(((1.0 - y) / (1.0 - (p + m * dz)) - y / (p + m * dz)) * dz)
                        if gm > 0.0:
                            b = m
                        else:
                            a = m
                        if b - a < 1e-14:
                            break
                    t = 0.5 * (a + b)
                if t == 0.0:
                    continue
                newp = p + t * dz
                old = -np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
                new = -np.mean(y * np.log(newp) + (1.0 - y) * np.log(1.0 - newp))
                if new < old:
                    w[i] += t
                    w[j] -= t
                    if w[j] < 0.0:
                        w[j] = 0.0
                    p = newp
                    moved = max(moved, abs(t))
        if moved < tol:
            break
    w = np.maximum(w, 0.0)
    return w / np.sum(w)


irls_numba = jit(irls_loop)
km_table_numba = jit(km_table_loop)
simplex_weights_numba = jit(simplex_weights_loop)

# above this many rows numpy's BLAS-backed solve beats the compiled loop
IRLS_NUMBA_MAX_ROWS = 1000


def _irls_dispatch(X, y, w, offset, penalty, max_iter, tol):
    if X.shape[0] <= IRLS_NUMBA_MAX_ROWS:
        return irls_numba(X, y, w, offset, penalty, max_iter, tol)
    return irls_numpy(X, y, w, offset, penalty, max_iter, tol)


if USING_NUMBA:
    irls = _irls_dispatch
    km_table = km_table_numba
    simplex_weights = simplex_weights_numba
else:
    irls = irls_numpy
    km_table = km_table_numpy
    simplex_weights = simplex_weights_loop
