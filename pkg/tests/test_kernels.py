import json
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st

from clustertmle import kernels


def _logit_data(n, p, seed):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.normal(size=(n, p))])
    beta = rng.normal(scale=0.7, size=p + 1)
    y = (rng.random(n) < 1 / (1 + np.exp(-X @ beta))).astype(float)
    return X, y


@pytest.mark.parametrize("n", [50, 400, 1500])
def test_irls_forms_agree(n):
    X, y = _logit_data(n, 3, n)
    args = (np.ones(n), np.zeros(n), np.zeros(X.shape[1]), 100, 1e-10)
    b_np, c_np, _ = kernels.irls_numpy(X, y, *args)
    b_loop, c_loop, _ = kernels.irls_loop(X, y, *args)
    b_pub, c_pub, _ = kernels.irls(X, y, *args)
    assert c_np and c_loop and c_pub
    np.testing.assert_allclose(b_loop, b_np, atol=1e-9)
    np.testing.assert_allclose(b_pub, b_np, atol=1e-9)


def test_irls_score_is_zero():
    X, y = _logit_data(300, 2, 1)
    w = np.random.default_rng(2).uniform(0.5, 2, 300)
    off = np.random.default_rng(3).normal(scale=0.2, size=300)
    b, conv, _ = kernels.irls(X, y, w, off, np.zeros(3), 100, 1e-12)
    p = 1 / (1 + np.exp(-(X @ b + off)))
    assert conv
    np.testing.assert_allclose(X.T @ (w * (y - p)), 0, atol=1e-8)


def test_irls_penalty_is_applied():
    X, y = _logit_data(200, 2, 4)
    pen = np.array([0.0, 5.0, 5.0])
    b, _, _ = kernels.irls(X, y, np.ones(200), np.zeros(200), pen, 100, 1e-12)
    p = 1 / (1 + np.exp(-X @ b))
    np.testing.assert_allclose(X.T @ (y - p) - pen * b, 0, atol=1e-8)


@given(st.lists(st.tuples(st.integers(1, 30), st.booleans()), min_size=1, max_size=60))
def test_km_forms_agree(rows):
    t = np.array(sorted(rows, key=lambda r: (r[0], not r[1])), dtype=object)
    times = t[:, 0].astype(float)
    events = t[:, 1].astype(bool)
    a = kernels.km_table_loop(times, events)
    b = kernels.km_table_numpy(times, events)
    c = kernels.km_table(times, events)
    for x, y, z in zip(a, b, c):
        np.testing.assert_allclose(x, y, rtol=1e-12)
        np.testing.assert_allclose(z, y, rtol=1e-12)


def test_simplex_weights_forms_agree():
    rng = np.random.default_rng(0)
    y = (rng.random(300) < 0.4).astype(float)
    Z = np.clip(np.column_stack([0.4 + 0.3 * (y - 0.4) + rng.normal(0, 0.1, 300),
                                 np.full(300, 0.4), rng.uniform(0.05, 0.95, 300)]), 0.01, 0.99)
    w0 = np.array([1.0, 0.0, 0.0])
    a = kernels.simplex_weights_loop(Z, y, w0, 1e-10, 1000)
    b = kernels.simplex_weights(Z, y, w0, 1e-10, 1000)
    np.testing.assert_allclose(a, b, atol=1e-12)
    assert a.min() >= 0 and abs(a.sum() - 1) < 1e-12


def test_simplex_never_worse_than_start():
    rng = np.random.default_rng(1)
    y = (rng.random(100) < 0.5).astype(float)
    Z = rng.uniform(0.05, 0.95, (100, 3))
    w0 = np.array([0.0, 1.0, 0.0])

    def risk(w):
        p = Z @ w
        return -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))

    w = kernels.simplex_weights(Z, y, w0, 1e-10, 1000)
    assert risk(w) <= risk(w0) + 1e-15


def test_irls_dispatch_threshold():
    if not kernels.USING_NUMBA:
        assert kernels.irls is kernels.irls_numpy
        return
    assert kernels.irls is kernels._irls_dispatch
    X, y = _logit_data(kernels.IRLS_NUMBA_MAX_ROWS + 1, 2, 9)
    args = (np.ones(X.shape[0]), np.zeros(X.shape[0]), np.zeros(3), 100, 1e-10)
    np.testing.assert_array_equal(kernels.irls(X, y, *args)[0], kernels.irls_numpy(X, y, *args)[0])


_PROBE = """
import json, numpy as np
from clustertmle import kernels
from clustertmle.learners import fit_glm
rng = np.random.default_rng(0)
X = rng.normal(size=(80, 2)); y = (rng.random(80) < 0.5).astype(float)
t = np.sort(rng.integers(1, 20, 50).astype(float)); e = rng.random(50) < 0.6
print(json.dumps({"numba": kernels.USING_NUMBA,
                  "irls_is_numpy": kernels.irls is kernels.irls_numpy,
                  "coef": fit_glm(X, y).coef.tolist(),
                  "km": kernels.km_table(t, e)[1].tolist()}))
"""


def _probe(disable):
    env = dict(os.environ)
    env.pop("CLUSTERTMLE_DISABLE_NUMBA", None)
    if disable:
        env["CLUSTERTMLE_DISABLE_NUMBA"] = "1"
    out = subprocess.run([sys.executable, "-c", _PROBE], env=env, capture_output=True, text=True,
                         check=True)
    return json.loads(out.stdout)


def test_env_disables_numba_and_results_match():
    off = _probe(True)
    assert off["numba"] is False and off["irls_is_numpy"] is True
    on = _probe(False)
    np.testing.assert_allclose(on["coef"], off["coef"], atol=1e-9)
    np.testing.assert_allclose(on["km"], off["km"], rtol=1e-12)
