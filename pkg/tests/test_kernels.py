import importlib
import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from slotmix import _kernels_py, kernels
from slotmix.evaluation import hungarian


def brute_force(cost):
    n = cost.shape[0]
    best = min(itertools.permutations(range(n)),
               key=lambda p: sum(cost[i, p[i]] for i in range(n)))
    return sum(cost[i, best[i]] for i in range(n))


def reference_log_gaussian(x, mu, var):
    # independent per-element loop over the normal log-density
    b, n, d = x.shape
    k = mu.shape[1]
    out = np.zeros((b, n, k))
    for s in range(b):
        for i in range(n):
            for j in range(k):
                out[s, i, j] = sum(-0.5 * np.log(2 * np.pi * var[s, j, t])
                                   - (x[s, i, t] - mu[s, j, t]) ** 2 / (2 * var[s, j, t])
                                   for t in range(d))
    return out


def test_backend_selected_at_import():
    assert kernels.BACKEND in ("cython", "python")
    if kernels.compiled_backend is None:
        assert kernels.BACKEND == "python"


def test_env_var_forces_python_fallback(monkeypatch):
    monkeypatch.setenv("SLOTMIX_PURE_PYTHON", "1")
    mod = importlib.reload(kernels)
    try:
        assert mod.BACKEND == "python"
        assert mod.hungarian is _kernels_py.hungarian
    finally:
        monkeypatch.delenv("SLOTMIX_PURE_PYTHON")
        importlib.reload(kernels)


def test_log_gaussian_matches_reference(backend, rng):
    x = rng.normal(size=(2, 5, 3))
    mu = rng.normal(size=(2, 4, 3))
    var = rng.uniform(0.2, 3.0, size=(2, 4, 3))
    np.testing.assert_allclose(backend.log_gaussian_fwd(x, mu, var, False),
                               reference_log_gaussian(x, mu, var), rtol=1e-13, atol=1e-13)
    quad = backend.log_gaussian_fwd(x, mu, var, True)
    norm = -0.5 * np.log(2 * np.pi * var).sum(-1)
    np.testing.assert_allclose(quad + norm[:, None, :], reference_log_gaussian(x, mu, var),
                               rtol=1e-13, atol=1e-13)


@pytest.mark.skipif(kernels.compiled_backend is None, reason="compiled backend not built")
def test_backends_agree(rng):
    c, p = kernels.compiled_backend, kernels.python_backend
    x = rng.normal(size=(3, 20, 4))
    mu = rng.normal(size=(3, 5, 4))
    var = rng.uniform(0.1, 2.0, size=(3, 5, 4))
    g = rng.normal(size=(3, 20, 5))
    for quad in (False, True):
        np.testing.assert_allclose(c.log_gaussian_fwd(x, mu, var, quad),
                                   p.log_gaussian_fwd(x, mu, var, quad), rtol=1e-13, atol=1e-12)
        for a, b in zip(c.log_gaussian_bwd(g, x, mu, var, quad),
                        p.log_gaussian_bwd(g, x, mu, var, quad)):
            np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-12)
    for _ in range(50):
        cost = rng.integers(0, 5, size=(6, 6)).astype(float)
        assert brute_force(cost) == sum(cost[i, c.hungarian(cost)[i]] for i in range(6))


@pytest.mark.parametrize("n", range(1, 8))
def test_hungarian_equals_brute_force(backend, n):
    rng = np.random.default_rng(n)
    for _ in range(30 if n < 7 else 5):
        cost = rng.random((n, n))
        assign = hungarian(cost)
        assert sorted(assign.tolist()) == list(range(n))
        assert sum(cost[i, assign[i]] for i in range(n)) == brute_force(cost)


def test_hungarian_matches_scipy_on_larger_problems(backend, rng):
    from scipy.optimize import linear_sum_assignment
    for n in (10, 25, 40):
        cost = rng.normal(size=(n, n))
        rows, cols = linear_sum_assignment(cost)
        assign = hungarian(cost)
        assert cost[np.arange(n), assign].sum() == pytest.approx(cost[rows, cols].sum(), abs=1e-10)


def test_hungarian_rejects_bad_input():
    with pytest.raises(ValueError):
        hungarian(np.ones((2, 3)))
    with pytest.raises(ValueError):
        hungarian(np.array([[0.0, np.nan], [1.0, 2.0]]))
    assert hungarian(np.zeros((0, 0))).shape == (0,)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)).map(lambda t: (t[0], t[0])),
                  elements=st.floats(-100, 100)))
def test_hungarian_is_a_permutation_and_optimal(cost):
    n = cost.shape[0]
    assign = hungarian(cost)
    assert sorted(assign.tolist()) == list(range(n))
    assert sum(cost[i, assign[i]] for i in range(n)) <= brute_force(cost) + 1e-9
