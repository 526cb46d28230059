import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stokes_els import (PRESETS, GmresConfig, ParametricCurve, StokesOperator, build_solver, coarsen, els_build,
                        gmres, panelize, refine, row_id)
from stokes_els.kernels import double_layer, stokeslet
from stokes_els.lowrank import id_error

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)
points = arrays(np.float64, (2,), elements=finite)


@given(points, points, points)
def test_kernels_translation_invariant(x, y, c):
    if np.linalg.norm(x - y) < 1e-3:
        return
    n = np.array([0.8, -0.6])
    np.testing.assert_allclose(stokeslet(x + c, y + c), stokeslet(x, y), atol=1e-11)
    np.testing.assert_allclose(double_layer(x + c, y + c, n), double_layer(x, y, n), atol=1e-8)


@given(points, points, st.floats(0.1, 10))
def test_stokeslet_symmetric_and_scaled(x, y, mu):
    if np.linalg.norm(x - y) < 1e-3:
        return
    S = stokeslet(x, y, mu)
    np.testing.assert_allclose(S, S.T, atol=1e-15)
    np.testing.assert_allclose(S, stokeslet(y, x, mu), atol=1e-15)
    np.testing.assert_allclose(S * mu, stokeslet(x, y), rtol=1e-12, atol=1e-15)


@st.composite
def refinements(draw):
    n_panels = draw(st.integers(12, 20))
    panels = draw(st.lists(st.integers(0, n_panels - 1), max_size=5, unique=True))
    m = draw(st.integers(2, 5))
    kind = draw(st.sampled_from(["circle", "fish", "channel"]))
    return kind, n_panels, sorted(panels), m


@settings(max_examples=40, deadline=None)
@given(refinements())
def test_refine_bookkeeping(case):
    kind, n_panels, panels, m = case
    d = panelize(PRESETS[kind], n_panels)
    d_new, plan = refine(d, panels, m)
    assert np.array_equal(np.sort(np.r_[plan.idx_k_old, plan.idx_c_old]), np.arange(d.N))
    assert np.array_equal(np.sort(np.r_[plan.idx_k_new, plan.idx_p_new]), np.arange(d_new.N))
    assert plan.N_p == m * plan.N_c
    assert np.array_equal(d.nodes[plan.idx_k_old], d_new.nodes[plan.idx_k_new])
    # both meshes resolve the perimeter, so refinement leaves it unchanged
    assert abs(d_new.weights.sum() - d.weights.sum()) <= 1e-9 * d.weights.sum()
    d_back, _ = coarsen(d_new, plan)
    assert np.array_equal(d_back.nodes, d.nodes)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 7), st.floats(0.0, 0.4), st.floats(0.2, 3.0))
def test_star_discretization_invariants(n_prongs, amp, scale):
    d = panelize(ParametricCurve("star", (n_prongs, amp), scale=scale), 12 + 2 * n_prongs)
    np.testing.assert_allclose(np.linalg.norm(d.normals, axis=1), 1.0, atol=1e-14)
    assert np.max(np.abs(np.einsum("ij,ij->i", d.normals, d.tangents))) <= 1e-14
    assert d.weights.min() > 0


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 2 ** 31 - 1))
def test_row_id_reconstructs_rows(m, n, seed):
    rng = np.random.default_rng(seed)
    k = rng.integers(1, min(m, n) + 1)
    W = rng.standard_normal((m, k)) @ rng.standard_normal((k, n))
    res = row_id(W, 1e-12)
    assert res.k <= min(m, n)
    assert np.array_equal(res.P[res.skel], np.eye(res.k))
    assert id_error(W, res) <= 1e-10


@settings(max_examples=40, deadline=None)
@given(st.integers(5, 40), st.integers(0, 2 ** 31 - 1))
def test_gmres_history_monotone(n, seed):
    rng = np.random.default_rng(seed)
    A = np.eye(n) * 2 + rng.standard_normal((n, n)) / np.sqrt(n)
    b = rng.standard_normal(n)
    res = gmres(A, b, GmresConfig(tol=1e-10, maxiter=4 * n))
    assert np.all(np.diff(res.history) <= 1e-14)
    assert np.linalg.norm(A @ res.x - b) <= 1e-9 * np.linalg.norm(b)


_BASE = panelize(PRESETS["fish"], 12)
_OP = StokesOperator(_BASE)
_SOLVER = build_solver(_OP, 1e-10, leaf_size=32)


@settings(max_examples=12, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.lists(st.integers(0, 11), min_size=1, max_size=3, unique=True), st.integers(2, 4),
       st.integers(0, 2 ** 31 - 1))
def test_els_matches_dense_for_any_refinement(panels, m, seed):
    d_new, plan = refine(_BASE, panels, m)
    op_new = StokesOperator(d_new)
    els = els_build(_SOLVER, _OP, op_new, plan, eps=1e-10)
    g = np.random.default_rng(seed).standard_normal(op_new.n)
    A = op_new.dense()
    t = np.linalg.solve(A, g)
    assert np.linalg.norm(els.solve(g) - t) <= 1e-8 * np.linalg.norm(t) * max(1.0, np.linalg.cond(A) / 1e2)
