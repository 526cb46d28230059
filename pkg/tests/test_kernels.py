import numpy as np
import pytest

from stokes_els import PRESETS, panelize
from stokes_els.kernels import (KernelSpec, SingularEvaluationError, double_layer, nullspace_term, pressure_kernel,
                                stokeslet, stokeslet_pressure, stokeslet_velocity)

rng = np.random.default_rng(7)


def test_stokeslet_unit_distance():
    S = stokeslet([1.0, 0.0], [0.0, 0.0])
    np.testing.assert_allclose(S, [[1 / (4 * np.pi), 0], [0, 0]], atol=1e-16)


def test_stokeslet_hand_value():
    S = stokeslet([0.0, 2.0], [0.0, 0.0])
    np.testing.assert_allclose(S[1, 1], (1 - np.log(2)) / (4 * np.pi), rtol=1e-15)
    np.testing.assert_allclose(S[0, 0], -np.log(2) / (4 * np.pi), rtol=1e-15)
    assert S[0, 1] == 0


def test_stokeslet_symmetry_and_viscosity():
    x, y = rng.standard_normal((2, 50, 2))
    np.testing.assert_allclose(stokeslet(x, y), stokeslet(y, x), rtol=1e-14)
    np.testing.assert_allclose(stokeslet(x, y, mu=2.5), stokeslet(x, y) / 2.5, rtol=1e-14)


def test_double_layer_hand_value():
    D = double_layer([2.0, 0.0], [0.0, 0.0], [1.0, 0.0])
    np.testing.assert_allclose(D, [[1 / (2 * np.pi), 0], [0, 0]], atol=1e-16)


def test_double_layer_vanishes_for_tangential_separation():
    D = double_layer([0.0, 1.3], [0.0, 0.0], [1.0, 0.0])
    assert np.all(D == 0)


def test_double_layer_trace_identity():
    x, y = rng.standard_normal((2, 40, 2))
    n = rng.standard_normal((40, 2))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    D = double_layer(x, y, n)
    r = x - y
    expect = np.einsum("ij,ij->i", r, n) / (np.pi * np.einsum("ij,ij->i", r, r))
    np.testing.assert_allclose(D[:, 0, 0] + D[:, 1, 1], expect, rtol=1e-13)


def test_kernels_translation_invariant():
    x, y = rng.standard_normal((2, 20, 2))
    n = np.tile([0.6, 0.8], (20, 1))
    c = np.array([3.7, -1.2])
    np.testing.assert_allclose(stokeslet(x + c, y + c), stokeslet(x, y), rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(double_layer(x + c, y + c, n), double_layer(x, y, n), rtol=1e-12, atol=1e-14)


def test_double_layer_decay_slope():
    r = np.logspace(1, 4, 20)
    direction = np.array([0.6, 0.8])
    vals = [np.linalg.norm(double_layer(t * direction, [0.0, 0.0], [1.0, 0.0])) for t in r]
    slope = np.polyfit(np.log(r), np.log(vals), 1)[0]
    assert abs(slope + 1) <= 0.05


def test_pressure_kernels_hand_values():
    np.testing.assert_allclose(pressure_kernel([1.0, 0.0], [0.0, 0.0]), [1 / (2 * np.pi), 0], atol=1e-16)
    P = pressure_kernel([1.0, 0.0], [0.0, 0.0], [0.0, 1.0], mu=1.0, source="double")
    np.testing.assert_allclose(P, [0, -1 / np.pi], atol=1e-16)


def test_stokeslet_field_divergence_free():
    f = np.array([0.3, -1.1])
    h = 1e-4
    pts = rng.uniform(1, 2, (10, 2))
    ex, ey = np.array([h, 0.0]), np.array([0.0, h])
    du = (stokeslet_velocity(pts + ex, [0, 0], f)[:, 0] - stokeslet_velocity(pts - ex, [0, 0], f)[:, 0]) / (2 * h)
    dv = (stokeslet_velocity(pts + ey, [0, 0], f)[:, 1] - stokeslet_velocity(pts - ey, [0, 0], f)[:, 1]) / (2 * h)
    assert np.max(np.abs(du + dv)) <= 1e-8


def test_stokeslet_pair_satisfies_momentum():
    # grad p = mu * laplacian u for the Stokeslet pair, checked by differences
    f = np.array([1.0, 0.5])
    h = 1e-3
    x = np.array([[1.2, 0.7]])
    lap = np.zeros(2)
    for e in (np.array([h, 0.0]), np.array([0.0, h])):
        lap += (stokeslet_velocity(x + e, [0, 0], f) - 2 * stokeslet_velocity(x, [0, 0], f)
                + stokeslet_velocity(x - e, [0, 0], f))[0] / h ** 2
    gp = np.array([(stokeslet_pressure(x + e, [0, 0], f) - stokeslet_pressure(x - e, [0, 0], f))[0] / (2 * h)
                   for e in (np.array([h, 0.0]), np.array([0.0, h]))])
    np.testing.assert_allclose(gp, lap, atol=1e-6)


@pytest.mark.parametrize("fn", [lambda: stokeslet([1, 1], [1, 1]), lambda: double_layer([0, 0], [0, 0], [1, 0]),
                                lambda: pressure_kernel([2, 0], [2, 0])])
def test_coincident_points_raise(fn):
    with pytest.raises(SingularEvaluationError):
        fn()


def test_kernel_spec_validation():
    with pytest.raises(ValueError):
        KernelSpec("double_layer", mu=0.0)
    with pytest.raises(ValueError):
        KernelSpec("unknown")


@pytest.fixture(scope="module")
def circle():
    return panelize(PRESETS["circle"], 20)


def test_nullspace_of_tangent_field(circle):
    assert np.max(np.abs(nullspace_term(circle, circle.tangents.ravel()))) <= 1e-14


def test_nullspace_of_normal_field(circle):
    out = nullspace_term(circle, circle.normals.ravel()).reshape(-1, 2)
    np.testing.assert_allclose(out, 2 * np.pi * circle.normals, atol=1e-12)


def test_nullspace_of_constant_field(circle):
    tau = np.tile([1.0, 0.0], circle.N)
    assert np.max(np.abs(nullspace_term(circle, tau))) <= 1e-13


def test_nullspace_length_mismatch(circle):
    with pytest.raises(ValueError):
        nullspace_term(circle, np.zeros(3))
