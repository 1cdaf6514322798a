import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from contraflow.modulation import (ClassicalModulator, DegenerateMetricError, DistanceFieldGrid, FlatFieldError,
                                   RiemannianModulator, SphereObstacle, XiParams, basis_E, build_distance_field,
                                   calibration_report, gamma, lambdas_classical, modulate, modulate_riemannian,
                                   normal_from_field, recalibrate, tangential_field, xi, xi_normal, xi_tangent)

CENTER = np.array([0.0, 0.0])
RADIUS = 0.5


def bump_metric(z, weight=20.0):
    z = np.asarray(z, dtype=float)
    f = 1.0 + weight * np.exp(-np.sum((z - CENTER) ** 2) / (2 * RADIUS**2))
    return f * np.eye(2)


def circle(n, r=RADIUS, phase=0.0):
    t = phase + 2 * np.pi * np.arange(n) / n
    return CENTER + r * np.stack([np.cos(t), np.sin(t)], axis=1)


@pytest.fixture(scope="module")
def grid():
    return build_distance_field(bump_metric, [-2, 2, -2, 2], 48, 1.0, circle(33))


# --- classical ------------------------------------------------------------------

def test_gamma_and_lambdas():
    obs = SphereObstacle([0.0, 0.0], 1.0)
    assert gamma(obs, [2.0, 0.0]) == 2.0
    with pytest.raises(ValueError):
        gamma(obs, [0.0, 0.0])
    ln, lt = lambdas_classical(1.0)
    assert (ln, lt) == (0.0, 2.0)
    with pytest.raises(ValueError):
        SphereObstacle([0.0, 0.0], 0.0)


@given(st.lists(st.floats(-1.0, 1.0), min_size=2, max_size=6))
def test_basis_is_orthonormal_property(v):
    v = np.array(v)
    if np.linalg.norm(v) < 1e-3:
        return
    n = v / np.linalg.norm(v)
    E = basis_E(n)
    np.testing.assert_allclose(E.T @ E, np.eye(len(n)), atol=1e-12)
    np.testing.assert_allclose(E[:, 0], n)


def test_basis_rejects_bad_normals():
    with pytest.raises(ValueError):
        basis_E(np.zeros(3))
    with pytest.raises(ValueError):
        basis_E(np.array([2.0, 0.0]))


def test_matrix_matches_closed_form_apply():
    mod = ClassicalModulator(SphereObstacle([0.5, -0.2, 0.1], 0.4))
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.normal(size=3) * 2
        v = rng.normal(size=3)
        np.testing.assert_allclose(mod.matrix(x) @ v, modulate(mod, x, v), atol=1e-12)


def test_classical_surface_blocks_normal_and_far_field_identity():
    mod = ClassicalModulator(SphereObstacle([0.0, 0.0], 1.0))
    x = np.array([1.0, 0.0])
    out = modulate(mod, x, np.array([-1.0, 0.3]))
    assert abs(out[0]) <= 1e-15
    G = mod.matrix(np.array([1e4, 0.0]))
    assert np.linalg.norm(G - np.eye(2)) <= 2e-4


def test_classical_rollouts_stay_outside():
    obs = SphereObstacle([0.0, 0.0], 0.5)
    mod = ClassicalModulator(obs)
    ys = np.linspace(-0.6, 0.6, 25)
    X = np.stack([np.full_like(ys, -2.0), ys], axis=1)
    target = np.array([2.0, 0.05])
    dt = 0.01
    gmin = np.inf
    for _ in range(600):
        X = X + dt * mod.apply(X, target - X)
        gmin = min(gmin, gamma(obs, X).min())
    assert gmin >= 1 - 1e-3


# --- Ξ sigmoid ------------------------------------------------------------------

def test_xi_values():
    p = XiParams()
    assert xi(5.5, p) == 0.5
    assert abs(xi_normal(p.nu, p) - 1.0 / (1.0 + np.exp(-9.0))) <= 1e-12
    assert abs(xi_tangent(5.5, p) - 1.5) <= 1e-15
    assert xi_normal(-1e6, p) == 0.0 and xi_normal(1e6, p) == 1.0
    with pytest.raises(ValueError):
        XiParams(rho_imp=10.0, nu=1.0)


@given(st.floats(-50, 50), st.floats(-50, 50))
def test_xi_monotone_property(a, b):
    p = XiParams()
    lo, hi = min(a, b), max(a, b)
    assert xi_normal(lo, p) <= xi_normal(hi, p)
    assert xi_tangent(lo, p) >= xi_tangent(hi, p)


# --- distance field ------------------------------------------------------------

def test_calibration_puts_boundary_median_at_rho(grid):
    held_out = circle(101, phase=0.0123)
    S = grid.value(held_out)
    assert abs(np.median(S) - 1.0) <= 0.05
    rep = calibration_report(grid, XiParams(), inside_fn=lambda z: np.linalg.norm(z - CENTER) < RADIUS)
    assert rep["inside_violation"] <= 0.1
    assert 0.0 <= rep["frac_above_nu"] <= 1.0


def test_flat_metric_rejected():
    with pytest.raises(DegenerateMetricError):
        build_distance_field(lambda z: np.eye(2), [-1, 1, -1, 1], 16, 1.0, circle(5))
    with pytest.raises(ValueError):
        build_distance_field(bump_metric, [-1, 1, -1, 1], 8, 1.0, circle(5))


def test_serialization_exact(grid, tmp_path):
    p = tmp_path / "g.json"
    grid.save(p)
    back = DistanceFieldGrid.load(p)
    np.testing.assert_array_equal(back.values, grid.values)
    assert back.alpha == grid.alpha
    z = np.array([[0.3, 0.7]])
    np.testing.assert_array_equal(back.value(z), grid.value(z))


def test_recalibrate_scales_alpha(grid):
    g2 = recalibrate(grid, circle(33, r=0.8), 1.0)
    assert g2.alpha < grid.alpha  # a wider circle sits at lower volume
    assert abs(np.median(g2.value(circle(33, r=0.8))) - 1.0) <= 0.05


def test_normal_points_away_from_obstacle(grid):
    n = normal_from_field(grid, np.array([0.8, 0.0]))
    assert n[0] > 0.9
    with pytest.raises(ValueError):
        normal_from_field(grid, np.array([5.0, 0.0]))


def test_tangential_field_choice():
    n = np.array([1.0, 0.0])
    np.testing.assert_array_equal(tangential_field(n, [0.0, 1.0]), [0.0, 1.0])
    np.testing.assert_array_equal(tangential_field(n, [0.0, -1.0]), [0.0, -1.0])
    np.testing.assert_array_equal(tangential_field(n, [1.0, 0.0]), [0.0, 1.0])  # tie: counterclockwise


def test_riemannian_identity_outside_grid_and_matrix_agrees(grid):
    mod = RiemannianModulator(grid, sigma_beta=1e-9)
    v = np.array([0.3, -0.2])
    np.testing.assert_array_equal(modulate_riemannian(mod, np.array([10.0, 0.0]), v), v)
    z = np.array([0.6, 0.3])
    np.testing.assert_allclose(mod.matrix(z) @ v, modulate_riemannian(mod, z, v), atol=1e-9)


def test_riemannian_flat_field_inside_active_range_raises():
    vnorm = np.zeros((16, 16))
    vnorm[0, 0] = 1.0  # avoid a degenerate normalization; the centre stays flat
    g = DistanceFieldGrid(np.array([-1.0, -1.0]), np.array([1.0, 1.0]), 16, np.full((16, 16), 2.0),
                          0.0, 1.0, 1.0, vnorm, np.full((16, 16), 2e-6))
    mod = RiemannianModulator(g)
    with pytest.raises(FlatFieldError):
        mod.apply(np.array([[0.1, 0.1]]), np.array([[1.0, 0.0]]))


def test_riemannian_rollouts_respect_impenetrability(grid):
    target = np.array([1.6, 0.05])
    mod = RiemannianModulator(grid, XiParams(), sigma_beta=0.05, target=target)
    ys = np.linspace(-0.4, 0.4, 15)
    Z = np.stack([np.full_like(ys, -1.6), ys], axis=1)
    dt = 0.01
    smin = np.inf
    for _ in range(800):
        Z = Z + dt * mod.apply(Z, target - Z)
        smin = min(smin, grid.value(Z).min())
    assert smin >= 0.95
    assert np.all(np.linalg.norm(Z - target, axis=1) < 0.2)
