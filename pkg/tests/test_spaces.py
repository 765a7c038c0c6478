import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pmldp.spaces import (DimensionError, Discretization, Trajectory, apply_L, eigen_mode, from_modes, inner,
                          mode_field, norm_H, norm_Lp, project, solve_neg_L, to_modes)


def dense_laplacian(M):
    h = 1.0 / (M + 1)
    return (np.diag(-2.0 * np.ones(M)) + np.diag(np.ones(M - 1), 1) + np.diag(np.ones(M - 1), -1)) / h**2


finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_discretization_invariants():
    d = Discretization(M=99, T=0.7, K=70)
    assert abs(d.h * (d.M + 1) - 1.0) <= 1e-15
    assert d.dt * d.K == pytest.approx(0.7, abs=1e-15)
    assert d.lambda0 == pytest.approx((2 / d.h**2) * (1 - np.cos(np.pi * d.h)), rel=1e-14)
    assert d.lambda0 > 0


@pytest.mark.parametrize("bad", [dict(M=0, T=1.0, K=1), dict(M=3, T=0.0, K=1), dict(M=3, T=1.0, K=0)])
def test_discretization_rejects_bad_sizes(bad):
    with pytest.raises(ValueError):
        Discretization(**bad)


def test_apply_L_sine_eigenpair_M3():
    d = Discretization(3, 1.0, 1)
    f = np.sin(np.pi * d.x)
    mu1 = -32 * (1 - np.cos(np.pi / 4))
    assert mu1 == pytest.approx(-9.3726, abs=1e-4)
    np.testing.assert_allclose(apply_L(f, d), mu1 * f, atol=1e-12)


def test_apply_L_dense_oracle():
    d = Discretization(5, 1.0, 1)
    f = np.random.default_rng(0).standard_normal(5)
    np.testing.assert_allclose(apply_L(f, d), dense_laplacian(5) @ f, rtol=1e-13)
    assert np.all(apply_L(np.zeros(5), d) == 0)


def test_apply_L_rejects_wrong_length():
    with pytest.raises(DimensionError):
        apply_L(np.zeros(4), Discretization(5, 1.0, 1))


@pytest.mark.parametrize("M", [3, 15, 63])
def test_solve_neg_L_round_trip(M):
    d = Discretization(M, 1.0, 1)
    f = np.random.default_rng(M).standard_normal((20, M))
    g = solve_neg_L(f, d)
    np.testing.assert_allclose(apply_L(g, d), -f, atol=1e-10 * np.max(np.abs(f)))


def test_solve_neg_L_on_modes_and_zero():
    d = Discretization(15, 1.0, 1)
    for k in range(1, 16):
        e, mu = eigen_mode(k, d)
        np.testing.assert_allclose(solve_neg_L(e, d), e / abs(mu), atol=1e-13)
    assert np.all(solve_neg_L(np.zeros(15), d) == 0)


def test_norm_H_values():
    d = Discretization(31, 1.0, 1)
    for k in (1, 5, 31):
        assert norm_H(d.basis[k - 1], d) == pytest.approx(1 / np.sqrt(abs(d.eigenvalues[k - 1])), rel=1e-12)
    assert norm_H(np.zeros(31), d) == 0
    f = np.random.default_rng(1).standard_normal(31)
    oracle = np.sqrt(d.h * f @ np.linalg.solve(-dense_laplacian(31), f))
    assert norm_H(f, d) == pytest.approx(oracle, rel=1e-12)


def test_norm_Lp_examples():
    d = Discretization(99, 1.0, 1)
    assert norm_Lp(np.full(99, 2.0), 3, d) == pytest.approx(2 * 0.99 ** (1 / 3), rel=1e-13)
    assert norm_Lp(np.full(99, 2.0), 3, d) == pytest.approx(1.99331, abs=1e-5)
    assert norm_Lp(np.zeros(99), 2, d) == 0
    d3 = Discretization(3, 1.0, 1)
    assert norm_Lp(d3.x, 2, d3) == pytest.approx(np.sqrt(0.21875), rel=1e-14)
    with pytest.raises(ValueError):
        norm_Lp(d3.x, 0.5, d3)


def test_eigen_mode():
    d = Discretization(3, 1.0, 1)
    e, mu = eigen_mode(1, d)
    np.testing.assert_allclose(e, np.sqrt(2) * np.sin([np.pi / 4, np.pi / 2, 3 * np.pi / 4]), atol=1e-15)
    assert mu == d.eigenvalues[0]
    with pytest.raises(ValueError):
        eigen_mode(4, d)
    with pytest.raises(ValueError):
        eigen_mode(0, d)
    d = Discretization(15, 1.0, 1)
    assert abs(inner(eigen_mode(1, d)[0], eigen_mode(2, d)[0], d)) < 1e-12


@pytest.mark.parametrize("M", [3, 31, 127])
def test_eigenpairs_all_modes(M):
    d = Discretization(M, 1.0, 1)
    for k in range(1, M + 1):
        e, mu = eigen_mode(k, d)
        np.testing.assert_allclose(apply_L(e, d), mu * e, atol=1e-10 * abs(mu))


@pytest.mark.parametrize("M", [31, 63, 127])
def test_continuum_eigenvalue_limit(M):
    d = Discretization(M, 1.0, 1)
    assert abs(d.eigenvalues[0] + np.pi**2) <= np.pi**4 * d.h**2 / 12 * 1.1


def test_basis_orthonormal():
    d = Discretization(20, 1.0, 1)
    np.testing.assert_allclose(d.h * d.basis @ d.basis.T, np.eye(20), atol=1e-13)


def test_project_examples():
    d = Discretization(15, 1.0, 1)
    np.testing.assert_allclose(project(d.basis[0], 1, d), d.basis[0], atol=1e-14)
    np.testing.assert_allclose(project(d.basis[1], 1, d), 0, atol=1e-14)
    f = np.random.default_rng(2).standard_normal(15)
    np.testing.assert_allclose(project(f, 15, d), f, atol=1e-12)
    with pytest.raises(ValueError):
        project(f, 16, d)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 15, elements=finite), st.integers(0, 15))
def test_project_is_idempotent_contraction(f, n):
    d = Discretization(15, 1.0, 1)
    p = project(f, n, d)
    scale = 1e-12 * (1 + np.max(np.abs(f)))
    np.testing.assert_allclose(project(p, n, d), p, atol=scale)
    assert norm_Lp(p, 2, d) <= norm_Lp(f, 2, d) + scale
    assert norm_H(p, d) <= norm_H(f, d) + scale


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 31, elements=finite), st.sampled_from([1.5, 2.0, 3.0, 4.0, 6.0]))
def test_Lp_dominates_H(f, p):
    d = Discretization(31, 1.0, 1)
    # ||f||_p >= ||f||_2 >= sqrt(lambda0) ||f||_H on a probability space
    assert norm_Lp(f, p, d) >= 0.9 * np.sqrt(d.lambda0) * norm_H(f, d) - 1e-12


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 7, elements=finite))
def test_mode_round_trip(f):
    d = Discretization(7, 1.0, 1)
    np.testing.assert_allclose(from_modes(to_modes(f, d), d), f, atol=1e-12 * (1 + np.max(np.abs(f))))


def test_from_modes_rows_independent_of_stacking():
    d = Discretization(15, 1.0, 1)
    c = np.random.default_rng(3).standard_normal((9, 4))
    whole = from_modes(c, d)
    for i in range(9):
        assert np.array_equal(whole[i], from_modes(c[i], d))


def test_mode_field():
    d = Discretization(7, 1.0, 1)
    np.testing.assert_allclose(mode_field({1: 0.5, 3: -2.0}, d), 0.5 * d.basis[0] - 2.0 * d.basis[2])
    np.testing.assert_allclose(mode_field([(2, 1.0), (2, 1.0)], d), 2 * d.basis[1])
    with pytest.raises(ValueError):
        mode_field({8: 1.0}, d)


def test_trajectory_shape_and_distance():
    d = Discretization(5, 1.0, 4)
    a = Trajectory(np.zeros((5, 5)), d)
    b = Trajectory(np.tile(d.basis[0], (5, 1)), d)
    assert a.distance(b) == pytest.approx(1 / np.sqrt(d.lambda0), rel=1e-12)
    assert b.sup_norm_H() == pytest.approx(1 / np.sqrt(d.lambda0), rel=1e-12)
    with pytest.raises(DimensionError):
        Trajectory(np.zeros((4, 5)), d)
