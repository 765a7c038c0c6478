import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmldp.harness import fit_line
from pmldp.noise import (Control, NoiseSpec, WienerPath, hs_norm_sq, pl_derivative, piecewise_linear,
                         qw_trajectory, sample_increments, sample_path, truncation_defect)
from pmldp.spaces import Discretization, Trajectory, from_modes, norm_H, project


def test_noise_spec_validation():
    with pytest.raises(ValueError):
        NoiseSpec(())
    with pytest.raises(ValueError):
        NoiseSpec((1.0, -0.5))
    ns = NoiseSpec.from_decay(1.0, 4, scale=2.0)
    np.testing.assert_allclose(ns.array, [2.0, 1.0, 2 / 3, 0.5])
    assert ns.truncated(2).q == (2.0, 1.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        ns.check(Discretization(3, 1.0, 1))


def test_hs_norm_examples():
    d3 = Discretization(3, 1.0, 1)
    assert hs_norm_sq(NoiseSpec((1.0,)), d3) == pytest.approx(1 / 9.3726, rel=1e-4)
    assert hs_norm_sq(NoiseSpec((0.0, 0.0)), d3) == 0.0
    d = Discretization(63, 1.0, 1)
    ns = NoiseSpec.from_decay(2.0, 4)
    L = (np.diag(-2 * np.ones(63)) + np.diag(np.ones(62), 1) + np.diag(np.ones(62), -1)) / d.h**2
    mu = np.sort(np.linalg.eigvalsh(L))[::-1][:4]
    assert hs_norm_sq(ns, d) == pytest.approx(np.sum(np.arange(1, 5.0) ** -4 / np.abs(mu)), rel=1e-11)


def test_truncation_defect_decreasing_to_zero():
    d = Discretization(15, 1.0, 1)
    ns = NoiseSpec.from_decay(1.0, 6)
    vals = [truncation_defect(ns, n, d) for n in range(7)]
    assert vals[0] == pytest.approx(hs_norm_sq(ns, d))
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert vals[-1] == 0.0


def test_sample_path_deterministic_and_shaped():
    d = Discretization(7, 1.0, 20)
    ns = NoiseSpec((1.0, 0.5))
    a, b = sample_path(ns, d, 3, 11), sample_path(ns, d, 3, 11)
    assert np.array_equal(a.increments, b.increments)
    assert a.increments.shape == (20, 2)
    assert not np.array_equal(a.increments, sample_path(ns, d, 3, 12).increments)
    stacked = sample_increments(ns, d, 3, [5, 11])
    assert np.array_equal(stacked[1], a.increments)


def test_cumulative_reconstruction_exact():
    w = sample_path(NoiseSpec((1.0,)), Discretization(3, 1.0, 50), 0, 0)
    W = w.cumulative()
    assert W[0, 0] == 0.0
    acc = 0.0
    for i in range(50):
        acc += w.increments[i, 0]
        assert W[i + 1, 0] == acc


def test_increment_moments():
    d = Discretization(3, 1.0, 100)  # dt = 0.01
    x = sample_increments(NoiseSpec((1.0,)), d, 42, np.arange(1000)).ravel()  # 10^5 draws
    n = x.size
    assert abs(x.mean()) <= 4 * np.sqrt(d.dt) / np.sqrt(n)
    assert 0.0095 <= x.var() <= 0.0105


def test_paths_uncorrelated():
    d = Discretization(3, 1.0, 1000)
    a = sample_increments(NoiseSpec((1.0,)), d, 7, np.arange(100)).ravel()
    b = sample_increments(NoiseSpec((1.0,)), d, 7, np.arange(100, 200)).ravel()
    assert abs(np.corrcoef(a, b)[0, 1]) <= 0.01


def test_qw_trajectory_examples():
    d = Discretization(7, 1.0, 1)
    ns = NoiseSpec((2.0,))
    w = sample_path(ns, d, 0, 0)
    assert np.all(qw_trajectory(ns, w, 0.0, d).states == 0)
    traj = qw_trajectory(ns, w, 0.3, d)
    np.testing.assert_allclose(traj.states[1], 0.3 * 2.0 * w.increments[0, 0] * d.basis[0], atol=1e-15)
    with pytest.raises(ValueError):
        qw_trajectory(NoiseSpec((1.0, 1.0)), w, 1.0, d)


def test_ito_isometry():
    d = Discretization(15, 0.5, 10)
    ns = NoiseSpec.from_decay(1.0, 4)
    eps = 0.7
    inc = sample_increments(ns, d, 1, np.arange(10_000))
    end = from_modes(eps * ns.array * inc.sum(axis=1), d)
    sq = norm_H(end, d) ** 2
    expected = eps**2 * d.T * hs_norm_sq(ns, d)
    assert abs(sq.mean() - expected) <= 4 * sq.std() / np.sqrt(sq.size)


def test_projection_commutes_with_noise():
    d = Discretization(15, 1.0, 8)
    ns = NoiseSpec.from_decay(1.0, 5)
    w = sample_path(ns, d, 2, 0)
    full = qw_trajectory(ns, w, 0.5, d)
    trunc = qw_trajectory(ns.truncated(2), w, 0.5, d)
    np.testing.assert_allclose(project(full.states, 2, d), trunc.states, atol=1e-13)


def test_control_action_matches_field_norm():
    d = Discretization(31, 1.0, 10)
    c = np.random.default_rng(0).standard_normal((10, 5))
    ctrl = Control(c, d.T)
    fields = from_modes(c, d)
    direct = d.dt * np.sum(d.h * np.sum(fields**2, axis=1))
    assert ctrl.l2_norm_sq() == pytest.approx(direct, rel=1e-10)
    np.testing.assert_allclose(ctrl.h_norms(d), norm_H(fields, d), rtol=1e-10)


def test_from_blocks():
    d = Discretization(7, 1.0, 8)
    ctrl = Control.from_blocks([[1.0, 2.0]], d, 3)
    assert ctrl.coeffs.shape == (8, 3)
    np.testing.assert_array_equal(ctrl.coeffs[:, 0], [1, 1, 1, 1, 2, 2, 2, 2])
    assert np.all(ctrl.coeffs[:, 1:] == 0)
    with pytest.raises(ValueError):
        Control.from_blocks(np.ones((1, 3)), d, 1)


def _random_traj(d, n_modes, seed):
    c = np.random.default_rng(seed).standard_normal((d.K + 1, n_modes))
    return Trajectory(from_modes(c, d), d)


def test_piecewise_linear_examples():
    d = Discretization(7, 2.0, 12)
    traj = _random_traj(d, 3, 0)
    one = piecewise_linear(traj, 1)
    np.testing.assert_allclose(one.states, d.times[:, None] / d.T * traj.states[-1]
                               + (1 - d.times[:, None] / d.T) * traj.states[0], atol=1e-13)
    pl = piecewise_linear(traj, 4)
    np.testing.assert_array_equal(pl.states[::3], traj.states[::3])
    lin = Trajectory(np.outer(d.times, d.basis[0]) + d.basis[1], d)
    np.testing.assert_allclose(piecewise_linear(lin, 3).states, lin.states, atol=1e-12)
    with pytest.raises(ValueError):
        piecewise_linear(traj, 5)


def test_pl_derivative_examples():
    d = Discretization(7, 2.0, 12)
    lin = Trajectory(np.outer(d.times, 0.5 * d.basis[0] - d.basis[2]), d)
    ctrl = pl_derivative(lin, 4, 3)
    np.testing.assert_allclose(ctrl.coeffs, np.tile([0.5, 0.0, -1.0], (12, 1)), atol=1e-12)
    zero = pl_derivative(Trajectory(np.zeros((13, 7)), d), 3, 2)
    assert np.all(zero.coeffs == 0)
    with pytest.raises(ValueError, match="outside"):
        pl_derivative(_random_traj(d, 5, 1), 4, 3)


def test_pl_derivative_first_order_in_N():
    # h_t = int_0^t Q phi, phi_t = sin(2 pi t/T) e_1, has a closed form
    d = Discretization(15, 1.0, 1024)
    q1 = 1.5
    h = q1 * d.T / (2 * np.pi) * (1 - np.cos(2 * np.pi * d.times / d.T))
    traj = Trajectory(np.outer(h, d.basis[0]), d)
    mid = d.times[:-1] + d.dt / 2
    exact = q1 * np.sin(2 * np.pi * mid / d.T)
    Ns = [4, 8, 16, 32]
    errs = []
    for N in Ns:
        c = pl_derivative(traj, N, 1).coeffs[:, 0]
        errs.append(np.sqrt(d.dt * np.sum((c - exact) ** 2)) * norm_H(d.basis[0], d))
    slope, _, _ = fit_line(np.log(Ns), np.log(errs))
    assert -slope >= 0.9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([2, 4, 8]))
def test_pl_derivative_averaging_inequality(seed, N):
    d = Discretization(15, 1.0, 16)
    psi = np.random.default_rng(seed).standard_normal((16, 4))
    path = np.zeros((17, 4))
    np.cumsum(d.dt * psi, axis=0, out=path[1:])
    traj = Trajectory(from_modes(path, d), d)
    der = pl_derivative(traj, N, 4)
    lhs = d.dt * np.sum(der.h_norms(d) ** 2)
    rhs = d.dt * np.sum(Control(psi, d.T).h_norms(d) ** 2)
    assert lhs <= rhs * (1 + 1e-10)


def test_wiener_path_is_value_object():
    w = WienerPath(np.zeros((3, 1)), 1, 2, 0.1)
    assert w.cumulative().shape == (4, 1)
