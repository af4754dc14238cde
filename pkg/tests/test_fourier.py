from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cube_localize.fourier import (
    density_table,
    fact_harmonic_audit,
    g_identity_check,
    inverse_walsh,
    log_density_hessian,
    multilinear_eval,
    multilinear_gradient,
    multilinear_hessian,
    walsh_fourier,
)
from cube_localize.log_laplace import log_laplace
from cube_localize.measure_core import DiscreteMeasure, TestFunction, ising, product, spins, uniform


def naive_coefficients(values, n):
    """O(4^n) definition: f_hat(S) = E_x[f(x) prod_{i in S} x_i]."""
    X = spins(n)
    out = np.zeros(2**n)
    for S in range(2**n):
        chi = np.prod(np.where([(S >> i) & 1 for i in range(n)], X, 1.0), axis=1)
        out[S] = np.mean(values * chi)
    return out


def test_constant_and_coordinate():
    n = 4
    c = walsh_fourier(np.ones(2**n), n).coefficients
    assert c[0] == 1 and np.all(c[1:] == 0)
    x1 = walsh_fourier(spins(n)[:, 0], n).coefficients
    assert x1[1] == 1 and np.count_nonzero(x1) == 1


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 7), st.integers(0, 2**31 - 1))
def test_fast_transform_matches_definition(n, seed):
    vals = np.random.default_rng(seed).normal(size=2**n)
    np.testing.assert_allclose(walsh_fourier(vals, n).coefficients, naive_coefficients(vals, n), atol=1e-12)


def test_round_trip():
    vals = np.random.default_rng(0).normal(size=64)
    back = inverse_walsh(walsh_fourier(TestFunction(6, vals)))
    np.testing.assert_allclose(back.values, vals, atol=1e-13)


def test_multilinear_examples():
    n = 3
    f = walsh_fourier(spins(n)[:, 0] * spins(n)[:, 1], n)
    assert multilinear_eval(f, [0.5, 0.5, -0.9]) == pytest.approx(0.25)
    np.testing.assert_allclose(multilinear_eval(density_table(uniform(n)), np.random.default_rng(1).uniform(-1, 1, (5, n))), 1.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_extension_agrees_on_vertices_and_derivatives(n, seed):
    rng = np.random.default_rng(seed)
    vals = rng.normal(size=2**n)
    f = walsh_fourier(vals, n)
    np.testing.assert_allclose(multilinear_eval(f, spins(n)), vals, atol=1e-12)
    y = rng.uniform(-0.9, 0.9, size=n)
    h = 1e-6
    E = np.eye(n)
    fd = np.array([(multilinear_eval(f, y + h * e) - multilinear_eval(f, y - h * e)) / (2 * h) for e in E])
    np.testing.assert_allclose(multilinear_gradient(f, y), fd, atol=1e-7)
    H = np.atleast_2d(multilinear_hessian(f, y))
    fdH = np.array([(multilinear_gradient(f, y + h * e) - multilinear_gradient(f, y - h * e)) / (2 * h) for e in E])
    np.testing.assert_allclose(H, fdH, atol=1e-6)
    np.testing.assert_allclose(np.diag(H), 0.0, atol=1e-15)


def test_g_identity_closed_forms():
    w = np.random.default_rng(0).normal(size=(10, 3))
    assert np.max(g_identity_check(uniform(3), w)) < 1e-13
    nu = product(2, [0.4, -0.2])
    assert g_identity_check(nu, [0.1, 0.7]) <= 1e-8
    # closed form on the product side as an independent route
    m = np.array([0.4, -0.2])
    w1 = np.array([0.1, 0.7])
    closed = np.sum(np.log(np.cosh(w1)) + np.log1p(m * np.tanh(w1)))
    assert log_laplace(nu, w1) == pytest.approx(closed, abs=1e-14)


def test_g_identity_ising():
    nu = ising(2, [[0, 0.3], [0.3, 0]])
    w = np.random.default_rng(2).uniform(-3, 3, size=(100, 2))
    assert np.max(g_identity_check(nu, w)) <= 1e-8
    nu3 = ising(3, seed=4, scale=0.3)
    w3 = np.random.default_rng(3).uniform(-3, 3, size=(100, 3))
    assert np.max(g_identity_check(nu3, w3)) <= 1e-8


def test_log_density_hessian_finite_differences():
    nu = ising(3, seed=1)
    rho = density_table(nu)
    y = np.array([0.2, -0.4, 0.1])
    h = 1e-5

    def grad(z):
        return multilinear_gradient(rho, z) / multilinear_eval(rho, z)

    fd = np.array([(grad(y + h * e) - grad(y - h * e)) / (2 * h) for e in np.eye(3)])
    np.testing.assert_allclose(log_density_hessian(nu, y, rho), fd, atol=1e-7)


def test_subset_lookup():
    f = walsh_fourier(spins(3)[:, 0] * spins(3)[:, 2], 3)
    assert f[(0, 2)] == pytest.approx(1.0)
    assert f[5] == pytest.approx(1.0)
    assert f[()] == pytest.approx(0.0)


def test_dirac_density_positive_inside():
    nu = DiscreteMeasure(2, [1.0, 0.0, 0.0, 0.0])
    y = np.random.default_rng(0).uniform(-0.99, 0.99, size=(50, 2))
    assert np.all(multilinear_eval(density_table(nu), y) > 0)


def test_fact_harmonic_uniform():
    rep = fact_harmonic_audit(uniform(3), per_axis=5, mc_points=200)
    assert rep.passed
    assert rep.diagnostics["beta_grid"] == pytest.approx(0.0, abs=1e-12)
    assert rep.diagnostics["beta_cert"] == pytest.approx(1.0, abs=1e-9)
    assert math.isfinite(rep.diagnostics["beta_grid"])
