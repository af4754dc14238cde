from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cube_localize.log_laplace import (
    Condition,
    SearchConfig,
    certify,
    criterion,
    criterion_and_gradient,
    log_laplace,
    rayleigh_implies_beta2_check,
    third_cumulant,
    tilt,
    tilt_cov,
    tilt_mean,
    tilt_probs,
)
from cube_localize.measure_core import (
    DiscreteMeasure,
    dirac,
    hadamard_rows,
    ising,
    product,
    slice_measure,
    two_point,
    uniform,
)


def random_measure(rng, n, sparsity=0.0):
    w = rng.exponential(size=2**n) * (rng.random(2**n) >= sparsity)
    if not w.any():
        w[rng.integers(2**n)] = 1.0
    return DiscreteMeasure(n, w)


def brute_log_laplace(nu, w):
    return math.log(math.fsum(p * math.exp(float(np.dot(w, x))) for p, x in zip(nu.weights, nu.points) if p > 0))


def test_closed_forms():
    w = np.array([0.3, -1.2, 2.0])
    assert log_laplace(uniform(3), w) == pytest.approx(np.log(np.cosh(w)).sum(), abs=1e-14)
    y = np.array([1.0, -1.0, 1.0])
    assert log_laplace(dirac(3, y), w) == pytest.approx(w @ y, abs=1e-14)
    assert log_laplace(two_point(3), w) == pytest.approx(math.log(math.cosh(w.sum())), abs=1e-14)


def test_batched_matches_scalar():
    rng = np.random.default_rng(0)
    nu = random_measure(rng, 4)
    W = rng.normal(size=(7, 4))
    batch = log_laplace(nu, W)
    for k in range(7):
        assert batch[k] == pytest.approx(brute_log_laplace(nu, W[k]), abs=1e-12)


def test_extreme_fields_are_finite():
    nu = uniform(3)
    w = np.array([800.0, -900.0, 0.0])
    assert log_laplace(nu, w) == pytest.approx(1700 - 2 * math.log(2), rel=1e-14)
    np.testing.assert_allclose(tilt_mean(nu, w), [1, -1, 0])


def test_tilt_of_uniform_1():
    for w in (-2.0, 0.0, 0.7):
        assert tilt_mean(uniform(1), [w])[0] == pytest.approx(math.tanh(w), abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_tilt_group_property(n, seed):
    rng = np.random.default_rng(seed)
    nu = random_measure(rng, n, 0.3)
    w = rng.normal(0, 2, size=n)
    back = tilt(tilt(nu, w), -w)
    np.testing.assert_allclose(back.weights, nu.weights, atol=1e-12)


def test_tilt_preserves_support():
    nu = slice_measure(4, 0)
    rng = np.random.default_rng(3)
    for _ in range(10):
        t = tilt(nu, rng.normal(0, 3, size=4))
        assert set(np.flatnonzero(t.weights > 0)) <= set(nu.support)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_cumulants_match_finite_differences(n, seed):
    rng = np.random.default_rng(seed)
    nu = random_measure(rng, n, 0.2)
    w = rng.normal(0, 1.5, size=n)
    h = 1e-5
    E = np.eye(n)
    grad = np.array([(log_laplace(nu, w + h * e) - log_laplace(nu, w - h * e)) / (2 * h) for e in E])
    np.testing.assert_allclose(tilt_mean(nu, w), grad, atol=1e-7)
    A = tilt_cov(nu, w)
    H = np.array([(tilt_mean(nu, w + h * e) - tilt_mean(nu, w - h * e)) / (2 * h) for e in E])
    np.testing.assert_allclose(A, H, atol=1e-7)
    C3 = third_cumulant(nu, w)
    D3 = np.array([(tilt_cov(nu, w + h * e) - tilt_cov(nu, w - h * e)) / (2 * h) for e in E])
    np.testing.assert_allclose(C3, D3, atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_covariance_psd_and_diag_identity(n, seed):
    rng = np.random.default_rng(seed)
    nu = random_measure(rng, n, 0.3)
    w = rng.normal(0, 3, size=n)
    A = tilt_cov(nu, w)
    a = tilt_mean(nu, w)
    assert np.linalg.eigvalsh(A)[0] > -1e-12
    np.testing.assert_allclose(np.diag(A), 1 - a * a, atol=1e-12)
    assert np.all(np.abs(a) <= 1)


@pytest.mark.parametrize("cond", list(Condition))
def test_criterion_gradients(cond):
    rng = np.random.default_rng(5)
    nu = ising(4, seed=2, scale=0.6)
    h = 1e-6
    for _ in range(5):
        w = rng.normal(size=4)
        val, g = criterion_and_gradient(nu, cond, w)
        assert val == pytest.approx(criterion(nu, cond, w), abs=1e-12)
        fd = np.array([(criterion(nu, cond, w + h * e) - criterion(nu, cond, w - h * e)) / (2 * h) for e in np.eye(4)])
        np.testing.assert_allclose(g, fd, atol=1e-5)


def test_certify_uniform_semi_lc():
    for n in (1, 3, 4):
        rep = certify(uniform(n), "semi-lc", threshold=1.5)
        assert rep.certified_value == pytest.approx(1.0, abs=1e-12)
        assert rep.passed
        np.testing.assert_allclose(rep.witness, 0.0, atol=1e-6)


def test_certify_two_point_semi_lc():
    rep = certify(two_point(3), Condition.SEMI_LC, threshold=2.0)
    assert rep.verdict == "fail" and rep.is_proof
    assert rep.certified_value == pytest.approx(3.0, abs=1e-9)
    assert abs(rep.witness.sum()) < 1e-4
    # the witness re-evaluates to the certified value
    assert criterion(two_point(3), Condition.SEMI_LC, rep.witness) == pytest.approx(rep.certified_value, abs=1e-12)


def test_certify_product_rayleigh():
    rep = certify(product(4, [0.1, -0.5, 0.3, 0.8]), Condition.RAYLEIGH)
    assert rep.passed
    assert abs(rep.certified_value) < 1e-12


def test_certify_slice_rayleigh():
    rep = certify(slice_measure(4, 0), Condition.RAYLEIGH)
    assert rep.passed
    assert rep.certified_value < 1e-10


def test_slice_is_two_diag_dominated():
    nu = slice_measure(4, 0)
    rng = np.random.default_rng(0)
    W = rng.normal(0, 3, size=(10_000, 4))
    assert np.max(criterion(nu, Condition.DIAG_DOMINATED, W)) <= 2 + 1e-9
    assert np.max(criterion(nu, Condition.SEMI_LC, W)) <= 2 + 1e-9


def test_products_are_one_diag_dominated():
    nu = product(3, [0.2, -0.7, 0.5])
    W = np.random.default_rng(1).normal(0, 2, size=(200, 3))
    np.testing.assert_allclose(criterion(nu, Condition.DIAG_DOMINATED, W), 1.0, atol=1e-12)


def test_hadamard_rayleigh_report_consistent():
    nu = hadamard_rows(4)
    rep = certify(nu, Condition.RAYLEIGH)
    assert criterion(nu, Condition.RAYLEIGH, rep.witness) == pytest.approx(rep.certified_value, abs=1e-12)
    assert rep.verdict == ("pass" if rep.certified_value <= rep.threshold else "fail")


def test_certify_monotone_in_budget():
    nu = ising(4, seed=7, scale=0.8)
    small = certify(nu, "semi-lc", SearchConfig(starts=2, iters=10))
    large = certify(nu, "semi-lc", SearchConfig(starts=6, iters=40))
    assert large.certified_value >= small.certified_value


def test_certify_deterministic():
    nu = ising(3, seed=1)
    a = certify(nu, "aov", SearchConfig(seed=4)).to_dict()
    b = certify(nu, "aov", SearchConfig(seed=4)).to_dict()
    assert a == b


def test_rayleigh_consequence():
    rep = rayleigh_implies_beta2_check(slice_measure(4, 0), extra_points=2000)
    assert rep.passed


def test_tilt_probs_normalized():
    nu = ising(5, seed=3)
    P = tilt_probs(nu, np.random.default_rng(2).normal(0, 5, size=(20, 5)))
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-14)
