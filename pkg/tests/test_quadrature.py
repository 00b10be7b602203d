import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.polynomial.hermite import hermgauss

from parznet.quadrature import (
    MAX_ORDER,
    SQRT_PI,
    InvalidOrderError,
    gaussian_expectation,
    hermite_rule,
    integrate,
    tridiagonal_eigenvalues,
)


def gauss_moment(k):
    # int u^k exp(-u^2) du
    return 0.0 if k % 2 else math.gamma((k + 1) / 2)


def test_order_one():
    r = hermite_rule(1)
    assert r.nodes.tolist() == [0.0]
    assert r.weights[0] == pytest.approx(1.7724538509, abs=1e-10)


def test_order_two_hand_values():
    r = hermite_rule(2)
    np.testing.assert_allclose(r.nodes, [-1 / math.sqrt(2), 1 / math.sqrt(2)], rtol=1e-14)
    np.testing.assert_allclose(r.weights, [SQRT_PI / 2] * 2, rtol=1e-14)


def test_order_three_from_hermite_roots():
    # roots of H3 = 8u^3 - 12u, weights from 2^(s-1) s! sqrt(pi) / (s^2 H_{s-1}(u)^2)
    roots = np.sort(np.roots([8, 0, -12, 0]).real)
    h2 = 4 * roots**2 - 2
    w = 2**2 * math.factorial(3) * SQRT_PI / (9 * h2**2)
    r = hermite_rule(3)
    np.testing.assert_allclose(r.nodes, roots, atol=1e-15)
    np.testing.assert_allclose(r.weights, w, rtol=1e-13)
    np.testing.assert_allclose(r.weights, [SQRT_PI / 6, 2 * SQRT_PI / 3, SQRT_PI / 6], rtol=1e-13)


@pytest.mark.parametrize("s", [1, 2, 5, 10, 17, 32, 64, 100, 128])
def test_matches_numpy_reference(s):
    u, w = hermgauss(s)
    r = hermite_rule(s)
    np.testing.assert_allclose(r.nodes, u, atol=2e-13)
    np.testing.assert_allclose(r.weights, w, rtol=1e-9, atol=1e-300)


@pytest.mark.parametrize("s", range(1, 11))
def test_weights_match_factorial_formula(s):
    # physicists' Hermite via recurrence, evaluated at numpy's nodes
    u, _ = hermgauss(s)
    h_prev, h = np.ones_like(u), 2 * u
    for k in range(1, s - 1):
        h_prev, h = h, 2 * u * h - 2 * k * h_prev
    hsm1 = h if s > 1 else np.ones_like(u)
    w = 2 ** (s - 1) * math.factorial(s) * SQRT_PI / (s**2 * hsm1**2)
    np.testing.assert_allclose(hermite_rule(s).weights, w, rtol=1e-11)


def test_integrate_examples():
    assert integrate(hermite_rule(3), lambda u: u**4) == pytest.approx(3 * SQRT_PI / 4, rel=1e-13)
    assert integrate(hermite_rule(1), lambda u: np.ones_like(u)) == pytest.approx(SQRT_PI, rel=1e-15)
    assert integrate(hermite_rule(8), lambda u: u**2) == pytest.approx(SQRT_PI / 2, rel=1e-13)


def test_gaussian_expectation_examples():
    ident = lambda x: x
    assert gaussian_expectation(hermite_rule(5), 2.5, 0.0, ident) == pytest.approx(2.5, abs=1e-14)
    assert gaussian_expectation(hermite_rule(4), 0.0, 1.0, lambda x: x**2) == pytest.approx(1.0, abs=1e-10)
    assert gaussian_expectation(hermite_rule(2), 1.0, 0.5, ident) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        gaussian_expectation(hermite_rule(2), 0.0, -1.0, ident)


@pytest.mark.parametrize("bad", [0, -1, MAX_ORDER + 1])
def test_invalid_order(bad):
    with pytest.raises(InvalidOrderError):
        hermite_rule(bad)


def test_rule_is_immutable():
    r = hermite_rule(4)
    with pytest.raises(ValueError):
        r.nodes[0] = 1.0


def test_tridiagonal_eigenvalues_against_dense():
    rng = np.random.default_rng(3)
    d, e = rng.normal(size=12), rng.normal(size=11)
    dense = np.diag(d) + np.diag(e, 1) + np.diag(e, -1)
    np.testing.assert_allclose(tridiagonal_eigenvalues(d, e), np.linalg.eigvalsh(dense), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, MAX_ORDER))
def test_rule_invariants(s):
    r = hermite_rule(s)
    assert len(r.nodes) == s
    assert np.all(np.diff(r.nodes) > 0)
    assert np.all(r.weights > 0)
    np.testing.assert_allclose(r.nodes, -r.nodes[::-1], atol=1e-13)
    np.testing.assert_allclose(r.weights, r.weights[::-1], rtol=1e-12)
    assert r.weights.sum() == pytest.approx(SQRT_PI, rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 20), st.data())
def test_monomial_exactness(s, data):
    k = data.draw(st.integers(0, 2 * s - 1))
    got = integrate(hermite_rule(s), lambda u: u**k)
    exact = gauss_moment(k)
    if exact == 0.0:
        assert abs(got) <= 1e-9 * math.gamma((k + 2) / 2)
    else:
        assert abs(got - exact) <= 1e-9 * exact
