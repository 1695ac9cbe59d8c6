from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, special

from polyexpand.basis import (
    GammaParams,
    GaussianParams,
    MonomialFamily,
    RecurrenceBasis,
    change_of_basis,
    component_recurrence,
    expand_in,
    gamma_recurrence,
    gauss_quadrature,
    gaussian_recurrence,
    gram_schmidt_basis,
    hankel_gram,
    mixture_quadrature,
    mixture_recurrence,
    mysovskikh_basis,
    recurrence_from_coefficients,
)
from polyexpand.errors import IndefiniteGramError, InvalidParameterError


def gram_error(basis, nodes, weights, order):
    H = basis.evaluate(nodes, order)
    G = (H * weights) @ H.T
    return np.abs(G - np.eye(order + 1)).max()


def mixture_of(params, weights, order):
    comps = [(c, component_recurrence(p, order)) for c, p in zip(weights, params)]
    return comps, mixture_recurrence(comps, order)


class TestGaussianBasis:
    def test_matches_scaled_hermite(self):
        p = GaussianParams(0.3, 0.7)
        b = gaussian_recurrence(p, 12)
        x = np.linspace(-2, 3, 9)
        H = b.evaluate(x)
        z = (x - 0.3) / 0.7
        for n in range(13):
            ref = special.eval_hermitenorm(n, z) / math.sqrt(math.factorial(n))
            np.testing.assert_allclose(H[n], ref, rtol=1e-12, atol=1e-12)

    def test_quadrature_exactness(self):
        p = GaussianParams(-0.1, 0.2)
        b = gaussian_recurrence(p, 10)
        nodes, w = gauss_quadrature(b)
        m = p.raw_moments(21)
        for j in range(22):
            assert np.isclose(w @ nodes**j, m[j], rtol=1e-11, atol=1e-15)

    def test_zero_order(self):
        b = gaussian_recurrence(GaussianParams(0.0, 1.0), 0)
        assert b.order == 0
        np.testing.assert_allclose(b.evaluate(np.array([0.5])), [[1.0]])

    def test_invalid_sigma(self):
        with pytest.raises(InvalidParameterError):
            GaussianParams(0.0, 0.0)


class TestGammaBasis:
    @pytest.mark.parametrize("alpha,beta,xi", [(1.0, 1.0, 0.0), (3.5, 2.0, -0.5), (14.0, 93.0, 0.05)])
    def test_matches_generalized_laguerre(self, alpha, beta, xi):
        p = GammaParams(alpha, beta, xi)
        b = gamma_recurrence(p, 10)
        x = xi + np.linspace(0.01, 5, 7) / beta
        H = b.evaluate(x)
        for n in range(11):
            c = math.exp(0.5 * (math.lgamma(n + 1) + math.lgamma(alpha) - math.lgamma(n + alpha)))
            ref = c * special.eval_genlaguerre(n, alpha - 1, beta * (x - xi))
            np.testing.assert_allclose(H[n], ref, rtol=1e-10, atol=1e-12)

    def test_orthonormal_by_quadrature(self):
        p = GammaParams(2.5, 3.0, 0.1)
        b = gamma_recurrence(p, 15)

        def gram(i, j):
            f = lambda x: b.evaluate(np.array(x), 15)[i] * b.evaluate(np.array(x), 15)[j] * p.pdf(np.array([x]))[0]
            return integrate.quad(f, 0.1, np.inf, limit=200)[0]

        for i, j in [(0, 0), (3, 3), (15, 15), (2, 7), (0, 15)]:
            assert abs(gram(i, j) - (i == j)) < 1e-9

    def test_negative_orientation_mirror(self):
        p_plus = GammaParams(3.0, 2.0, 0.0, 1)
        p_minus = GammaParams(3.0, 2.0, 0.0, -1)
        bp = gamma_recurrence(p_plus, 8)
        bm = gamma_recurrence(p_minus, 8)
        x = np.linspace(0.1, 3, 5)
        # the density of -Z is the mirror image; |H_n| agrees at mirrored points
        np.testing.assert_allclose(np.abs(bm.evaluate(-x)), np.abs(bp.evaluate(x)), rtol=1e-11)
        nodes, w = gauss_quadrature(bm)
        assert gram_error(bm, nodes, w, 8) < 1e-10

    def test_rejects_small_shape(self):
        with pytest.raises(InvalidParameterError):
            GammaParams(0.5, 1.0)


class TestMixtureBasis:
    def test_orthonormal_gaussian_mixture_n50(self):
        params = [GaussianParams(-0.05, 0.05), GaussianParams(0.02, 0.12), GaussianParams(0.0, 0.3)]
        comps, mix = mixture_of(params, [0.5, 0.3, 0.2], 50)
        nodes, w = mixture_quadrature(comps, 50)
        assert gram_error(mix, nodes, w, 50) < 1e-8

    def test_orthonormal_gamma_mixture(self):
        params = [GammaParams(3.0, 20.0, 0.0), GammaParams(8.0, 40.0, 0.01)]
        comps, mix = mixture_of(params, [0.6, 0.4], 40)
        nodes, w = mixture_quadrature(comps, 40)
        assert gram_error(mix, nodes, w, 40) < 1e-8

    def test_single_component_is_identity(self):
        p = GaussianParams(0.1, 0.4)
        comps, mix = mixture_of([p], [1.0], 20)
        ref = gaussian_recurrence(p, 20)
        np.testing.assert_allclose(mix.a, ref.a, atol=1e-12)
        np.testing.assert_allclose(np.abs(mix.b), np.abs(ref.b), rtol=1e-12)

    def test_matches_mysovskikh(self):
        params = [GaussianParams(-0.02, 0.05), GaussianParams(0.0, 0.15)]
        comps, mix = mixture_of(params, [0.7, 0.3], 15)
        moments = 0.7 * params[0].raw_moments(30) + 0.3 * params[1].raw_moments(30)
        S = mysovskikh_basis(moments, 15)
        C = mix.monomial_coefficients(15)
        scale = np.abs(C).max(axis=1, keepdims=True)
        assert np.abs((S - C) / scale).max() < 1e-6

    def test_gram_schmidt_variants_agree(self):
        m = GaussianParams(0.0, 1.0).raw_moments(16)
        a = gram_schmidt_basis(m, 8, "modified")
        c = gram_schmidt_basis(m, 8, "classical")
        s = mysovskikh_basis(m, 8)
        np.testing.assert_allclose(a, s, atol=1e-9)
        np.testing.assert_allclose(c, s, atol=1e-8)
        rb = recurrence_from_coefficients(s)
        ref = gaussian_recurrence(GaussianParams(0.0, 1.0), 8)
        np.testing.assert_allclose(rb.b, ref.b, atol=1e-9)

    def test_indefinite_gram_rejected(self):
        with pytest.raises(IndefiniteGramError):
            mysovskikh_basis(np.array([1.0, 0.0, -1.0, 0.0, 1.0]), 2)
        with pytest.raises(InvalidParameterError):
            hankel_gram([1.0, 0.0], 2)


class TestChangeOfBasis:
    def test_evaluation_identity(self):
        params = [GaussianParams(-0.05, 0.05), GaussianParams(0.02, 0.12)]
        comps, mix = mixture_of(params, [0.5, 0.5], 30)
        cob = change_of_basis(mix, [b for _, b in comps], 30)
        x = np.linspace(-0.3, 0.3, 11)
        Hm = mix.evaluate(x, 30)
        for k, (_, bk) in enumerate(comps):
            np.testing.assert_allclose(cob[k] @ bk.evaluate(x, 30), Hm, atol=1e-9 * np.abs(Hm).max())
            assert np.allclose(np.triu(cob[k], 1), 0.0)
            np.testing.assert_array_equal(cob.upper(k), cob[k].T)

    def test_triangular_route_low_order(self):
        params = [GaussianParams(0.0, 0.5), GaussianParams(0.2, 1.0)]
        comps, mix = mixture_of(params, [0.4, 0.6], 8)
        a = change_of_basis(mix, comps[0][1], 8)
        b = change_of_basis(mix, comps[0][1], 8, method="triangular")
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_expand_in_monomials(self):
        b = gaussian_recurrence(GaussianParams(0.0, 1.0), 4)
        C = expand_in(b, MonomialFamily(), 4)
        # He_4 / sqrt(24) = (x^4 - 6x^2 + 3) / sqrt(24)
        np.testing.assert_allclose(C[4], np.array([3, 0, -6, 0, 1]) / math.sqrt(24), atol=1e-14)


class TestRecurrenceBasisMisc:
    def test_json_roundtrip(self):
        b = gaussian_recurrence(GaussianParams(0.1, 0.2), 6)
        b2 = RecurrenceBasis.from_json(b.to_json())
        np.testing.assert_array_equal(b.a, b2.a)
        np.testing.assert_array_equal(b.b, b2.b)

    def test_derivative_matrix(self):
        b = gaussian_recurrence(GaussianParams(0.1, 0.3), 10)
        D = b.derivative_matrix(11)
        x = np.linspace(-0.5, 0.7, 5)
        d = b.evaluate_with_derivatives(x, 10, 1)
        np.testing.assert_allclose(D.T @ b.evaluate(x), d[1], atol=1e-9)

    def test_order_check(self):
        b = gaussian_recurrence(GaussianParams(0.0, 1.0), 3)
        with pytest.raises(InvalidParameterError):
            b.evaluate(np.array([0.0]), 5)


@settings(max_examples=30, deadline=None)
@given(mu=st.floats(-1, 1), sigma=st.floats(0.05, 2.0), order=st.integers(1, 25))
def test_gaussian_orthonormality_property(mu, sigma, order):
    b = gaussian_recurrence(GaussianParams(mu, sigma), order)
    nodes, w = gauss_quadrature(b)
    assert gram_error(b, nodes, w, order) < 1e-8
    assert abs(w.sum() - 1) < 1e-12


@settings(max_examples=25, deadline=None)
@given(alpha=st.floats(1.0, 30.0), beta=st.floats(0.5, 100.0), xi=st.floats(-1, 1), order=st.integers(1, 30))
def test_gamma_orthonormality_property(alpha, beta, xi, order):
    b = gamma_recurrence(GammaParams(alpha, beta, xi), order)
    nodes, w = gauss_quadrature(b)
    assert gram_error(b, nodes, w, order) < 1e-8
    assert np.all(nodes > xi)


@settings(max_examples=20, deadline=None)
@given(K=st.integers(1, 50), order=st.integers(1, 50), seed=st.integers(0, 2**16))
def test_random_gaussian_mixture_orthonormal(K, order, seed):
    rng = np.random.default_rng(seed)
    w = rng.dirichlet(np.ones(K))
    params = [GaussianParams(float(m), float(s)) for m, s in zip(rng.normal(0, 0.05, K), rng.uniform(0.03, 0.2, K))]
    comps, mix = mixture_of(params, w, order)
    nodes, qw = mixture_quadrature(comps, order)
    assert gram_error(mix, nodes, qw, order) < 1e-8
