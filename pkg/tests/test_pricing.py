from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from polyexpand.auxdensity import MixtureDensity, default_auxiliary, jacobi_two_component
from polyexpand.basis import GaussianParams, gaussian_recurrence
from polyexpand.benchmarks import heston_fourier
from polyexpand.errors import InvalidParameterError, OrderMismatchError
from polyexpand.models import build_generator, example_model, mean_variance
from polyexpand.pricing import (
    ExpansionPricer,
    PriceSeries,
    cs_error_bound,
    default_y_scale,
    density_approximation,
    l2_divergence,
    price,
    series_csv,
)


@pytest.fixture(scope="module")
def heston_pricer():
    m = example_model("heston")
    return ExpansionPricer(m, default_auxiliary(m, 21, 20), 20)


@pytest.fixture(scope="module")
def jacobi_pricer():
    m = example_model("jacobi")
    return ExpansionPricer(m, jacobi_two_component(m), 30)


class TestSeries:
    def test_partial_sums(self):
        s = price([1.0, 2.0, 3.0], [0.5, 0.25, 0.1])
        np.testing.assert_allclose(s.partial_sums, [0.5, 1.0, 1.3])
        assert s.value == pytest.approx(1.3)
        assert s.at(1) == pytest.approx(1.0)
        assert price([1.0, 2.0, 3.0], [1.0, 1.0, 1.0], order=1).order == 1
        with pytest.raises(InvalidParameterError):
            s.at(5)

    def test_mismatch(self):
        with pytest.raises(OrderMismatchError):
            price([1.0, 2.0], [1.0])
        with pytest.raises(OrderMismatchError):
            price([1.0, 2.0], [1.0, 1.0], order=3)

    def test_csv_markers(self):
        s = PriceSeries(np.array([0.1, 0.01]))
        text = series_csv(s, [0.2, None])
        lines = text.strip().splitlines()
        assert lines[0] == "N,term,partial_sum,implied_vol"
        assert lines[2].endswith(",--")
        assert float(lines[1].split(",")[3]) == 0.2


class TestDensity:
    def test_integrates_to_one_and_matches_mean(self, jacobi_pricer):
        nodes, w = jacobi_pricer.aux.quadrature(60)
        H = jacobi_pricer.basis.evaluate(nodes, jacobi_pricer.order)
        mass = w @ (jacobi_pricer.ell @ H)
        assert mass == pytest.approx(1.0, abs=1e-12)
        g = jacobi_pricer.density(np.linspace(-1, 1, 4001))
        assert np.trapezoid(g, dx=2 / 4000) == pytest.approx(1.0, abs=1e-6)
        x = np.linspace(-1, 1, 4001)
        mean = np.trapezoid(x * g, x)
        assert mean == pytest.approx(mean_variance(jacobi_pricer.model)[0], abs=1e-6)

    def test_order_zero_is_auxiliary(self, jacobi_pricer):
        x = np.linspace(-0.3, 0.3, 7)
        g0 = density_approximation(jacobi_pricer.ell, jacobi_pricer.basis, jacobi_pricer.aux, x, 0)
        np.testing.assert_allclose(g0, jacobi_pricer.aux.pdf(x), rtol=1e-12)


class TestDiagnostics:
    def test_l2_monotone(self, heston_pricer):
        d = l2_divergence(heston_pricer.ell)
        assert d[0] == 0.0 and np.all(np.diff(d) >= 0)

    def test_cs_trivial_cases(self):
        m = example_model("heston")
        mean, var = mean_variance(m)
        b = gaussian_recurrence(GaussianParams(mean, math.sqrt(var)), 10)
        gen = build_generator(m, 5, b, default_y_scale(m))
        f = np.zeros(6)
        f[0] = 1.0
        assert cs_error_bound(f, gen, b, 5, 0.0) == 0.0
        assert cs_error_bound(f, gen, b, 5, 1e-6) == pytest.approx(1e-3, rel=1e-12)
        with pytest.raises(InvalidParameterError):
            cs_error_bound(f, gen, gaussian_recurrence(GaussianParams(0, 1), 6), 5, 1e-6)

    def test_cs_moment_matches_sum_of_squares(self):
        # for f in the span of H_0..H_N with ell = E[H_n]: E[p_N] via the larger generator
        m = example_model("heston")
        mean, var = mean_variance(m)
        b = gaussian_recurrence(GaussianParams(mean, math.sqrt(var)), 8)
        gen = build_generator(m, 4, b, default_y_scale(m))
        f = np.array([0.0, 1.0, 0.0, 0.0, 0.0])
        _, moment = cs_error_bound(f, gen, b, 4, 1.0, return_moment=True)
        # E[H_1(X)^2] = 1 when the basis matches the first two moments
        assert moment == pytest.approx(1.0, rel=1e-10)

    def test_diagnostics_fields(self, heston_pricer):
        d = heston_pricer.diagnostics(heston_pricer.payoff(0.0))
        assert len(d.l2_divergence) == heston_pricer.order + 1
        assert d.cauchy_schwarz_bound > 0
        assert d.growth_flag is False


class TestPricer:
    def test_matches_fourier(self, heston_pricer):
        ref = heston_fourier(heston_pricer.model, 0.0).price
        assert heston_pricer.series(0.0).value == pytest.approx(ref, rel=1e-3)

    def test_quadrature_method(self, jacobi_pricer):
        pay = jacobi_pricer.payoff(0.05)
        a = jacobi_pricer.coefficients(pay)
        q = jacobi_pricer.coefficients(pay, "quadrature")
        np.testing.assert_allclose(a, q, atol=1e-10)
        with pytest.raises(InvalidParameterError):
            jacobi_pricer.coefficients(pay, "magic")

    def test_put_call_parity(self, heston_pricer):
        k = 0.05
        c = heston_pricer.series(heston_pricer.payoff(k, "call")).value
        p = heston_pricer.series(heston_pricer.payoff(k, "put")).value
        fwd = heston_pricer.series(heston_pricer.payoff(k, "forward")).value
        assert c - p == pytest.approx(fwd - math.exp(k), abs=1e-13)
        # the expansion reproduces the martingale property
        assert fwd == pytest.approx(heston_pricer.forward(), rel=1e-9)

    def test_prices_grid(self, heston_pricer):
        grid = heston_pricer.prices([-0.1, 0.0, 0.1], [5, 20])
        assert grid.shape == (3, 2)
        assert grid[1, 1] == pytest.approx(heston_pricer.series(0.0).value)
        assert np.all(np.diff(grid[:, 1]) < 0)

    def test_implied_vol(self, heston_pricer):
        v = heston_pricer.implied_vol(heston_pricer.series(0.0).value, 0.0)
        assert 0.15 < v < 0.25

    def test_invalid_order(self):
        m = example_model("heston")
        with pytest.raises(InvalidParameterError):
            ExpansionPricer(m, MixtureDensity.single(GaussianParams(0, 0.1)), 0)

    def test_y_scale(self):
        assert default_y_scale(example_model("jacobi")) == pytest.approx(0.36)
        assert default_y_scale(example_model("heston", y0=0.09)) == pytest.approx(0.09)

    def test_ell_independent_of_scale(self):
        m = example_model("stein_stein")
        aux = default_auxiliary(m, 5)
        a = ExpansionPricer(m, aux, 12).ell
        b = ExpansionPricer(m, aux, 12, y_scale=1.0).ell
        np.testing.assert_allclose(a, b, atol=1e-11)


@settings(max_examples=10, deadline=None)
@given(k=st.floats(-0.2, 0.2))
def test_call_price_bounds(k):
    pricer = _cached_jacobi()
    v = pricer.series(k).value
    assert max(1.0 - math.exp(k), 0.0) - 1e-6 <= v <= 1.0


_CACHE: dict = {}


def _cached_jacobi():
    if "p" not in _CACHE:
        m = example_model("jacobi")
        _CACHE["p"] = ExpansionPricer(m, jacobi_two_component(m), 20)
    return _CACHE["p"]
