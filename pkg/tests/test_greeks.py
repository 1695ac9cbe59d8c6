from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import linalg

from polyexpand.auxdensity import default_auxiliary, jacobi_two_component
from polyexpand.coefficients import PayoffSpec
from polyexpand.errors import InvalidParameterError, UnsupportedParameterError
from polyexpand.greeks import (
    block_expm_action_imag,
    block_expm_imag,
    calibration_gradient,
    delta_gamma,
    likelihood_sensitivity,
    loss_gradient,
    param_sensitivity,
)
from polyexpand.models import example_model
from polyexpand.pricing import ExpansionPricer


@pytest.fixture(scope="module")
def heston():
    m = example_model("heston", r=0.02)
    aux = default_auxiliary(m, 11, 20)
    return ExpansionPricer(m, aux, 14)


def fd_price(pricer, k, parameter, h):
    m = pricer.model
    vals = []
    for s in (1, -1):
        mm = m.replace(**{parameter: getattr(m, parameter) + s * h})
        p = ExpansionPricer(mm, pricer.aux, pricer.order, pricer.y_scale)
        vals.append(p.series(p.payoff(k)).value)
    return (vals[0] - vals[1]) / (2 * h)


class TestBlockExponential:
    def test_scalar(self):
        re, im = block_expm_imag(np.array([[0.3]]), np.array([[2.0]]), 1e-6)
        assert re[0, 0] == pytest.approx(math.exp(0.3), rel=1e-11)
        assert im[0, 0] / 1e-6 == pytest.approx(2 * math.exp(0.3), rel=1e-10)

    def test_zero_direction(self):
        A = np.random.default_rng(0).normal(size=(4, 4))
        re, im = block_expm_imag(A, np.zeros((4, 4)))
        np.testing.assert_allclose(re, linalg.expm(A), rtol=1e-12)
        assert np.all(im == 0)

    def test_against_frechet(self):
        rng = np.random.default_rng(1)
        A, E = rng.normal(size=(6, 6)), rng.normal(size=(6, 6))
        _, im = block_expm_imag(A, E, 1e-8)
        L = linalg.expm_frechet(A, E, compute_expm=False)
        np.testing.assert_allclose(im / 1e-8, L, rtol=1e-7, atol=1e-9)

    def test_sparse_action(self):
        rng = np.random.default_rng(2)
        A, E = 0.3 * rng.normal(size=(8, 8)), rng.normal(size=(8, 8))
        v = rng.normal(size=8)
        re, im = block_expm_action_imag(A, E, v, 1e-6)
        ref = linalg.expm(A + 1e-6j * E) @ v
        np.testing.assert_allclose(re, ref.real, atol=1e-12)
        np.testing.assert_allclose(im, ref.imag, atol=1e-16)


class TestSpotGreeks:
    def test_forward_delta(self):
        m = example_model("heston", r=0.03, delta=0.01)
        p = ExpansionPricer(m, default_auxiliary(m, 5), 10)
        g = delta_gamma(p, PayoffSpec("forward", 0.0, 0.0, m.T))
        assert g.delta == pytest.approx(math.exp((m.r - m.delta) * m.T), abs=1e-12)
        assert abs(g.gamma) < 1e-12

    def test_against_bumped_spot(self, heston):
        k = 0.02
        g = delta_gamma(heston, k)
        h = 1e-4
        vals = []
        for s in (-1, 0, 1):
            mm = heston.model.replace(x0=s * h)
            p = ExpansionPricer(mm, heston.aux, heston.order, heston.y_scale)
            vals.append(p.series(k).value)
        d_dx = (vals[2] - vals[0]) / (2 * h)
        d2_dx2 = (vals[2] - 2 * vals[1] + vals[0]) / h**2
        assert g.delta == pytest.approx(d_dx, rel=1e-6)
        assert g.gamma == pytest.approx(d2_dx2 - d_dx, rel=1e-4)
        assert g.delta_series[-1] == g.delta

    def test_variance_model_rejected(self):
        m = example_model("garch_variance")
        p = ExpansionPricer(m, default_auxiliary(m), 5)
        with pytest.raises(UnsupportedParameterError):
            delta_gamma(p, 0.2)


class TestParameterSensitivity:
    @pytest.mark.parametrize("parameter", ["kappa", "theta", "sigma", "rho", "y0", "r", "T"])
    def test_against_finite_differences(self, heston, parameter):
        cs = param_sensitivity(heston, 0.0, parameter)
        fd = fd_price(heston, 0.0, parameter, 1e-5)
        assert cs == pytest.approx(fd, rel=1e-5, abs=1e-10)

    def test_step_insensitive(self, heston):
        a = param_sensitivity(heston, 0.0, "sigma", 1e-6)
        b = param_sensitivity(heston, 0.0, "sigma", 1e-9)
        assert a == pytest.approx(b, rel=1e-9)

    def test_step_bounds(self, heston):
        with pytest.raises(InvalidParameterError):
            likelihood_sensitivity(heston.generator, "kappa", 1e-3)

    def test_unsupported(self, heston):
        with pytest.raises(UnsupportedParameterError):
            likelihood_sensitivity(heston.generator, "ymax")
        with pytest.raises(UnsupportedParameterError):
            likelihood_sensitivity(heston.generator, "vega")

    def test_jacobi_bounds(self):
        m = example_model("jacobi")
        p = ExpansionPricer(m, jacobi_two_component(m), 10)
        cs = param_sensitivity(p, 0.0, "ymax")
        assert cs == pytest.approx(fd_price(p, 0.0, "ymax", 1e-6), rel=1e-5)

    def test_ell0_constant(self, heston):
        # total mass does not move with the parameters
        assert abs(likelihood_sensitivity(heston.generator, "kappa")[0]) < 1e-13


class TestCalibration:
    def test_jacobian_columns(self, heston):
        ks = [-0.05, 0.0, 0.05]
        J = calibration_gradient(heston, ks)
        assert J.shape == (3, 4)
        assert J[1, 3] == pytest.approx(param_sensitivity(heston, 0.0, "sigma"), rel=1e-12)

    def test_zero_gradient_at_reference(self, heston):
        ks = np.array([-0.05, 0.0, 0.05])
        quotes = np.column_stack([ks, [heston.series(float(k)).value for k in ks]])
        loss, grad = loss_gradient(heston, quotes)
        assert loss == 0.0
        np.testing.assert_array_equal(grad, 0.0)

    def test_loss_gradient_direction(self, heston):
        ks = np.array([0.0])
        quotes = np.column_stack([ks, [heston.series(0.0).value + 1e-3]])
        _, grad = loss_gradient(heston, quotes, ["theta"])
        assert grad[0] == pytest.approx(-2e-3 * param_sensitivity(heston, 0.0, "theta"), rel=1e-10)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000), h=st.sampled_from([1e-5, 1e-6, 1e-8]))
def test_block_matches_complex_expm(seed, h):
    rng = np.random.default_rng(seed)
    A, E = rng.normal(size=(5, 5)), rng.normal(size=(5, 5))
    re, im = block_expm_imag(A, E, h)
    ref = linalg.expm(A + 1j * h * E)
    scale = np.abs(ref).max()
    assert np.abs(re - ref.real).max() <= 1e-12 * scale
    assert np.abs(im - ref.imag).max() <= 1e-12 * scale
