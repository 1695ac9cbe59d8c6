"""Greeks of expansion prices.

Spot Greeks differentiate l_n through the initial vector q0(x0, y0); the
auxiliary density and hence f_n are held fixed.  Parameter sensitivities
use the complex-step identity on the matrix exponential, realised as the
real block matrix [[A, -hE], [hE, A]] acting on [q0; 0].
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg, sparse

from .errors import InvalidParameterError, UnsupportedParameterError
from .models import PARAMETER_NAMES, GeneratorRep, expm_action, generator_derivative
from .coefficients import PayoffSpec
from .pricing import ExpansionPricer

__all__ = [
    "SpotGreeks",
    "delta_gamma",
    "block_expm_imag",
    "block_expm_action_imag",
    "likelihood_sensitivity",
    "param_sensitivity",
    "calibration_gradient",
    "loss_gradient",
    "COMPLEX_STEP",
]

COMPLEX_STEP = 1e-6


@dataclass(frozen=True)
class SpotGreeks:
    price: float
    delta: float
    gamma: float
    delta_series: np.ndarray
    gamma_series: np.ndarray


def _initial_derivatives(gen: GeneratorRep) -> tuple[np.ndarray, np.ndarray]:
    """d q0 / d x0 and d^2 q0 / d x0^2."""
    m = gen.model
    x = 0.0 if m.kind == "garch_variance" else m.x0
    vals = gen.x_family.evaluate_with_derivatives(np.array(x), gen.order, 2)
    ys = m.y0 / gen.y_scale
    d1 = np.array([ys**mm * vals[1, n] for mm, n in gen.index])
    d2 = np.array([ys**mm * vals[2, n] for mm, n in gen.index])
    return d1, d2


def _initial_y_derivative(gen: GeneratorRep) -> np.ndarray:
    m = gen.model
    x = 0.0 if m.kind == "garch_variance" else m.x0
    px = gen.x_family.evaluate(np.array(x), gen.order)
    ys = m.y0 / gen.y_scale
    return np.array([(mm * ys ** (mm - 1) / gen.y_scale if mm else 0.0) * px[n] for mm, n in gen.index])


def delta_gamma(pricer: ExpansionPricer, payoff: PayoffSpec | float) -> SpotGreeks:
    """Delta and Gamma in the spot S = e^{x0}; a float payoff means a call with that log-strike.

    With primes for x0-derivatives, Delta = e^{-x0} pi' and
    Gamma = e^{-2 x0} (pi'' - pi').
    """
    gen = pricer.generator
    if gen.model.kind == "garch_variance":
        raise UnsupportedParameterError("spot Greeks are undefined for the variance model")
    d1, d2 = _initial_derivatives(gen)
    GT = gen.G.T.tocsr()
    T = gen.model.T
    both = expm_action(GT, np.stack([d1, d2], axis=1), T)
    pos = gen.x_positions[: pricer.order + 1]
    l1, l2 = both[pos, 0], both[pos, 1]
    if not isinstance(payoff, PayoffSpec):
        payoff = pricer.payoff(float(payoff))
    f = pricer.coefficients(payoff)
    s = math.exp(gen.model.x0)
    dser = np.cumsum(f * l1) / s
    gser = np.cumsum(f * (l2 - l1)) / s**2
    return SpotGreeks(float(f @ pricer.ell), float(dser[-1]), float(gser[-1]), dser, gser)


def block_expm_imag(A: np.ndarray, E: np.ndarray, h: float = COMPLEX_STEP) -> tuple[np.ndarray, np.ndarray]:
    """Real and imaginary parts of exp(A + i h E) from the 2n x 2n real block exponential."""
    A = np.asarray(A, dtype=float)
    E = np.asarray(E, dtype=float)
    n = A.shape[0]
    big = np.block([[A, -h * E], [h * E, A]])
    M = linalg.expm(big)
    return M[:n, :n], M[n:, :n]


def block_expm_action_imag(A, E, v: np.ndarray, h: float = COMPLEX_STEP) -> tuple[np.ndarray, np.ndarray]:
    """Real and imaginary parts of exp(A + i h E) v for sparse A, E and real v."""
    A = sparse.csr_matrix(A)
    E = sparse.csr_matrix(E)
    n = A.shape[0]
    big = sparse.bmat([[A, -h * E], [h * E, A]], format="csr")
    v = np.asarray(v, dtype=float)
    rhs = np.concatenate([v, np.zeros_like(v)], axis=0)
    out = expm_action(big, rhs, 1.0)
    return out[:n], out[n:]


def likelihood_sensitivity(gen: GeneratorRep, parameter: str, h: float = COMPLEX_STEP) -> np.ndarray:
    """d l_n / d parameter for n = 0..N from one block exponential action.

    Uses exp(T (G + i h dG))^T q0 = v + i h dv + O(h^2).  For the horizon T
    the perturbation is (T + i h) G(T + i h).
    """
    if not 0 < h < 1e-4:
        raise InvalidParameterError("complex step must lie in (0, 1e-4)")
    model = gen.model
    if parameter in ("y0", "x0"):
        # only the initial vector depends on the starting state
        if parameter == "y0":
            dq = _initial_y_derivative(gen)
        else:
            dq = _initial_derivatives(gen)[0]
        return expm_action(gen.G.T.tocsr(), dq, model.T)[gen.x_positions]
    if parameter not in PARAMETER_NAMES:
        raise UnsupportedParameterError(f"unknown parameter {parameter!r}")
    if parameter in ("ymin", "ymax") and model.kind != "jacobi":
        raise UnsupportedParameterError(f"{parameter} only applies to the Jacobi model")
    T = model.T
    GT = gen.G.T.tocsr()
    ET = generator_derivative(gen, parameter).T.tocsr()
    if parameter == "T":
        ET = T * ET + GT
    else:
        ET = T * ET
    _, imag = block_expm_action_imag(T * GT, ET, gen.q0, h)
    return imag[gen.x_positions] / h


def param_sensitivity(pricer: ExpansionPricer, log_strike: float, parameter: str,
                      h: float = COMPLEX_STEP) -> float:
    """d pi^(N) / d parameter with the auxiliary density held fixed.

    The discount factor e^{-rT} inside f_n is differentiated analytically.
    """
    f = pricer.coefficients(pricer.payoff(log_strike))
    dl = likelihood_sensitivity(pricer.generator, parameter, h)
    val = float(f @ dl)
    m = pricer.model
    if parameter == "r":
        val -= m.T * float(f @ pricer.ell)
    elif parameter == "T":
        val -= m.r * float(f @ pricer.ell)
    return val


def calibration_gradient(pricer: ExpansionPricer, log_strikes, parameters=None,
                         h: float = COMPLEX_STEP) -> np.ndarray:
    """Jacobian (strikes x parameters) of expansion prices; one block action per parameter.

    Defaults to the model's (kappa, theta, vol-of-vol, rho) parameters.
    """
    if parameters is None:
        parameters = _free_parameters(pricer.model)
    ks = list(np.atleast_1d(log_strikes))
    F = np.stack([pricer.coefficients(pricer.payoff(float(k))) for k in ks])
    out = np.empty((len(ks), len(parameters)))
    for j, p in enumerate(parameters):
        dl = likelihood_sensitivity(pricer.generator, p, h)
        col = F @ dl
        if p == "r":
            col -= pricer.model.T * (F @ pricer.ell)
        elif p == "T":
            col -= pricer.model.r * (F @ pricer.ell)
        out[:, j] = col
    return out


def loss_gradient(pricer: ExpansionPricer, quotes, parameters=None,
                  h: float = COMPLEX_STEP) -> tuple[float, np.ndarray]:
    """Squared-error loss sum (pi_i - market_i)^2 over (log_strike, price) quotes and its gradient."""
    quotes = np.asarray(quotes, dtype=float).reshape(-1, 2)
    ks, market = quotes[:, 0], quotes[:, 1]
    model_prices = np.array([pricer.series(float(k)).value for k in ks])
    resid = model_prices - market
    J = calibration_gradient(pricer, ks, parameters, h)
    return float(resid @ resid), 2.0 * resid @ J


def _free_parameters(model) -> list[str]:
    base = ["kappa", "theta", "rho"]
    if model.kind in ("hull_white", "garch_variance"):
        base += ["nu", "gamma"]
    else:
        base += ["sigma"]
    if model.kind == "garch_variance":
        base.remove("rho")
    return base

