"""Reference prices: Black-Scholes inversion, Heston Fourier integrals, Monte Carlo."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, optimize, special

from .errors import IntegrationFailureError, InvalidParameterError, UnsupportedModelError
from .models import ModelSpec

__all__ = [
    "NOT_RETRIEVABLE",
    "bs_call",
    "implied_vol",
    "FourierQuote",
    "heston_fourier",
    "McResult",
    "mc_price",
    "mc_conditional_call",
    "mc_terminal_samples",
]

NOT_RETRIEVABLE = "--"
MAX_VOL = 0.99


def bs_call(forward: float, strike: float, T: float, vol, discount: float = 1.0):
    """Discounted Black-Scholes call on a forward."""
    vol = np.asarray(vol, dtype=float)
    sd = vol * math.sqrt(T)
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = (math.log(forward / strike) + 0.5 * sd * sd) / sd
        d2 = d1 - sd
        val = discount * (forward * special.ndtr(d1) - strike * special.ndtr(d2))
    intrinsic = discount * max(forward - strike, 0.0)
    return np.where(sd > 0, val, intrinsic)


def implied_vol(price: float, forward: float, strike: float, T: float,
                discount: float = 1.0, tol: float = 1e-12) -> float | None:
    """Black-Scholes implied volatility, or None when not retrievable.

    None is returned for prices outside the no-arbitrage bounds and for
    volatilities above 99%.
    """
    if not np.isfinite(price):
        return None
    lower = discount * max(forward - strike, 0.0)
    upper = discount * forward
    if price <= lower or price >= upper:
        return None
    if price > float(bs_call(forward, strike, T, MAX_VOL, discount)):
        return None

    def f(s):
        return float(bs_call(forward, strike, T, s, discount)) - price

    lo = 1e-10
    if f(lo) > 0:
        return None
    return optimize.brentq(f, lo, MAX_VOL, xtol=tol, rtol=4 * np.finfo(float).eps, maxiter=500)


# --------------------------------------------------------------------------- #
# Heston Fourier pricing
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class FourierQuote:
    price: float
    delta: float | None
    gamma: float | None
    P0: float
    P1: float
    upper_limit: float
    evaluations: int


def _heston_phi(model: ModelSpec, u: np.ndarray, j: int) -> np.ndarray:
    """exp(C theta + D v0) for the j-th pseudo probability (no e^{iux} factor)."""
    kap, th, sig, rho, T, v0 = model.kappa, model.theta, model.sigma, model.rho, model.T, model.y0
    iu = 1j * u
    fourier_alpha = -0.5 * u * u - 0.5 * iu + j * iu
    fourier_beta = kap - rho * sig * j - rho * sig * iu
    if sig == 0:
        # deterministic variance
        avg = th * T + (v0 - th) * (1 - math.exp(-kap * T)) / kap
        return np.exp(fourier_alpha * avg)
    c0 = np.sqrt(fourier_beta**2 - 2 * fourier_alpha * sig**2)
    c_minus = (fourier_beta - c0) / sig**2
    c_plus = (fourier_beta + c0) / sig**2
    g = c_minus / c_plus
    e = np.exp(-c0 * T)
    D = c_minus * (1 - e) / (1 - g * e)
    C = kap * (c_minus * T - 2 / sig**2 * np.log((1 - g * e) / (1 - g)))
    return np.exp(C * th + D * v0)


def _fourier_integral(fun, U0: float = 200.0, tol: float = 1e-13, max_U: float = 1e5):
    """Integrate fun over (0, U), doubling U until the tail value is negligible."""
    U = U0
    while abs(fun(U)) > tol and U < max_U:
        U *= 2
    val, err, info = integrate.quad(fun, 0.0, U, limit=1000, epsabs=1e-14, epsrel=1e-12,
                                    full_output=True)[:3]
    if err > 1e-8:
        raise IntegrationFailureError(f"Fourier integral error estimate {err:.1e}")
    return val, U, info["neval"]


def heston_fourier(model: ModelSpec, log_strike: float, greeks: bool = False) -> FourierQuote:
    """Discounted call price e^{-rT}(F P1 - e^k P0) with pseudo probabilities

        P_j = 1/2 + 1/pi int_0^inf Re(phi_j(u) e^{iux} / (iu)) du,
        x = x0 + (r - delta) T - k.

    Delta and Gamma use dP_j/dx0 = 1/pi int Re(phi_j e^{iux}) du and
    d2P_j/dx0^2 = 1/pi int Re(iu phi_j e^{iux}) du; Gamma follows from
    e^{-2 x0} (pi'' - pi') with primes denoting x0-derivatives.
    """
    if model.kind != "heston":
        raise UnsupportedModelError("Fourier pricing is implemented for the Heston model")
    x = model.x0 + (model.r - model.delta) * model.T - log_strike
    F = math.exp(model.x0 + (model.r - model.delta) * model.T)
    K = math.exp(log_strike)
    disc = math.exp(-model.r * model.T)

    def integrand(j, power):
        def f(u):
            u = max(u, 1e-300)
            val = _heston_phi(model, np.array([u]), j)[0] * np.exp(1j * u * x)
            return float(np.real(val * (1j * u) ** (power - 1)))
        return f

    P, dP, d2P = [], [], []
    U_used, nev = 0.0, 0
    for j in (0, 1):
        val, U, n = _fourier_integral(integrand(j, 0))
        P.append(0.5 + val / math.pi)
        U_used, nev = max(U_used, U), nev + n
        if greeks:
            v1, _, n1 = _fourier_integral(integrand(j, 1))
            v2, _, n2 = _fourier_integral(integrand(j, 2))
            dP.append(v1 / math.pi)
            d2P.append(v2 / math.pi)
            nev += n1 + n2
    price = disc * (F * P[1] - K * P[0])
    delta = gamma = None
    if greeks:
        d1 = disc * (F * (P[1] + dP[1]) - K * dP[0])
        d2 = disc * (F * (P[1] + 2 * dP[1] + d2P[1]) - K * d2P[0])
        S = math.exp(model.x0)
        delta = d1 / S
        gamma = (d2 - d1) / S**2
    return FourierQuote(price, delta, gamma, P[0], P[1], U_used, nev)


# --------------------------------------------------------------------------- #
# Monte Carlo
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class McResult:
    estimate: float
    stderr: float
    paths: int
    truncations: int = 0


def _y_bounds(model: ModelSpec) -> tuple[float, float]:
    k = model.kind
    if k == "jacobi":
        return model.ymin, model.ymax
    if k == "heston":
        return 0.0, np.inf
    if k in ("hull_white", "garch_variance") and model.gamma > 0:
        return -model.nu / model.gamma, np.inf
    return -np.inf, np.inf


def _volatility_terms(model: ModelSpec, y: np.ndarray):
    """Return (diffusion of Y, spot variance V, loading of X on W1 per unit vol)."""
    k = model.kind
    if k == "jacobi":
        Q = (y - model.ymin) * (model.ymax - y) / (math.sqrt(model.ymax) - math.sqrt(model.ymin)) ** 2
        Q = np.maximum(Q, 0.0)
        return model.sigma * np.sqrt(Q), y, np.sqrt(np.maximum(y, 0.0))
    if k == "heston":
        sq = np.sqrt(np.maximum(y, 0.0))
        return model.sigma * sq, np.maximum(y, 0.0), sq
    if k == "stein_stein":
        return np.full_like(y, model.sigma), y * y, y
    if k == "hull_white":
        return model.nu + model.gamma * y, y * y, y
    if k == "garch_variance":
        return model.nu + model.gamma * y, np.maximum(y, 0.0), np.sqrt(np.maximum(y, 0.0))
    raise UnsupportedModelError(k)


def mc_terminal_samples(model: ModelSpec, paths: int, dt: float, seed=None,
                        antithetic: bool = False, chunk: int = 200_000):
    """Euler samples of X_T (or I_T for the GARCH variance model), with truncation count."""
    if paths < 1:
        raise InvalidParameterError("paths must be >= 1")
    steps = max(1, int(round(model.T / dt)))
    h = model.T / steps
    sq = math.sqrt(h)
    lo, hi = _y_bounds(model)
    rng = np.random.default_rng(seed)
    out = np.empty(paths)
    trunc = 0
    rho = model.rho
    rc = math.sqrt(1 - rho * rho)
    done = 0
    while done < paths:
        n = min(chunk, paths - done)
        base = (n + 1) // 2 if antithetic else n
        Y = np.full(base * (2 if antithetic else 1), float(model.y0))
        X = np.full_like(Y, model.x0 if model.kind != "garch_variance" else 0.0)
        for _ in range(steps):
            z1 = rng.standard_normal(base)
            z2 = rng.standard_normal(base)
            if antithetic:
                z1 = np.concatenate([z1, -z1])
                z2 = np.concatenate([z2, -z2])
            s_y, V, load = _volatility_terms(model, Y)
            dW1 = sq * z1
            if model.kind == "garch_variance":
                X = X + Y * h / model.T
            else:
                X = X + (model.r - model.delta - 0.5 * V) * h + load * (rho * dW1 + rc * sq * z2)
            Yn = Y + model.kappa * (model.theta - Y) * h + s_y * dW1
            bad = (Yn < lo) | (Yn > hi)
            trunc += int(bad.sum())
            Y = np.clip(Yn, lo, hi)
        out[done : done + n] = X[:n]
        done += n
    return out, trunc


def mc_price(model: ModelSpec, payoff, paths: int = 100_000, dt: float = 1 / 252, seed=None,
             antithetic: bool = False) -> McResult:
    """Discounted payoff mean and standard error from Euler paths."""
    xs, trunc = mc_terminal_samples(model, paths, dt, seed, antithetic)
    vals = np.asarray(payoff(xs), dtype=float)
    if antithetic:
        half = (len(vals) + 1) // 2
        pair = 0.5 * (vals[:half] + vals[half : 2 * half]) if len(vals) >= 2 * half else vals
        se = float(np.std(pair, ddof=1) / math.sqrt(len(pair))) if len(pair) > 1 else 0.0
    else:
        se = float(np.std(vals, ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
    return McResult(float(np.mean(vals)), se, paths, trunc)


def mc_conditional_call(model: ModelSpec, log_strikes, paths: int = 1_000_000, dt: float = 1 / 2000,
                        seed=None, chunk: int = 250_000) -> list[McResult]:
    """Call prices by simulating the volatility factor only.

    Given the path of Y, X_T is Gaussian with mean
    x0 + (r - delta) T - 1/2 int V dt + rho int sqrt(V) dW1 and variance
    (1 - rho^2) int V dt, so the call is a Black-Scholes value per path.
    """
    if model.kind not in ("heston", "stein_stein", "hull_white", "jacobi"):
        raise UnsupportedModelError(model.kind)
    ks = np.atleast_1d(np.asarray(log_strikes, dtype=float))
    steps = max(1, int(round(model.T / dt)))
    h = model.T / steps
    sq = math.sqrt(h)
    lo, hi = _y_bounds(model)
    rng = np.random.default_rng(seed)
    rho = model.rho
    sums = np.zeros(len(ks))
    sums2 = np.zeros(len(ks))
    trunc = 0
    done = 0
    disc = math.exp(-model.r * model.T)
    while done < paths:
        n = min(chunk, paths - done)
        Y = np.full(n, float(model.y0))
        IV = np.zeros(n)
        SW = np.zeros(n)
        for _ in range(steps):
            dW = sq * rng.standard_normal(n)
            s_y, V, load = _volatility_terms(model, Y)
            IV += V * h
            SW += load * dW
            Yn = Y + model.kappa * (model.theta - Y) * h + s_y * dW
            bad = (Yn < lo) | (Yn > hi)
            trunc += int(bad.sum())
            Y = np.clip(Yn, lo, hi)
        M = model.x0 + (model.r - model.delta) * model.T - 0.5 * IV + rho * SW
        C = (1 - rho * rho) * IV
        sd = np.sqrt(np.maximum(C, 1e-300))
        for i, k in enumerate(ks):
            d1 = (M - k + C) / sd
            v = disc * (np.exp(M + 0.5 * C) * special.ndtr(d1) - math.exp(k) * special.ndtr(d1 - sd))
            sums[i] += v.sum()
            sums2[i] += (v * v).sum()
        done += n
    out = []
    for i in range(len(ks)):
        mean = sums[i] / paths
        var = max(sums2[i] / paths - mean * mean, 0.0) * paths / max(paths - 1, 1)
        out.append(McResult(float(mean), float(math.sqrt(var / paths)), paths, trunc))
    return out
