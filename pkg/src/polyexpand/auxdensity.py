"""Auxiliary mixture densities for polynomial expansions.

Gaussian mixtures are built from a quantized Brownian increment: for each
quantization point the volatility path is advanced with an IJK-type scheme,
which gives a conditional mean M_T and variance C_T of the log price.  Further
constructions: an extra component fitted to a higher moment, a two-component
Gaussian mixture with a fixed dispersed component, and a shifted Gamma density
for the running average of the variance.
"""
from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import integrate, linalg, optimize, special

from .basis import (
    GammaParams,
    GaussianParams,
    RecurrenceBasis,
    component_recurrence,
    mixture_quadrature,
    mixture_recurrence,
    params_from_dict,
)
from .errors import (
    InfeasibleMixtureError,
    InvalidMomentsError,
    InvalidParameterError,
    NoSolutionError,
    NonConvergenceError,
    UnsupportedModelError,
    ZeroVarianceComponentError,
)
from .models import ModelSpec, central_moments, mean_variance

__all__ = [
    "MixtureDensity",
    "QuantizerGrid",
    "ComponentStats",
    "lloyd_quantizer",
    "ijk_component_stats",
    "build_gaussian_mixture",
    "extend_with_moment_match",
    "jacobi_two_component",
    "gamma_auxiliary_for_variance",
    "quantized_mixture",
    "default_auxiliary",
]

CACHE_ENV = "POLYEXPAND_CACHE_DIR"


@dataclass(frozen=True)
class MixtureDensity:
    """Finite mixture sum_k c_k w_k of Gaussian or shifted Gamma densities."""

    components: tuple

    def __post_init__(self):
        comps = tuple((float(c), p) for c, p in self.components)
        if not comps:
            raise InvalidParameterError("empty mixture")
        w = np.array([c for c, _ in comps])
        if np.any(w <= 0):
            raise InvalidParameterError("mixture weights must be positive")
        if abs(w.sum() - 1.0) > 1e-12:
            raise InvalidParameterError(f"mixture weights sum to {w.sum()!r}")
        kinds = {type(p) for _, p in comps}
        if len(kinds) > 1:
            raise InvalidParameterError("mixtures must be homogeneous in component kind")
        object.__setattr__(self, "components", comps)

    @classmethod
    def single(cls, params) -> "MixtureDensity":
        return cls(((1.0, params),))

    @property
    def kind(self) -> str:
        return "gaussian" if isinstance(self.components[0][1], GaussianParams) else "gamma"

    @property
    def weights(self) -> np.ndarray:
        return np.array([c for c, _ in self.components])

    @property
    def params(self) -> list:
        return [p for _, p in self.components]

    def __len__(self):
        return len(self.components)

    def pdf(self, x):
        return sum(c * p.pdf(x) for c, p in self.components)

    def raw_moments(self, max_degree: int) -> np.ndarray:
        return sum(c * p.raw_moments(max_degree) for c, p in self.components)

    @property
    def mean(self) -> float:
        return float(sum(c * p.mean for c, p in self.components))

    @property
    def variance(self) -> float:
        m = self.mean
        return float(sum(c * (p.variance + (p.mean - m) ** 2) for c, p in self.components))

    def central_moment(self, j: int) -> float:
        """E[(X - mean)^j] computed component-wise about the mixture mean."""
        m = self.mean
        total = 0.0
        for c, p in self.components:
            shifted = _shift_params(p, -m)
            total += c * shifted.raw_moments(j)[j]
        return float(total)

    def component_bases(self, order: int) -> list[RecurrenceBasis]:
        return [component_recurrence(p, order) for _, p in self.components]

    def recurrence(self, order: int) -> RecurrenceBasis:
        comps = list(zip(self.weights, self.component_bases(order)))
        return mixture_recurrence(comps, order, descriptor=self.to_dict())

    def quadrature(self, order: int):
        return mixture_quadrature(list(zip(self.weights, self.component_bases(order))), order)

    def support(self) -> tuple[float, float]:
        lo = min(p.support()[0] for p in self.params)
        hi = max(p.support()[1] for p in self.params)
        return lo, hi

    def total_mass(self) -> float:
        """Integral of the density by adaptive quadrature, component by component."""
        total = 0.0
        for c, p in self.components:
            lo, hi = p.support()
            val, _ = integrate.quad(p.pdf, lo, hi, epsabs=1e-13, epsrel=1e-12, limit=200)
            total += c * val
        return total

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        idx = rng.choice(len(self.components), size=size, p=self.weights)
        out = np.empty(size)
        for k, (_, p) in enumerate(self.components):
            sel = idx == k
            out[sel] = p.sample(rng, int(sel.sum()))
        return out

    def shifted(self, delta: float) -> "MixtureDensity":
        return MixtureDensity(tuple((c, _shift_params(p, delta)) for c, p in self.components))

    def to_dict(self) -> dict:
        return {"kind": self.kind,
                "components": [{"weight": c, **p.to_dict()} for c, p in self.components]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "MixtureDensity":
        comps = []
        for item in d["components"]:
            item = dict(item)
            w = item.pop("weight")
            comps.append((w, params_from_dict(item)))
        return cls(tuple(comps))


def _shift_params(p, delta: float):
    if isinstance(p, GaussianParams):
        return GaussianParams(p.mu + delta, p.sigma)
    return GammaParams(p.alpha, p.beta, p.xi + delta, p.orientation)


# --------------------------------------------------------------------------- #
# Quantization of the standard normal distribution
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class QuantizerGrid:
    points: np.ndarray
    weights: np.ndarray
    residual: float = 0.0

    @property
    def size(self) -> int:
        return len(self.points)

    def distortion(self) -> float:
        return _distortion(self.points)


def _phi(x):
    return np.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)


def _cells(z: np.ndarray):
    mid = 0.5 * (z[1:] + z[:-1])
    a = np.concatenate([[-np.inf], mid])
    b = np.concatenate([mid, [np.inf]])
    # probabilities via the tail on the positive side to avoid cancellation
    P = np.where(b <= 0, special.ndtr(b) - special.ndtr(a), special.ndtr(-a) - special.ndtr(-b))
    fa = np.where(np.isfinite(a), _phi(np.where(np.isfinite(a), a, 0.0)), 0.0)
    fb = np.where(np.isfinite(b), _phi(np.where(np.isfinite(b), b, 0.0)), 0.0)
    return a, b, P, fa, fb


def _distortion(z: np.ndarray) -> float:
    a, b, P, fa, fb = _cells(z)
    af = np.where(np.isfinite(a), a, 0.0)
    bf = np.where(np.isfinite(b), b, 0.0)
    second = P + af * fa - bf * fb
    first = fa - fb
    return float(np.sum(second - 2 * z * first + z * z * P))


def _cache_path(K: int) -> Path | None:
    root = os.environ.get(CACHE_ENV)
    if not root:
        return None
    return Path(root) / f"quantizer_{K}.json"


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def lloyd_quantizer(K: int, tol: float = 1e-10, max_iter: int = 10_000,
                    use_cache: bool = True) -> QuantizerGrid:
    """Stationary K-point quantizer of N(0, 1).

    Lloyd iterations (points <- conditional cell means) bring the grid close
    to the fixed point, then Newton steps on the tridiagonal stationarity
    system z_k P_k = phi(a_k) - phi(b_k) finish the convergence.
    """
    if K < 1:
        raise InvalidParameterError("K must be >= 1")
    path = _cache_path(K) if use_cache else None
    if path is not None and path.exists():
        try:
            d = json.loads(path.read_text())
            if d.get("K") == K and d.get("tol", 1.0) <= tol:
                return QuantizerGrid(np.array(d["points"]), np.array(d["weights"]), d["residual"])
        except (ValueError, KeyError):
            pass
    if K == 1:
        return QuantizerGrid(np.zeros(1), np.ones(1), 0.0)

    z = special.ndtri((np.arange(K) + 0.5) / K)
    resid = np.inf
    for it in range(max_iter):
        _, _, P, fa, fb = _cells(z)
        new = (fa - fb) / P
        resid = float(np.max(np.abs(new - z)))
        z = new
        if resid < 1e-5:
            break
    for it in range(100):
        a, b, P, fa, fb = _cells(z)
        F = z * P - (fa - fb)
        resid = float(np.max(np.abs(F / P)))
        if resid < tol:
            break
        af = np.where(np.isfinite(a), a, 0.0)
        bf = np.where(np.isfinite(b), b, 0.0)
        diag = P + fb * (z - bf) / 2 - fa * (z - af) / 2
        upper = (fb * (z - bf) / 2)[:-1]      # dF_k / dz_{k+1}
        lower = (fa * (af - z) / 2)[1:]       # dF_k / dz_{k-1}
        ab = np.zeros((3, K))
        ab[0, 1:] = upper
        ab[1] = diag
        ab[2, :-1] = lower
        step = linalg.solve_banded((1, 1), ab, F)
        z = z - step
        z = 0.5 * (z - z[::-1])  # keep exact antisymmetry
    else:
        raise NonConvergenceError(f"quantizer for K={K} did not converge (residual {resid:.2e})")
    if resid > tol:
        raise NonConvergenceError(f"quantizer for K={K} stalled at residual {resid:.2e}")
    _, _, P, _, _ = _cells(z)
    P = 0.5 * (P + P[::-1])
    grid = QuantizerGrid(z, P / P.sum(), resid)
    if path is not None:
        _atomic_write(path, json.dumps({"K": K, "tol": tol, "residual": resid,
                                        "points": z.tolist(), "weights": grid.weights.tolist()}))
    return grid


# --------------------------------------------------------------------------- #
# Conditional Gaussian scenarios
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class ComponentStats:
    mean: np.ndarray
    variance: np.ndarray
    weights: np.ndarray
    floored: int = 0


def _increments(grid: QuantizerGrid, steps: int, T: float, rng):
    """Brownian increments of shape (K, steps) and scenario weights."""
    dt = T / steps
    if steps == 1:
        return grid.points[:, None] * math.sqrt(dt), grid.weights
    # Latin-hypercube stratification per step with equal weights
    K = grid.size
    rng = np.random.default_rng(rng)
    u = (np.stack([rng.permutation(K) for _ in range(steps)], axis=1) + rng.random((K, steps))) / K
    return special.ndtri(u) * math.sqrt(dt), np.full(K, 1.0 / K)


def ijk_component_stats(model: ModelSpec, grid: QuantizerGrid | int, steps: int = 1,
                        rng=None) -> ComponentStats:
    """Conditional mean and variance of X_T along each quantized volatility path.

    The stochastic integral of the volatility against W1 uses the left point
    plus the Milstein correction, so it stays adapted.
    """
    if model.kind not in ("stein_stein", "hull_white", "heston"):
        raise UnsupportedModelError(f"no conditional Gaussian scheme for {model.kind}")
    if steps < 1:
        raise InvalidParameterError("steps must be >= 1")
    if isinstance(grid, int):
        grid = lloyd_quantizer(grid)
    T = model.T
    dt = T / steps
    dW, weights = _increments(grid, steps, T, rng)
    K = dW.shape[0]
    kap, th, rho = model.kappa, model.theta, model.rho
    Y = np.full(K, float(model.y0))
    M = np.full(K, model.x0 + (model.r - model.delta) * T)
    V = np.zeros(K)
    floored = 0
    for i in range(steps):
        w = dW[:, i]
        corr = w * w - dt
        if model.kind == "stein_stein":
            Yn = Y + kap * (th - Y) * dt + model.sigma * w
            M += rho * Y * w + 0.5 * rho * model.sigma * corr
            v = 0.5 * (Y * Y + Yn * Yn) * dt
        elif model.kind == "hull_white":
            s = model.nu + model.gamma * Y
            Yn = Y + kap * (th - Y) * dt + s * w + 0.5 * model.gamma * s * corr
            M += rho * Y * w + 0.5 * rho * s * corr
            v = 0.5 * (Y * Y + Yn * Yn) * dt
        else:
            sq = np.sqrt(np.maximum(Y, 0.0))
            Yn = Y + kap * (th - Y) * dt + model.sigma * sq * w + 0.25 * model.sigma**2 * corr
            neg = Yn < 0
            floored += int(neg.sum())
            Yn = np.where(neg, 0.0, Yn)
            M += rho * sq * w + 0.25 * rho * model.sigma * corr
            v = 0.5 * (Y + Yn) * dt
        M -= 0.5 * v
        V += v
        Y = Yn
    return ComponentStats(M, (1 - rho**2) * V, np.asarray(weights, dtype=float), floored)


def build_gaussian_mixture(stats: ComponentStats, match_first_moment: bool = True,
                           target_mean: float | None = None,
                           variance_floor: float | None = None) -> MixtureDensity:
    """Mixture of N(M_k, C_k) with an optional common shift of the means."""
    var = np.asarray(stats.variance, dtype=float)
    if np.any(var < 0):
        raise InvalidParameterError("negative conditional variance")
    if np.any(var == 0):
        if variance_floor is None:
            raise ZeroVarianceComponentError("a component has zero variance and no floor is set")
        var = np.maximum(var, variance_floor)
    mu = np.asarray(stats.mean, dtype=float)
    w = np.asarray(stats.weights, dtype=float)
    w = w / w.sum()
    if match_first_moment:
        if target_mean is None:
            raise InvalidParameterError("target_mean required to match the first moment")
        mu = mu + (target_mean - float(w @ mu))
    comps = tuple((float(c), GaussianParams(float(m), float(math.sqrt(v)))) for c, m, v in zip(w, mu, var))
    return MixtureDensity(comps)


def extend_with_moment_match(mixture: MixtureDensity, target_mean: float, target_moment: float,
                             matched_order: int, weight: float = 0.05) -> MixtureDensity:
    """Append a Gaussian with ``weight`` so that the matched_order-th central moment fits.

    The new component starts at mean zero, the other weights are scaled by
    1 - weight, and all means are then shifted by a common constant so that
    the mixture mean equals ``target_mean``.  Its variance solves the moment
    equation by bracketing on log-variance over [1e-12, 10].
    """
    if matched_order < 2 or matched_order % 2:
        raise InvalidParameterError("matched order must be even and >= 2")
    if not 0 < weight < 1:
        raise InvalidParameterError("weight must lie in (0, 1)")
    base = [(c * (1 - weight), p) for c, p in mixture.components]

    def build(log_var: float) -> MixtureDensity:
        comps = base + [(weight, GaussianParams(0.0, math.exp(0.5 * log_var)))]
        mix = MixtureDensity(tuple(comps))
        return mix.shifted(target_mean - mix.mean)

    def excess(log_var: float) -> float:
        return build(log_var).central_moment(matched_order) / target_moment - 1.0

    lo, hi = math.log(1e-12), math.log(10.0)
    f_lo, f_hi = excess(lo), excess(hi)
    if f_lo > 0:
        raise NoSolutionError("the remaining mixture already exceeds the target moment")
    if f_hi < 0:
        raise NoSolutionError("target moment not reachable with variance <= 10")
    root = optimize.brentq(excess, lo, hi, xtol=1e-14, rtol=1e-14, maxiter=500)
    return build(root)


def jacobi_two_component(model: ModelSpec, c1: float = 0.95, eps: float = 1e-4) -> MixtureDensity:
    """Two Gaussians with common mean E[X_T]; the second has sigma = sqrt(ymax T / 2) + eps.

    The first variance follows from c1 = (s2^2 - Var) / (s2^2 - s1^2), so that
    mean and variance of the mixture match those of X_T.
    """
    if not 0 < c1 < 1:
        raise InvalidParameterError("c1 must lie in (0, 1)")
    if model.kind != "jacobi":
        raise UnsupportedModelError("two-component construction is for the Jacobi model")
    mean, var = mean_variance(model)
    s2 = math.sqrt(model.ymax * model.T / 2) + eps
    s2sq = s2 * s2
    s1sq = s2sq - (s2sq - var) / c1
    if not s1sq > 0:
        raise InfeasibleMixtureError(f"solved first variance {s1sq} is not positive")
    if s1sq == s2sq:
        raise InfeasibleMixtureError("components coincide")
    return MixtureDensity(((c1, GaussianParams(mean, math.sqrt(s1sq))),
                           (1 - c1, GaussianParams(mean, s2))))


def gamma_auxiliary_for_variance(model: ModelSpec) -> MixtureDensity:
    """Shifted Gamma with xi = -nu/gamma, mean E[I_T] and twice the variance of I_T."""
    if model.kind != "garch_variance":
        raise UnsupportedModelError("Gamma auxiliary is defined for the GARCH variance model")
    mean, var = mean_variance(model)
    xi = -model.nu / model.gamma if model.gamma > 0 else 0.0
    if not var > 0 or not mean > xi:
        raise InvalidMomentsError(f"cannot fit Gamma to mean {mean} and variance {var}")
    beta = (mean - xi) / (2 * var)
    alpha = (mean - xi) ** 2 / (2 * var)
    if alpha < 1:
        raise InvalidMomentsError(f"fitted shape {alpha} below 1")
    return MixtureDensity.single(GammaParams(alpha, beta, xi))


def quantized_mixture(model: ModelSpec, K: int, extend: bool = False, matched_order: int = 20,
                      steps: int = 1, rng=None, extra_weight: float = 0.05) -> MixtureDensity:
    """Gaussian mixture from a K-point quantizer, optionally with the extra moment component."""
    stats = ijk_component_stats(model, lloyd_quantizer(K), steps, rng)
    mean, _ = mean_variance(model)
    mix = build_gaussian_mixture(stats, True, mean)
    if extend:
        target = central_moments(model, matched_order)[matched_order]
        mix = extend_with_moment_match(mix, mean, target, matched_order, extra_weight)
    return mix


def default_auxiliary(model: ModelSpec, components: int | None = None, matched_order: int | None = None,
                      steps: int = 1, rng=None) -> MixtureDensity:
    """Auxiliary density used by the command line for each model kind.

    Jacobi: two components (or one Gaussian with the model's mean and
    variance when ``components == 1``); GARCH variance: shifted Gamma;
    otherwise a quantized Gaussian mixture with ``components`` scenarios,
    extended to fit the ``matched_order``-th moment when given.
    """
    if model.kind == "garch_variance":
        return gamma_auxiliary_for_variance(model)
    if model.kind == "jacobi":
        if components == 1:
            mean, var = mean_variance(model)
            return MixtureDensity.single(GaussianParams(mean, math.sqrt(var)))
        return jacobi_two_component(model)
    K = 21 if components is None else int(components)
    if matched_order is None:
        return quantized_mixture(model, K, steps=steps, rng=rng)
    return quantized_mixture(model, K, True, matched_order, steps, rng)
