"""Price series, density approximations, error diagnostics and the pricing pipeline."""
from __future__ import annotations

import functools
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .auxdensity import MixtureDensity
from .basis import RecurrenceBasis, change_of_basis, gauss_quadrature
from .benchmarks import NOT_RETRIEVABLE, implied_vol
from .coefficients import PayoffSpec, component_call_coeffs, mixture_coeffs, quadrature_coeffs
from .errors import InvalidParameterError, OrderMismatchError
from .models import GeneratorRep, ModelSpec, build_generator, likelihood_coefficients

__all__ = [
    "PriceSeries",
    "price",
    "density_approximation",
    "l2_divergence",
    "cs_error_bound",
    "ErrorDiagnostics",
    "ExpansionPricer",
    "default_y_scale",
    "series_csv",
]


@dataclass(frozen=True)
class PriceSeries:
    """Terms f_n l_n and their partial sums."""

    terms: np.ndarray

    @property
    def order(self) -> int:
        return len(self.terms) - 1

    @functools.cached_property
    def partial_sums(self) -> np.ndarray:
        return np.cumsum(self.terms)

    @property
    def value(self) -> float:
        return float(self.partial_sums[-1])

    def at(self, order: int) -> float:
        if not 0 <= order <= self.order:
            raise InvalidParameterError(f"order {order} outside 0..{self.order}")
        return float(self.partial_sums[order])


def price(f, ell, order: int | None = None) -> PriceSeries:
    f = np.asarray(f, dtype=float)
    ell = np.asarray(ell, dtype=float)
    if f.shape != ell.shape:
        raise OrderMismatchError(f"coefficient lengths differ: {len(f)} vs {len(ell)}")
    N = len(f) - 1 if order is None else order
    if not 0 <= N < len(f):
        raise OrderMismatchError(f"order {N} needs {N + 1} coefficients, have {len(f)}")
    return PriceSeries(f[: N + 1] * ell[: N + 1])


def density_approximation(ell, basis: RecurrenceBasis, aux: MixtureDensity, x, order: int | None = None):
    """g^(N)(x) = w(x) sum_n l_n H_n(x)."""
    ell = np.asarray(ell, dtype=float)
    N = len(ell) - 1 if order is None else order
    x = np.asarray(x, dtype=float)
    H = basis.evaluate(x, N)
    return aux.pdf(x) * np.tensordot(ell[: N + 1], H, axes=1)


def l2_divergence(ell, order: int | None = None) -> np.ndarray:
    """Cumulative sum_{n=1}^N l_n^2, an estimate of the chi-square divergence of g from w."""
    ell = np.asarray(ell, dtype=float)
    N = len(ell) - 1 if order is None else order
    out = np.concatenate([[0.0], np.cumsum(ell[1 : N + 1] ** 2)])
    return out


def cs_error_bound(f, gen: GeneratorRep, basis: RecurrenceBasis, order: int, eps0: float,
                   return_moment: bool = False):
    """sqrt(E[p_N(X_T)] eps0) with p_N = (sum_{n<=N} f_n H_n)^2.

    p_N has degree 2N, so it is projected exactly on H_0..H_2N with a Gauss
    rule of the basis and paired with l_0..l_2N.  A generator of order 2N is
    built (and cached on ``gen``) when ``gen`` is shorter.
    """
    if eps0 < 0:
        raise InvalidParameterError("eps0 must be non-negative")
    f = np.asarray(f, dtype=float)
    N = int(order)
    if len(f) < N + 1:
        raise OrderMismatchError(f"order {N} needs {N + 1} coefficients, have {len(f)}")
    if basis.order < 2 * N:
        raise InvalidParameterError("basis order must be at least twice the expansion order")
    if gen.order >= 2 * N:
        big = gen
    else:
        key = ("order2N", 2 * N, id(basis))
        big = gen._cache.get(key)
        if big is None:
            big = build_generator(gen.model, 2 * N, basis, gen.y_scale)
            gen._cache[key] = big
    ell = likelihood_coefficients(big, basis, 2 * N)
    nodes, weights = gauss_quadrature(basis, 2 * N)
    H = basis.evaluate(nodes, 2 * N)
    p = (f[: N + 1] @ H[: N + 1]) ** 2
    moment = float(math.fsum((H @ (weights * p)) * ell))
    bound = math.sqrt(max(moment, 0.0) * eps0)
    return (bound, moment) if return_moment else bound


@dataclass(frozen=True)
class ErrorDiagnostics:
    l2_divergence: np.ndarray
    cauchy_schwarz_bound: float
    growth_flag: bool


def default_y_scale(model: ModelSpec) -> float:
    """Typical magnitude of the volatility factor, used to keep y^m elements O(1)."""
    cand = [abs(model.y0), abs(model.theta)]
    if model.kind == "jacobi":
        cand.append(model.ymax)
    return max(max(cand), 1e-8)


class ExpansionPricer:
    """Polynomial expansion of a model's log-price density around an auxiliary density.

    The generator acts on y^m H_n(x) with H_n the ONB of the auxiliary, so a
    single exponential action yields every l_n.
    """

    def __init__(self, model: ModelSpec, aux: MixtureDensity, order: int,
                 y_scale: float | None = None, basis_order: int | None = None):
        if order < 1:
            raise InvalidParameterError("order must be >= 1")
        self.model = model
        self.aux = aux
        self.order = int(order)
        self.basis = aux.recurrence(max(order, basis_order or order))
        self.y_scale = default_y_scale(model) if y_scale is None else float(y_scale)
        self.generator = build_generator(model, self.order, self.basis, self.y_scale)

    @functools.cached_property
    def ell(self) -> np.ndarray:
        return likelihood_coefficients(self.generator, self.basis, self.order)

    @functools.cached_property
    def _change_of_basis(self):
        return change_of_basis(self.basis, self.aux.component_bases(self.order), self.order)

    def payoff(self, log_strike: float, kind: str = "call") -> PayoffSpec:
        return PayoffSpec(kind, log_strike, self.model.r, self.model.T)

    def coefficients(self, payoff: PayoffSpec, method: str = "analytic") -> np.ndarray:
        if method == "analytic":
            fk = [component_call_coeffs(p, payoff, self.order) for p in self.aux.params]
            return mixture_coeffs(fk, self._change_of_basis, self.aux.weights)
        if method == "quadrature":
            return quadrature_coeffs(payoff, self.aux, self.basis, self.order)
        raise InvalidParameterError(f"unknown method {method!r}")

    def series(self, payoff: PayoffSpec | float, method: str = "analytic") -> PriceSeries:
        if not isinstance(payoff, PayoffSpec):
            payoff = self.payoff(float(payoff))
        return price(self.coefficients(payoff, method), self.ell)

    def prices(self, log_strikes, orders=None) -> np.ndarray:
        """Array (strikes x orders) of partial sums."""
        orders = [self.order] if orders is None else list(orders)
        out = np.empty((len(log_strikes), len(orders)))
        for i, k in enumerate(log_strikes):
            ps = self.series(float(k)).partial_sums
            out[i] = [ps[n] for n in orders]
        return out

    def forward(self) -> float:
        m = self.model
        return math.exp(m.x0 + (m.r - m.delta) * m.T)

    def implied_vol(self, price_value: float, log_strike: float) -> float | None:
        m = self.model
        return implied_vol(price_value, self.forward(), math.exp(log_strike), m.T, math.exp(-m.r * m.T))

    def density(self, x, order: int | None = None):
        return density_approximation(self.ell, self.basis, self.aux, x, order)

    def diagnostics(self, payoff: PayoffSpec, eps0: float = 1e-6) -> ErrorDiagnostics:
        f = self.coefficients(payoff)
        div = l2_divergence(self.ell)
        basis2 = self.aux.recurrence(2 * self.order)
        bound = cs_error_bound(f, self.generator, basis2, self.order, eps0)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            likelihood_coefficients(self.generator, self.basis, self.order)
        return ErrorDiagnostics(div, bound, any(issubclass(w.category, RuntimeWarning) for w in caught))


def series_csv(series: PriceSeries, vols=None) -> str:
    """CSV rows (N, term, partial_sum, implied_vol) with "--" where no volatility exists."""
    lines = ["N,term,partial_sum,implied_vol"]
    for n, (t, s) in enumerate(zip(series.terms, series.partial_sums)):
        v = None if vols is None else vols[n]
        lines.append(f"{n},{t:.17g},{s:.17g},{NOT_RETRIEVABLE if v is None else f'{v:.17g}'}")
    return "\n".join(lines) + "\n"
