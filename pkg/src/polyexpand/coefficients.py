"""Payoff coefficients f_n = <f, H_n>_w.

Closed-form routines cover calls under a Gaussian or shifted Gamma component;
mixtures are handled through the change of basis to each component.  An
adaptive quadrature path is available for any payoff and acts as the oracle
for the analytic routines.  Multivariate payoffs use tensor bases with
coefficients fitted by weighted least squares.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate, linalg, special

from .auxdensity import MixtureDensity
from .basis import (
    ChangeOfBasis,
    GammaParams,
    GaussianParams,
    MonomialFamily,
    RecurrenceBasis,
    change_of_basis,
    gamma_recurrence,
    gaussian_recurrence,
)
from .errors import (
    DivergentIntegralError,
    InvalidParameterError,
    NonIntegrablePayoffError,
    OrderMismatchError,
    SingularGramianError,
)
from .models import ModelSpec, build_generator, expm_action, mean_variance

__all__ = [
    "PayoffSpec",
    "call_coeffs_gaussian",
    "call_coeffs_gamma",
    "linear_call_coeffs_gamma",
    "gamma_tail_integrals",
    "mixture_coeffs",
    "mixture_call_coeffs",
    "quadrature_coeffs",
    "TensorBasis",
    "WlsSample",
    "WlsResult",
    "sample_tensor",
    "wls_coeffs",
    "ForwardStartSetup",
    "forward_start_setup",
    "forward_start_coeffs",
]


@dataclass(frozen=True)
class PayoffSpec:
    """Discounted payoff as a function of the terminal state.

    kinds: "call" on e^x with log-strike ``strike``; "put" likewise;
    "call_level" on x itself; "forward" pays e^x; "forward_start" pays
    (e^{x2} - e^{k + x1})^+ on the log prices (x1, x2) at t1 and T;
    "custom" wraps ``func``.
    """

    kind: str
    strike: float = 0.0
    r: float = 0.0
    T: float = 1.0
    t1: float = 0.0
    func: Callable | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in ("call", "put", "call_level", "forward", "forward_start", "custom"):
            raise InvalidParameterError(f"unknown payoff kind {self.kind!r}")
        if not self.T > 0:
            raise InvalidParameterError("T must be positive")
        if self.kind == "forward_start" and not 0 < self.t1 < self.T:
            raise InvalidParameterError("forward start needs 0 < t1 < t2 = T")
        if self.kind == "custom" and self.func is None:
            raise InvalidParameterError("custom payoff needs a function")

    @property
    def discount(self) -> float:
        return math.exp(-self.r * self.T)

    @property
    def kink(self) -> float | None:
        if self.kind in ("call", "put", "call_level"):
            return self.strike
        return None

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        d = self.discount
        if self.kind == "call":
            return d * np.maximum(np.exp(x) - math.exp(self.strike), 0.0)
        if self.kind == "put":
            return d * np.maximum(math.exp(self.strike) - np.exp(x), 0.0)
        if self.kind == "call_level":
            return d * np.maximum(x - self.strike, 0.0)
        if self.kind == "forward":
            return d * np.exp(x)
        if self.kind == "forward_start":
            x1, x2 = x[..., 0], x[..., 1]
            return d * np.maximum(np.exp(x2) - np.exp(self.strike + x1), 0.0)
        return self.func(x)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "strike": self.strike, "r": self.r, "T": self.T, "t1": self.t1}


# --------------------------------------------------------------------------- #
# Gaussian component
# --------------------------------------------------------------------------- #

def call_coeffs_gaussian(params: GaussianParams, k: float, r: float, T: float, order: int) -> np.ndarray:
    """<e^{-rT}(e^x - e^k)^+, H_n> under N(mu, sigma^2), n = 0..order.

    With z0 = (k - mu)/sigma and h_n the normalised Hermite polynomials,
    integration by parts (He_n phi = -(He_{n-1} phi)') gives
        J_n = h_{n-1}(z0) phi(z0) / sqrt(n)
        I_n = (e^{sigma z0} h_{n-1}(z0) phi(z0) + sigma I_{n-1}) / sqrt(n)
    for the tail integrals of h_n phi and e^{sigma z} h_n phi, and
    f_n = e^{-rT} (e^mu I_n - e^k J_n).
    """
    if order < 0:
        raise InvalidParameterError("order must be >= 0")
    mu, s = params.mu, params.sigma
    z0 = (k - mu) / s
    h = np.empty(order + 1)
    h[0] = 1.0
    if order >= 1:
        h[1] = z0
    for n in range(1, order):
        h[n + 1] = (z0 * h[n] - math.sqrt(n) * h[n - 1]) / math.sqrt(n + 1)
    phi0 = math.exp(-0.5 * z0 * z0) / math.sqrt(2 * math.pi)
    # e^{sigma z0} phi(z0), written to avoid overflow of the exponential alone
    ephi = math.exp(-0.5 * (z0 - s) ** 2 + 0.5 * s * s) / math.sqrt(2 * math.pi)
    I = np.empty(order + 1)
    J = np.empty(order + 1)
    I[0] = math.exp(0.5 * s * s) * special.ndtr(s - z0)
    J[0] = special.ndtr(-z0)
    for n in range(1, order + 1):
        rn = math.sqrt(n)
        J[n] = h[n - 1] * phi0 / rn
        I[n] = (ephi * h[n - 1] + s * I[n - 1]) / rn
    return math.exp(-r * T) * (math.exp(mu) * I - math.exp(k) * J)


def exp_coeffs_gaussian(params: GaussianParams, order: int) -> np.ndarray:
    """<e^x, H_n> = e^{mu + sigma^2/2} sigma^n / sqrt(n!)."""
    n = np.arange(order + 1)
    logc = params.mu + 0.5 * params.sigma**2 + n * math.log(params.sigma) - 0.5 * special.gammaln(n + 1)
    return np.exp(logc)


# --------------------------------------------------------------------------- #
# Gamma component
# --------------------------------------------------------------------------- #

def gamma_tail_integrals(alpha: float, mu: float, nu: float, order: int, depth: int = 0) -> np.ndarray:
    """Table T[j, n] of normalised tail integrals for shapes alpha + j.

        T[j, n] = int_mu^inf L_n^{(b)}(t) t^b e^{-(1-nu) t} dt / Gamma(b + 1),  b = alpha - 1 + j,

    with L_n^{(b)} the Laguerre polynomials orthonormal for Gamma(b + 1, 1).
    The identity d/dt[t^{b+1} e^{-t} L_n^{(b+1)}] = (n+1) t^b e^{-t} L_{n+1}^{(b)}
    (unnormalised Laguerre) and one integration by parts give the triangular
    recursion
        T[j, n+1] = -(g_b(mu) L_n^{(b+1)}(mu) + nu sqrt(b+1) T[j+1, n]) / sqrt(n+1),
        g_b(mu)   = mu^{b+1} e^{-(1-nu) mu} / sqrt(Gamma(b+1) Gamma(b+2)),
    started from T[j, 0] = (1-nu)^{-(b+1)} Q(b+1, (1-nu) mu), Q the regularised
    upper incomplete Gamma function.  Entries with j + n > order + depth are
    not needed and left as NaN.
    """
    if not nu < 1:
        raise DivergentIntegralError("tail integral diverges for nu >= 1")
    if mu < 0:
        raise InvalidParameterError("mu must be >= 0")
    top = order + depth
    T = np.full((top + 1, order + 1), np.nan)
    om = 1.0 - nu
    for j in range(top, -1, -1):
        b = alpha - 1 + j
        T[j, 0] = math.exp(-(b + 1) * math.log(om)) * special.gammaincc(b + 1, om * mu)
        nmax = min(order, top - j)
        if nmax == 0:
            continue
        if mu > 0:
            logg = (b + 1) * math.log(mu) - om * mu - 0.5 * (special.gammaln(b + 1) + special.gammaln(b + 2))
            g = math.exp(logg)
            lag = gamma_recurrence(GammaParams(b + 2, 1.0, 0.0), nmax - 1).evaluate(mu)
        else:
            g = 0.0
            lag = np.zeros(nmax)
        sb = math.sqrt(b + 1)
        for n in range(nmax):
            T[j, n + 1] = -(g * lag[n] + nu * sb * T[j + 1, n]) / math.sqrt(n + 1)
    return T


def call_coeffs_gamma(params: GammaParams, k: float, r: float, T: float, order: int) -> np.ndarray:
    """<e^{-rT}(e^x - e^k)^+, H_n> under the shifted Gamma density (orientation +1).

    In t = beta (x - xi) the payoff is e^xi e^{t/beta} - e^k on t > mu with
    mu = max(0, beta (k - xi)), so f_n combines two tail integrals with
    nu = 1/beta and nu = 0.  Requires beta > 1 for e^x to be integrable.
    """
    if params.orientation != 1:
        raise InvalidParameterError("only orientation +1 is supported")
    if not params.beta > 1:
        raise DivergentIntegralError("e^x is not integrable against a Gamma tail with beta <= 1")
    mu = max(0.0, params.beta * (k - params.xi))
    Ie = gamma_tail_integrals(params.alpha, mu, 1.0 / params.beta, order)[0]
    I0 = gamma_tail_integrals(params.alpha, mu, 0.0, order)[0]
    return math.exp(-r * T) * (math.exp(params.xi) * Ie - math.exp(k) * I0)


def linear_call_coeffs_gamma(params: GammaParams, k: float, r: float, T: float, order: int,
                             method: str = "recurrence") -> np.ndarray:
    """<e^{-rT}(x - k)^+, H_n> under the shifted Gamma density (orientation +1).

    ``method="recurrence"`` uses x - k = (xi - k) + t/beta and the three-term
    recurrence to write t H_n through H_{n-1}, H_n, H_{n+1}, so only tail
    integrals of the basis are needed.  ``method="monomial"`` expands
    (x - k) H_n in powers of t and integrates each power with the upper
    incomplete Gamma function; it loses accuracy at high orders.
    """
    if params.orientation != 1:
        raise InvalidParameterError("only orientation +1 is supported")
    al, be, xi = params.alpha, params.beta, params.xi
    mu = max(0.0, be * (k - xi))
    disc = math.exp(-r * T)
    if method == "recurrence":
        I = gamma_tail_integrals(al, mu, 0.0, order + 1, depth=0)[0]
        n = np.arange(order + 1)
        A = 2 * n + al
        B = -np.sqrt(n * (n + al - 1))
        Bn1 = -np.sqrt((n + 1) * (n + al))
        tH = Bn1 * I[1 : order + 2] + A * I[: order + 1]
        tH[1:] += B[1:] * I[: order]
        return disc * ((xi - k) * I[: order + 1] + tH / be)
    if method == "monomial":
        # coefficients of H_n in powers of t for Gamma(alpha, 1) on t > 0
        C = gamma_recurrence(GammaParams(al, 1.0, 0.0), order).monomial_coefficients(order)
        j = np.arange(order + 2)
        # int_mu^inf t^j t^{alpha-1} e^{-t} dt / Gamma(alpha)
        tail = np.exp(special.gammaln(al + j) - special.gammaln(al)) * special.gammaincc(al + j, mu)
        out = np.empty(order + 1)
        for n in range(order + 1):
            p = np.zeros(order + 2)
            p[: order + 1] += (xi - k) * C[n]
            p[1:] += C[n] / be
            out[n] = p @ tail
        return disc * out
    raise InvalidParameterError(f"unknown method {method!r}")


def component_call_coeffs(params, payoff: PayoffSpec, order: int) -> np.ndarray:
    if payoff.kind == "call":
        if isinstance(params, GaussianParams):
            return call_coeffs_gaussian(params, payoff.strike, payoff.r, payoff.T, order)
        return call_coeffs_gamma(params, payoff.strike, payoff.r, payoff.T, order)
    if payoff.kind == "call_level":
        if isinstance(params, GammaParams):
            return linear_call_coeffs_gamma(params, payoff.strike, payoff.r, payoff.T, order)
    if payoff.kind == "forward" and isinstance(params, GaussianParams):
        return payoff.discount * exp_coeffs_gaussian(params, order)
    if payoff.kind == "put" and isinstance(params, GaussianParams):
        # put = call - forward + e^k, the constant only enters f_0
        f = call_coeffs_gaussian(params, payoff.strike, payoff.r, payoff.T, order)
        f = f - payoff.discount * exp_coeffs_gaussian(params, order)
        f[0] += payoff.discount * math.exp(payoff.strike)
        return f
    raise InvalidParameterError(f"no analytic coefficients for {payoff.kind} under {type(params).__name__}")


# --------------------------------------------------------------------------- #
# Mixtures
# --------------------------------------------------------------------------- #

def mixture_coeffs(component_coeffs: Sequence[np.ndarray], cob: ChangeOfBasis | Sequence[np.ndarray],
                   weights: Sequence[float]) -> np.ndarray:
    """f_N = sum_k c_k sum_n q^k[N, n] f_n^k."""
    qs = list(cob.q) if isinstance(cob, ChangeOfBasis) else list(cob)
    if not (len(qs) == len(component_coeffs) == len(weights)):
        raise OrderMismatchError("one coefficient vector, change of basis and weight per component")
    sizes = {len(f) for f in component_coeffs} | {q.shape[0] for q in qs}
    if len(sizes) != 1:
        raise OrderMismatchError(f"inconsistent orders {sorted(sizes)}")
    out = np.zeros(sizes.pop())
    for c, q, f in zip(weights, qs, component_coeffs):
        out += c * (q @ np.asarray(f, dtype=float))
    return out


def mixture_call_coeffs(mixture: MixtureDensity, payoff: PayoffSpec, order: int,
                        basis: RecurrenceBasis | None = None) -> np.ndarray:
    """Analytic payoff coefficients in the mixture ONB."""
    comps = mixture.component_bases(order)
    if basis is None:
        basis = mixture.recurrence(order)
    cob = change_of_basis(basis, comps, order)
    fk = [component_call_coeffs(p, payoff, order) for p in mixture.params]
    return mixture_coeffs(fk, cob, mixture.weights)


def quadrature_coeffs(payoff, mixture: MixtureDensity, basis: RecurrenceBasis, order: int,
                      epsabs: float = 1e-14, epsrel: float = 1e-12) -> np.ndarray:
    """f_n by adaptive quadrature per component, combined with the mixture weights."""
    kink = getattr(payoff, "kink", None)
    out = np.zeros(order + 1)
    for c, p in mixture.components:
        lo, hi = p.support()
        centre = p.mean
        spread = math.sqrt(p.variance)
        width = 40.0 + 2.0 * math.sqrt(order + 1)
        a = lo if np.isfinite(lo) else centre - width * spread
        b = hi if np.isfinite(hi) else centre + width * spread * (4.0 if isinstance(p, GammaParams) else 1.0)
        # tail test: the payoff-weighted density must have vanished at the cut-offs
        for edge in (a, b):
            if np.isfinite(edge) and edge not in (lo, hi):
                val = abs(float(payoff(np.array(edge))) * float(p.pdf(np.array([edge]))[0]))
                if not np.isfinite(val) or val > 1e-12:
                    raise NonIntegrablePayoffError("payoff is not negligible in the density tails")
        pts = [a]
        if kink is not None and a < kink < b:
            pts.append(kink)
        pts.append(b)

        def integrand(x):
            return payoff(np.array(x)) * p.pdf(np.array([x]))[0] * basis.evaluate(x, order)

        for s, e in zip(pts[:-1], pts[1:]):
            val, err = integrate.quad_vec(integrand, s, e, epsabs=epsabs, epsrel=epsrel, limit=2000)
            out += c * val
    if not np.all(np.isfinite(out)):
        raise NonIntegrablePayoffError("quadrature produced non-finite coefficients")
    return out


# --------------------------------------------------------------------------- #
# Tensor bases and weighted least squares
# --------------------------------------------------------------------------- #

def _multi_indices(dim: int, order: int) -> list[tuple]:
    out = []
    for total in range(order + 1):
        for idx in itertools.product(range(total + 1), repeat=dim):
            if sum(idx) == total:
                out.append(tuple(idx))
    # graded, then reverse-lexicographic on the last coordinate
    return sorted(out, key=lambda t: (sum(t), [-v for v in t]))


@dataclass(frozen=True, eq=False)
class TensorBasis:
    """Products of univariate ONB polynomials in the variables y = A x + b."""

    bases: tuple
    order: int
    A: np.ndarray | None = None
    b: np.ndarray | None = None
    densities: tuple | None = None

    def __post_init__(self):
        d = len(self.bases)
        A = np.eye(d) if self.A is None else np.asarray(self.A, dtype=float)
        b = np.zeros(d) if self.b is None else np.asarray(self.b, dtype=float)
        if A.shape != (d, d) or b.shape != (d,):
            raise InvalidParameterError("A must be d x d and b of length d")
        if abs(np.linalg.det(A)) < 1e-14:
            raise InvalidParameterError("A must be nonsingular")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "bases", tuple(self.bases))
        for bs in self.bases:
            if bs.order < self.order:
                raise InvalidParameterError("univariate basis order below tensor order")

    @property
    def dim(self) -> int:
        return len(self.bases)

    @property
    def indices(self) -> list[tuple]:
        return _multi_indices(self.dim, self.order)

    def transform(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.A.T + self.b

    def inverse_transform(self, y: np.ndarray) -> np.ndarray:
        return linalg.solve(self.A, (np.asarray(y, dtype=float) - self.b).T).T

    def evaluate(self, y: np.ndarray) -> np.ndarray:
        """Design matrix (points x multi-indices) at transformed points y."""
        y = np.atleast_2d(np.asarray(y, dtype=float))
        vals = [bs.evaluate(y[:, i], self.order) for i, bs in enumerate(self.bases)]
        cols = []
        for idx in self.indices:
            col = np.ones(y.shape[0])
            for i, n in enumerate(idx):
                col = col * vals[i][n]
            cols.append(col)
        return np.stack(cols, axis=1)


@dataclass(frozen=True)
class WlsSample:
    points: np.ndarray      # transformed coordinates y_i, shape (M, d)
    weights: np.ndarray     # q_i

    @property
    def count(self) -> int:
        return len(self.weights)


@dataclass(frozen=True)
class WlsResult:
    coeffs: np.ndarray
    gramian: np.ndarray
    rhs: np.ndarray
    condition: float


def _inverse_cdf_sample(density: Callable, lo: float, hi: float, u: np.ndarray, grid: int = 4001):
    x = np.linspace(lo, hi, grid)
    p = density(x)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (p[1:] + p[:-1]) * np.diff(x))])
    cdf /= cdf[-1]
    return np.interp(u, cdf, x)


def sample_tensor(tensor: TensorBasis, count: int, rng=None, strategy: str = "density",
                  kinks: dict | None = None) -> WlsSample:
    """Sample points for weighted least squares.

    ``density`` draws each coordinate from its univariate density (q_i = 1).
    ``christoffel`` picks a multi-index j uniformly, draws coordinate i from
    H_{j_i}^2 w_i, and weights by |J| / sum_j Phi_j(y)^2 so that the weighted
    sample is unbiased for w.
    ``quadrature`` is deterministic: a tensor grid of composite Gauss-Legendre
    panels (about ``count`` points in total) with panel edges at ``kinks``,
    a mapping from coordinate to the transformed-space locations where the
    payoff is not smooth.
    """
    rng = np.random.default_rng(rng)
    if tensor.densities is None:
        raise InvalidParameterError("tensor basis needs densities for sampling")
    d = tensor.dim
    if strategy == "density":
        pts = np.stack([dens.sample(rng, count) for dens in tensor.densities], axis=1)
        return WlsSample(pts, np.ones(count))
    if strategy == "christoffel":
        idx = tensor.indices
        pick = rng.integers(len(idx), size=count)
        pts = np.empty((count, d))
        for i, (dens, bs) in enumerate(zip(tensor.densities, tensor.bases)):
            m, v = dens.mean, dens.variance
            lo, hi = dens.support()
            span = (10.0 + 2 * math.sqrt(tensor.order)) * math.sqrt(v)
            lo = max(lo, m - span)
            hi = min(hi, m + span * (3.0 if dens.kind == "gamma" else 1.0))
            degs = np.array([idx[p][i] for p in pick])
            for n in np.unique(degs):
                sel = degs == n
                pts[sel, i] = _inverse_cdf_sample(
                    lambda x, n=n: bs.evaluate(x, n)[n] ** 2 * dens.pdf(x), lo, hi, rng.random(sel.sum()))
        Phi = tensor.evaluate(pts)
        q = len(idx) / np.sum(Phi * Phi, axis=1)
        return WlsSample(pts, q)
    if strategy == "quadrature":
        per_dim = max(2, int(math.ceil(count ** (1.0 / d))))
        rules = [_panel_rule(dens, tensor.order, per_dim, (kinks or {}).get(i, ()))
                 for i, dens in enumerate(tensor.densities)]
        grids = np.meshgrid(*[r[0] for r in rules], indexing="ij")
        wgrids = np.meshgrid(*[r[1] for r in rules], indexing="ij")
        pts = np.stack([g.ravel() for g in grids], axis=1)
        w = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1)
        keep = w > 0
        return WlsSample(pts[keep], w[keep] * keep.sum())
    raise InvalidParameterError(f"unknown sampling strategy {strategy!r}")


def _panel_rule(dens: MixtureDensity, order: int, nodes: int, breaks=(), panel: int = 16):
    """Composite Gauss-Legendre rule against ``dens`` with panel edges at ``breaks``."""
    m, v = dens.mean, dens.variance
    lo, hi = dens.support()
    span = (10.0 + 2 * math.sqrt(order)) * math.sqrt(v)
    lo = max(lo, m - span)
    hi = min(hi, m + span * (3.0 if dens.kind == "gamma" else 1.0))
    edges = [lo] + sorted(b for b in breaks if lo < b < hi) + [hi]
    n_panels = max(len(edges) - 1, int(math.ceil(nodes / panel)))
    # spread panels over segments in proportion to their length
    lengths = np.diff(edges)
    counts = np.maximum(1, np.round(n_panels * lengths / lengths.sum()).astype(int))
    t, wt = np.polynomial.legendre.leggauss(panel)
    xs, ws = [], []
    for (a, b), c in zip(zip(edges[:-1], edges[1:]), counts):
        cuts = np.linspace(a, b, c + 1)
        for s, e in zip(cuts[:-1], cuts[1:]):
            xs.append(0.5 * (e - s) * t + 0.5 * (e + s))
            ws.append(0.5 * (e - s) * wt)
    x = np.concatenate(xs)
    return x, np.concatenate(ws) * dens.pdf(x)


def wls_coeffs(payoff, tensor: TensorBasis, sample: WlsSample, order: int | None = None,
               cond_limit: float = 1e12) -> WlsResult:
    """Solve the normal equations G c = d of the weighted least-squares fit.

    G_jk = (1/M) sum_i q_i Phi_j(y_i) Phi_k(y_i), d_j = (1/M) sum_i q_i Phi_j(y_i) f(x_i),
    where x_i are the sample points mapped back to raw coordinates.
    """
    if order is not None and order != tensor.order:
        raise OrderMismatchError("order must equal the tensor basis order")
    Phi = tensor.evaluate(sample.points)
    M = sample.count
    x = tensor.inverse_transform(sample.points)
    fx = np.asarray(payoff(x if tensor.dim > 1 else x[:, 0]), dtype=float)
    q = sample.weights
    G = (Phi * q[:, None]).T @ Phi / M
    d = (Phi * q[:, None]).T @ fx / M
    cond = float(np.linalg.cond(G))
    if not np.isfinite(cond) or cond > cond_limit:
        raise SingularGramianError("WLS Gramian is singular or ill-conditioned", condition=cond)
    try:
        c = linalg.cho_solve(linalg.cho_factor(G), d)
    except linalg.LinAlgError as exc:
        raise SingularGramianError(str(exc), condition=cond) from exc
    return WlsResult(c, G, d, cond)


# --------------------------------------------------------------------------- #
# Forward-start options
# --------------------------------------------------------------------------- #

@dataclass(frozen=True, eq=False)
class ForwardStartSetup:
    tensor: TensorBasis
    ell: np.ndarray              # aligned with tensor.indices
    increments: tuple            # (GaussianParams for R1, GaussianParams for R2)
    t1: float
    t2: float


def _conditional_x_polys(model: ModelSpec, tau: float, family, order: int, y_scale: float):
    """g[n, m]: E[p_n(X_tau - X_0) | Y_0 = y] as a polynomial in (y / y_scale)."""
    gen = build_generator(model.replace(x0=0.0, T=tau), order, family, y_scale)
    pos = gen.x_positions
    H = np.zeros((gen.dim, order + 1))
    H[pos, np.arange(order + 1)] = 1.0
    U = expm_action(gen.G.tocsr(), H, tau)
    p0 = family.evaluate(np.array(0.0), order)
    mmax = max(m for m, _ in gen.index)
    g = np.zeros((order + 1, mmax + 1))
    for j, (m, n) in enumerate(gen.index):
        g[:, m] += U[j] * p0[n]
    return g


def _mixed_moments(model: ModelSpec, t: float, family, order: int, y_scale: float):
    """E[(Y_t / y_scale)^m p_n(X_t - X_0)] as a dict keyed by (m, n)."""
    gen = build_generator(model.replace(x0=0.0, T=t), order, family, y_scale)
    v = gen.adjoint_action(t)
    return gen, v


def increment_moments(model: ModelSpec, t1: float, t2: float) -> tuple[tuple, tuple]:
    """(mean, variance) of R1 = X_t1 - X_0 and R2 = X_t2 - X_t1."""
    m1, v1 = mean_variance(model.replace(x0=0.0, T=t1))
    m12, v12 = mean_variance(model.replace(x0=0.0, T=t2))
    # E[R1 R2] by the tower property with monomials
    ys = max(model.y0, model.theta, 1e-8)
    g = _conditional_x_polys(model, t2 - t1, MonomialFamily(), 1, ys)   # E[R2 | y] = g[1] . y^m
    gen, v = _mixed_moments(model, t1, MonomialFamily(), 1 + _degree_weight(model, g[1]), ys)
    e_r1r2 = sum(v[gen.lookup[(m, 1)]] * g[1, m] for m in range(g.shape[1]) if g[1, m] != 0)
    mean2 = m12 - m1
    var2 = v12 - v1 - 2 * (e_r1r2 - m1 * mean2)
    return (m1, v1), (mean2, var2)


def _degree_weight(model: ModelSpec, poly: np.ndarray) -> int:
    nz = np.nonzero(poly)[0]
    if len(nz) == 0:
        return 0
    return math.ceil(nz[-1] / model.variance_degree)


def forward_start_setup(model: ModelSpec, t1: float, t2: float, order: int) -> ForwardStartSetup:
    """Tensor Gaussian basis on the log-return increments and their likelihood coefficients.

    l_(n1,n2) = E[H_n1(R1) E[H_n2(R2) | Y_t1]] where the inner expectation is
    a polynomial in Y_t1 obtained from the generator over [t1, t2] and the
    outer mixed moments come from the generator over [0, t1].
    """
    if not 0 < t1 < t2:
        raise InvalidParameterError("need 0 < t1 < t2")
    (m1, v1), (m2, v2) = increment_moments(model, t1, t2)
    p1, p2 = GaussianParams(m1, math.sqrt(v1)), GaussianParams(m2, math.sqrt(v2))
    b1, b2 = gaussian_recurrence(p1, order), gaussian_recurrence(p2, order)
    A = np.array([[1.0, 0.0], [-1.0, 1.0]])
    shift = np.array([-model.x0, 0.0])
    dens = (MixtureDensity.single(p1), MixtureDensity.single(p2))
    tensor = TensorBasis((b1, b2), order, A, shift, dens)

    ys = max(model.y0, model.theta, 1e-8)
    g = _conditional_x_polys(model, t2 - t1, b2, order, ys)
    gen, v = _mixed_moments(model, t1, b1, order, ys)
    ell = np.zeros(len(tensor.indices))
    for j, (n1, n2) in enumerate(tensor.indices):
        total = 0.0
        for m in np.nonzero(g[n2])[0]:
            total += v[gen.lookup[(int(m), n1)]] * g[n2, m]
        ell[j] = total
    return ForwardStartSetup(tensor, ell, (p1, p2), t1, t2)


def forward_start_coeffs(setup: ForwardStartSetup, log_strike: float, r: float, x0: float = 0.0) -> np.ndarray:
    """Analytic tensor coefficients of e^{-r t2} e^{x0 + R1} (e^{R2} - e^k)^+."""
    p1, p2 = setup.increments
    N = setup.tensor.order
    e1 = exp_coeffs_gaussian(p1, N)
    c2 = call_coeffs_gaussian(p2, log_strike, 0.0, 1.0, N)
    scale = math.exp(-r * setup.t2 + x0)
    return np.array([scale * e1[n1] * c2[n2] for n1, n2 in setup.tensor.indices])
