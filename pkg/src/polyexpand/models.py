"""Polynomial stochastic volatility models and their generator matrices.

Each model is described by five polynomials in the volatility factor y:

    G = bY(y) d/dy + 1/2 aYY(y) d2/dy2 + bX(y) d/dx + 1/2 aXX(y) d2/dx2 + aXY(y) d2/dxdy

(for the GARCH variance model the second state variable is the running
average I of Y, with dI = Y/T dt).  The generator is represented on the
functions y^m p_n(x), where p_n is a polynomial family in x (scaled monomials
or an orthonormal recurrence basis).  An element y^m p_n has weighted degree
n + ceil(m / d) with d the degree of the spot variance V(y) = aXX(y), which
makes the span of all elements of weighted degree <= N invariant under G.
"""
from __future__ import annotations

import dataclasses
import functools
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import sympy as sp
from scipy import sparse
from scipy.sparse.linalg import expm_multiply

from .basis import MonomialFamily, RecurrenceBasis, expand_in
from .errors import (
    DegreeOverflowError,
    DomainViolationError,
    ExpmFailureError,
    InvalidParameterError,
    NegativeVarianceError,
    UnsupportedModelError,
)

__all__ = [
    "MODEL_KINDS",
    "PARAMETER_NAMES",
    "ModelSpec",
    "GeneratorRep",
    "build_generator",
    "generator_derivative",
    "expm_action",
    "likelihood_coefficients",
    "raw_moments",
    "mean_variance",
    "scaled_generator",
    "central_moments",
    "coefficient_polynomials",
    "kurtosis",
    "leverage_volvol",
    "example_model",
]

MODEL_KINDS = ("jacobi", "heston", "stein_stein", "hull_white", "garch_variance")
PARAMETER_NAMES = ("r", "delta", "kappa", "theta", "sigma", "nu", "gamma", "rho", "ymin", "ymax", "T")

_ALIASES = {
    "jacobi": "jacobi", "heston": "heston",
    "steinstein": "stein_stein", "stein_stein": "stein_stein", "stein-stein": "stein_stein",
    "hullwhite": "hull_white", "hull_white": "hull_white", "hull-white": "hull_white",
    "garch": "garch_variance", "garchvariance": "garch_variance", "garch_variance": "garch_variance",
}


def normalize_kind(kind: str) -> str:
    try:
        return _ALIASES[kind.lower().replace(" ", "")]
    except KeyError:
        raise UnsupportedModelError(f"unsupported model {kind!r}; choose from {MODEL_KINDS}") from None


@dataclass(frozen=True)
class ModelSpec:
    """Parameters of a polynomial stochastic volatility model (times in years)."""

    kind: str
    kappa: float
    theta: float
    y0: float
    T: float
    r: float = 0.0
    delta: float = 0.0
    sigma: float = 0.0
    nu: float = 0.0
    gamma: float = 0.0
    rho: float = 0.0
    ymin: float = 0.0
    ymax: float = 1.0
    x0: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", normalize_kind(self.kind))
        self.validate()

    def validate(self):
        if not self.kappa > 0:
            raise InvalidParameterError("kappa must be positive")
        if not self.T > 0:
            raise InvalidParameterError("T must be positive")
        if not -1 < self.rho < 1:
            raise InvalidParameterError("rho must lie in (-1, 1)")
        if self.sigma < 0 or self.gamma < 0:
            raise InvalidParameterError("sigma and gamma must be non-negative")
        k = self.kind
        if k == "jacobi":
            if not 0 <= self.ymin < self.ymax:
                raise InvalidParameterError("need 0 <= ymin < ymax")
            if not self.ymin <= self.y0 <= self.ymax:
                raise DomainViolationError("Y0 outside [ymin, ymax]")
            if not self.ymin < self.theta <= self.ymax:
                raise InvalidParameterError("theta must lie in (ymin, ymax]")
        elif k == "heston":
            if self.y0 < 0 or self.theta < 0:
                raise DomainViolationError("Heston variance must be non-negative")
        elif k in ("hull_white", "garch_variance"):
            if k == "garch_variance" and self.nu > 0:
                raise InvalidParameterError("GARCH variance model needs nu <= 0")
            if self.nu <= 0 and self.gamma > 0:
                floor = -self.nu / self.gamma
                if self.y0 < floor:
                    raise DomainViolationError("Y0 below the lower bound -nu/gamma")
                if self.theta < floor:
                    raise InvalidParameterError("theta below the lower bound -nu/gamma")

    @property
    def variance_degree(self) -> int:
        """Degree of the spot variance V(y) in y."""
        return 2 if self.kind in ("stein_stein", "hull_white") else 1

    def replace(self, **changes) -> "ModelSpec":
        return dataclasses.replace(self, **changes)

    def parameter(self, name: str) -> float:
        return float(getattr(self, name))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        keys = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - keys
        if extra:
            raise InvalidParameterError(f"unknown model fields {sorted(extra)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ModelSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def example_model(kind: str, **changes) -> ModelSpec:
    """Reference parameter sets used throughout the numerical examples."""
    kind = normalize_kind(kind)
    base = {
        "jacobi": dict(kappa=0.5, theta=0.04, y0=0.04, sigma=1.0, rho=-0.5,
                       ymin=1e-4, ymax=0.36, T=1 / 12),
        "heston": dict(kappa=0.5, theta=0.04, y0=0.04, sigma=0.5, rho=-0.5, T=1 / 12),
        "stein_stein": dict(kappa=0.5, theta=0.2, y0=0.2, sigma=0.5, rho=-0.5, T=1 / 12),
        "hull_white": dict(kappa=0.5, theta=0.2, y0=0.2, nu=0.25, gamma=0.5, rho=-0.5, T=1 / 12),
        "garch_variance": dict(kappa=0.5, theta=0.2, y0=0.2, nu=-0.025, gamma=0.5, rho=-0.5, T=0.5),
    }[kind]
    base.update(changes)
    return ModelSpec(kind=kind, **base)


# --------------------------------------------------------------------------- #
# Symbolic coefficient polynomials
# --------------------------------------------------------------------------- #

_Y = sp.Symbol("y")
_P = {name: sp.Symbol(name) for name in PARAMETER_NAMES}
_TERMS = ("bY", "aYY", "bX", "aXX", "aXY")


@functools.lru_cache(maxsize=None)
def _symbolic_coefficients(kind: str) -> dict:
    y = _Y
    p = _P
    kappa, theta, sigma, rho = p["kappa"], p["theta"], p["sigma"], p["rho"]
    nu, gamma, r, delta = p["nu"], p["gamma"], p["r"], p["delta"]
    bY = kappa * (theta - y)
    if kind == "jacobi":
        ymin, ymax = p["ymin"], p["ymax"]
        Q = (y - ymin) * (ymax - y) / (sp.sqrt(ymax) - sp.sqrt(ymin)) ** 2
        out = dict(aYY=sigma**2 * Q, aXX=y, aXY=rho * sigma * Q)
    elif kind == "heston":
        out = dict(aYY=sigma**2 * y, aXX=y, aXY=rho * sigma * y)
    elif kind == "stein_stein":
        out = dict(aYY=sigma**2 + 0 * y, aXX=y**2, aXY=rho * sigma * y)
    elif kind == "hull_white":
        out = dict(aYY=(nu + gamma * y) ** 2, aXX=y**2, aXY=rho * y * (nu + gamma * y))
    elif kind == "garch_variance":
        out = dict(aYY=(nu + gamma * y) ** 2, aXX=sp.Integer(0), aXY=sp.Integer(0),
                   bX=y / p["T"])
    else:
        raise UnsupportedModelError(kind)
    out["bY"] = bY
    if "bX" not in out:
        out["bX"] = r - delta - out["aXX"] / 2
    return {k: sp.expand(out[k]) for k in _TERMS}


@functools.lru_cache(maxsize=None)
def _coefficient_functions(kind: str, wrt: str | None):
    """Callable returning, per term, the y-coefficients (ascending) of the
    term polynomial or of its derivative with respect to parameter ``wrt``."""
    sym = _symbolic_coefficients(kind)
    args = [_P[n] for n in PARAMETER_NAMES]
    funcs = {}
    for term, expr in sym.items():
        if wrt is not None:
            expr = sp.diff(expr, _P[wrt])
        poly = sp.Poly(expr, _Y)
        coeffs = poly.all_coeffs()[::-1] if not poly.is_zero else [sp.Integer(0)]
        funcs[term] = sp.lambdify(args, coeffs, modules="math")
    return funcs


def coefficient_polynomials(model: ModelSpec, wrt: str | None = None) -> dict[str, np.ndarray]:
    """Numeric y-coefficients of bY, aYY, bX, aXX, aXY (or their parameter derivatives)."""
    if wrt is not None and wrt not in PARAMETER_NAMES:
        raise InvalidParameterError(f"unknown parameter {wrt!r}")
    vals = [float(getattr(model, n)) for n in PARAMETER_NAMES]
    funcs = _coefficient_functions(model.kind, wrt)
    return {t: np.atleast_1d(np.asarray(f(*vals), dtype=float)) for t, f in funcs.items()}


# --------------------------------------------------------------------------- #
# Generator representation
# --------------------------------------------------------------------------- #

def _enumerate(order: int, d: int) -> list[tuple[int, int]]:
    """Elements (m, n) of weighted degree n + ceil(m/d) <= order.

    Sorted by weighted degree, then by ascending y-power m.
    """
    items = []
    for w in range(order + 1):
        for m in range(0, d * w + 1):
            n = w - math.ceil(m / d)
            if n >= 0 and n + math.ceil(m / d) == w:
                items.append((m, n))
    return items


@dataclass(frozen=True, eq=False)
class GeneratorRep:
    """Sparse matrix of the generator on span{(y/y_scale)^m p_n(x)}.

    Column j of ``G`` holds the coordinates of G applied to element j.
    ``q0`` holds the elements evaluated at the initial state.
    """

    model: ModelSpec
    order: int
    x_family: object
    y_scale: float
    index: tuple
    G: sparse.csr_matrix
    q0: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def dim(self) -> int:
        return len(self.index)

    @functools.cached_property
    def lookup(self) -> dict:
        return {mn: j for j, mn in enumerate(self.index)}

    def position(self, m: int, n: int) -> int:
        try:
            return self.lookup[(m, n)]
        except KeyError:
            raise InvalidParameterError(f"element y^{m} p_{n} not in the basis") from None

    @property
    def x_positions(self) -> np.ndarray:
        """Positions of the pure-x elements p_0..p_N."""
        return np.array([self.lookup[(0, n)] for n in range(self.order + 1)])

    def adjoint_action(self, t: float | None = None) -> np.ndarray:
        """v = exp(G^T t) q0, the vector of E[element_j(Z_t)]; cached per t."""
        t = self.model.T if t is None else float(t)
        key = ("adj", t)
        if key not in self._cache:
            self._cache[key] = expm_action(self.G.T.tocsr(), self.q0, t)
        return self._cache[key]

    def expected_x(self, t: float | None = None) -> np.ndarray:
        """E[p_n(X_t)] for n = 0..N."""
        return self.adjoint_action(t)[self.x_positions]

    def evaluation_vector(self, x: float, y: float) -> np.ndarray:
        N = self.order
        px = self.x_family.evaluate(np.array(x, dtype=float), N)
        ys = y / self.y_scale
        return np.array([ys**m * px[n] for m, n in self.index], dtype=float)

    def x_coordinates(self, family_coords: np.ndarray) -> np.ndarray:
        """Embed coordinates of a polynomial in x (w.r.t. p_n) into the full basis."""
        vec = np.zeros(self.dim)
        c = np.asarray(family_coords, dtype=float)
        vec[self.x_positions[: len(c)]] = c
        return vec


def _apply_terms(model: ModelSpec, coeffs: dict, order: int, index, lookup, x_family,
                 y_scale: float, check_overflow: bool) -> sparse.csr_matrix:
    size = order + 1
    D1 = x_family.derivative_matrix(size)
    D2 = D1 @ D1
    eye = np.eye(size)
    xops = {"I": eye, "D1": D1, "D2": D2}

    # (term, y-power shift, factor(m), x operator)
    pieces = []
    for i, c in enumerate(coeffs["bY"]):
        pieces.append((c * y_scale ** (i - 1), i - 1, lambda m: m, "I"))
    for i, c in enumerate(coeffs["aYY"]):
        pieces.append((0.5 * c * y_scale ** (i - 2), i - 2, lambda m: m * (m - 1), "I"))
    for i, c in enumerate(coeffs["bX"]):
        pieces.append((c * y_scale**i, i, lambda m: 1, "D1"))
    for i, c in enumerate(coeffs["aXX"]):
        pieces.append((0.5 * c * y_scale**i, i, lambda m: 1, "D2"))
    for i, c in enumerate(coeffs["aXY"]):
        pieces.append((c * y_scale ** (i - 1), i - 1, lambda m: m, "D1"))

    max_m = max(m for m, _ in index)
    n_max = {}
    for m, n in index:
        n_max[m] = max(n_max.get(m, -1), n)

    rows, cols, vals = [], [], []
    for m in range(max_m + 1):
        nm = n_max[m]
        src = np.array([lookup[(m, n)] for n in range(nm + 1)])
        for c, shift, fac, op in pieces:
            coef = c * fac(m)
            if coef == 0.0:
                continue
            mt = m + shift
            if mt < 0:
                continue
            block = xops[op][: nm + 1, : nm + 1]
            kk, nn = np.nonzero(block)
            if len(kk) == 0:
                continue
            tgt_ok = np.array([(mt, k) in lookup for k in kk])
            if not tgt_ok.all():
                if check_overflow:
                    k_bad = kk[~tgt_ok][0]
                    raise DegreeOverflowError(
                        f"generator maps y^{m} p_{nn[~tgt_ok][0]} onto y^{mt} p_{k_bad}, "
                        f"outside the order-{order} basis")
                kk, nn = kk[tgt_ok], nn[tgt_ok]
            rows.append(np.array([lookup[(mt, k)] for k in kk], dtype=int))
            cols.append(src[nn])
            vals.append(coef * block[kk, nn])
    dim = len(index)
    if rows:
        G = sparse.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                              shape=(dim, dim))
    else:
        G = sparse.coo_matrix((dim, dim))
    return G.tocsr()


def build_generator(model: ModelSpec, order: int, x_family=None,
                    y_scale: float = 1.0) -> GeneratorRep:
    """Matrix of the model generator on elements of weighted degree <= order.

    ``x_family`` defaults to plain monomials in x; an orthonormal
    RecurrenceBasis of order >= ``order`` can be passed instead, in which case
    the expected values of its polynomials are read off directly.
    """
    if order < 1:
        raise InvalidParameterError("generator order must be >= 1")
    if model.kind not in MODEL_KINDS:
        raise UnsupportedModelError(model.kind)
    if x_family is None:
        x_family = MonomialFamily()
    if isinstance(x_family, RecurrenceBasis) and x_family.order < order:
        raise InvalidParameterError("x-family order below generator order")
    if not y_scale > 0:
        raise InvalidParameterError("y_scale must be positive")
    index = tuple(_enumerate(order, model.variance_degree))
    lookup = {mn: j for j, mn in enumerate(index)}
    coeffs = coefficient_polynomials(model)
    G = _apply_terms(model, coeffs, order, index, lookup, x_family, y_scale, check_overflow=True)
    x_start = 0.0 if model.kind == "garch_variance" else model.x0
    gen = GeneratorRep(model, order, x_family, float(y_scale), index, G, np.empty(0))
    object.__setattr__(gen, "q0", gen.evaluation_vector(x_start, model.y0))
    return gen


def generator_derivative(gen: GeneratorRep, parameter: str) -> sparse.csr_matrix:
    """dG/d(parameter) on the same basis (the assembly is linear in the coefficients)."""
    coeffs = coefficient_polynomials(gen.model, wrt=parameter)
    return _apply_terms(gen.model, coeffs, gen.order, gen.index, gen.lookup, gen.x_family,
                        gen.y_scale, check_overflow=False)


def expm_action(A, v, t: float = 1.0) -> np.ndarray:
    """exp(t A) v for sparse A by truncated Taylor with scaling (Al-Mohy & Higham)."""
    # the norm estimator inside expm_multiply draws from the global numpy
    # RNG; pin it so repeated runs give bit-identical results
    state = np.random.get_state()
    try:
        np.random.seed(0)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            out = expm_multiply(A * t, v)
    except Exception as exc:  # scipy raises a variety of errors on breakdown
        raise ExpmFailureError(str(exc)) from exc
    finally:
        np.random.set_state(state)
    if not np.all(np.isfinite(out)):
        raise ExpmFailureError("non-finite entries in exponential action")
    return out


# --------------------------------------------------------------------------- #
# Moment formula consumers
# --------------------------------------------------------------------------- #

def likelihood_coefficients(gen: GeneratorRep, basis: RecurrenceBasis, order: int | None = None,
                            t: float | None = None) -> np.ndarray:
    """l_n = E[H_n(X_T)] for n = 0..N from one cached adjoint exponential action."""
    N = gen.order if order is None else order
    if N > gen.order:
        raise InvalidParameterError("requested order exceeds generator order")
    if basis.order < N:
        raise InvalidParameterError("basis order below requested order")
    ex = gen.expected_x(t)
    if gen.x_family is basis:
        ell = ex[: N + 1].copy()
    else:
        C = expand_in(basis, gen.x_family, N)
        ell = C @ ex[: N + 1]
    _check_growth(ell)
    return ell


def _check_growth(ell: np.ndarray, factor: float = 100.0, run: int = 3):
    a = np.abs(ell)
    streak = 0
    for n in range(1, len(a) - 1):
        if a[n] > 0 and a[n + 1] > factor * a[n]:
            streak += 1
            if streak >= run:
                warnings.warn("likelihood coefficients grow super-geometrically; "
                              "the expansion is likely divergent", RuntimeWarning, stacklevel=3)
                return
        else:
            streak = 0


def _monomial_coordinates(family, degree: int) -> np.ndarray:
    """Rows j = coordinates of x^j in ``family``, j = 0..degree."""
    X = family.mult_x(degree + 1)
    out = np.zeros((degree + 1, degree + 1))
    out[0, 0] = 1.0
    for j in range(degree):
        out[j + 1] = X @ out[j]
    return out


def raw_moments(gen: GeneratorRep, max_degree: int | None = None, t: float | None = None) -> np.ndarray:
    """E[X_T^j] for j = 0..max_degree (X is the running average I for GARCH variance)."""
    D = gen.order if max_degree is None else max_degree
    if D > gen.order:
        raise InvalidParameterError("max_degree exceeds generator order")
    ex = gen.expected_x(t)[: D + 1]
    fam = gen.x_family
    if isinstance(fam, MonomialFamily) and (fam.center != 0.0 or fam.scale != 1.0):
        # binomial shift is better conditioned than repeated multiplication
        out = np.zeros(D + 1)
        for j in range(D + 1):
            i = np.arange(j + 1)
            out[j] = np.sum([math.comb(j, k) * fam.center ** (j - k) * fam.scale**k * ex[k] for k in i])
        return out
    return _monomial_coordinates(fam, D) @ ex


def mean_variance(model: ModelSpec, t: float | None = None) -> tuple[float, float]:
    """E[X_T] and Var[X_T] from an order-2 generator."""
    gen = build_generator(model, 2, MonomialFamily(model.x0 if model.kind != "garch_variance" else 0.0, 1.0))
    ex = gen.expected_x(t)
    mean = gen.x_family.center + ex[1]
    var = ex[2] - ex[1] ** 2
    if not var > 0:
        raise NegativeVarianceError(f"variance {var} is not positive")
    return float(mean), float(var)


def scaled_generator(model: ModelSpec, order: int, t: float | None = None) -> GeneratorRep:
    """Generator on monomials in (x - E[X]) / sd(X), well conditioned for high moments."""
    mean, var = mean_variance(model, t)
    return build_generator(model, order, MonomialFamily(mean, math.sqrt(var)))


def central_moments(model: ModelSpec, max_degree: int, t: float | None = None) -> np.ndarray:
    """E[(X_T - E X_T)^j] for j = 0..max_degree."""
    gen = scaled_generator(model, max_degree, t)
    s = gen.x_family.scale
    return gen.expected_x(t)[: max_degree + 1] * s ** np.arange(max_degree + 1)


def kurtosis(model: ModelSpec, horizons: Sequence[float]) -> list[float]:
    """E[(X_T - E X_T)^4] / Var[X_T]^2 for each horizon T."""
    out = []
    for T in horizons:
        m = model.replace(T=float(T))
        cm = central_moments(m, 4)
        if not cm[2] > 0:
            raise NegativeVarianceError(f"non-positive variance at T={T}")
        out.append(float(cm[4] / cm[2] ** 2))
    return out


def leverage_volvol(model: ModelSpec, y: float) -> tuple[float, float]:
    """Instantaneous correlation between dV and dX, and volatility of sqrt(V).

    Uses V = S1^2 + S2^2 with S1 the loading on the volatility shock:
    lev = S1/sqrt(V) * sign(V'(y) s(y)), volvol = |V'(y)| s(y) / (2 sqrt(V)),
    where s(y) is the diffusion of Y.
    """
    k = model.kind
    if k == "jacobi":
        if not model.ymin < y <= model.ymax:
            raise DomainViolationError("y outside (ymin, ymax]")
        Q = (y - model.ymin) * (model.ymax - y) / (math.sqrt(model.ymax) - math.sqrt(model.ymin)) ** 2
        V, dV, s, s1 = y, 1.0, model.sigma * math.sqrt(Q), model.rho * math.sqrt(Q)
    elif k == "heston":
        if not y > 0:
            raise DomainViolationError("Heston variance must be positive")
        V, dV, s, s1 = y, 1.0, model.sigma * math.sqrt(y), model.rho * math.sqrt(y)
    elif k == "stein_stein":
        if y == 0:
            raise DomainViolationError("zero volatility")
        V, dV, s, s1 = y * y, 2 * y, model.sigma, model.rho * y
    elif k == "hull_white":
        if y == 0:
            raise DomainViolationError("zero volatility")
        V, dV, s, s1 = y * y, 2 * y, model.nu + model.gamma * y, model.rho * y
    elif k == "garch_variance":
        if not y > 0:
            raise DomainViolationError("variance must be positive")
        V, dV, s, s1 = y, 1.0, model.nu + model.gamma * y, model.rho * math.sqrt(y)
    else:
        raise UnsupportedModelError(k)
    sq = math.sqrt(V)
    lev = s1 / sq * float(np.sign(dV * s))
    volvol = abs(dV * s) / (2 * sq)
    return lev, volvol
