"""Orthonormal polynomial bases for single and mixture densities.

A basis is stored through its three-term recurrence

    x H_n(x) = b_{n+1} H_{n+1}(x) + a_n H_n(x) + b_n H_{n-1}(x),

with ``H_{-1} = 0`` and ``H_0 = 1``.  Everything else (Jacobi matrix, Gauss
rule, coordinates in another family, derivative operator) is derived from the
arrays ``a`` and ``b``.

Coordinate matrices returned by this module put one polynomial per row: row
``n`` holds the coordinates of ``H_n`` in the target family, degree ascending.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg, special

from .errors import (
    DegenerateMixtureError,
    EigenFailureError,
    IndefiniteGramError,
    InvalidParameterError,
    SingularSystemError,
)

__all__ = [
    "GaussianParams",
    "GammaParams",
    "RecurrenceBasis",
    "MonomialFamily",
    "ChangeOfBasis",
    "gaussian_recurrence",
    "gamma_recurrence",
    "component_recurrence",
    "mixture_recurrence",
    "change_of_basis",
    "expand_in",
    "gram_schmidt_basis",
    "mysovskikh_basis",
    "recurrence_from_coefficients",
    "gauss_quadrature",
    "mixture_quadrature",
    "hankel_gram",
]


@dataclass(frozen=True)
class GaussianParams:
    mu: float
    sigma: float

    def __post_init__(self):
        if not (np.isfinite(self.mu) and np.isfinite(self.sigma)) or self.sigma <= 0:
            raise InvalidParameterError(f"Gaussian component needs sigma > 0, got {self.sigma}")

    @property
    def mean(self) -> float:
        return self.mu

    @property
    def variance(self) -> float:
        return self.sigma**2

    def pdf(self, x):
        z = (np.asarray(x, dtype=float) - self.mu) / self.sigma
        return np.exp(-0.5 * z * z) / (self.sigma * math.sqrt(2.0 * math.pi))

    def support(self) -> tuple[float, float]:
        return (-np.inf, np.inf)

    def raw_moments(self, max_degree: int) -> np.ndarray:
        """E[X^j] for j = 0..max_degree."""
        out = np.zeros(max_degree + 1)
        out[0] = 1.0
        if max_degree >= 1:
            out[1] = self.mu
        s2 = self.sigma**2
        for j in range(2, max_degree + 1):
            # E[X^j] = mu E[X^{j-1}] + (j-1) s^2 E[X^{j-2}]
            out[j] = self.mu * out[j - 1] + (j - 1) * s2 * out[j - 2]
        return out

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        return rng.normal(self.mu, self.sigma, size)

    def to_dict(self) -> dict:
        return {"kind": "gaussian", "mu": self.mu, "sigma": self.sigma}


@dataclass(frozen=True)
class GammaParams:
    """Shifted Gamma density on (xi, inf) (orientation +1) or (-inf, xi) (-1)."""

    alpha: float
    beta: float
    xi: float = 0.0
    orientation: int = 1

    def __post_init__(self):
        if self.alpha < 1:
            raise InvalidParameterError(f"Gamma shape must be >= 1, got {self.alpha}")
        if self.beta <= 0:
            raise InvalidParameterError(f"Gamma rate must be > 0, got {self.beta}")
        if self.orientation not in (1, -1):
            raise InvalidParameterError("orientation must be +1 or -1")

    @property
    def mean(self) -> float:
        return self.xi + self.orientation * self.alpha / self.beta

    @property
    def variance(self) -> float:
        return self.alpha / self.beta**2

    def pdf(self, x):
        y = self.orientation * (np.asarray(x, dtype=float) - self.xi)
        out = np.zeros_like(y)
        pos = y > 0
        yp = y[pos]
        out[pos] = np.exp(
            self.alpha * math.log(self.beta) - special.gammaln(self.alpha)
            + (self.alpha - 1) * np.log(yp) - self.beta * yp
        )
        return out

    def support(self) -> tuple[float, float]:
        return (self.xi, np.inf) if self.orientation == 1 else (-np.inf, self.xi)

    def raw_moments(self, max_degree: int) -> np.ndarray:
        # moments of Y = orientation * (X - xi) ~ Gamma(alpha, beta), then shift
        ym = np.ones(max_degree + 1)
        for j in range(1, max_degree + 1):
            ym[j] = ym[j - 1] * (self.alpha + j - 1) / self.beta
        s = float(self.orientation)
        out = np.zeros(max_degree + 1)
        for j in range(max_degree + 1):
            i = np.arange(j + 1)
            binom = special.comb(j, i, exact=False)
            out[j] = np.sum(binom * self.xi ** (j - i) * s**i * ym[i])
        return out

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        return self.xi + self.orientation * rng.gamma(self.alpha, 1.0 / self.beta, size)

    def to_dict(self) -> dict:
        return {"kind": "gamma", "alpha": self.alpha, "beta": self.beta,
                "xi": self.xi, "orientation": self.orientation}


def params_from_dict(d: dict):
    kind = d.get("kind")
    if kind == "gaussian":
        return GaussianParams(float(d["mu"]), float(d["sigma"]))
    if kind == "gamma":
        return GammaParams(float(d["alpha"]), float(d["beta"]), float(d.get("xi", 0.0)),
                           int(d.get("orientation", 1)))
    raise InvalidParameterError(f"unknown component kind {kind!r}")


@dataclass(frozen=True, eq=False)
class RecurrenceBasis:
    """Orthonormal polynomial family given by its recurrence coefficients.

    ``a`` has length ``order + 1``; ``b`` has length ``order + 1`` with ``b[0]``
    unused (stored as 0).
    """

    a: np.ndarray
    b: np.ndarray
    descriptor: dict | None = field(default=None)

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float).copy()
        b = np.asarray(self.b, dtype=float).copy()
        if a.ndim != 1 or a.shape != b.shape:
            raise InvalidParameterError("a and b must be 1-d arrays of equal length")
        b[0] = 0.0
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def order(self) -> int:
        return len(self.a) - 1

    def truncated(self, order: int) -> "RecurrenceBasis":
        self._check(order)
        return RecurrenceBasis(self.a[: order + 1], self.b[: order + 1], self.descriptor)

    def _check(self, n: int):
        if n > self.order:
            raise InvalidParameterError(f"basis has order {self.order}, {n} requested")

    def jacobi_matrix(self, order: int | None = None) -> np.ndarray:
        """Symmetric tridiagonal matrix J_N built from a_0..a_N, b_1..b_N."""
        n = self.order if order is None else order
        self._check(n)
        return np.diag(self.a[: n + 1]) + np.diag(self.b[1 : n + 1], 1) + np.diag(self.b[1 : n + 1], -1)

    def mult_x(self, size: int) -> np.ndarray:
        """Matrix of multiplication by x on coordinate vectors of length ``size``."""
        return self.jacobi_matrix(size - 1)

    def evaluate(self, x, order: int | None = None) -> np.ndarray:
        """Values H_0..H_N at ``x``; shape (N+1,) + x.shape."""
        n = self.order if order is None else order
        self._check(n)
        x = np.asarray(x, dtype=float)
        out = np.empty((n + 1,) + x.shape)
        out[0] = 1.0
        if n >= 1:
            out[1] = (x - self.a[0]) / self.b[1]
        for k in range(1, n):
            out[k + 1] = ((x - self.a[k]) * out[k] - self.b[k] * out[k - 1]) / self.b[k + 1]
        return out

    def evaluate_with_derivatives(self, x, order: int | None = None, nderiv: int = 2):
        """Values and first ``nderiv`` derivatives of H_0..H_N at ``x``.

        Returns an array of shape (nderiv + 1, N + 1) + x.shape.
        """
        n = self.order if order is None else order
        self._check(n)
        x = np.asarray(x, dtype=float)
        out = np.zeros((nderiv + 1, n + 1) + x.shape)
        out[0, 0] = 1.0
        for k in range(0, n):
            prev = out[:, k - 1] if k >= 1 else np.zeros_like(out[:, 0])
            for d in range(nderiv + 1):
                val = (x - self.a[k]) * out[d, k] - self.b[k] * prev[d]
                if d >= 1:
                    val = val + d * out[d - 1, k]
                out[d, k + 1] = val / self.b[k + 1]
        return out

    def derivative_matrix(self, size: int) -> np.ndarray:
        """D with D[:, n] the coordinates of H_n' in H_0..H_{size-1}."""
        self._check(size - 1)
        X = self.mult_x(size)
        D = np.zeros((size, size))
        if size >= 2:
            D[0, 1] = 1.0 / self.b[1]
        for n in range(1, size - 1):
            col = X @ D[:, n] - self.a[n] * D[:, n] - self.b[n] * D[:, n - 1]
            col[n] += 1.0
            D[:, n + 1] = col / self.b[n + 1]
        return D

    def monomial_coefficients(self, order: int | None = None) -> np.ndarray:
        """Row n holds the coefficients of H_n in 1, x, ..., x^N."""
        n = self.order if order is None else order
        return expand_in(self, MonomialFamily(), n)

    def to_json(self) -> str:
        return json.dumps({"order": self.order, "a": self.a.tolist(), "b": self.b.tolist(),
                           "density": self.descriptor})

    @classmethod
    def from_json(cls, text: str) -> "RecurrenceBasis":
        d = json.loads(text)
        return cls(np.array(d["a"]), np.array(d["b"]), d.get("density"))


@dataclass(frozen=True)
class MonomialFamily:
    """The family u^n with u = (x - center) / scale."""

    center: float = 0.0
    scale: float = 1.0

    order = math.inf

    def mult_x(self, size: int) -> np.ndarray:
        X = self.center * np.eye(size)
        X[np.arange(1, size), np.arange(size - 1)] = self.scale
        return X

    def derivative_matrix(self, size: int) -> np.ndarray:
        D = np.zeros((size, size))
        k = np.arange(1, size)
        D[k - 1, k] = k / self.scale
        return D

    def evaluate(self, x, order: int) -> np.ndarray:
        u = (np.asarray(x, dtype=float) - self.center) / self.scale
        return np.stack([u**k for k in range(order + 1)])

    def evaluate_with_derivatives(self, x, order: int, nderiv: int = 2):
        u = (np.asarray(x, dtype=float) - self.center) / self.scale
        out = np.zeros((nderiv + 1, order + 1) + u.shape)
        for k in range(order + 1):
            for d in range(min(nderiv, k) + 1):
                c = math.perm(k, d) / self.scale**d
                out[d, k] = c * u ** (k - d)
        return out


def expand_in(basis: RecurrenceBasis, family, order: int) -> np.ndarray:
    """Coordinates of H_0..H_order of ``basis`` in ``family``.

    Runs the recurrence of ``basis`` with multiplication by x carried out in the
    target family, so no monomial expansion is involved.  Row n is H_n.
    """
    basis._check(order)
    if order > family.order:
        raise InvalidParameterError("target family order too small")
    size = order + 1
    # x * H_n has degree n + 1 <= order, so a square operator of this size is exact
    X = family.mult_x(size)
    C = np.zeros((size, size))
    C[0, 0] = 1.0
    for n in range(order):
        prev = C[n - 1] if n >= 1 else 0.0
        if basis.b[n + 1] == 0.0:
            raise SingularSystemError(f"vanishing recurrence coefficient b[{n + 1}]")
        C[n + 1] = (X @ C[n] - basis.a[n] * C[n] - basis.b[n] * prev) / basis.b[n + 1]
    return C


# --------------------------------------------------------------------------- #
# Recurrences for component densities
# --------------------------------------------------------------------------- #

def gaussian_recurrence(params: GaussianParams, order: int) -> RecurrenceBasis:
    """a_n = mu, b_n = sqrt(n) sigma."""
    if order < 0:
        raise InvalidParameterError("order must be >= 0")
    if params.sigma <= 0:
        raise InvalidParameterError("sigma must be > 0")
    n = np.arange(order + 1)
    return RecurrenceBasis(np.full(order + 1, float(params.mu)), np.sqrt(n) * params.sigma,
                           params.to_dict())


def gamma_recurrence(params: GammaParams, order: int) -> RecurrenceBasis:
    """Laguerre-type recurrence of the shifted Gamma density.

    The off-diagonal coefficients keep the sign of the closed form, so H_n has
    leading coefficient of sign (-orientation)^n.  Gauss rules and inner
    products only see b_n^2 and are unaffected.
    """
    if order < 0:
        raise InvalidParameterError("order must be >= 0")
    al, be, xi, d = params.alpha, params.beta, params.xi, params.orientation
    n = np.arange(order + 1, dtype=float)
    a = (d * 2 * n + d * al + be * xi) / be
    b = -d * np.sqrt((n + al - 1) * n) / be
    return RecurrenceBasis(a, b, params.to_dict())


def component_recurrence(params, order: int) -> RecurrenceBasis:
    if isinstance(params, GaussianParams):
        return gaussian_recurrence(params, order)
    if isinstance(params, GammaParams):
        return gamma_recurrence(params, order)
    raise InvalidParameterError(f"unsupported component {params!r}")


def _tridiag_apply(a: np.ndarray, b: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Row-wise J z for a stack of Jacobi matrices (a, b: (K, L))."""
    out = a * z
    out[:, :-1] += b[:, 1:] * z[:, 1:]
    out[:, 1:] += b[:, 1:] * z[:, :-1]
    return out


def mixture_recurrence(components: Sequence[tuple[float, RecurrenceBasis]], order: int,
                       descriptor: dict | None = None) -> RecurrenceBasis:
    """Recurrence coefficients of the ONB of a mixture sum_k c_k v_k.

    Each component contributes the Gauss rule of its Jacobi matrix J_N^k,
    accessed only through products J z (the rule is never diagonalised).
    The vectors z_n^k = p_n(J^k) e_1 are kept normalised, so that
    psi_n = sum_k c_k |z_n^k|^2 stays equal to one; b_{n+1} is the norm
    of the unnormalised update and a_n = sum_k c_k z^T J z.
    """
    if order < 0:
        raise InvalidParameterError("order must be >= 0")
    weights = np.array([float(c) for c, _ in components])
    if np.any(weights <= 0):
        raise InvalidParameterError("mixture weights must be positive")
    if abs(weights.sum() - 1.0) > 1e-12:
        raise InvalidParameterError(f"mixture weights sum to {weights.sum()!r}, not 1")
    for _, bk in components:
        if bk.order < order:
            raise InvalidParameterError("component basis order below requested order")
    L = order + 1
    A = np.stack([bk.a[:L] for _, bk in components])
    B = np.stack([bk.b[:L] for _, bk in components])
    c = weights[:, None]

    a = np.zeros(L)
    b = np.zeros(L)
    z_prev = np.zeros_like(A)
    z = np.zeros_like(A)
    z[:, 0] = 1.0
    Jz = _tridiag_apply(A, B, z)
    a[0] = np.sum(c * z * Jz)
    for n in range(order):
        w = Jz - a[n] * z - b[n] * z_prev
        psi = float(np.sum(c * w * w))
        scale = float(np.sum(c * Jz * Jz))
        if not psi > 1e-28 * max(scale, 1e-300):
            raise DegenerateMixtureError(f"mixture Gram lost positivity at degree {n + 1}")
        b[n + 1] = math.sqrt(psi)
        z_prev, z = z, w / b[n + 1]
        Jz = _tridiag_apply(A, B, z)
        a[n + 1] = np.sum(c * z * Jz)
    return RecurrenceBasis(a, b, descriptor)


# --------------------------------------------------------------------------- #
# Change of basis
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class ChangeOfBasis:
    """Coordinates q[N, n] with H_N = sum_n q[N, n] H_n^k, one array per component.

    ``upper`` gives the transposed (upper-triangular) layout satisfying the
    monomial identity  H_N = H_N^k Q  on coefficient matrices.
    """

    q: tuple

    def __getitem__(self, k: int) -> np.ndarray:
        return self.q[k]

    def __len__(self):
        return len(self.q)

    def upper(self, k: int) -> np.ndarray:
        return self.q[k].T


def change_of_basis(mixture_basis: RecurrenceBasis, component_basis, order: int,
                    method: str = "recurrence") -> np.ndarray | ChangeOfBasis:
    """Express the mixture ONB in a component ONB (rows = mixture polynomials).

    ``component_basis`` may be a single RecurrenceBasis (returns an array) or a
    list of them (returns a ChangeOfBasis).  The default method runs the
    mixture recurrence inside the component family; ``method="triangular"``
    solves the monomial system H_N = H_N^k Q, which is only usable at low
    orders because monomial coefficients grow factorially.
    """
    if isinstance(component_basis, (list, tuple)):
        return ChangeOfBasis(tuple(change_of_basis(mixture_basis, cb, order, method)
                                   for cb in component_basis))
    mixture_basis._check(order)
    component_basis._check(order)
    if method == "recurrence":
        return expand_in(mixture_basis, component_basis, order)
    if method == "triangular":
        Hm = mixture_basis.monomial_coefficients(order).T   # upper: column n = H_n
        Hk = component_basis.monomial_coefficients(order).T
        if np.any(np.diag(Hk) == 0):
            raise SingularSystemError("component basis has a vanishing leading coefficient")
        Q = linalg.solve_triangular(Hk, Hm, lower=False)
        return Q.T
    raise InvalidParameterError(f"unknown method {method!r}")


# --------------------------------------------------------------------------- #
# Moment-based constructions
# --------------------------------------------------------------------------- #

def hankel_gram(moments: Sequence[float], order: int) -> np.ndarray:
    """Gram matrix <x^i, x^j> from raw moments m_0..m_{2N}."""
    m = np.asarray(moments, dtype=float)
    if len(m) < 2 * order + 1:
        raise InvalidParameterError("need raw moments up to degree 2N")
    i = np.arange(order + 1)
    return m[i[:, None] + i[None, :]]


def _as_gram(moments, order: int) -> np.ndarray:
    m = np.asarray(moments, dtype=float)
    if m.ndim == 1:
        return hankel_gram(m, order)
    if m.shape[0] < order + 1:
        raise InvalidParameterError("Gram matrix too small for requested order")
    return m[: order + 1, : order + 1]


def gram_schmidt_basis(moments, order: int, variant: str = "modified") -> np.ndarray:
    """ONB coefficient rows by (classical or modified) Gram-Schmidt on monomials.

    ``moments`` is either the sequence of raw moments or the Gram matrix.
    """
    M = _as_gram(moments, order)
    n = order + 1
    U = np.zeros((n, n))
    norms = np.zeros(n)

    def ip(p, q):
        return p @ M @ q

    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        if variant == "classical":
            u = e.copy()
            for j in range(i):
                u -= ip(e, U[j]) / norms[j] * U[j]
        elif variant == "modified":
            u = e.copy()
            for j in range(i):
                u -= ip(u, U[j]) / norms[j] * U[j]
        else:
            raise InvalidParameterError(f"unknown variant {variant!r}")
        nrm = ip(u, u)
        if not nrm > 0:
            raise IndefiniteGramError(f"Gram matrix not positive definite at degree {i}")
        U[i] = u
        norms[i] = nrm
    return U / np.sqrt(norms)[:, None]


def mysovskikh_basis(moments, order: int) -> np.ndarray:
    """ONB coefficient rows S = L^{-1} from the Cholesky factor of the Gram matrix."""
    M = _as_gram(moments, order)
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise IndefiniteGramError(str(exc)) from exc
    return linalg.solve_triangular(L, np.eye(order + 1), lower=True)


def recurrence_from_coefficients(C: np.ndarray) -> RecurrenceBasis:
    """Recover (a_n, b_n) from monomial coefficient rows of an ONB.

    Uses b_{n+1} = C[n, n] / C[n+1, n+1] and
    a_n = (C[n, n-1] - b_{n+1} C[n+1, n]) / C[n, n]; the last a_N is not
    determined and is returned as NaN.
    """
    C = np.asarray(C, dtype=float)
    N = C.shape[0] - 1
    a = np.full(N + 1, np.nan)
    b = np.zeros(N + 1)
    for n in range(N):
        b[n + 1] = C[n, n] / C[n + 1, n + 1]
        lower = C[n, n - 1] if n >= 1 else 0.0
        a[n] = (lower - b[n + 1] * C[n + 1, n]) / C[n, n]
    return RecurrenceBasis(a, b)


# --------------------------------------------------------------------------- #
# Quadrature
# --------------------------------------------------------------------------- #

def gauss_quadrature(basis: RecurrenceBasis, order: int | None = None):
    """Gauss rule with N+1 nodes, exact for polynomials of degree <= 2N+1."""
    n = basis.order if order is None else order
    basis._check(n)
    if n == 0:
        return np.array([basis.a[0]]), np.array([1.0])
    try:
        nodes = linalg.eigh_tridiagonal(basis.a[: n + 1], basis.b[1 : n + 1], eigvals_only=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise EigenFailureError(str(exc)) from exc
    # Christoffel weights 1 / sum_n H_n(x_j)^2 keep full relative accuracy in the
    # tails, where squared eigenvector components only have absolute accuracy
    H = basis.evaluate(nodes, n)
    return nodes, 1.0 / np.sum(H * H, axis=0)


def mixture_quadrature(components: Sequence[tuple[float, RecurrenceBasis]], order: int):
    """Weighted union of per-component Gauss rules (exact to degree 2N+1 each)."""
    nodes, weights = [], []
    for c, bk in components:
        x, w = gauss_quadrature(bk, order)
        nodes.append(x)
        weights.append(c * w)
    return np.concatenate(nodes), np.concatenate(weights)
