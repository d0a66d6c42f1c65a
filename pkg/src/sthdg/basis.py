"""Reference-element polynomial bases and quadrature rules.

Reference triangle: vertices (0, 0), (1, 0), (0, 1), area 1/2.
Reference edge: [0, 1].  Reference time interval: [-1, 1].
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial import legendre as npleg
from scipy.special import eval_jacobi, roots_jacobi

MAX_QUADRATURE_DEGREE = 60


class CapabilityError(ValueError):
    pass


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray    # (nq,) on intervals/edges, (nq, 2) on the triangle
    weights: np.ndarray
    degree: int
    domain: str

    def __len__(self):
        return len(self.weights)


@lru_cache(maxsize=None)
def quadrature(domain: str, degree: int) -> QuadratureRule:
    """Rule on ``domain`` ('interval', 'edge' or 'triangle') exact up to ``degree``."""
    if degree < 0:
        raise ValueError("quadrature degree must be non-negative")
    if degree > MAX_QUADRATURE_DEGREE:
        raise CapabilityError(
            f"quadrature degree {degree} unsupported (max {MAX_QUADRATURE_DEGREE})")
    n = degree // 2 + 1
    if domain == "interval":
        x, w = npleg.leggauss(n)
        pts, wts = x, w
    elif domain == "edge":
        x, w = npleg.leggauss(n)
        pts, wts = 0.5 * (x + 1.0), 0.5 * w
    elif domain == "triangle":
        # collapsed (Duffy) rule: Gauss-Legendre x Gauss-Jacobi(1, 0)
        a, wa = npleg.leggauss(n)
        b, wb = roots_jacobi(n, 1.0, 0.0)
        A, B = np.meshgrid(a, b, indexing="ij")
        WA, WB = np.meshgrid(wa, wb, indexing="ij")
        xi = 0.25 * (1.0 + A) * (1.0 - B)
        eta = 0.5 * (1.0 + B)
        pts = np.column_stack([xi.ravel(), eta.ravel()])
        wts = (WA * WB).ravel() / 8.0
    else:
        raise ValueError(f"unknown quadrature domain {domain!r}")
    pts = np.ascontiguousarray(pts)
    wts = np.ascontiguousarray(wts)
    pts.setflags(write=False)
    wts.setflags(write=False)
    return QuadratureRule(pts, wts, degree, domain)


def simplex_dim(k: int) -> int:
    return (k + 1) * (k + 2) // 2 if k >= 0 else 0


def _scaled_legendre(u, v, du, dv, p):
    """v^p P_p(u/v) and its gradient for p = 0..pmax via the three-term recurrence."""
    vals = [np.ones_like(u), u]
    grads = [np.zeros(u.shape + (2,)), np.broadcast_to(du, u.shape + (2,)).copy()]
    for n in range(1, p):
        q = ((2 * n + 1) * u * vals[n] - n * v**2 * vals[n - 1]) / (n + 1)
        g = ((2 * n + 1) * (du * vals[n][..., None] + u[..., None] * grads[n])
             - n * (2 * v[..., None] * dv * vals[n - 1][..., None]
                    + (v**2)[..., None] * grads[n - 1])) / (n + 1)
        vals.append(q)
        grads.append(g)
    return vals[:p + 1], grads[:p + 1]


class SimplexBasis:
    """Orthonormal hierarchical (Dubiner) basis of P_k on the reference triangle.

    Functions are ordered by total degree, so the first ``simplex_dim(j)``
    functions span P_j for every j <= k.
    """

    def __init__(self, k: int):
        if k < 0:
            raise ValueError("degree must be non-negative")
        self.degree = k
        self.dim = simplex_dim(k)
        self.indices = [(p, d - p) for d in range(k + 1) for p in range(d, -1, -1)]
        rule = quadrature("triangle", 2 * k)
        raw = self._raw(rule.points)[0]
        self._scale = 1.0 / np.sqrt(rule.weights @ raw**2)

    def _raw(self, xi, with_grad=False):
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        x, y = xi[:, 0], xi[:, 1]
        u = 2.0 * x + y - 1.0
        v = 1.0 - y
        du = np.array([2.0, 1.0])
        dv = np.array([0.0, -1.0])
        sl, slg = _scaled_legendre(u, v, du, dv, self.degree)
        s = 2.0 * y - 1.0
        vals = np.empty((len(x), self.dim))
        grads = np.empty((len(x), self.dim, 2)) if with_grad else None
        for col, (p, q) in enumerate(self.indices):
            jac = eval_jacobi(q, 2 * p + 1, 0, s)
            vals[:, col] = sl[p] * jac
            if with_grad:
                djac = (q + 2 * p + 2) * eval_jacobi(q - 1, 2 * p + 2, 1, s) if q > 0 else 0.0 * s
                grads[:, col, :] = slg[p] * jac[:, None]
                grads[:, col, 1] += sl[p] * djac
        return vals, grads

    def eval(self, xi) -> np.ndarray:
        """Values at reference points, shape (n, dim)."""
        return self._raw(xi)[0] * self._scale

    def grad(self, xi) -> np.ndarray:
        """Reference gradients, shape (n, dim, 2)."""
        return self._raw(xi, with_grad=True)[1] * self._scale[None, :, None]

    def eval_grad(self, xi):
        v, g = self._raw(xi, with_grad=True)
        return v * self._scale, g * self._scale[None, :, None]


class IntervalBasis:
    """Legendre polynomials L_0..L_k on [-1, 1]; L_m(1) = 1, L_m(-1) = (-1)^m."""

    def __init__(self, k: int):
        if k < 0:
            raise ValueError("degree must be non-negative")
        self.degree = k
        self.dim = k + 1
        self.right = np.ones(k + 1)
        self.left = (-1.0) ** np.arange(k + 1)

    def eval(self, x) -> np.ndarray:
        return npleg.legvander(np.atleast_1d(np.asarray(x, dtype=float)), self.degree)

    def deriv(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.empty((len(x), self.dim))
        for m in range(self.dim):
            c = np.zeros(self.dim)
            c[m] = 1.0
            out[:, m] = npleg.legval(x, npleg.legder(c)) if m > 0 else 0.0
        return out

    def mass(self) -> np.ndarray:
        """Gram matrix on [-1, 1]: diag(2 / (2m + 1))."""
        return np.diag(2.0 / (2 * np.arange(self.dim) + 1.0))


class EdgeBasis:
    """Orthonormal Legendre basis of P_k on the reference edge [0, 1]."""

    def __init__(self, k: int):
        self.degree = k
        self.dim = k + 1
        self._scale = np.sqrt(2 * np.arange(k + 1) + 1.0)

    def eval(self, s) -> np.ndarray:
        s = np.atleast_1d(np.asarray(s, dtype=float))
        return npleg.legvander(2.0 * s - 1.0, self.degree) * self._scale


@lru_cache(maxsize=None)
def simplex_basis(k: int) -> SimplexBasis:
    return SimplexBasis(k)


@lru_cache(maxsize=None)
def interval_basis(k: int) -> IntervalBasis:
    return IntervalBasis(k)


@lru_cache(maxsize=None)
def edge_basis(k: int) -> EdgeBasis:
    return EdgeBasis(k)


def monomial_integral_triangle(a: int, b: int) -> float:
    """Exact integral of x^a y^b over the reference triangle: a! b! / (a + b + 2)!."""
    from math import factorial
    return factorial(a) * factorial(b) / factorial(a + b + 2)
