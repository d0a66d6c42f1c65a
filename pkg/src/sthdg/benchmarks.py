"""Problem data: initial fields, body forces and exact solutions."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
import sympy as sym


@dataclass
class ProblemData:
    nu: float
    f: Callable | None            # f(x, t) -> (..., 2)
    u0: Callable                  # u0(x) -> (..., 2)
    T: float
    domain: tuple = ((0.0, 1.0), (0.0, 1.0))
    name: str = "custom"
    exact_u: Callable | None = None       # u(x, t)
    exact_grad: Callable | None = None    # Jacobian (..., 2, 2)
    exact_p: Callable | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError(f"viscosity must be positive, got {self.nu}")
        if not self.T > 0:
            raise ValueError(f"final time must be positive, got {self.T}")


def _vec(fx, fy):
    def call(x, *t):
        x = np.asarray(x, dtype=float)
        args = (x[..., 0], x[..., 1]) + tuple(t)
        a = np.broadcast_to(np.asarray(fx(*args), dtype=float), x.shape[:-1])
        b = np.broadcast_to(np.asarray(fy(*args), dtype=float), x.shape[:-1])
        return np.stack([a, b], axis=-1)
    return call


def _jac(entries):
    def call(x, *t):
        x = np.asarray(x, dtype=float)
        args = (x[..., 0], x[..., 1]) + tuple(t)
        out = np.empty(x.shape[:-1] + (2, 2))
        for i in range(2):
            for j in range(2):
                out[..., i, j] = np.broadcast_to(np.asarray(entries[i][j](*args), dtype=float),
                                                 x.shape[:-1])
        return out
    return call


X, Y, T = sym.symbols("x y t", real=True)
TIME = T                      # alias; some signatures below shadow T with the final time
STREAM = sym.sin(sym.pi * X) ** 2 * sym.sin(sym.pi * Y) ** 2


def curl(s):
    return sym.diff(s, Y), -sym.diff(s, X)


@lru_cache(maxsize=None)
def _manufactured(nu: float, amplitude: float):
    g = amplitude * sym.exp(-T)
    ux, uy = (g * c / sym.pi for c in curl(STREAM))
    p = g * sym.sin(sym.pi * X) * sym.cos(sym.pi * Y)
    fx = (sym.diff(ux, T) - nu * (sym.diff(ux, X, 2) + sym.diff(ux, Y, 2))
          + ux * sym.diff(ux, X) + uy * sym.diff(ux, Y) + sym.diff(p, X))
    fy = (sym.diff(uy, T) - nu * (sym.diff(uy, X, 2) + sym.diff(uy, Y, 2))
          + ux * sym.diff(uy, X) + uy * sym.diff(uy, Y) + sym.diff(p, Y))
    lam = lambda e: sym.lambdify((X, Y, T), sym.simplify(e), "numpy")
    jac = [[lam(sym.diff(c, v)) for v in (X, Y)] for c in (ux, uy)]
    return lam(ux), lam(uy), lam(p), lam(fx), lam(fy), jac


def manufactured(nu: float = 0.01, T: float = 1.0, amplitude: float = 1.0) -> ProblemData:
    """Forced flow u = exp(-t) curl(sin^2 pi x sin^2 pi y)/pi,
    p = exp(-t) sin pi x cos pi y, with f from the momentum equation."""
    ux, uy, p, fx, fy, jac = _manufactured(float(nu), float(amplitude))
    u = _vec(ux, uy)
    return ProblemData(nu=nu, f=_vec(fx, fy), u0=lambda x: u(x, 0.0), T=T, name="manufactured",
                       exact_u=u, exact_grad=_jac(jac),
                       exact_p=lambda x, t: np.asarray(p(x[..., 0], x[..., 1], t), dtype=float))


@lru_cache(maxsize=None)
def _stream_field():
    ux, uy = (c / sym.pi for c in curl(STREAM))
    lam = lambda e: sym.lambdify((X, Y), e, "numpy")
    return lam(ux), lam(uy), [[lam(sym.diff(c, v)) for v in (X, Y)] for c in (ux, uy)]


def vortex_field():
    """(1/pi) curl(sin^2 pi x sin^2 pi y) and its Jacobian; zero normal trace on the unit square."""
    ux, uy, jac = _stream_field()
    return _vec(ux, uy), _jac(jac)


def taylor_green(nu: float = 0.01, T: float = 1.0) -> ProblemData:
    """Unforced decay of a single confined vortex cell."""
    u0, _ = vortex_field()
    return ProblemData(nu=nu, f=None, u0=u0, T=T, name="taylor-green")


def stokes_steady(nu: float = 1.0, T: float = 1.0) -> ProblemData:
    """Hydrostatic test: f = grad(phi), u = 0.  The HDG coupling reproduces
    (f, v) exactly as b_h of the projected pressure pair, so the discrete
    velocity vanishes identically."""
    phi = lambda x, y: x**2 * y - 0.5 * x * y**2
    f = _vec(lambda x, y, t: 2 * x * y - 0.5 * y**2, lambda x, y, t: x**2 - x * y)
    zero = lambda x: np.zeros(np.shape(x))
    return ProblemData(nu=nu, f=f, u0=zero, T=T, name="stokes-steady",
                       exact_u=lambda x, t: np.zeros(np.shape(x)),
                       exact_grad=lambda x, t: np.zeros(np.shape(x)[:-1] + (2, 2)),
                       exact_p=lambda x, t: phi(x[..., 0], x[..., 1]))


def zero_problem(nu: float = 0.01, T: float = 1.0) -> ProblemData:
    zero = lambda x, *t: np.zeros(np.shape(x))
    return ProblemData(nu=nu, f=None, u0=zero, T=T, name="zero", exact_u=zero,
                       exact_grad=lambda x, t: np.zeros(np.shape(x)[:-1] + (2, 2)),
                       exact_p=lambda x, t: np.zeros(np.shape(x)[:-1]))


def from_expressions(u1: str, u2: str, p: str = "0", nu: float = 0.01, T: float = 1.0,
                     name: str = "custom") -> ProblemData:
    """Exact (u, p) given as sympy strings in x, y, t; f is derived from the
    momentum equation.  u should be solenoidal with zero normal trace."""
    loc = {"x": X, "y": Y, "t": TIME, "pi": sym.pi}
    ux, uy, pp = (sym.sympify(e, locals=loc) for e in (u1, u2, p))
    div = sym.simplify(sym.diff(ux, X) + sym.diff(uy, Y))
    if div != 0:
        raise ValueError(f"velocity is not solenoidal: div u = {div}")
    fx = (sym.diff(ux, TIME) - nu * (sym.diff(ux, X, 2) + sym.diff(ux, Y, 2))
          + ux * sym.diff(ux, X) + uy * sym.diff(ux, Y) + sym.diff(pp, X))
    fy = (sym.diff(uy, TIME) - nu * (sym.diff(uy, X, 2) + sym.diff(uy, Y, 2))
          + ux * sym.diff(uy, X) + uy * sym.diff(uy, Y) + sym.diff(pp, Y))
    lam = lambda e: sym.lambdify((X, Y, TIME), e, "numpy")
    u = _vec(lam(ux), lam(uy))
    jac = [[lam(sym.diff(c, v)) for v in (X, Y)] for c in (ux, uy)]
    pf = lam(pp)
    return ProblemData(nu=nu, f=_vec(lam(fx), lam(fy)), u0=lambda x: u(x, 0.0), T=T, name=name,
                       exact_u=u, exact_grad=_jac(jac),
                       exact_p=lambda x, t: np.broadcast_to(
                           np.asarray(pf(x[..., 0], x[..., 1], t), dtype=float), x.shape[:-1]))


def load_problem_file(path, nu: float = 0.01, T: float = 1.0) -> ProblemData:
    """Read ``u1 = ...``, ``u2 = ...`` and optional ``p = ...`` lines ('#' comments)."""
    vals = {}
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise ValueError(f"{path}: expected key = expression, got {line!r}")
            vals[key.strip()] = val.strip()
    missing = {"u1", "u2"} - set(vals)
    if missing:
        raise ValueError(f"{path}: missing {sorted(missing)}")
    return from_expressions(vals["u1"], vals["u2"], vals.get("p", "0"), nu, T, name="custom-file")


BENCHMARKS = {
    "taylor-green": taylor_green,
    "manufactured": manufactured,
    "stokes-steady": stokes_steady,
    "zero": zero_problem,
}


def get_benchmark(name: str, nu: float, T: float) -> ProblemData:
    try:
        return BENCHMARKS[name](nu=nu, T=T)
    except KeyError:
        raise ValueError(f"unknown benchmark {name!r}; choose from {sorted(BENCHMARKS)}") from None
