"""L2-type projections in space and time, the H(div) projection and the
tensor-product test functions built from them."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from numpy.polynomial import legendre as npleg
from scipy.sparse.linalg import splu

from .basis import quadrature
from .forms import DataError, coupling_matrix
from .spaces import SlabSpace


class ConfigurationError(RuntimeError):
    pass


def _time_gauss(n=24):
    return npleg.leggauss(n)


def _eval_time(g, t):
    v = np.asarray(g(t), dtype=float)
    if v.ndim == 0:
        v = np.full(np.shape(t), float(v))
    return v


# ------------------------------------------------------------------ time

def project_time(g: Callable, t0: float, t1: float, k_t: int, npts: int = 24) -> np.ndarray:
    """L2(I_n) projection onto P_{k_t}: Legendre coefficients, trailing axis."""
    x, w = _time_gauss(npts)
    t = t0 + 0.5 * (t1 - t0) * (x + 1.0)
    vals = _eval_time(g, t)                         # (nq, ...)
    L = npleg.legvander(x, k_t)                     # (nq, nt)
    m = np.arange(k_t + 1)
    c = np.einsum("q,q...,qm->...m", w, vals, L) * (2 * m + 1) / 2.0
    return c


def dg_time_projection(eta: Callable, t0: float, t1: float, k_t: int, npts: int = 24) -> np.ndarray:
    """p in P_{k_t} with p(t_n^+) = eta(t_n) and int (eta - p) q = 0 for q in P_{k_t - 1}."""
    c = project_time(eta, t0, t1, k_t, npts)
    left = _eval_time(eta, np.array([t0]))[0]
    m = np.arange(k_t)
    c[..., k_t] = (-1.0) ** k_t * (left - np.einsum("...m,m->...", c[..., :k_t], (-1.0) ** m))
    return c


def eval_time_coeffs(c: np.ndarray, t0: float, t1: float, t) -> np.ndarray:
    xi = 2.0 * (np.asarray(t, dtype=float) - t0) / (t1 - t0) - 1.0
    return np.einsum("...m,qm->q...", c, npleg.legvander(np.atleast_1d(xi), c.shape[-1] - 1))


# ------------------------------------------------------------------ space

def _field_values(g: Callable, x: np.ndarray) -> np.ndarray:
    """Vector field values at points x (..., 2); constants are broadcast."""
    v = np.asarray(g(x), dtype=float)
    if v.shape != x.shape:
        try:
            v = np.broadcast_to(v, x.shape)
        except ValueError as exc:
            raise DataError(f"expected a 2-vector field, got shape {v.shape}") from exc
    return v


def _proj_qdeg(space):
    return max(space.qdeg, 2 * space.k_s + 8)


def project_element(space: SlabSpace, g: Callable, k: int | None = None, qdeg=None) -> np.ndarray:
    """Element-wise L2 projection of a vector field onto P_k(K)^2: (ne, 2, dim P_k)."""
    k = space.k_s if k is None else k
    vol = space.volume(k, _proj_qdeg(space) if qdeg is None else qdeg)
    vals = _field_values(g, vol.x)
    return np.einsum("kq,kqc,qb->kcb", vol.w, vals, vol.phi) / np.abs(space.detJ)[:, None, None]


def project_scalar(space: SlabSpace, g: Callable, k: int, qdeg=None) -> np.ndarray:
    vol = space.volume(k, _proj_qdeg(space) if qdeg is None else qdeg)
    vals = np.asarray(g(vol.x), dtype=float)
    return np.einsum("kq,kq,qb->kb", vol.w, vals, vol.phi) / np.abs(space.detJ)[:, None]


def project_facet(space: SlabSpace, g: Callable, qdeg=None) -> np.ndarray:
    """Face-wise L2 projection onto P_{k_s}(F)^2, zero on boundary faces: (nf, 2, nbf)."""
    qdeg = _proj_qdeg(space) if qdeg is None else qdeg
    rule = quadrature("edge", qdeg)
    f = space.faces
    p0 = space.mesh.vertices[f.vertices[:, 0]]
    p1 = space.mesh.vertices[f.vertices[:, 1]]
    x = p0[:, None, :] + rule.points[None, :, None] * (p1 - p0)[:, None, :]
    vals = _field_values(g, x)
    if not np.all(np.isfinite(vals)):
        raise DataError("function has no finite trace on the skeleton")
    fphi = space.facet_basis.eval(rule.points)
    out = np.einsum("q,fqc,qb->fcb", rule.weights, vals, fphi)
    out[space.boundary_face] = 0.0
    return out


class DivProjector:
    """Pi_h^div: L2 projection onto discretely divergence-free element velocities.

    Solves (w, v) + b_h(q, v) = (g, v), b_h(q', w) = 0 with one mean
    constraint on the element pressure; the factorization is reused."""

    def __init__(self, space: SlabSpace, B=None):
        self.space = space
        B = coupling_matrix(space) if B is None else B
        Bu = B[:, :space.n_u]
        M = sp.diags(space.element_mass_diag)
        C = sp.csr_matrix(space.mean_vector[:, None])
        K = sp.bmat([[M, Bu.T, None], [Bu, None, C], [None, C.T, None]], format="csc")
        try:
            self._lu = splu(K)
        except RuntimeError as exc:
            raise ConfigurationError(f"singular H(div) projection system: {exc}") from exc
        self.n = K.shape[0]

    def __call__(self, g) -> np.ndarray:
        space = self.space
        if callable(g):
            gc = project_element(space, g)
        else:
            gc = np.asarray(g, dtype=float).reshape(space.ne, 2, space.nb)
        rhs = np.zeros(self.n)
        rhs[:space.n_u] = space.element_mass_diag * gc.ravel()
        x = self._lu.solve(rhs)
        if not np.all(np.isfinite(x)):
            raise ConfigurationError("H(div) projection produced non-finite values")
        return x[:space.n_u].reshape(space.ne, 2, space.nb)


def project_div(space: SlabSpace, g) -> np.ndarray:
    cache = space.__dict__.setdefault("_forms", {})
    if "Pdiv" not in cache:
        cache["Pdiv"] = DivProjector(space)
    return cache["Pdiv"](g)


def conformity_residuals(space: SlabSpace, u: np.ndarray) -> dict:
    """Pointwise divergence, interior normal jumps and boundary normal traces
    of an element velocity snapshot (ne, 2, nb), maxima over quadrature
    points and vertices."""
    vol = space.volume()
    div = np.einsum("kqbc,kcb->kq", space.volume().dphi, u)
    corners = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    _, g = space.vel_basis.eval_grad(corners)
    gphys = np.einsum("kji,vbj->kvbi", space.invJ, g)
    divc = np.einsum("kvbc,kcb->kv", gphys, u)
    hf = space.halffaces()
    tr = np.einsum("hqb,hcb->hqc", hf.phi, u[hf.elem])
    un = np.einsum("hqc,hc->hq", tr, hf.normal)      # outward from each side
    nf = space.nf
    inner = space.faces.interior
    jump = np.abs(un[:nf][inner] + un[nf:]) if len(inner) else np.zeros(1)
    bnd = np.abs(un[:nf][space.boundary_face])
    return {"divergence": float(max(np.abs(div).max(), np.abs(divc).max())),
            "normal_jump": float(jump.max()) if jump.size else 0.0,
            "boundary_normal": float(bnd.max()) if bnd.size else 0.0,
            "x": vol.x}


# ------------------------------------------------------------------ solenoidal modes

@dataclass(frozen=True)
class CurlBump:
    """psi = curl s = (d_y s, -d_x s) with s = A (1 - r^2/r0^2)^p on r < r0."""
    center: tuple = (0.5, 0.5)
    radius: float = 0.35
    power: int = 6
    amplitude: float = 1.0

    def _parts(self, x):
        x = np.asarray(x, dtype=float)
        dx = x[..., 0] - self.center[0]
        dy = x[..., 1] - self.center[1]
        r02 = self.radius**2
        q = np.clip(1.0 - (dx**2 + dy**2) / r02, 0.0, None)
        return dx, dy, r02, q

    def stream(self, x):
        _, _, _, q = self._parts(x)
        return self.amplitude * q**self.power

    def __call__(self, x):
        dx, dy, r02, q = self._parts(x)
        c = 2.0 * self.amplitude * self.power * q ** (self.power - 1) / r02
        return np.stack([-c * dy, c * dx], axis=-1)

    def grad(self, x):
        """Jacobian J[..., i, j] = d psi_i / d x_j."""
        dx, dy, r02, q = self._parts(x)
        A, p = self.amplitude, self.power
        a = 2.0 * A * p * q ** (p - 1) / r02
        b = 4.0 * A * p * (p - 1) * q ** (p - 2) / r02**2
        J = np.empty(dx.shape + (2, 2))
        J[..., 0, 0] = b * dx * dy
        J[..., 0, 1] = -a + b * dy**2
        J[..., 1, 0] = a - b * dx**2
        J[..., 1, 1] = -b * dx * dy
        return J


@dataclass(frozen=True)
class Mode:
    eta: Callable                  # time factor
    psi: Callable                  # spatial solenoidal factor
    grad: Callable | None = None   # Jacobian of psi, optional


def _divergence(mode: Mode, x):
    if mode.grad is not None:
        J = mode.grad(x)
        return J[..., 0, 0] + J[..., 1, 1]
    h = 1e-3
    out = np.zeros(x.shape[:-1])
    for c in range(2):
        e = np.zeros(2)
        e[c] = h
        f = lambda s: np.asarray(mode.psi(x + s * e))[..., c]
        out += (-f(2) + 8 * f(1) - 8 * f(-1) + f(-2)) / (12 * h)
    return out


@dataclass
class TensorTestFunction:
    modes: list
    times: np.ndarray
    phi: list      # per slab (ne, 2, nb, nt)
    phibar: list   # per slab (nf, 2, nbf, nt)

    def value(self, x, t):
        x = np.asarray(x, dtype=float)
        return sum(np.asarray(m.eta(t)) * np.asarray(m.psi(x)) for m in self.modes)


def build_tensor_test_function(modes: Sequence[Mode], space: SlabSpace, times,
                               div_tol: float = 1e-8, k_t: int | None = None) -> TensorTestFunction:
    """Per slab: Pi phi = sum_k Pi^t eta_k * Pi^div psi_k and
    Pibar phi = sum_k Pi^t eta_k * Pibar psi_k."""
    k_t = space.k_t if k_t is None else k_t
    times = np.asarray(times, dtype=float)
    vol = space.volume()
    samples = vol.x.reshape(-1, 2)
    sp_parts = []
    for m in modes:
        div = _divergence(m, samples)
        if np.max(np.abs(div)) > div_tol:
            raise DataError(f"spatial factor is not solenoidal (max |div| = {np.max(np.abs(div)):.3e})")
        sp_parts.append((project_div(space, m.psi), project_facet(space, m.psi)))
    phi, phibar = [], []
    for n in range(len(times) - 1):
        t0, t1 = times[n], times[n + 1]
        a = np.zeros(space.shapes["u"])
        b = np.zeros(space.shapes["ubar"])
        for m, (pd, pf) in zip(modes, sp_parts):
            ct = project_time(m.eta, t0, t1, k_t)
            a += pd[..., None] * ct
            b += pf[..., None] * ct
        phi.append(a)
        phibar.append(b)
    return TensorTestFunction(list(modes), times, phi, phibar)


# ------------------------------------------------------------------ errors

def element_error(space: SlabSpace, coeffs: np.ndarray, exact: Callable, grad: Callable | None = None,
                  qdeg=None) -> dict:
    """Broken L2, H1-seminorm and sampled L-infinity errors of an element
    velocity snapshot against an exact field (and its Jacobian)."""
    qdeg = _proj_qdeg(space) if qdeg is None else qdeg
    vol = space.volume(space.k_s, qdeg)
    uh = np.einsum("qb,kcb->kqc", vol.phi, coeffs)
    ue = _field_values(exact, vol.x)
    e = uh - ue
    out = {"l2": float(np.sqrt(np.sum(vol.w[..., None] * e**2)))}
    corners = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1 / 3, 1 / 3]])
    xc = space.v0[:, None, :] + np.einsum("kij,vj->kvi", space.J, corners)
    uc = np.einsum("vb,kcb->kvc", space.vel_basis.eval(corners), coeffs)
    out["linf"] = float(max(np.abs(e).max(), np.abs(uc - _field_values(exact, xc)).max()))
    if grad is not None:
        gh = np.einsum("kqbd,kcb->kqcd", vol.dphi, coeffs)
        ge = grad(vol.x)
        out["h1"] = float(np.sqrt(np.sum(vol.w[..., None, None] * (gh - ge) ** 2)))
    return out


def normal_face_error(space: SlabSpace, coeffs: np.ndarray, exact: Callable, qdeg=None) -> float:
    """sum_K ||(phi - u_h) . n||^2_{dK}."""
    qdeg = _proj_qdeg(space) if qdeg is None else qdeg
    hf = space.halffaces(space.k_s, qdeg)
    tr = np.einsum("hqb,hcb->hqc", hf.phi, coeffs[hf.elem])
    ex = _field_values(exact, hf.x)
    en = np.einsum("hqc,hc->hq", ex - tr, hf.normal)
    return float(np.sum(hf.w * en**2))


def facet_gap(space: SlabSpace, u: np.ndarray, ubar: np.ndarray, qdeg=None) -> float:
    """sum_K h_K^{-1} ||u - ubar||^2_{dK}."""
    qdeg = _proj_qdeg(space) if qdeg is None else qdeg
    hf = space.halffaces(space.k_s, qdeg)
    d = (np.einsum("hqb,hcb->hqc", hf.phi, u[hf.elem])
         - np.einsum("qb,hcb->hqc", hf.fphi, ubar[hf.face]))
    return float(np.sum(hf.w[..., None] * d**2 / space.hK[hf.elem][:, None, None]))
