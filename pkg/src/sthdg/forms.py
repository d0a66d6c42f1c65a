"""Sparse assembly of the HDG forms and the slab system.

Spatial matrices live on the velocity pair space (u, ubar) of size
``space.n_vel`` and the pressure pair space (p, pbar) of size ``space.n_pres``.
Slab matrices are Kronecker products with the Legendre time matrices, which
puts them directly into the slab dof ordering of :class:`SlabSpace`.

Sign conventions (rows are test functions, columns trial functions):

* viscous     a_h(u, v)
* convection  o_h(w; u, v)
* coupling    B[q, v] = b_h(q, v)
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .basis import interval_basis, quadrature
from .spaces import SlabSpace


class DataError(ValueError):
    pass


def default_alpha(k_s: int) -> float:
    return 8.0 * k_s**2


def _csr(shape, parts):
    r, c, v = (np.concatenate(z) for z in zip(*parts))
    return sp.csr_matrix((v, (r, c)), shape=shape)


# ---------------------------------------------------------------- spatial

def mass_matrix(space: SlabSpace) -> sp.csr_matrix:
    """(u, v)_{T_h} on the velocity pair space (zero on facet rows)."""
    d = np.zeros(space.n_vel)
    d[:space.n_u] = space.element_mass_diag
    return sp.diags(d).tocsr()


def viscous_matrix(space: SlabSpace, alpha: float) -> sp.csr_matrix:
    if not alpha > 0:
        raise ValueError(f"penalty alpha must be positive, got {alpha}")
    vol = space.volume()
    hf = space.halffaces()
    e = np.arange(space.ne)
    parts = [space.vector_blocks("u", e, "u", e,
                                 np.einsum("kq,kqid,kqjd->kij", vol.w, vol.dphi, vol.dphi))]
    pen = alpha / space.hK[hf.elem]
    w = hf.w
    phi, fphi = hf.phi, hf.fphi
    dn = np.einsum("hqbd,hd->hqb", hf.dphi, hf.normal)
    uu = (pen[:, None, None] * np.einsum("hq,hqi,hqj->hij", w, phi, phi)
          - np.einsum("hq,hqi,hqj->hij", w, dn, phi)
          - np.einsum("hq,hqi,hqj->hij", w, phi, dn))
    ub = (-pen[:, None, None] * np.einsum("hq,hqi,qj->hij", w, phi, fphi)
          + np.einsum("hq,hqi,qj->hij", w, dn, fphi))
    bb = pen[:, None, None] * np.einsum("hq,qi,qj->hij", w, fphi, fphi)
    parts += [space.vector_blocks("u", hf.elem, "u", hf.elem, uu),
              space.vector_blocks("u", hf.elem, "ubar", hf.face, ub),
              space.vector_blocks("ubar", hf.face, "u", hf.elem, ub.transpose(0, 2, 1)),
              space.vector_blocks("ubar", hf.face, "ubar", hf.face, bb)]
    return _csr((space.n_vel, space.n_vel), parts)


def wind_values(space: SlabSpace, w: np.ndarray, qdeg=None):
    """Element snapshot w (ne, 2, nb) at volume and half-face quadrature points."""
    vol = space.volume(qdeg=qdeg)
    hf = space.halffaces(qdeg=qdeg)
    return (np.einsum("qb,kcb->kqc", vol.phi, w),
            np.einsum("hqb,hcb->hqc", hf.phi, w[hf.elem]))


def convection_matrix(space: SlabSpace, w: np.ndarray | None = None, *,
                      w_vol=None, w_hf=None, qdeg=None) -> sp.csr_matrix:
    """o_h(w; ., .) with w an element velocity snapshot, or given directly by
    its values at volume/half-face points.  On each half-face the trace of w
    from the owning element is used."""
    if w is not None:
        w_vol, w_hf = wind_values(space, np.asarray(w), qdeg)
    vol = space.volume(qdeg=qdeg)
    hf = space.halffaces(qdeg=qdeg)
    e = np.arange(space.ne)
    adv = np.einsum("kqd,kqid->kqi", w_vol, vol.dphi)                # w . grad(phi_i)
    parts = [space.vector_blocks("u", e, "u", e,
                                 -np.einsum("kq,kqi,qj->kij", vol.w, adv, vol.phi))]
    wn = np.einsum("hqd,hd->hq", w_hf, hf.normal)
    a = 0.5 * (wn + np.abs(wn)) * hf.w
    b = 0.5 * (wn - np.abs(wn)) * hf.w
    phi, fphi = hf.phi, hf.fphi
    parts += [space.vector_blocks("u", hf.elem, "u", hf.elem,
                                  np.einsum("hq,hqi,hqj->hij", a, phi, phi)),
              space.vector_blocks("u", hf.elem, "ubar", hf.face,
                                  np.einsum("hq,hqi,qj->hij", b, phi, fphi)),
              space.vector_blocks("ubar", hf.face, "u", hf.elem,
                                  -np.einsum("hq,qi,hqj->hij", a, fphi, phi)),
              space.vector_blocks("ubar", hf.face, "ubar", hf.face,
                                  -np.einsum("hq,qi,qj->hij", b, fphi, fphi))]
    return _csr((space.n_vel, space.n_vel), parts)


def coupling_matrix(space: SlabSpace) -> sp.csr_matrix:
    """B with B[q, v] = b_h(q, v); rows (p, pbar), columns (u, ubar).

    Only the element velocity enters b_h, so the ubar columns are empty."""
    vol = space.volume(space.k_s - 1)
    dvol = space.volume()
    hf = space.halffaces()
    rows, cols, vals = [], [], []
    ii = np.arange(space.npb)
    jj = np.arange(space.nb)
    e = np.arange(space.ne)
    for c in range(2):
        blk = -np.einsum("kq,qi,kqj->kij", vol.w, vol.phi, dvol.dphi[..., c])
        r = space.idx_p(e[:, None, None], ii[None, :, None])
        q = space.idx_u(e[:, None, None], c, jj[None, None, :])
        rows.append(np.broadcast_to(r, blk.shape).ravel())
        cols.append(np.broadcast_to(q, blk.shape).ravel())
        vals.append(blk.ravel())
        fb = np.einsum("hq,qi,hqj->hij", hf.w * hf.normal[:, c][:, None], hf.fphi, hf.phi)
        r = space.idx_pbar(hf.face[:, None, None], np.arange(space.nbf)[None, :, None])
        q = space.idx_u(hf.elem[:, None, None], c, jj[None, None, :])
        rows.append(np.broadcast_to(r, fb.shape).ravel())
        cols.append(np.broadcast_to(q, fb.shape).ravel())
        vals.append(fb.ravel())
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(space.n_pres, space.n_vel))


def load_vector(space: SlabSpace, f: Callable, t) -> np.ndarray:
    """(f(., t), v) on the velocity pair space."""
    vol = space.volume()
    try:
        fx = np.asarray(f(vol.x, t), dtype=float)
    except Exception as exc:                       # noqa: BLE001 - user callable
        raise DataError(f"body force not evaluable at t={t}: {exc}") from exc
    if fx.shape != vol.x.shape:
        fx = np.broadcast_to(fx, vol.x.shape)
    if not np.all(np.isfinite(fx)):
        raise DataError(f"body force is not finite at t={t}")
    out = np.zeros(space.n_vel)
    out[:space.n_u] = np.einsum("kq,kqc,qb->kcb", vol.w, fx, vol.phi).ravel()
    return out


# ---------------------------------------------------------------- temporal

def time_matrices(k_t: int, dt: float):
    """(Tm, Tt) on the Legendre basis of a slab of length dt.

    Tm[m, l] = int_I L_l L_m dt;
    Tt[m, l] = -int_I L_l d/dt L_m dt + L_l(t_{n+1}) L_m(t_{n+1}).
    """
    tb = interval_basis(k_t)
    Tm = np.diag(dt / (2 * np.arange(k_t + 1) + 1.0))
    rule = quadrature("interval", 2 * k_t)
    L = tb.eval(rule.points)
    dL = tb.deriv(rule.points)
    Tt = -np.einsum("q,qm,ql->ml", rule.weights, dL, L) + np.outer(tb.right, tb.right)
    return Tm, Tt


def slab_kron(spatial, temporal) -> sp.csr_matrix:
    return sp.kron(sp.csr_matrix(spatial), sp.csr_matrix(temporal), format="csr")


def assemble_a_h(space: SlabSpace, alpha: float, dt: float, A=None) -> sp.csr_matrix:
    """int_{I_n} a_h(u, v) dt on the slab velocity pair space."""
    A = viscous_matrix(space, alpha) if A is None else A
    return slab_kron(A, time_matrices(space.k_t, dt)[0])


def assemble_o_h(space: SlabSpace, w_slab: np.ndarray, dt: float, qdeg=None,
                 tdeg=None) -> sp.csr_matrix:
    """int_{I_n} o_h(w; u, v) dt with w a slab element field (ne, 2, nb, nt)."""
    w_slab = np.asarray(w_slab)
    if w_slab.shape != space.shapes["u"]:
        raise ValueError(f"wind must have shape {space.shapes['u']}, got {w_slab.shape}")
    rule = quadrature("interval", space.tdeg if tdeg is None else tdeg)
    L = space.time_basis.eval(rule.points)
    out = None
    for wq, Lq in zip(rule.weights, L):
        wt = w_slab @ Lq
        if not np.any(wt):
            continue
        term = slab_kron(convection_matrix(space, wt, qdeg=qdeg), 0.5 * dt * wq * np.outer(Lq, Lq))
        out = term if out is None else out + term
    if out is None:
        out = sp.csr_matrix((space.n_vel * space.nt, space.n_vel * space.nt))
    return out


def assemble_b_h(space: SlabSpace, dt: float, B=None) -> sp.csr_matrix:
    """int_{I_n} b_h(q, v) dt: rows slab pressure pair, columns slab velocity pair."""
    B = coupling_matrix(space) if B is None else B
    return slab_kron(B, time_matrices(space.k_t, dt)[0])


def assemble_time_terms(space: SlabSpace, u_prev: np.ndarray, f: Callable | None,
                        t0: float, dt: float, M=None):
    """Time/mass block and right-hand side on the slab velocity pair space.

    Returns (Mt, r) with Mt = -int (u, dv/dt) + (u_{n+1}^-, v_{n+1}^-) and
    r = (u_n^-, v_n^+) + int (f, v) dt, f sampled at Gauss points in time.
    """
    M = mass_matrix(space) if M is None else M
    Tm, Tt = time_matrices(space.k_t, dt)
    Mt = slab_kron(M, Tt)
    tb = space.time_basis
    r = np.zeros(space.n_vel * space.nt)
    if u_prev is not None:
        up = np.zeros(space.n_vel)
        up[:space.n_u] = np.asarray(u_prev).ravel()
        r += np.kron(M @ up, tb.left)
    if f is not None:
        rule = space.time_rule
        L = tb.eval(rule.points)
        for xq, wq, Lq in zip(rule.points, rule.weights, L):
            t = t0 + 0.5 * dt * (xq + 1.0)
            r += np.kron(load_vector(space, f, t), 0.5 * dt * wq * Lq)
    return Mt, r


# ---------------------------------------------------------------- slab system

@dataclass
class SlabSystem:
    matrix: sp.csr_matrix      # full slab operator (all dofs, incl. boundary ubar)
    rhs: np.ndarray
    Mt: sp.csr_matrix
    A: sp.csr_matrix           # slab viscous block (unscaled by nu)
    O: sp.csr_matrix
    B: sp.csr_matrix
    C: sp.csr_matrix           # mean constraint, (slab pressure pair) x nt
    nu: float
    alpha: float


class StaticBlocks:
    """Spatial matrices that do not change from slab to slab."""

    def __init__(self, space: SlabSpace, alpha: float):
        self.space = space
        self.alpha = alpha
        self.M = mass_matrix(space)
        self.A = viscous_matrix(space, alpha)
        self.B = coupling_matrix(space)
        self.C = sp.csr_matrix(space.mean_vector[:, None])
        self._dt = {}

    def slab(self, dt):
        key = round(dt, 15)
        if key not in self._dt:
            Tm, Tt = time_matrices(self.space.k_t, dt)
            self._dt[key] = (slab_kron(self.M, Tt), slab_kron(self.A, Tm),
                             slab_kron(self.B, Tm), slab_kron(self.C, Tm))
        return self._dt[key]


def assemble_slab_system(space: SlabSpace, blocks: StaticBlocks, nu: float, t0: float,
                         dt: float, u_prev, f, w_slab=None, convection=True) -> SlabSystem:
    """Linear slab system for a frozen wind ``w_slab``:

        [ Mt + nu A + O(w)   B^T    0 ] [U]   [r]
        [ -B                 0      C ] [P] = [0]
        [ 0                  C^T    0 ] [l]   [0]
    """
    Mt, A, B, C = blocks.slab(dt)
    _, r = assemble_time_terms(space, u_prev, f, t0, dt, M=blocks.M)
    if convection and w_slab is not None and np.any(w_slab):
        O = assemble_o_h(space, w_slab, dt)
    else:
        O = sp.csr_matrix(Mt.shape)
    K = sp.bmat([[Mt + nu * A + O, B.T, None],
                 [-B, None, C],
                 [None, C.T, None]], format="csr")
    rhs = np.concatenate([r, np.zeros(space.n_dofs - len(r))])
    return SlabSystem(K, rhs, Mt, A, O, B, C, nu, blocks.alpha)


# ---------------------------------------------------------------- values

def pair_vector(space: SlabSpace, u, ubar) -> np.ndarray:
    """Slab velocity pair vector from (ne,2,nb,nt) and (nf,2,nbf,nt) arrays."""
    return np.concatenate([np.asarray(u).ravel(), np.asarray(ubar).ravel()])


def a_h_value(space, A, u, ubar, v=None, vbar=None) -> float:
    x = np.concatenate([np.ravel(u), np.ravel(ubar)])
    y = x if v is None else np.concatenate([np.ravel(v), np.ravel(vbar)])
    return float(y @ (A @ x))


def b_h_residual(space: SlabSpace, B, u) -> np.ndarray:
    """B applied to an element velocity (spatial snapshot or slab field)."""
    u = np.asarray(u)
    n = u.size
    x = np.zeros(B.shape[1])
    x[:n] = u.ravel()
    return B @ x
