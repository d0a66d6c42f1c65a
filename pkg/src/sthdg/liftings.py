"""Spatial and temporal liftings, discrete gradient, discrete time derivative."""
from __future__ import annotations

import numpy as np
from numpy.polynomial import legendre as npleg

from .spaces import SlabSpace


def lifting_qdeg(space: SlabSpace, k: int) -> int:
    """Quadrature exact for (mismatch of degree k_s) x (test of degree k)."""
    return max(space.qdeg, space.k_s + k)


def mismatch_on_halffaces(space: SlabSpace, v: np.ndarray, vbar: np.ndarray, qdeg=None):
    """v - vbar on every half-face, shape (nh, nq, 2), for snapshots
    v (ne, 2, nb) and vbar (nf, 2, nbf)."""
    hf = space.halffaces(space.k_s, qdeg)
    return (np.einsum("hqb,hcb->hqc", hf.phi, v[hf.elem])
            - np.einsum("qb,hcb->hqc", hf.fphi, vbar[hf.face]))


def spatial_lifting(space: SlabSpace, mu: np.ndarray, k: int | None = None, qdeg=None):
    """R with sum_K int_K R_c . w = sum_K int_{dK} mu_c (w . n) for w in P_k^2.

    ``mu`` holds values at half-face points of the rule of degree ``qdeg``,
    shape (nh, nq) for scalar data or (nh, nq, nc) for vector data.
    Returns coefficients (ne, [nc,] 2, dim P_k) on the orthonormal basis."""
    k = space.k_s if k is None else k
    qdeg = lifting_qdeg(space, k) if qdeg is None else qdeg
    hf = space.halffaces(k, qdeg)
    mu = np.asarray(mu)
    scalar = mu.ndim == 2
    if scalar:
        mu = mu[..., None]
    local = np.einsum("hq,hqc,hd,hqi->hcdi", hf.w, mu, hf.normal, hf.phi)
    R = np.zeros((space.ne,) + local.shape[1:])
    np.add.at(R, hf.elem, local)
    det = np.abs(space.detJ)
    if not np.all(det > 0) or not np.all(np.isfinite(det)):
        raise FloatingPointError("singular local mass matrix")
    R /= det[:, None, None, None]
    return R[:, 0] if scalar else R


def discrete_gradient(space: SlabSpace, v: np.ndarray, vbar: np.ndarray, k: int | None = None,
                      qdeg=None):
    """G_h^k(v, vbar) = grad_h v - R_h^k(v - vbar) as coefficients
    (ne, 2 [component], 2 [direction], dim P_k).

    The broken gradient of v (degree k_s - 1 <= k) is represented exactly in
    the degree-k basis by L2 projection."""
    k = space.k_s if k is None else k
    qdeg = lifting_qdeg(space, k) if qdeg is None else qdeg
    mu = mismatch_on_halffaces(space, v, vbar, qdeg)
    R = spatial_lifting(space, mu, k, qdeg)
    return broken_gradient(space, v, k) - R


def broken_gradient(space: SlabSpace, v: np.ndarray, k: int | None = None):
    """grad_h v in the degree-k element basis, (ne, 2, 2, dim P_k)."""
    k = space.k_s if k is None else k
    qd = space.k_s + k
    target = space.volume(k, qd)
    source = space.volume(space.k_s, qd)
    g = np.einsum("kqbd,kcb->kqcd", source.dphi, v)
    return np.einsum("kq,kqcd,qi->kcdi", target.w, g, target.phi) / np.abs(space.detJ)[:, None, None, None]


def lifting_residual(space: SlabSpace, R: np.ndarray, mu: np.ndarray, k: int, qdeg: int) -> float:
    """Max relative residual of the lifting identity against every
    basis field w = phi_i e_d on every element (independent quadrature)."""
    vol = space.volume(k, max(qdeg, 2 * k))
    hf = space.halffaces(k, qdeg)
    lhs = np.einsum("kq,qi,qj,k...j->k...i", vol.w, vol.phi, vol.phi, R)
    mu = np.asarray(mu)
    if mu.ndim == 2:
        mu = mu[..., None]
        lhs = lhs[:, None]
    rhs = np.zeros_like(lhs)
    for h in range(len(hf.elem)):
        rhs[hf.elem[h]] += np.einsum("q,qc,d,qi->cdi", hf.w[h], mu[h], hf.normal[h], hf.phi[h])
    scale = max(np.abs(rhs).max(), np.abs(lhs).max(), 1e-300)
    return float(np.abs(lhs - rhs).max() / scale)


def gradient_values(space: SlabSpace, G: np.ndarray, qdeg: int):
    """Values of a degree-k coefficient tensor (ne, ..., dim P_k) at volume points."""
    k = _degree_of(G.shape[-1])
    vol = space.volume(k, qdeg)
    return np.einsum("qi,k...i->kq...", vol.phi, G)


def _degree_of(dim: int) -> int:
    k = 0
    while (k + 1) * (k + 2) // 2 < dim:
        k += 1
    return k


# ------------------------------------------------------------------- time

def time_lifting(u_slab: np.ndarray, u_prev: np.ndarray, dt: float) -> np.ndarray:
    """R^{k_t}(u) on one slab from the defining identity
    int_I (R, v) dt = ([u]_n, v(t_n^+)) for all v in P_{k_t}(I; V_h).

    Spatial factors coincide with the velocity space, so the identity
    reduces to a temporal mass solve per spatial coefficient."""
    if u_prev is None:
        raise ValueError("time lifting needs the incoming trace u_n^-")
    nt = u_slab.shape[-1]
    left = (-1.0) ** np.arange(nt)
    jump = u_slab @ left - u_prev
    Tm = np.diag(dt / (2 * np.arange(nt) + 1.0))
    coef = np.linalg.solve(Tm, left)
    return jump[..., None] * coef


def time_lifting_representation(u_slab, u_prev, dt, scale=1.0):
    """((u_n^+ - u_n^-)/2) sum_m (-1)^m (2m+1) L_m^n with L_m^n = scale * L_m."""
    nt = u_slab.shape[-1]
    m = np.arange(nt)
    jump = u_slab @ ((-1.0) ** m) - u_prev
    return 0.5 * jump[..., None] * ((-1.0) ** m * (2 * m + 1) * scale)


def fitted_representation_scale(u_slab, u_prev, dt) -> float:
    """Least-squares scaling s so that the representation formula with
    L_m^n = s L_m reproduces the defining solve; equals 2/dt."""
    R = time_lifting(u_slab, u_prev, dt).ravel()
    F = time_lifting_representation(u_slab, u_prev, dt).ravel()
    den = F @ F
    return float(R @ F / den) if den > 0 else float("nan")


def time_derivative_coeffs(u_slab: np.ndarray, dt: float) -> np.ndarray:
    """Broken time derivative in the same Legendre basis (top mode zero)."""
    nt = u_slab.shape[-1]
    out = np.zeros_like(u_slab)
    if nt > 1:
        flat = u_slab.reshape(-1, nt)
        d = npleg.legder(flat.T, axis=0).T * (2.0 / dt)
        out.reshape(-1, nt)[:, :nt - 1] = d
    return out


def discrete_time_derivative(u_slab, u_prev, dt):
    """D_t u = d_t u + R^{k_t}(u)."""
    return time_derivative_coeffs(u_slab, dt) + time_lifting(u_slab, u_prev, dt)


def time_lifting_residual(R, u_slab, u_prev, dt) -> float:
    """Defining-identity residual against every temporal basis function,
    using Gauss quadrature in time independently of the solve."""
    nt = u_slab.shape[-1]
    x, w = npleg.leggauss(nt + 1)
    L = npleg.legvander(x, nt - 1)
    lhs = np.einsum("q,qm,ql,...l->...m", 0.5 * dt * w, L, L, R)
    jump = u_slab @ ((-1.0) ** np.arange(nt)) - u_prev
    rhs = jump[..., None] * ((-1.0) ** np.arange(nt))
    scale = max(np.abs(rhs).max(), 1e-300)
    return float(np.abs(lhs - rhs).max() / scale)
