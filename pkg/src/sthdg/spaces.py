"""Degree-of-freedom maps, geometry tables and discrete fields on a slab.

Coefficient layout (spatial part, before tensorizing with time):

* element velocity  u    : (ne, 2, nb)   index (K*2 + c)*nb + i
* facet velocity    ubar : (nf, 2, nbf)  index n_u + (F*2 + c)*nbf + i
* element pressure  p    : (ne, npb)     index K*npb + i
* facet pressure    pbar : (nf, nbf)     index n_p + F*nbf + i

A slab vector stores ``[u, ubar, p, pbar, lam]`` where each of the first four
blocks carries a trailing time axis of length ``k_t + 1`` (space-major,
time-minor) and ``lam`` holds one pressure-mean multiplier per time mode.
Time modes are Legendre polynomials on the slab mapped to [-1, 1].
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .basis import edge_basis, interval_basis, quadrature, simplex_basis, simplex_dim
from .mesh import FaceTopology, SpatialMesh

MAX_KS = 4
MAX_KT = 3


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class VolumeTable:
    x: np.ndarray      # (ne, nq, 2) physical points
    w: np.ndarray      # (ne, nq) weights incl. |det J|
    phi: np.ndarray    # (nq, nb) basis values (shared by all elements)
    dphi: np.ndarray   # (ne, nq, nb, 2) physical gradients


@dataclass(frozen=True)
class HalfFaceTable:
    """One row per (element, face) incidence: all faces from the left, then
    interior faces from the right.  Both sides of a face share the same
    physical quadrature points."""
    elem: np.ndarray    # (nh,)
    face: np.ndarray    # (nh,)
    side: np.ndarray    # (nh,) +1 left, -1 right
    normal: np.ndarray  # (nh, 2) outward from elem
    x: np.ndarray       # (nh, nq, 2)
    w: np.ndarray       # (nh, nq) weights incl. |F|
    phi: np.ndarray     # (nh, nq, nb) element basis traces
    dphi: np.ndarray    # (nh, nq, nb, 2)
    fphi: np.ndarray    # (nq, nbf) facet basis (shared)


class SlabSpace:
    """Tensor-product HDG spaces V_h, Q_h, Vbar_h, Qbar_h on one slab."""

    def __init__(self, mesh: SpatialMesh, faces: FaceTopology, k_s: int, k_t: int,
                 qdeg: int | None = None, tdeg: int | None = None):
        if k_s < 1:
            raise ValueError("k_s must be >= 1 (the pressure space has degree k_s - 1)")
        if k_t < 0:
            raise ValueError("k_t must be >= 0")
        if k_s > MAX_KS or k_t > MAX_KT:
            raise ValueError(f"supported degrees are k_s <= {MAX_KS}, k_t <= {MAX_KT}")
        self.mesh = mesh
        self.faces = faces
        self.k_s = k_s
        self.k_t = k_t
        self.qdeg = 3 * k_s + 2 if qdeg is None else qdeg
        self.tdeg = 3 * k_t + 2 if tdeg is None else tdeg

        self.ne = mesh.n_elements
        self.nf = faces.n_faces
        self.nb = simplex_dim(k_s)
        self.npb = simplex_dim(k_s - 1)
        self.nbf = k_s + 1
        self.nt = k_t + 1

        self.vel_basis = simplex_basis(k_s)
        self.pres_basis = simplex_basis(k_s - 1)
        self.facet_basis = edge_basis(k_s)
        self.time_basis = interval_basis(k_t)

        # spatial block sizes
        self.n_u = self.ne * 2 * self.nb
        self.n_ubar = self.nf * 2 * self.nbf
        self.n_p = self.ne * self.npb
        self.n_pbar = self.nf * self.nbf
        self.n_vel = self.n_u + self.n_ubar
        self.n_pres = self.n_p + self.n_pbar

        # slab block sizes and offsets
        nt = self.nt
        self.sizes = {"u": self.n_u * nt, "ubar": self.n_ubar * nt, "p": self.n_p * nt,
                      "pbar": self.n_pbar * nt, "lam": nt}
        self.offsets = {}
        off = 0
        for name in ("u", "ubar", "p", "pbar", "lam"):
            self.offsets[name] = off
            off += self.sizes[name]
        self.n_dofs = off

        # affine element maps x = v0 + J xi
        P = mesh.vertices[mesh.triangles]
        self.v0 = P[:, 0]
        self.J = np.stack([P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]], axis=2)
        self.detJ = np.linalg.det(self.J)
        self.invJ = np.linalg.inv(self.J)
        self.hK = mesh.diameters()
        self._vol = {}
        self._hf = {}

    # ------------------------------------------------------------------ layout
    @property
    def shapes(self) -> dict:
        nt = self.nt
        return {"u": (self.ne, 2, self.nb, nt), "ubar": (self.nf, 2, self.nbf, nt),
                "p": (self.ne, self.npb, nt), "pbar": (self.nf, self.nbf, nt), "lam": (nt,)}

    def split(self, x: np.ndarray) -> dict:
        out = {}
        for name, shape in self.shapes.items():
            o = self.offsets[name]
            out[name] = x[o:o + self.sizes[name]].reshape(shape)
        return out

    def join(self, u=None, ubar=None, p=None, pbar=None, lam=None) -> np.ndarray:
        x = np.zeros(self.n_dofs)
        for name, val in (("u", u), ("ubar", ubar), ("p", p), ("pbar", pbar), ("lam", lam)):
            if val is not None:
                o = self.offsets[name]
                x[o:o + self.sizes[name]] = np.asarray(val).ravel()
        return x

    @cached_property
    def boundary_face(self) -> np.ndarray:
        return self.faces.right < 0

    @cached_property
    def free_dofs(self) -> np.ndarray:
        """Slab dof indices that are not boundary facet velocities."""
        mask = np.ones(self.n_dofs, dtype=bool)
        ub = np.zeros((self.nf, 2, self.nbf, self.nt), dtype=bool)
        ub[self.boundary_face] = True
        o = self.offsets["ubar"]
        mask[o:o + self.sizes["ubar"]] = ~ub.ravel()
        return np.flatnonzero(mask)

    def counts(self) -> dict:
        free_ubar = int(np.count_nonzero(~self.boundary_face)) * 2 * self.nbf * self.nt
        return {"u": self.sizes["u"], "ubar": self.sizes["ubar"], "ubar_free": free_ubar,
                "p": self.sizes["p"], "pbar": self.sizes["pbar"],
                "mean_constraints": self.nt, "total": self.n_dofs}

    # spatial index helpers
    def idx_u(self, K, c, i):
        return (np.asarray(K) * 2 + c) * self.nb + np.asarray(i)

    def idx_ubar(self, F, c, i):
        return self.n_u + (np.asarray(F) * 2 + c) * self.nbf + np.asarray(i)

    def idx_p(self, K, i):
        return np.asarray(K) * self.npb + np.asarray(i)

    def idx_pbar(self, F, i):
        return self.n_p + np.asarray(F) * self.nbf + np.asarray(i)

    def vector_blocks(self, rkind, rent, ckind, cent, blocks):
        """Expand scalar local blocks (n, nr, nc) into component-diagonal COO
        triplets of the spatial velocity-pair space."""
        idx = {"u": self.idx_u, "ubar": self.idx_ubar}
        n, nr, nc = blocks.shape
        rows, cols, vals = [], [], []
        ii = np.arange(nr)
        jj = np.arange(nc)
        for c in range(2):
            r = idx[rkind](np.asarray(rent)[:, None], c, ii[None, :])     # (n, nr)
            q = idx[ckind](np.asarray(cent)[:, None], c, jj[None, :])     # (n, nc)
            rows.append(np.broadcast_to(r[:, :, None], blocks.shape).ravel())
            cols.append(np.broadcast_to(q[:, None, :], blocks.shape).ravel())
            vals.append(blocks.ravel())
        return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)

    # ---------------------------------------------------------------- geometry
    def to_reference(self, K, x):
        return (np.asarray(x, dtype=float) - self.v0[K]) @ self.invJ[K].T

    def to_physical(self, K, xi):
        return self.v0[K] + np.asarray(xi, dtype=float) @ self.J[K].T

    def volume(self, k: int | None = None, qdeg: int | None = None) -> VolumeTable:
        k = self.k_s if k is None else k
        qdeg = self.qdeg if qdeg is None else qdeg
        key = (k, qdeg)
        if key not in self._vol:
            rule = quadrature("triangle", qdeg)
            phi, g = simplex_basis(k).eval_grad(rule.points)
            dphi = np.einsum("kji,qbj->kqbi", self.invJ, g)
            x = self.v0[:, None, :] + np.einsum("kij,qj->kqi", self.J, rule.points)
            w = rule.weights[None, :] * np.abs(self.detJ)[:, None]
            self._vol[key] = VolumeTable(x, w, phi, dphi)
        return self._vol[key]

    def halffaces(self, k: int | None = None, qdeg: int | None = None) -> HalfFaceTable:
        k = self.k_s if k is None else k
        qdeg = self.qdeg if qdeg is None else qdeg
        key = (k, qdeg)
        if key not in self._hf:
            f = self.faces
            rule = quadrature("edge", qdeg)
            inner = f.interior
            face = np.concatenate([np.arange(self.nf), inner])
            elem = np.concatenate([f.left, f.right[inner]])
            side = np.concatenate([np.ones(self.nf), -np.ones(len(inner))])
            normal = f.normal[face] * side[:, None]
            p0 = self.mesh.vertices[f.vertices[face, 0]]
            p1 = self.mesh.vertices[f.vertices[face, 1]]
            x = p0[:, None, :] + rule.points[None, :, None] * (p1 - p0)[:, None, :]
            xi = np.einsum("hij,hqj->hqi", self.invJ[elem], x - self.v0[elem][:, None, :])
            nh, nq = xi.shape[:2]
            phi, g = simplex_basis(k).eval_grad(xi.reshape(-1, 2))
            phi = phi.reshape(nh, nq, -1)
            g = g.reshape(nh, nq, -1, 2)
            dphi = np.einsum("hji,hqbj->hqbi", self.invJ[elem], g)
            w = rule.weights[None, :] * f.length[face][:, None]
            fphi = self.facet_basis.eval(rule.points)
            self._hf[key] = HalfFaceTable(elem, face, side, normal, x, w, phi, dphi, fphi)
        return self._hf[key]

    @cached_property
    def time_rule(self):
        return quadrature("interval", self.tdeg)

    def time_values(self, xi) -> np.ndarray:
        return self.time_basis.eval(xi)

    @cached_property
    def mean_vector(self) -> np.ndarray:
        """Integral of each element pressure basis function (spatial)."""
        vol = self.volume(self.k_s - 1, self.qdeg)
        c = np.einsum("kq,qi->ki", vol.w, vol.phi)
        out = np.zeros(self.n_pres)
        out[:self.n_p] = c.ravel()
        return out

    @cached_property
    def element_mass_diag(self) -> np.ndarray:
        """Diagonal of the spatial element velocity mass matrix (orthonormal basis)."""
        return np.repeat(np.abs(self.detJ), 2 * self.nb)


def build_slab_space(mesh, faces, k_s, k_t, **kw) -> SlabSpace:
    return SlabSpace(mesh, faces, k_s, k_t, **kw)


# ---------------------------------------------------------------------------
# discrete fields

ROLES = ("u", "ubar", "p", "pbar")


@dataclass
class DiscreteField:
    """Coefficients of one discrete function.

    ``coeffs`` has the role's spatial shape, followed by a time axis of length
    ``k_t + 1`` when ``interval`` is given (slab field); without ``interval``
    the field is a snapshot at a single time level.
    """
    space: SlabSpace
    role: str
    coeffs: np.ndarray
    interval: tuple | None = None
    slab: int | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        shape = self.space.shapes[self.role]
        expect = shape if self.interval is not None else shape[:-1]
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.shape != expect:
            raise ValueError(f"{self.role} coefficients must have shape {expect}, "
                             f"got {self.coeffs.shape}")

    def at_time(self, t: float) -> "DiscreteField":
        if self.interval is None:
            return self
        xi = reference_time(self.interval, t)
        L = self.space.time_basis.eval(xi)[0]
        return DiscreteField(self.space, self.role, self.coeffs @ L)


def reference_time(interval, t):
    t0, t1 = interval
    t = np.asarray(t, dtype=float)
    if np.any(t < t0 - 1e-14 * max(1, abs(t0))) or np.any(t > t1 + 1e-14 * max(1, abs(t1))):
        raise DomainError(f"time {t} outside slab [{t0}, {t1}]")
    return 2.0 * (t - t0) / (t1 - t0) - 1.0


def evaluate(field: DiscreteField, element: int, point, time=None, derivatives=False):
    """Value of an element field at ``point`` in ``element``.

    With ``derivatives=True`` also returns the broken gradient and the broken
    time derivative (zero for snapshots).
    """
    if field.role not in ("u", "p"):
        raise ValueError("evaluate() works on element fields; use facet_values() for facets")
    space = field.space
    xi = space.to_reference(element, point)
    lam = np.array([1.0 - xi[0] - xi[1], xi[0], xi[1]])
    if np.any(lam < -1e-12):
        raise DomainError(f"point {point} is outside element {element}")
    basis = space.vel_basis if field.role == "u" else space.pres_basis
    phi, g = basis.eval_grad(xi[None, :])
    phi, g = phi[0], g[0] @ space.invJ[element]          # (nb,), (nb, 2)
    c = field.coeffs[element]
    if field.interval is None:
        ct, dct = c, np.zeros_like(c)
    else:
        if time is None:
            raise ValueError("slab fields need a time")
        xi_t = reference_time(field.interval, time)
        L = space.time_basis.eval(xi_t)[0]
        dL = space.time_basis.deriv(xi_t)[0] * 2.0 / (field.interval[1] - field.interval[0])
        ct, dct = c @ L, c @ dL
    value = ct @ phi
    if not derivatives:
        return value
    grad = ct @ g
    return value, grad, dct @ phi


def facet_values(space: SlabSpace, fcoeffs: np.ndarray) -> np.ndarray:
    """Facet field snapshot (nf, [2,] nbf) at the default edge quadrature points."""
    hf = space.halffaces()
    return np.einsum("f...i,qi->f...q", fcoeffs, hf.fphi)


def element_traces(space: SlabSpace, u: np.ndarray, k=None, qdeg=None) -> np.ndarray:
    """Traces of a vector element snapshot (ne, 2, nb) on every half-face: (nh, nq, 2)."""
    hf = space.halffaces(k, qdeg)
    return np.einsum("hqb,hcb->hqc", hf.phi, u[hf.elem])


def jumps_and_traces(space: SlabSpace, u: np.ndarray, ubar: np.ndarray | None = None):
    """Jumps, averages and element-facet mismatches of a vector snapshot.

    Returns a dict with per-face arrays at edge quadrature points:
    ``jump`` and ``average`` (nf, nq, 2) using jump = v^L - v^R on interior
    faces and jump = average = trace on boundary faces; and, if ``ubar`` is
    given, ``mismatch_left``/``mismatch_right`` = v - vbar on each side
    (right is NaN on boundary faces).
    """
    hf = space.halffaces()
    tr = element_traces(space, u)
    nf = space.nf
    left = tr[:nf]
    right = np.full_like(left, np.nan)
    inner = space.faces.interior
    right[inner] = tr[nf:]
    jump = left.copy()
    avg = left.copy()
    jump[inner] = left[inner] - right[inner]
    avg[inner] = 0.5 * (left[inner] + right[inner])
    out = {"left": left, "right": right, "jump": jump, "average": avg, "x": hf.x[:nf]}
    if ubar is not None:
        fb = np.einsum("fcb,qb->fqc", ubar, hf.fphi)
        out["mismatch_left"] = left - fb
        out["mismatch_right"] = right - fb
    return out


def time_traces(u_slab: np.ndarray):
    """(u_n^+, u_{n+1}^-) of a slab field with trailing Legendre time axis."""
    nt = u_slab.shape[-1]
    return u_slab @ ((-1.0) ** np.arange(nt)), u_slab.sum(axis=-1)


def time_jump(u_slab: np.ndarray, prev_trace: np.ndarray) -> np.ndarray:
    """[u]_n = u_n^+ - u_n^-."""
    return time_traces(u_slab)[0] - prev_trace


def at_time(space: SlabSpace, coeffs: np.ndarray, xi_t) -> np.ndarray:
    """Evaluate slab coefficients (..., nt) at reference times: (..., ntimes)."""
    return coeffs @ space.time_basis.eval(xi_t).T


# ---------------------------------------------------------------------------
# norms (quadratic forms on spatial snapshots)

def _sym_csr(n, rows, cols, vals):
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def grad_form(space: SlabSpace) -> sp.csr_matrix:
    """sum_K (grad u, grad v)_K on the velocity-pair space."""
    vol = space.volume()
    blocks = np.einsum("kq,kqid,kqjd->kij", vol.w, vol.dphi, vol.dphi)
    e = np.arange(space.ne)
    r, c, v = space.vector_blocks("u", e, "u", e, blocks)
    return _sym_csr(space.n_vel, r, c, v)


def mismatch_form(space: SlabSpace, weight=None) -> sp.csr_matrix:
    """sum_K weight_K ||u - ubar||^2_{dK} on the velocity-pair space
    (default weight 1/h_K)."""
    hf = space.halffaces()
    wK = 1.0 / space.hK if weight is None else np.broadcast_to(weight, (space.ne,))
    w = hf.w * wK[hf.elem][:, None]
    uu = np.einsum("hq,hqi,hqj->hij", w, hf.phi, hf.phi)
    ub = -np.einsum("hq,hqi,qj->hij", w, hf.phi, hf.fphi)
    bb = np.einsum("hq,qi,qj->hij", w, hf.fphi, hf.fphi)
    parts = [space.vector_blocks("u", hf.elem, "u", hf.elem, uu),
             space.vector_blocks("u", hf.elem, "ubar", hf.face, ub),
             space.vector_blocks("ubar", hf.face, "u", hf.elem, ub.transpose(0, 2, 1)),
             space.vector_blocks("ubar", hf.face, "ubar", hf.face, bb)]
    r, c, v = (np.concatenate(z) for z in zip(*parts))
    return _sym_csr(space.n_vel, r, c, v)


def jump_form(space: SlabSpace) -> sp.csr_matrix:
    """sum_F h_F^{-1} ||[[u]]||^2_F on the velocity-pair space (u block only)."""
    hf = space.halffaces()
    f = space.faces
    nf = space.nf
    inner = f.interior
    w = hf.w[:nf] / f.length[:, None]
    L = hf.phi[:nf]
    parts = [space.vector_blocks("u", f.left, "u", f.left,
                                 np.einsum("fq,fqi,fqj->fij", w, L, L))]
    if len(inner):
        R = hf.phi[nf:]
        wi = w[inner]
        Li = L[inner]
        parts.append(space.vector_blocks("u", f.right[inner], "u", f.right[inner],
                                         np.einsum("fq,fqi,fqj->fij", wi, R, R)))
        lr = -np.einsum("fq,fqi,fqj->fij", wi, Li, R)
        parts.append(space.vector_blocks("u", f.left[inner], "u", f.right[inner], lr))
        parts.append(space.vector_blocks("u", f.right[inner], "u", f.left[inner],
                                         lr.transpose(0, 2, 1)))
    r, c, v = (np.concatenate(z) for z in zip(*parts))
    return _sym_csr(space.n_vel, r, c, v)


def vel_pair(space: SlabSpace, u, ubar=None) -> np.ndarray:
    x = np.zeros(space.n_vel)
    x[:space.n_u] = np.asarray(u).ravel()
    if ubar is not None:
        x[space.n_u:] = np.asarray(ubar).ravel()
    return x


def l2_norm(space: SlabSpace, u: np.ndarray) -> float:
    """||u||_{L2} of a vector or scalar element snapshot (orthonormal basis)."""
    u = np.asarray(u)
    return float(np.sqrt(np.sum(np.abs(space.detJ)[(...,) + (None,) * (u.ndim - 1)] * u**2)))


def norm_1h(space: SlabSpace, u: np.ndarray) -> float:
    x = vel_pair(space, u)
    N = _cached(space, "N1h", lambda: grad_form(space) + jump_form(space))
    return float(np.sqrt(max(x @ (N @ x), 0.0)))


def norm_v(space: SlabSpace, u: np.ndarray, ubar: np.ndarray) -> float:
    x = vel_pair(space, u, ubar)
    N = _cached(space, "Nv", lambda: grad_form(space) + mismatch_form(space))
    return float(np.sqrt(max(x @ (N @ x), 0.0)))


def norm_v_matrix(space: SlabSpace) -> sp.csr_matrix:
    return _cached(space, "Nv", lambda: grad_form(space) + mismatch_form(space))


def slab_norm_v(space: SlabSpace, u_slab, ubar_slab, dt: float, power: float = 2.0) -> float:
    """int_{I_n} |||(u, ubar)|||_v^power dt by Gauss quadrature in time."""
    rule = quadrature("interval", space.tdeg + 2 * space.k_t)
    L = space.time_basis.eval(rule.points)
    total = 0.0
    for wq, Lq in zip(rule.weights, L):
        total += 0.5 * dt * wq * norm_v(space, u_slab @ Lq, ubar_slab @ Lq) ** power
    return float(total)


def slab_l2_sq(space: SlabSpace, u_slab, dt: float) -> float:
    """int_{I_n} ||u||^2 dt (exact via Legendre orthogonality)."""
    w = dt / (2 * np.arange(u_slab.shape[-1]) + 1.0)
    return float(np.sum(np.abs(space.detJ)[:, None, None, None] * u_slab**2 * w))


def _cached(space, name, build):
    cache = space.__dict__.setdefault("_forms", {})
    if name not in cache:
        cache[name] = build()
    return cache[name]


def locate_points(space: SlabSpace, x: np.ndarray, tol: float = 1e-12):
    """Containing element and reference coordinates for points x (m, 2)."""
    x = np.asarray(x, dtype=float).reshape(-1, 2)
    elem = np.full(len(x), -1)
    ref = np.zeros_like(x)
    for start in range(0, len(x), 2048):
        xs = x[start:start + 2048]
        xi = np.einsum("kij,mkj->mki", space.invJ, xs[:, None, :] - space.v0[None, :, :])
        lam = np.stack([1.0 - xi[..., 0] - xi[..., 1], xi[..., 0], xi[..., 1]], axis=-1)
        inside = lam.min(axis=-1)
        k = np.argmax(inside, axis=1)
        ok = inside[np.arange(len(xs)), k] >= -tol
        elem[start:start + 2048] = np.where(ok, k, -1)
        ref[start:start + 2048] = xi[np.arange(len(xs)), k]
    if np.any(elem < 0):
        raise DomainError("points outside the mesh")
    return elem, ref


def evaluate_points(space: SlabSpace, coeffs: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Values of an element snapshot (ne, ..., nb) at arbitrary points: (m, ...)."""
    elem, ref = locate_points(space, x)
    basis = space.vel_basis if coeffs.shape[-1] == space.nb else space.pres_basis
    phi = basis.eval(ref)
    return np.einsum("mb,m...b->m...", phi, coeffs[elem])
