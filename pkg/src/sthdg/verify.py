"""Verification harness: operator identities, inequality constants,
refinement studies, consistency residuals and energy checks.

Every routine returns plain dicts/lists so reports can be written to CSV
with :func:`write_csv`.  Randomness comes only from the ``seed`` argument.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .basis import quadrature
from .benchmarks import ProblemData, manufactured
from .forms import (StaticBlocks, assemble_o_h, convection_matrix, default_alpha, slab_kron,
                    time_matrices, viscous_matrix)
from .liftings import (broken_gradient, discrete_gradient, discrete_time_derivative,
                       fitted_representation_scale, lifting_qdeg, lifting_residual,
                       mismatch_on_halffaces, spatial_lifting, time_lifting,
                       time_lifting_residual)
from .mesh import SpaceTimeLayout, build_face_topology, build_uniform_mesh
from .projections import (CurlBump, Mode, build_tensor_test_function, element_error,
                          eval_time_coeffs, facet_gap, normal_face_error, project_div,
                          project_element, project_facet, project_time)
from .solver import RunResult, SolverConfig, pressure_gauge, run_simulation
from .spaces import (SlabSpace, evaluate_points, grad_form, jump_form, l2_norm, mismatch_form,
                     norm_v_matrix, slab_l2_sq, vel_pair)


# ----------------------------------------------------------------- helpers

def make_space(n: int, k_s: int, k_t: int, **kw) -> SlabSpace:
    mesh = build_uniform_mesh(n)
    return SlabSpace(mesh, build_face_topology(mesh), k_s, k_t, **kw)


def random_pair(space: SlabSpace, rng, nt: int | None = None):
    """Coefficient-wise uniform [-1, 1] pair with boundary facet rows zeroed."""
    tail = () if nt is None else (nt,)
    u = rng.uniform(-1, 1, (space.ne, 2, space.nb) + tail)
    ub = rng.uniform(-1, 1, (space.nf, 2, space.nbf) + tail)
    ub[space.boundary_face] = 0.0
    return u, ub


def random_div_free(space: SlabSpace, rng, nt: int | None = None):
    if nt is None:
        return project_div(space, rng.uniform(-1, 1, (space.ne, 2, space.nb)))
    return np.stack([project_div(space, rng.uniform(-1, 1, (space.ne, 2, space.nb)))
                     for _ in range(nt)], axis=-1)


def observed_order(h, err) -> float:
    """Least-squares slope of log(err) against log(h)."""
    h = np.asarray(h, dtype=float)
    e = np.asarray(err, dtype=float)
    ok = e > 0
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(h[ok]), np.log(e[ok]), 1)[0])


def bounded_trend(values, factor: float = 1.2) -> bool:
    """Final value at most ``factor`` times the running max of earlier levels."""
    v = list(values)
    return len(v) < 2 or v[-1] <= factor * max(v[:-1])


def strictly_decreasing(values) -> bool:
    v = list(values)
    return all(b < a for a, b in zip(v, v[1:]))


def _rel(a, b, scale):
    return abs(a - b) / max(scale, 1e-300)


# ----------------------------------------------------------------- identities

def viscous_rewritten(space: SlabSpace, alpha: float, u, ub, v, vb):
    """sum_i (G u_i, G v_i) - (R u_i, R v_i) + penalty on spatial snapshots;
    returns (value, sum of term magnitudes)."""
    k = space.k_s
    q = lifting_qdeg(space, k)
    det = np.abs(space.detJ)[:, None, None, None]
    Gu = discrete_gradient(space, u, ub, k, q)
    Gv = discrete_gradient(space, v, vb, k, q)
    Ru = spatial_lifting(space, mismatch_on_halffaces(space, u, ub, q), k, q)
    Rv = spatial_lifting(space, mismatch_on_halffaces(space, v, vb, q), k, q)
    gg = float(np.sum(det * Gu * Gv))
    rr = float(np.sum(det * Ru * Rv))
    P = _cached_penalty(space, alpha)
    pen = float(vel_pair(space, v, vb) @ (P @ vel_pair(space, u, ub)))
    return gg - rr + pen, abs(gg) + abs(rr) + abs(pen)


def _cached_penalty(space, alpha):
    cache = space.__dict__.setdefault("_forms", {})
    key = ("pen", alpha)
    if key not in cache:
        cache[key] = mismatch_form(space, alpha / space.hK)
    return cache[key]


def convection_rewritten(space: SlabSpace, w, u, ub, v, vb):
    """int w . G^{2k_s}(u_i) v_i + sum int_{dK} (w.n)^+ (u - ubar).(v - vbar)."""
    k2 = 2 * space.k_s
    qv = max(space.qdeg, 4 * space.k_s)
    G = discrete_gradient(space, u, ub, k2, lifting_qdeg(space, k2))
    vol2 = space.volume(k2, qv)
    vol = space.volume(space.k_s, qv)
    Gq = np.einsum("qi,kcdi->kqcd", vol2.phi, G)
    wq = np.einsum("qb,kdb->kqd", vol.phi, w)
    vq = np.einsum("qb,kcb->kqc", vol.phi, v)
    volume = float(np.sum(vol.w * np.einsum("kqd,kqcd,kqc->kq", wq, Gq, vq)))
    hf = space.halffaces()
    wn = np.einsum("hqb,hdb,hd->hq", hf.phi, w[hf.elem], hf.normal)
    mu = mismatch_on_halffaces(space, u, ub)
    mv = mismatch_on_halffaces(space, v, vb)
    facet = float(np.sum(hf.w * 0.5 * (wn + np.abs(wn)) * np.einsum("hqc,hqc->hq", mu, mv)))
    return volume + facet, abs(volume) + abs(facet)


def positivity_rhs(space: SlabSpace, w, v, vb) -> float:
    """1/2 sum_K int_{dK} |w.n| |v - vbar|^2 from half-face values."""
    hf = space.halffaces()
    wn = np.einsum("hqb,hdb,hd->hq", hf.phi, w[hf.elem], hf.normal)
    mv = mismatch_on_halffaces(space, v, vb)
    return float(0.5 * np.sum(hf.w * np.abs(wn) * np.sum(mv**2, axis=-1)))


def gradient_identity_residual(space: SlabSpace, v, vb, k: int) -> float:
    """int G.w = int grad_h v . w - sum int_{dK} (v - vbar)(w.n) for all basis w of degree k."""
    q = lifting_qdeg(space, k)
    G = discrete_gradient(space, v, vb, k, q)
    vol = space.volume(k, max(q, 2 * k))
    src = space.volume(space.k_s, max(q, 2 * k))
    lhs = np.einsum("kq,qi,qj,kcdj->kcdi", vol.w, vol.phi, vol.phi, G)
    grad = np.einsum("kqbd,kcb->kqcd", src.dphi, v)
    rhs = np.einsum("kq,kqcd,qi->kcdi", vol.w, grad, vol.phi)
    hf = space.halffaces(k, q)
    mu = mismatch_on_halffaces(space, v, vb, q)
    loc = np.einsum("hq,hqc,hd,hqi->hcdi", hf.w, mu, hf.normal, hf.phi)
    face = np.zeros_like(rhs)
    np.add.at(face, hf.elem, loc)
    rhs = rhs - face
    return float(np.abs(lhs - rhs).max() / max(np.abs(rhs).max(), np.abs(lhs).max(), 1e-300))


def identity_suite(space: SlabSpace, seed: int = 0, samples: int = 100, alpha: float | None = None,
                   dt: float = 0.5) -> dict:
    """Max relative residuals of the rewritten-form, positivity, lifting and
    time-lifting identities over seeded random fields."""
    rng = np.random.default_rng(seed)
    alpha = default_alpha(space.k_s) if alpha is None else alpha
    A = viscous_matrix(space, alpha)
    nt = space.nt
    Tm, _ = time_matrices(space.k_t, dt)
    A_slab = slab_kron(A, Tm)
    trule = quadrature("interval", 2 * space.k_t)
    Lt = space.time_basis.eval(trule.points)
    crule = quadrature("interval", space.tdeg)
    Lc = space.time_basis.eval(crule.points)
    out = {"viscous": 0.0, "convection": 0.0, "positivity": 0.0, "positivity_min": np.inf,
           "lifting": 0.0, "lifting_2k": 0.0, "gradient": 0.0, "time_lifting": 0.0,
           "time_lifting_k0": 0.0, "samples": samples}
    for _ in range(samples):
        u, ub = random_pair(space, rng, nt)
        v, vb = random_pair(space, rng, nt)
        X = np.concatenate([u.ravel(), ub.ravel()])
        Y = np.concatenate([v.ravel(), vb.ravel()])
        lhs = float(Y @ (A_slab @ X))
        rhs, scale = 0.0, 0.0
        for wq, Lq in zip(trule.weights, Lt):
            val, mag = viscous_rewritten(space, alpha, u @ Lq, ub @ Lq, v @ Lq, vb @ Lq)
            rhs += 0.5 * dt * wq * val
            scale += 0.5 * dt * wq * mag
        out["viscous"] = max(out["viscous"], _rel(lhs, rhs, max(scale, abs(lhs))))

        w = random_div_free(space, rng, nt)
        O = assemble_o_h(space, w, dt)
        lhs = float(Y @ (O @ X))
        rhs, scale = 0.0, 0.0
        for wq, Lq in zip(crule.weights, Lc):
            val, mag = convection_rewritten(space, w @ Lq, u @ Lq, ub @ Lq, v @ Lq, vb @ Lq)
            rhs += 0.5 * dt * wq * val
            scale += 0.5 * dt * wq * mag
        out["convection"] = max(out["convection"], _rel(lhs, rhs, max(scale, abs(lhs))))

        # positivity on a spatial snapshot
        w0 = w[..., 0]
        v0, vb0 = v[..., 0], vb[..., 0]
        x0 = vel_pair(space, v0, vb0)
        a = float(x0 @ (convection_matrix(space, w0) @ x0))
        b = positivity_rhs(space, w0, v0, vb0)
        out["positivity"] = max(out["positivity"], _rel(a, b, abs(b)))
        out["positivity_min"] = min(out["positivity_min"], a)

        # spatial liftings and discrete gradient
        for k, key in ((space.k_s, "lifting"), (2 * space.k_s, "lifting_2k")):
            q = lifting_qdeg(space, k)
            mu = mismatch_on_halffaces(space, u[..., 0], ub[..., 0], q)
            R = spatial_lifting(space, mu, k, q)
            out[key] = max(out[key], lifting_residual(space, R, mu, k, q))
        out["gradient"] = max(out["gradient"], gradient_identity_residual(space, u[..., 0], ub[..., 0], space.k_s))

        # time lifting
        prev = rng.uniform(-1, 1, u.shape[:-1])
        R = time_lifting(u, prev, dt)
        out["time_lifting"] = max(out["time_lifting"], time_lifting_residual(R, u, prev, dt))
        u1 = u[..., :1]
        R0 = time_lifting(u1, prev, dt)
        ref = (u1[..., 0] - prev) / dt
        out["time_lifting_k0"] = max(out["time_lifting_k0"],
                                     float(np.abs(R0[..., 0] - ref).max() / np.abs(ref).max()))
    out["representation_scale"] = fitted_representation_scale(u, prev, dt)
    out["representation_scale_expected"] = 2.0 / dt
    return out


# ----------------------------------------------------------------- constants

def _free_velocity(space: SlabSpace) -> np.ndarray:
    mask = np.ones(space.n_vel, dtype=bool)
    ub = np.zeros((space.nf, 2, space.nbf), dtype=bool)
    ub[space.boundary_face] = True
    mask[space.n_u:] = ~ub.ravel()
    return np.flatnonzero(mask)


def _gen_extremes(Xmat, Nmat):
    """Extreme generalized eigenvalues of the symmetric pencil (X, N), N SPD."""
    ev = sla.eigh(Xmat, Nmat, eigvals_only=True)
    return float(ev.min()), float(ev.max())


def lifting_constant_exact(space: SlabSpace) -> float:
    """max over elements and facet data mu of ||R_h^{k_s} mu||^2 / sum h_K^{-1} ||mu||^2_{dK}."""
    hf = space.halffaces()
    order = np.argsort(hf.elem, kind="stable")
    elem = hf.elem[order].reshape(space.ne, 3)[:, 0]
    w = hf.w[order].reshape(space.ne, 3, -1)
    n = hf.normal[order].reshape(space.ne, 3, 2)
    phi = hf.phi[order].reshape(space.ne, 3, w.shape[-1], -1)
    flen = space.faces.length[hf.face[order]].reshape(space.ne, 3)
    det = np.abs(space.detJ)[elem]
    # L[(d, i), (F, j)]
    L = np.einsum("kfq,qj,kfd,kfqi->kdifj", w, hf.fphi, n, phi) / det[:, None, None, None, None]
    ne, _, nb, nf3, nbf = L.shape
    L = L.reshape(ne, 2 * nb, 3 * nbf)
    Q = det[:, None, None] * np.einsum("kai,kaj->kij", L, L)
    wt = np.repeat(flen / space.hK[elem][:, None], nbf, axis=1)           # (ne, 3 nbf)
    s = 1.0 / np.sqrt(wt)
    ev = np.linalg.eigvalsh(Q * s[:, :, None] * s[:, None, :])
    return float(ev.max())


def duality_constant(space: SlabSpace, blocks: StaticBlocks, run: RunResult, rng=None,
                     samples: int = 0) -> dict:
    """sup over discretely divergence-free slab pairs of
    |int (D_t u_h, v)| / (int |||v|||_v^2)^{1/2}, summed in l2 over slabs,
    plus the best ratio among random samples."""
    Nv = norm_v_matrix(space)
    free = _free_velocity(space)
    nt = space.nt
    drop, _ = pressure_gauge(space)
    sup2, best = 0.0, 0.0
    for st in run.states:
        dt = st.dt
        Tm, _ = time_matrices(space.k_t, dt)
        Ns = slab_kron(Nv, Tm)
        _, _, B, _ = blocks.slab(dt)
        vfree = (free[:, None] * nt + np.arange(nt)[None, :]).ravel()
        prow = np.setdiff1d(np.arange(B.shape[0]), drop - space.offsets["p"])
        Bf = B[prow][:, vfree]
        D = discrete_time_derivative(st.u, st.trace_in, dt)
        g = np.zeros(space.n_vel * nt)
        g[:space.n_u * nt] = slab_kron(sp.diags(space.element_mass_diag), Tm) @ D.ravel()
        gf = g[vfree]
        K = sp.bmat([[Ns[vfree][:, vfree], Bf.T], [Bf, None]], format="csc")
        rhs = np.concatenate([gf, np.zeros(Bf.shape[0])])
        x = splu(K).solve(rhs)
        sup2 += float(gf @ x[:len(gf)])
        if rng is not None:
            for _ in range(samples):
                v = random_div_free(space, rng, nt)
                vb = rng.uniform(-1, 1, space.shapes["ubar"])
                vb[space.boundary_face] = 0.0
                Y = np.concatenate([v.ravel(), vb.ravel()])
                best = max(best, abs(g @ Y) / np.sqrt(Y @ (Ns @ Y)))
    return {"duality": float(np.sqrt(max(sup2, 0.0))), "duality_sampled": best}


def constant_estimates(levels=(2, 4, 8), k_s: int = 1, k_t: int = 1, alpha: float | None = None,
                       samples: int = 200, seed: int = 0, exact: bool = True,
                       duality: bool = True, nu: float = 0.01, T: float = 0.5) -> dict:
    """Measured inequality constants per refinement level.

    Each constant is reported from random samples (``*_sampled``) and, where
    the extremal problem is a small eigenvalue problem, exactly."""
    rng = np.random.default_rng(seed)
    rows = []
    for n in levels:
        space = make_space(n, k_s, k_t)
        a = default_alpha(k_s) if alpha is None else alpha
        A = viscous_matrix(space, a)
        Nv = norm_v_matrix(space)
        N1 = grad_form(space) + jump_form(space)
        M = sp.diags(np.concatenate([space.element_mass_diag, np.zeros(space.n_ubar)]))
        det = np.abs(space.detJ)
        row = {"n": n, "h": float(space.hK.max())}
        pc, lc, cc, bc, hc, oc = 0.0, 0.0, np.inf, 0.0, 0.0, 0.0
        for _ in range(samples):
            u, ub = random_pair(space, rng)
            v, vb = random_pair(space, rng)
            x, y = vel_pair(space, u, ub), vel_pair(space, v, vb)
            nx, ny = np.sqrt(x @ (Nv @ x)), np.sqrt(y @ (Nv @ y))
            pc = max(pc, l2_norm(space, u) / nx)
            q = lifting_qdeg(space, k_s)
            R = spatial_lifting(space, mismatch_on_halffaces(space, u, ub, q), k_s, q)
            lc = max(lc, float(np.sum(det[:, None, None, None] * R**2)) / _gap(space, x))
            cc = min(cc, float(x @ (A @ x)) / nx**2)
            bc = max(bc, abs(float(y @ (A @ x))) / (nx * ny))
            hc = max(hc, np.sqrt(x @ (N1 @ x)) / nx)
            O = convection_matrix(space, u)
            oc = max(oc, abs(float(y @ (O @ x))) / (l2_norm(space, u) * nx * ny))
        row.update(poincare_sampled=pc, lifting_sampled=lc, coercivity_sampled=cc,
                   boundedness_sampled=bc, h1_sampled=hc, convection_sampled=oc)
        if exact:
            f = _free_velocity(space)
            Nd = Nv[f][:, f].toarray()
            lo, hi = _gen_extremes(M.tocsr()[f][:, f].toarray(), Nd)
            row["poincare"] = float(np.sqrt(hi))
            lo, hi = _gen_extremes(A[f][:, f].toarray(), Nd)
            row["coercivity"] = lo
            row["boundedness"] = max(abs(lo), abs(hi))
            _, hi = _gen_extremes(N1[f][:, f].toarray(), Nd)
            row["h1"] = float(np.sqrt(hi))
            row["lifting"] = lifting_constant_exact(space)
        if duality:
            from .benchmarks import taylor_green
            data = taylor_green(nu, T)
            run = run_simulation(data, SolverConfig(condense=True), space.mesh,
                                 SpaceTimeLayout.uniform(T, n), k_s, k_t, faces=space.faces,
                                 diagnostics=False)
            row.update(duality_constant(run.space, run.blocks, run, rng, samples=20))
        rows.append(row)
    keys_up = ["poincare", "lifting", "boundedness", "h1", "duality", "poincare_sampled",
               "lifting_sampled", "boundedness_sampled", "h1_sampled", "convection_sampled",
               "duality_sampled"]
    trends = {}
    for k in keys_up:
        if all(k in r for r in rows):
            trends[k] = bounded_trend([r[k] for r in rows])
    for k in ("coercivity", "coercivity_sampled"):
        if all(k in r for r in rows):
            vals = [r[k] for r in rows]
            trends[k] = all(v > 0 for v in vals) and bounded_trend([1.0 / v for v in vals])
    return {"rows": rows, "bounded": trends, "alpha": alpha, "k_s": k_s, "k_t": k_t}


def _gap(space, x):
    cache = space.__dict__.setdefault("_forms", {})
    if "gapform" not in cache:
        cache["gapform"] = mismatch_form(space)
    return float(x @ (cache["gapform"] @ x))


def coercivity_negative_control(n: int = 4, k_s: int = 1, alpha: float = 0.01, samples: int = 200,
                                seed: int = 0) -> dict:
    """Smallest sampled and exact Rayleigh quotients of a_h with a tiny penalty."""
    rng = np.random.default_rng(seed)
    space = make_space(n, k_s, 0)
    A = viscous_matrix(space, alpha)
    Nv = norm_v_matrix(space)
    worst = np.inf
    for _ in range(samples):
        x = vel_pair(space, *random_pair(space, rng))
        worst = min(worst, float(x @ (A @ x)) / float(x @ (Nv @ x)))
    f = _free_velocity(space)
    lo, _ = _gen_extremes(A[f][:, f].toarray(), Nv[f][:, f].toarray())
    return {"alpha": alpha, "sampled_min": worst, "exact_min": lo,
            "broken": bool(min(worst, lo) <= 0)}


# ----------------------------------------------------------------- refinement studies

@dataclass
class RefinementStudy:
    levels: list                  # (n, N)
    h: list
    tau: list
    records: list
    orders: dict = field(default_factory=dict)
    runs: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if len(self.levels) < 3:
            raise ValueError("a refinement study needs at least 3 levels")
        if not (strictly_decreasing(self.h) and strictly_decreasing(self.tau)):
            raise ValueError("h and tau must be strictly decreasing")

    def column(self, key):
        return [r.get(key, np.nan) for r in self.records]


def space_time_error(run: RunResult, data: ProblemData, qextra: int = 6) -> dict:
    """||u - u_h||_{L2(L2)} and int |||(u - u_h, u|_F - ubar_h)|||_v^2 dt."""
    space = run.space
    qd = max(space.qdeg, 2 * space.k_s + qextra)
    vol = space.volume(space.k_s, qd)
    hf = space.halffaces(space.k_s, qd)
    trule = quadrature("interval", 2 * space.k_t + qextra)
    L = space.time_basis.eval(trule.points)
    l2, en = 0.0, 0.0
    for st in run.states:
        for xq, wq, Lq in zip(trule.points, trule.weights, L):
            t = st.t0 + 0.5 * st.dt * (xq + 1.0)
            wt = 0.5 * st.dt * wq
            u = st.u @ Lq
            ub = st.ubar @ Lq
            ue = data.exact_u(vol.x, t)
            uh = np.einsum("qb,kcb->kqc", vol.phi, u)
            l2 += wt * float(np.sum(vol.w[..., None] * (ue - uh) ** 2))
            ge = data.exact_grad(vol.x, t)
            gh = np.einsum("kqbd,kcb->kqcd", vol.dphi, u)
            en += wt * float(np.sum(vol.w[..., None, None] * (ge - gh) ** 2))
            tr = np.einsum("hqb,hcb->hqc", hf.phi, u[hf.elem])
            fb = np.einsum("qb,hcb->hqc", hf.fphi, ub[hf.face])
            en += wt * float(np.sum(hf.w[..., None] * (tr - fb) ** 2 / space.hK[hf.elem][:, None, None]))
    return {"l2l2": float(np.sqrt(l2)), "energy": float(np.sqrt(en))}


def cauchy_increment(coarse: RunResult, fine: RunResult) -> float:
    """||u_h^coarse - u_h^fine||_{L2(L2)} on the coarse quadrature grid."""
    cs, fs = coarse.space, fine.space
    vol = cs.volume()
    pts = vol.x.reshape(-1, 2)
    trule = quadrature("interval", 2 * cs.k_t + 4)
    Lc = cs.time_basis.eval(trule.points)
    ftimes = fine.layout.times
    total = 0.0
    elem_f, ref_f = None, None
    for st in coarse.states:
        for xq, wq, Lq in zip(trule.points, trule.weights, Lc):
            t = st.t0 + 0.5 * st.dt * (xq + 1.0)
            uc = np.einsum("qb,kcb->kqc", vol.phi, st.u @ Lq).reshape(-1, 2)
            m = int(np.clip(np.searchsorted(ftimes, t, side="right") - 1, 0, len(fine.states) - 1))
            sf = fine.states[m]
            xi = 2.0 * (t - sf.t0) / sf.dt - 1.0
            uf = evaluate_points(fs, sf.u @ fs.time_basis.eval(xi)[0], pts)
            total += 0.5 * st.dt * wq * float(np.sum(vol.w.reshape(-1)[:, None] * (uc - uf) ** 2))
    return float(np.sqrt(total))


def convergence_study(data: ProblemData | None = None, config: SolverConfig | None = None,
                      levels=((2, 2), (4, 4), (8, 8)), k_s: int = 2, k_t: int = 1,
                      keep_runs: bool = True, progress=None) -> RefinementStudy:
    """Errors, energy-norm proxies and Cauchy increments over joint (h, tau) halvings."""
    data = manufactured() if data is None else data
    config = SolverConfig(condense=True) if config is None else config
    runs, records = [], []
    for n, N in levels:
        run = run_simulation(data, config, build_uniform_mesh(n), SpaceTimeLayout.uniform(data.T, N),
                             k_s, k_t, diagnostics=False)
        if not run.converged:
            from .solver import NonconvergenceError
            raise NonconvergenceError(f"level n={n}, N={N} did not converge", run.states)
        rec = {"n": n, "N": N, "h": float(run.space.hK.max()), "tau": data.T / N,
               "iterations": max(s.iterations for s in run.states), "seconds": run.elapsed}
        if data.exact_u is not None:
            rec.update(space_time_error(run, data))
        if runs:
            records[-1]["cauchy"] = cauchy_increment(runs[-1], run)
        runs.append(run)
        records.append(rec)
        if progress:
            progress(rec)
    h = [r["h"] for r in records]
    orders = {}
    for key in ("l2l2", "energy", "cauchy"):
        vals = [r[key] for r in records if key in r]
        if len(vals) >= 2:
            orders[key] = observed_order(h[:len(vals)], vals)
    return RefinementStudy(list(levels), h, [r["tau"] for r in records], records, orders,
                           runs if keep_runs else [])


# ----------------------------------------------------------------- consistency

def default_test_mode(T: float = 1.0) -> Mode:
    bump = CurlBump(center=(0.5, 0.5), radius=0.4, power=4)
    return Mode(eta=lambda t: np.sin(np.pi * np.asarray(t) / T) ** 2, psi=bump, grad=bump.grad)


def exact_consistency_integrals(data: ProblemData, mode: Mode, n_ref: int = 24, qdeg: int = 20,
                                nt: int = 24) -> dict:
    """Level-independent reference values of int int grad u : grad phi and
    int int (u . grad u) . phi with phi = eta psi."""
    mesh = build_uniform_mesh(n_ref)
    space = SlabSpace(mesh, build_face_topology(mesh), 1, 0)
    vol = space.volume(1, qdeg)
    x, w = np.polynomial.legendre.leggauss(nt)
    visc, conv = 0.0, 0.0
    psi = mode.psi(vol.x)
    gpsi = mode.grad(vol.x)
    for xq, wq in zip(x, w):
        t = 0.5 * data.T * (xq + 1.0)
        wt = 0.5 * data.T * wq * float(mode.eta(t))
        ge = data.exact_grad(vol.x, t)
        ue = data.exact_u(vol.x, t)
        visc += wt * float(np.sum(vol.w * np.einsum("kqij,kqij->kq", ge, gpsi)))
        adv = np.einsum("kqij,kqj->kqi", ge, ue)
        conv += wt * float(np.sum(vol.w * np.einsum("kqi,kqi->kq", adv, psi)))
    return {"viscous": visc, "convective": conv}


def interpolant_states(run: RunResult, data: ProblemData):
    """Per slab (Pi^t Pi^div u, Pi^t Pibar u) of the exact velocity."""
    space = run.space
    out = []
    x, w = np.polynomial.legendre.leggauss(space.k_t + 4)
    L = space.time_basis.eval(x)
    m = np.arange(space.nt)
    for st in run.states:
        a = np.zeros(space.shapes["u"])
        b = np.zeros(space.shapes["ubar"])
        for xq, wq, Lq in zip(x, w, L):
            t = st.t0 + 0.5 * st.dt * (xq + 1.0)
            f = lambda xx: data.exact_u(xx, t)
            c = wq * Lq * (2 * m + 1) / 2.0
            a += project_div(space, f)[..., None] * c
            b += project_facet(space, f)[..., None] * c
        out.append((a, b))
    return out


def consistency_residuals(study: RefinementStudy, data: ProblemData, mode: Mode | None = None,
                          ablation: bool = True) -> list:
    """|int a_h(u_h, (Pi phi, Pibar phi)) - int int grad u : grad phi| and the
    convective analogue per level."""
    mode = default_test_mode(data.T) if mode is None else mode
    ref = exact_consistency_integrals(data, mode)
    rows = []
    for run, lev in zip(study.runs, study.levels):
        space = run.space
        ttf = build_tensor_test_function([mode], space, run.layout.times)
        visc, conv, visc_i = 0.0, 0.0, 0.0
        interp = interpolant_states(run, data) if ablation else None
        for i, st in enumerate(run.states):
            _, A, _, _ = run.blocks.slab(st.dt)
            X = np.concatenate([st.u.ravel(), st.ubar.ravel()])
            Y = np.concatenate([ttf.phi[i].ravel(), ttf.phibar[i].ravel()])
            visc += float(Y @ (A @ X))
            O = assemble_o_h(space, st.u, st.dt)
            conv += float(Y @ (O @ X))
            if interp is not None:
                Xi = np.concatenate([interp[i][0].ravel(), interp[i][1].ravel()])
                visc_i += float(Y @ (A @ Xi))
        row = {"n": lev[0], "N": lev[1], "viscous": abs(visc - ref["viscous"]),
               "convective": abs(conv - ref["convective"])}
        if ablation:
            row["viscous_interpolant"] = abs(visc_i - ref["viscous"])
        rows.append(row)
    return rows


# ----------------------------------------------------------------- energy

def energy_inequality_report(run: RunResult, data: ProblemData) -> dict:
    """Cumulative slack(s) = |u_0^-|^2 + 2 int_0^s (f, u_h) - |u_h(s^-)|^2
    - 2 nu sum_i int_0^s ||G_h(u_h,i)||^2 at every time level, with the
    independent term ledger sum |[u]|^2 + 2 int o_h + 2 nu int (a_h - |G|^2)."""
    rows = []
    e0 = run.ledger[0]["energy_in"] if run.ledger else 0.0
    forcing = grad = ledger = 0.0
    lhs_cum = rhs_cum = 0.0
    for e in run.ledger:
        forcing += e["forcing"]
        grad += e["grad_sq"]
        ledger += e["jump"] + e["convective"] + e["viscous"] - 2.0 * data.nu * e["grad_sq"]
        lhs_cum += e["jump"] + e["viscous"] + e["convective"]
        rhs_cum += e["forcing"]
        slack = e0 + forcing - e["energy_out"] - 2.0 * data.nu * grad
        scale = max(e0, e["energy_out"], abs(forcing), 1e-300)
        cum_res = abs(e["energy_out"] + lhs_cum - e0 - rhs_cum) / scale
        rows.append({"slab": e["slab"], "t": e["t1"], "slack": slack, "ledger_slack": ledger,
                     "slack_mismatch": abs(slack - ledger) / scale, "scale": scale,
                     "energy_out": e["energy_out"], "cumulative_residual": cum_res,
                     "slab_residual": e["relative_residual"]})
    energies = [run.ledger[0]["energy_in"]] + [e["energy_out"] for e in run.ledger] if run.ledger else []
    return {"rows": rows,
            "min_relative_slack": min((r["slack"] / r["scale"] for r in rows), default=0.0),
            "max_slab_residual": max((r["slab_residual"] for r in rows), default=0.0),
            "max_cumulative_residual": max((r["cumulative_residual"] for r in rows), default=0.0),
            "energies": energies,
            "nonincreasing": all(b <= a * (1 + 1e-12) + 1e-300 for a, b in zip(energies, energies[1:]))}


def linf_l2_check(run: RunResult, samples: int = 20) -> dict:
    """max_t ||u_h(t)|| against max_m ||u_m^-|| + max_m ||[u_h]_m||, m = 0..N
    (the initial trace u_0^- included)."""
    space = run.space
    xs = np.linspace(-1, 1, samples)
    L = space.time_basis.eval(xs)
    top = 0.0
    for st in run.states:
        for Lq in L:
            top = max(top, l2_norm(space, st.u @ Lq))
    traces = max([l2_norm(space, run.initial)] + [l2_norm(space, st.trace_out) for st in run.states])
    jumps = max(l2_norm(space, st.trace_plus - st.trace_in) for st in run.states)
    return {"max_l2": top, "bound": traces + jumps, "holds": top <= (traces + jumps) * (1 + 1e-12)}


def equicontinuity_probe(run: RunResult, shifts=(1, 2, 4)) -> dict:
    """int_delta^T ||u_h(t) - u_h(t - delta)||^2 dt for delta = j tau (uniform layout)."""
    space = run.space
    out = {}
    for j in shifts:
        if j >= len(run.states):
            continue
        total = 0.0
        for n in range(j, len(run.states)):
            total += slab_l2_sq(space, run.states[n].u - run.states[n - j].u, run.states[n].dt)
        out[j * run.states[0].dt] = total
    return out


# ----------------------------------------------------------------- projections

def projection_rates(levels=(2, 4, 8, 16), k_s: int = 2, k_t: int = 1, T: float = 1.0) -> dict:
    """Observed approximation orders of Pi^t, Pi_h^div, Pi_h and Pibar_h."""
    from .benchmarks import vortex_field
    psi, gpsi = vortex_field()
    rows = []
    g = lambda t: np.sin(2.0 * np.pi * t) + np.exp(t)
    for n in levels:
        space = make_space(n, k_s, k_t)
        w = project_div(space, psi)
        e = element_error(space, w, psi, gpsi)
        pe = project_element(space, psi)
        pf = project_facet(space, psi)
        tau = T / n
        tt = np.linspace(0.0, T, n + 1)
        tmax = 0.0
        for a, b in zip(tt[:-1], tt[1:]):
            c = project_time(g, a, b, k_t)
            ts = np.linspace(a, b, 200)
            tmax = max(tmax, float(np.abs(eval_time_coeffs(c, a, b, ts) - g(ts)).max()))
        rows.append({"n": n, "h": float(space.hK.max()), "tau": tau, "time_linf": tmax,
                     "div_l2": e["l2"], "div_h1": float(np.sqrt(e["l2"] ** 2 + e["h1"] ** 2)),
                     "div_linf": e["linf"], "elem_normal_face": normal_face_error(space, pe, psi),
                     "facet_gap": facet_gap(space, w, pf)})
    h = [r["h"] for r in rows]
    tau = [r["tau"] for r in rows]
    orders = {"time_linf": observed_order(tau, [r["time_linf"] for r in rows])}
    for k in ("div_l2", "div_h1", "div_linf", "elem_normal_face", "facet_gap"):
        orders[k] = observed_order(h, [r[k] for r in rows])
    expected = {"time_linf": k_t + 1, "div_l2": k_s + 1, "div_h1": k_s,
                "elem_normal_face": 2 * k_s + 1, "facet_gap": 2 * k_s}
    return {"rows": rows, "orders": orders, "expected": expected}


# ----------------------------------------------------------------- csv

def write_csv(rows, path=None, header=None) -> str:
    """Rows of dicts to CSV with a single header row; returns the text."""
    rows = list(rows)
    header = header or sorted({k for r in rows for k in r}, key=lambda k: [list(r) for r in rows][0].index(k)
                              if rows and k in rows[0] else 10**6)
    buf = io.StringIO()
    wr = csv.DictWriter(buf, fieldnames=header, lineterminator="\n", extrasaction="ignore")
    wr.writeheader()
    for r in rows:
        wr.writerow({k: _fmt(r.get(k, "")) for k in header})
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v
