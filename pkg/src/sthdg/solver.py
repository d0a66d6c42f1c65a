"""Slab-by-slab Picard solver for the space-time HDG scheme."""
from __future__ import annotations

import logging
import time as _time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .basis import quadrature
from .benchmarks import ProblemData
from .forms import (StaticBlocks, assemble_o_h, assemble_slab_system, assemble_time_terms,
                    default_alpha)
from .liftings import discrete_gradient
from .mesh import SpaceTimeLayout, build_face_topology
from .projections import ConfigurationError, conformity_residuals, project_div
from .spaces import SlabSpace, slab_l2_sq, slab_norm_v, time_traces

log = logging.getLogger(__name__)


class NonconvergenceError(RuntimeError):
    def __init__(self, msg, states=None):
        super().__init__(msg)
        self.states = states or []


@dataclass
class SolverConfig:
    alpha: float | None = None        # default 8 k_s^2
    tol: float = 1e-10
    max_iter: int = 50
    condense: bool = False
    convection: bool = True
    damping: float = 1.0
    qdeg: int | None = None
    tdeg: int | None = None

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("Picard tolerance must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")


@dataclass
class SlabState:
    n: int
    t0: float
    t1: float
    u: np.ndarray       # (ne, 2, nb, nt)
    ubar: np.ndarray    # (nf, 2, nbf, nt)
    p: np.ndarray       # (ne, npb, nt)
    pbar: np.ndarray    # (nf, nbf, nt)
    lam: np.ndarray
    trace_in: np.ndarray
    iterations: int
    history: list
    converged: bool
    x: np.ndarray = field(repr=False, default=None)

    @property
    def dt(self):
        return self.t1 - self.t0

    @property
    def trace_out(self):
        return time_traces(self.u)[1]

    @property
    def trace_plus(self):
        return time_traces(self.u)[0]


def initial_trace(data: ProblemData, space: SlabSpace) -> np.ndarray:
    """u_0^- = Pi_h^div u_0 as element coefficients (ne, 2, nb)."""
    return project_div(space, data.u0)


# ---------------------------------------------------------------- linear solves

def pressure_gauge(space: SlabSpace):
    """Indices of the dofs dropped by the gauge (multipliers and one facet
    pressure per time mode) and the constant pressure pair z.

    The constant pair spans the kernel of b_h, so the pressure rows of the
    slab system force the multipliers to vanish; solving with one facet
    pressure pinned and then shifting to zero mean gives the same solution
    as the bordered system with a much sparser factorization."""
    s = space
    lam = s.offsets["lam"] + np.arange(s.nt)
    pin = s.offsets["pbar"] + np.arange(s.nt)          # face 0, mode 0, each time mode
    z = np.zeros(s.n_dofs)
    phi0 = s.pres_basis.eval(np.array([[1 / 3, 1 / 3]]))[0, 0]
    zp = np.zeros(s.shapes["p"])
    zp[:, 0, :] = 1.0 / phi0
    zb = np.zeros(s.shapes["pbar"])
    zb[:, 0, :] = 1.0
    z[s.offsets["p"]:s.offsets["pbar"]] = zp.ravel()
    z[s.offsets["pbar"]:s.offsets["lam"]] = zb.ravel()
    return np.concatenate([lam, pin]), z


def _active(space: SlabSpace):
    cache = space.__dict__.setdefault("_forms", {})
    if "gauge" not in cache:
        drop, z = pressure_gauge(space)
        act = np.setdiff1d(space.free_dofs, drop)
        cache["gauge"] = (act, z)
    return cache["gauge"]


def zero_mean_shift(space: SlabSpace, x: np.ndarray) -> np.ndarray:
    """Remove the constant pressure pair per time mode so that int p = 0."""
    _, z = _active(space)
    nt = space.nt
    c = space.mean_vector[:space.n_p]
    area = float(np.sum(np.abs(space.detJ))) / 2.0
    p = x[space.offsets["p"]:space.offsets["pbar"]].reshape(space.n_p, nt)
    mean = (c @ p) / area                              # (nt,)
    zz = z.reshape(-1)
    shift = np.zeros_like(x)
    seg = slice(space.offsets["p"], space.offsets["lam"])
    shift[seg] = (zz[seg].reshape(-1, nt) * mean[None, :]).ravel()
    y = x - shift
    y[space.offsets["lam"]:] = 0.0
    return y


def solve_direct(K: sp.csr_matrix, rhs: np.ndarray, space: SlabSpace) -> np.ndarray:
    act, _ = _active(space)
    Kf = K[act][:, act].tocsc()
    try:
        lu = splu(Kf)
    except RuntimeError as exc:
        raise ConfigurationError(f"singular slab system: {exc}") from exc
    x = np.zeros(K.shape[0])
    x[act] = lu.solve(rhs[act])
    if not np.all(np.isfinite(x)):
        raise ConfigurationError("slab solve produced non-finite values")
    return zero_mean_shift(space, x)


class Condenser:
    """Static condensation of the element unknowns (u_K, p_K) of a slab.

    The remaining global unknowns are the free facet velocities and the
    facet pressures (with the same gauge as the direct path)."""

    def __init__(self, space: SlabSpace):
        s = space
        self.space = s
        nt = s.nt
        nu_loc = 2 * s.nb * nt
        np_loc = s.npb * nt
        self.nloc = nu_loc + np_loc
        e = np.arange(s.ne)
        uidx = s.offsets["u"] + e[:, None] * nu_loc + np.arange(nu_loc)[None, :]
        pidx = s.offsets["p"] + e[:, None] * np_loc + np.arange(np_loc)[None, :]
        self.local = np.hstack([uidx, pidx])                  # (ne, nloc)
        act, _ = _active(s)
        mask = np.zeros(s.n_dofs, dtype=bool)
        mask[act] = True
        mask[self.local.ravel()] = False
        self.glob = np.flatnonzero(mask)
        self.ne = s.ne

    def solve(self, K: sp.csr_matrix, rhs: np.ndarray) -> np.ndarray:
        loc = self.local.ravel()
        glob = self.glob
        n, m = self.nloc, self.ne
        Kl = K[loc]
        Kll = Kl[:, loc].tocoo()
        blk_r, blk_c = Kll.row // n, Kll.col // n
        if np.any(blk_r != blk_c):
            raise ConfigurationError("element unknowns couple across elements")
        D = np.zeros((m, n, n))
        np.add.at(D, (blk_r, Kll.row % n, Kll.col % n), Kll.data)
        try:
            Dinv = np.linalg.inv(D)
        except np.linalg.LinAlgError as exc:
            raise ConfigurationError(f"singular local element block: {exc}") from exc
        Dinv_sp = sp.block_diag(list(Dinv), format="csr")
        Kg = K[glob]
        Klg = Kl[:, glob]
        Kgl = Kg[:, loc]
        Kgg = Kg[:, glob]
        S = (Kgg - Kgl @ (Dinv_sp @ Klg)).tocsc()
        fl, fg = rhs[loc], rhs[glob]
        try:
            y = splu(S).solve(fg - Kgl @ (Dinv_sp @ fl))
        except RuntimeError as exc:
            raise ConfigurationError(f"singular condensed system: {exc}") from exc
        xl = Dinv_sp @ (fl - Klg @ y)
        x = np.zeros(K.shape[0])
        x[loc] = xl
        x[glob] = y
        if not np.all(np.isfinite(x)):
            raise ConfigurationError("condensed solve produced non-finite values")
        return zero_mean_shift(self.space, x)


# ---------------------------------------------------------------- slab solve

def _state(space, x, n, t0, t1, u_prev, it, hist, ok):
    d = space.split(x)
    return SlabState(n, t0, t1, d["u"].copy(), d["ubar"].copy(), d["p"].copy(), d["pbar"].copy(),
                     d["lam"].copy(), np.array(u_prev, copy=True), it, hist, ok, x)


def picard_solve_slab(space: SlabSpace, blocks: StaticBlocks, data: ProblemData,
                      config: SolverConfig, u_prev: np.ndarray, t0: float, t1: float,
                      n: int = 0, condenser: Condenser | None = None) -> SlabState:
    """Fixed-point iteration in the convection field on one slab.

    Returns the last iterate; ``converged`` is False (and ``history`` holds
    the relative increments) when ``max_iter`` is exhausted."""
    if u_prev is None:
        raise ValueError("missing incoming trace")
    dt = t1 - t0
    if config.condense and condenser is None:
        condenser = Condenser(space)
    w = np.zeros(space.shapes["u"])
    w[..., 0] = u_prev
    hist = []
    x_old = None
    for it in range(1, config.max_iter + 1):
        sys_ = assemble_slab_system(space, blocks, data.nu, t0, dt, u_prev, data.f,
                                    w_slab=w, convection=config.convection)
        x = condenser.solve(sys_.matrix, sys_.rhs) if condenser else solve_direct(sys_.matrix, sys_.rhs, space)
        if not config.convection:
            return _state(space, x, n, t0, t1, u_prev, it, [0.0], True)
        d = space.split(x)
        if x_old is not None:
            do = space.split(x_old)
            num = slab_norm_v(space, d["u"] - do["u"], d["ubar"] - do["ubar"], dt)
            den = slab_norm_v(space, d["u"], d["ubar"], dt)
            rel = np.sqrt(num / den) if den > 0 else np.sqrt(num)
            hist.append(float(rel))
            log.debug("slab %d picard %d increment %.3e", n, it, rel)
            if rel <= config.tol:
                return _state(space, x, n, t0, t1, u_prev, it, hist, True)
        elif not np.any(x):
            # zero data and zero wind: the zero state is a fixed point
            return _state(space, x, n, t0, t1, u_prev, it, [0.0], True)
        w = config.damping * d["u"] + (1.0 - config.damping) * w
        x_old = x
    return _state(space, x, n, t0, t1, u_prev, config.max_iter, hist, False)


# ---------------------------------------------------------------- diagnostics

def slab_energy(space: SlabSpace, blocks: StaticBlocks, data: ProblemData, st: SlabState) -> dict:
    """Terms of the per-slab energy identity
    |u_{n+1}^-|^2 + |[u]_n|^2 + 2 int (nu a_h + o_h) = |u_n^-|^2 + 2 int (f, u)."""
    dt = st.dt
    Mt, A, B, C = blocks.slab(dt)
    X = np.concatenate([st.u.ravel(), st.ubar.ravel()])
    u_minus, u_plus = st.trace_out, st.trace_plus
    det = np.abs(space.detJ)[:, None, None]
    sq = lambda v: float(np.sum(det * v**2))
    _, rf = assemble_time_terms(space, None, data.f, st.t0, dt, M=blocks.M)
    O = assemble_o_h(space, st.u, dt) if np.any(st.u) else None
    e = {
        "slab": st.n, "t0": st.t0, "t1": st.t1,
        "energy_in": sq(st.trace_in),
        "energy_out": sq(u_minus),
        "jump": sq(u_plus - st.trace_in),
        "viscous": 2.0 * data.nu * float(X @ (A @ X)),
        "convective": 2.0 * float(X @ (O @ X)) if O is not None else 0.0,
        "forcing": 2.0 * float(rf @ X),
        "iterations": st.iterations,
    }
    lhs = e["energy_out"] + e["jump"] + e["viscous"] + e["convective"]
    rhs = e["energy_in"] + e["forcing"]
    scale = max(abs(lhs), abs(rhs), e["energy_in"], e["energy_out"], 1e-300)
    e["residual"] = lhs - rhs
    e["relative_residual"] = abs(lhs - rhs) / scale
    e["grad_sq"] = gradient_energy(space, st.u, st.ubar, dt)
    return e


def gradient_energy(space: SlabSpace, u, ubar, dt) -> float:
    """sum_i int_{I_n} ||G_h^{k_s}(u_i, ubar_i)||^2 dt."""
    rule = quadrature("interval", space.tdeg)
    L = space.time_basis.eval(rule.points)
    det = np.abs(space.detJ)[:, None, None, None]
    total = 0.0
    for wq, Lq in zip(rule.weights, L):
        G = discrete_gradient(space, u @ Lq, ubar @ Lq)
        total += 0.5 * dt * wq * float(np.sum(det * G**2))
    return total


def slab_conformity(space: SlabSpace, blocks: StaticBlocks, st: SlabState) -> dict:
    """Max H(div) residuals over time samples and the b_h residual."""
    xs = np.concatenate([[-1.0, 1.0], space.time_rule.points])
    L = space.time_basis.eval(xs)
    out = {"divergence": 0.0, "normal_jump": 0.0, "boundary_normal": 0.0}
    for Lq in L:
        r = conformity_residuals(space, st.u @ Lq)
        for k in out:
            out[k] = max(out[k], r[k])
    _, _, B, _ = blocks.slab(st.dt)
    X = np.concatenate([st.u.ravel(), st.ubar.ravel()])
    out["b_residual"] = float(np.abs(B @ X).max())
    out["u_scale"] = float(np.sqrt(slab_l2_sq(space, st.u, st.dt) / st.dt))
    out["u_max"] = float(np.abs(st.u).max())
    return out


@dataclass
class RunResult:
    states: list
    ledger: list
    conformity: list
    space: SlabSpace
    blocks: StaticBlocks
    layout: SpaceTimeLayout
    initial: np.ndarray
    converged: bool
    elapsed: float

    def summary(self) -> dict:
        res = [e["relative_residual"] for e in self.ledger]
        return {"slabs": len(self.states), "converged": self.converged,
                "max_energy_residual": max(res) if res else 0.0,
                "max_iterations": max((s.iterations for s in self.states), default=0),
                "final_energy": self.ledger[-1]["energy_out"] if self.ledger else 0.0,
                "elapsed": self.elapsed}


def run_simulation(data: ProblemData, config: SolverConfig, mesh, layout: SpaceTimeLayout,
                   k_s: int = 2, k_t: int = 1, faces=None, diagnostics: bool = True,
                   callback=None) -> RunResult:
    """March n = 0..N-1; each slab's outgoing trace feeds the next.

    Nonconvergence stops the march; the partial result is returned with
    ``converged=False``."""
    start = _time.perf_counter()
    faces = build_face_topology(mesh) if faces is None else faces
    space = SlabSpace(mesh, faces, k_s, k_t, qdeg=config.qdeg, tdeg=config.tdeg)
    alpha = default_alpha(k_s) if config.alpha is None else config.alpha
    blocks = StaticBlocks(space, alpha)
    condenser = Condenser(space) if config.condense else None
    u_prev = initial_trace(data, space)
    u0 = u_prev
    states, ledger, conf = [], [], []
    ok = True
    for n in range(layout.n_slabs):
        t0, t1 = layout.slab(n)
        st = picard_solve_slab(space, blocks, data, config, u_prev, t0, t1, n, condenser)
        states.append(st)
        if diagnostics:
            ledger.append(slab_energy(space, blocks, data, st))
            conf.append(slab_conformity(space, blocks, st))
        if callback is not None:
            callback(st)
        if not st.converged:
            log.warning("slab %d did not converge (last increment %.3e)", n,
                        st.history[-1] if st.history else float("nan"))
            ok = False
            break
        u_prev = st.trace_out
    return RunResult(states, ledger, conf, space, blocks, layout, u0, ok,
                     _time.perf_counter() - start)
