import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sthdg.basis import quadrature
from sthdg.mesh import build_face_topology, build_uniform_mesh
from sthdg.projections import project_element, project_facet
from sthdg.spaces import (DiscreteField, DomainError, SlabSpace, build_slab_space, evaluate,
                          evaluate_points, jumps_and_traces, l2_norm, norm_1h, norm_v,
                          slab_l2_sq, slab_norm_v, time_jump, time_traces)

from conftest import make_space


def test_two_triangle_counts():
    m = build_uniform_mesh(1)
    s = build_slab_space(m, build_face_topology(m), 1, 0)
    c = s.counts()
    assert c["u"] == 12
    assert c["ubar_free"] == 4
    assert c["p"] == 2 and c["mean_constraints"] == 1
    assert c["total"] == sum(s.sizes.values())


@pytest.mark.parametrize("k_s, k_t", [(1, 0), (2, 1), (3, 2)])
def test_layout_contiguous(k_s, k_t):
    s = make_space(2, k_s, k_t)
    off = 0
    for name in ("u", "ubar", "p", "pbar", "lam"):
        assert s.offsets[name] == off
        off += s.sizes[name]
    assert off == s.n_dofs
    x = np.arange(s.n_dofs, dtype=float)
    parts = s.split(x)
    assert np.array_equal(s.join(**parts), x)
    # free dofs exclude exactly the boundary facet velocities
    nb = np.count_nonzero(s.boundary_face) * 2 * s.nbf * s.nt
    assert len(s.free_dofs) == s.n_dofs - nb


def test_degree_limits():
    m = build_uniform_mesh(1)
    f = build_face_topology(m)
    for ks, kt in ((0, 0), (5, 0), (1, 4), (1, -1)):
        with pytest.raises(ValueError):
            SlabSpace(m, f, ks, kt)


def test_evaluate_constant_and_gradient():
    s = make_space(2, 2, 1)
    c = project_element(s, lambda x: np.ones(x.shape[:-1] + (2,)))
    f = DiscreteField(s, "u", np.repeat(c[..., None] * np.array([1.0, 0.0]), 1, axis=-1),
                      interval=(0.0, 1.0))
    v, g, dt = evaluate(f, 3, s.to_physical(3, np.array([0.2, 0.3])), 0.4, derivatives=True)
    assert np.allclose(v, 1.0, atol=1e-13) and np.allclose(g, 0.0, atol=1e-12)
    assert np.allclose(dt, 0.0)
    # x-monomial constant in time: zero time derivative
    cx = project_element(s, lambda x: np.stack([x[..., 0], x[..., 0]], axis=-1))
    fx = DiscreteField(s, "u", np.stack([cx, np.zeros_like(cx)], axis=-1), interval=(0.0, 1.0))
    pt = s.to_physical(5, np.array([0.25, 0.25]))
    v, g, dt = evaluate(fx, 5, pt, 0.7, derivatives=True)
    assert np.allclose(v, pt[0]) and np.allclose(g[:, 0], 1.0) and np.allclose(dt, 0.0, atol=1e-14)
    with pytest.raises(DomainError):
        evaluate(fx, 0, np.array([0.9, 0.9]), 0.5)
    with pytest.raises(DomainError):
        evaluate(fx, 5, pt, 1.5)


def test_time_derivative_fd(rng):
    s = make_space(2, 2, 2)
    f = DiscreteField(s, "u", rng.uniform(-1, 1, s.shapes["u"]), interval=(0.3, 0.8))
    pt = s.to_physical(4, np.array([0.3, 0.2]))
    t, h = 0.55, 1e-6
    _, _, dt = evaluate(f, 4, pt, t, derivatives=True)
    fd = (evaluate(f, 4, pt, t + h) - evaluate(f, 4, pt, t - h)) / (2 * h)
    assert np.allclose(dt, fd, atol=1e-6)


def test_jumps():
    s = make_space(2, 1, 0)
    g = lambda x: np.stack([x[..., 0] + 2 * x[..., 1], 1.0 - x[..., 0]], axis=-1)
    u = project_element(s, g)
    jt = jumps_and_traces(s, u, project_facet(s, g))
    i = s.faces.interior
    assert np.abs(jt["jump"][i]).max() <= 1e-13
    assert np.abs(jt["mismatch_left"][i]).max() <= 1e-13
    # +1 on the left element of face f, -1 on its right element
    f0 = i[0]
    L, R = s.faces.left[f0], s.faces.right[f0]
    c1 = project_element(s, lambda x: np.ones(x.shape[:-1] + (2,)))
    v = np.zeros_like(c1)
    v[L], v[R] = c1[L], -c1[R]
    jt = jumps_and_traces(s, v)
    assert np.allclose(jt["jump"][f0], 2.0) and np.allclose(jt["average"][f0], 0.0)


def test_time_traces_and_jump(rng):
    a, b = rng.uniform(-1, 1, (2, 5))
    # linear in time from a to b on the Legendre basis: (a + b)/2 L0 + (b - a)/2 L1
    u = np.stack([(a + b) / 2, (b - a) / 2], axis=-1)
    plus, minus = time_traces(u)
    assert np.allclose(plus, a) and np.allclose(minus, b)
    assert np.allclose(time_jump(u, a), 0.0)


def test_norms():
    s = make_space(4, 2, 0)
    z = np.zeros(s.shapes["u"][:-1])
    zb = np.zeros(s.shapes["ubar"][:-1])
    assert norm_v(s, z, zb) == 0.0 and norm_1h(s, z) == 0.0
    # conforming pair vanishing on the boundary: |||v|||^2 = ||grad v||^2
    q = lambda x: np.stack([x[..., 0] * (1 - x[..., 0]) * x[..., 1] * (1 - x[..., 1])] * 2, axis=-1)
    s4 = make_space(2, 4, 0)
    u4, ub4 = project_element(s4, q), project_facet(s4, q)
    vol = s4.volume(4, 12)
    grad = np.einsum("kqbd,kcb->kqcd", vol.dphi, u4)
    assert np.isclose(norm_v(s4, u4, ub4) ** 2, np.sum(vol.w[..., None, None] * grad**2), rtol=1e-11)


def test_l2_norm_and_slab_norms(rng):
    s = make_space(2, 2, 1)
    c = project_element(s, lambda x: np.ones(x.shape[:-1] + (2,)))
    assert np.isclose(l2_norm(s, c), np.sqrt(2.0), rtol=1e-13)
    u = np.zeros(s.shapes["u"])
    u[..., 0] = c
    u[..., 1] = c
    # u(t) = 1 + xi on a slab of length 2: int ||u||^2 dt = 2 * int_{-1}^1 (1+xi)^2 dxi/2 * 2
    assert np.isclose(slab_l2_sq(s, u, 2.0), 2.0 * (8.0 / 3.0), rtol=1e-13)
    ub = rng.uniform(-1, 1, s.shapes["ubar"])
    ub[s.boundary_face] = 0.0
    v = rng.uniform(-1, 1, s.shapes["u"])
    x, w = np.polynomial.legendre.leggauss(8)
    ref = sum(0.5 * wq * norm_v(s, v @ L, ub @ L) ** 2 for wq, L in zip(w, s.time_basis.eval(x)))
    assert np.isclose(slab_norm_v(s, v, ub, 1.0), ref, rtol=1e-12)


@settings(max_examples=15, deadline=None)
@given(k_s=st.integers(1, 3), k_t=st.integers(0, 2), seed=st.integers(0, 2**32 - 1))
def test_roundtrip_fit(k_s, k_t, seed):
    """Coefficients -> values at quadrature points -> refit reproduces the coefficients."""
    s = make_space(2, k_s, k_t)
    c = np.random.default_rng(seed).uniform(-1, 1, s.shapes["u"])
    vol = s.volume()
    tr = quadrature("interval", 2 * k_t)
    L = s.time_basis.eval(tr.points)
    vals = np.einsum("qb,kcbm,tm->kcqt", vol.phi, c, L)
    sp_fit = np.einsum("kq,qb,kcqt->kcbt", vol.w, vol.phi, vals) / np.abs(s.detJ)[:, None, None, None]
    back = np.einsum("kcbt,t,tm->kcbm", sp_fit, tr.weights, L) * (2 * np.arange(k_t + 1) + 1) / 2
    assert np.allclose(back, c, atol=1e-12)


def test_evaluate_points(rng):
    s = make_space(3, 2, 0)
    c = rng.uniform(-1, 1, s.shapes["u"][:-1])
    K = 7
    pt = s.to_physical(K, np.array([0.2, 0.1]))
    assert np.allclose(evaluate_points(s, c, pt[None])[0],
                       evaluate(DiscreteField(s, "u", c), K, pt), atol=1e-13)
    with pytest.raises(DomainError):
        evaluate_points(s, c, np.array([[1.5, 0.5]]))
