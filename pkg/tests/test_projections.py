import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.polynomial import legendre as npleg

from conftest import make_space
from sthdg.basis import quadrature
from sthdg.forms import DataError, coupling_matrix
from sthdg.liftings import discrete_gradient, gradient_values
from sthdg.projections import (CurlBump, Mode, build_tensor_test_function, conformity_residuals,
                               dg_time_projection, element_error, eval_time_coeffs, facet_gap,
                               project_div, project_element, project_facet, project_scalar,
                               project_time)
from sthdg.spaces import slab_norm_v
from sthdg.verify import bounded_trend, default_test_mode, projection_rates, strictly_decreasing


# ----------------------------------------------------------------- time

@settings(max_examples=25, deadline=None)
@given(k_t=st.integers(0, 3), c=st.lists(st.floats(-5, 5), min_size=4, max_size=4),
       t0=st.floats(-1, 1), dt=st.floats(0.05, 2))
def test_time_projection_identity_on_polynomials(k_t, c, t0, dt):
    c = np.array(c[:k_t + 1])
    g = lambda t: npleg.legval(2 * (t - t0) / dt - 1, c)
    assert np.allclose(project_time(g, t0, t0 + dt, k_t), c, atol=1e-12)
    # DG projection fixes P_{k_t} too; both are idempotent
    d = dg_time_projection(g, t0, t0 + dt, k_t)
    assert np.allclose(d, c, atol=1e-11)


def test_time_projection_mean():
    assert np.allclose(project_time(lambda t: t, 0.0, 1.0, 0), [0.5])


def test_time_projection_vector_valued():
    g = lambda t: np.stack([t, t**2], axis=-1)
    c = project_time(g, 0.0, 1.0, 1)
    assert c.shape == (2, 2)
    assert np.allclose(c[0], [0.5, 0.5])


@pytest.mark.parametrize("k_t,levels", [(0, (4, 8, 16, 32)), (1, (2, 4, 8, 16)), (2, (4, 8, 16, 32))])
def test_time_projection_rate(k_t, levels):
    g = lambda t: np.sin(2 * np.pi * t) + np.exp(t)
    err = []
    for n in levels:
        tt = np.linspace(0, 1, n + 1)
        e = 0.0
        for a, b in zip(tt[:-1], tt[1:]):
            ts = np.linspace(a, b, 200)
            e = max(e, np.abs(eval_time_coeffs(project_time(g, a, b, k_t), a, b, ts) - g(ts)).max())
        err.append(e)
    order = np.polyfit(np.log(1.0 / np.array(levels)), np.log(err), 1)[0]
    assert abs(order - (k_t + 1)) <= 0.2


def test_dg_time_projection_endpoint():
    eta = lambda t: np.cos(5 * t)
    for k_t in range(4):
        c = dg_time_projection(eta, 0.1, 0.4, k_t)
        assert np.isclose(eval_time_coeffs(c, 0.1, 0.4, 0.1)[0], eta(0.1), rtol=1e-13)


# ----------------------------------------------------------------- space

@pytest.mark.parametrize("k_s", [1, 2, 3])
def test_project_element_identity_and_idempotence(k_s, rng):
    s = make_space(3, k_s, 0)
    u = rng.uniform(-1, 1, s.shapes["u"][:-1])
    from sthdg.spaces import evaluate_points
    loc = lambda x: evaluate_points(s, u, x.reshape(-1, 2)).reshape(x.shape)
    # evaluate_points picks one side on shared edges; volume points are interior
    assert np.allclose(project_element(s, loc), u, atol=1e-11)
    c = project_element(s, lambda x: np.array([2.0, -3.0]))
    vals = np.einsum("qb,kcb->kqc", s.volume().phi, c)
    assert np.allclose(vals, [2.0, -3.0], atol=1e-12)
    assert np.allclose(project_element(s, lambda x: evaluate_points(s, c, x.reshape(-1, 2)).reshape(x.shape)),
                       c, atol=1e-12)
    q = project_scalar(s, lambda x: 1.0 + 0 * x[..., 0], s.k_s - 1)
    assert np.allclose(np.einsum("qb,kb->kq", s.volume(s.k_s - 1).phi, q), 1.0)


@pytest.mark.parametrize("k_s", [1, 2])
def test_project_div_conformity_any_input(k_s, rng):
    s = make_space(4, k_s, 0)
    for _ in range(3):
        w = project_div(s, rng.uniform(-1, 1, s.shapes["u"][:-1]))
        r = conformity_residuals(s, w)
        assert max(r["divergence"], r["normal_jump"], r["boundary_normal"]) <= 1e-10
        # idempotent on V_h^div
        assert np.allclose(project_div(s, w), w, atol=1e-11)


def test_project_div_is_orthogonal(rng):
    s = make_space(3, 2, 0)
    g = rng.uniform(-1, 1, s.shapes["u"][:-1])
    w = project_div(s, g)
    v = project_div(s, rng.uniform(-1, 1, g.shape))
    m = s.element_mass_diag.reshape(g.shape)
    assert abs(np.sum(m * (g - w) * v)) <= 1e-11 * np.sum(m * g * g)


def test_project_facet(rng):
    s = make_space(3, 2, 0)
    g = lambda x: np.stack([x[..., 0] ** 2 - x[..., 1], x[..., 0] * x[..., 1]], axis=-1)
    pf = project_facet(s, g)
    assert np.all(pf[s.boundary_face] == 0.0)
    # trace is quadratic along each edge: interior faces reproduce it
    rule = quadrature("edge", 6)
    f = s.faces
    p0 = s.mesh.vertices[f.vertices[:, 0]]
    p1 = s.mesh.vertices[f.vertices[:, 1]]
    x = p0[:, None] + rule.points[None, :, None] * (p1 - p0)[:, None]
    vals = np.einsum("qb,fcb->fqc", s.facet_basis.eval(rule.points), pf)
    inner = f.interior
    assert np.allclose(vals[inner], g(x)[inner], atol=1e-12)
    with pytest.raises(DataError):
        project_facet(s, lambda x: np.full(x.shape, np.nan))


@pytest.mark.parametrize("k_s,levels", [(1, (4, 8, 16, 32)), (2, (2, 4, 8, 16))])
def test_spatial_projection_rates(k_s, levels):
    r = projection_rates(levels=levels, k_s=k_s, k_t=k_s - 1)
    o = r["orders"]
    assert abs(o["div_l2"] - (k_s + 1)) <= 0.3
    assert abs(o["div_h1"] - k_s) <= 0.3
    assert o["div_linf"] >= 0.5
    assert abs(o["elem_normal_face"] - (2 * k_s + 1)) <= 0.3
    assert abs(o["time_linf"] - k_s) <= 0.2
    if k_s == 1:
        # facet gap behaves like h^{2 k_s}; for k_s = 1 that is the h^2 of the estimate
        assert abs(o["facet_gap"] - 2) <= 0.3
    else:
        assert o["facet_gap"] >= 2 - 0.3


# ----------------------------------------------------------------- tensor test functions

def test_tensor_test_function_in_discrete_div_free(rng):
    s = make_space(4, 2, 1)
    mode = default_test_mode(1.0)
    tf = build_tensor_test_function([mode], s, np.linspace(0, 1, 5))
    B = coupling_matrix(s)[:, :s.n_u]
    for a in tf.phi:
        for m in range(a.shape[-1]):
            r = B @ a[..., m].ravel()
            assert np.abs(r).max() <= 1e-10 * max(1.0, np.abs(a).max())
    assert np.allclose(tf.value(np.array([[0.5, 0.5]]), 0.5), mode.psi(np.array([[0.5, 0.5]])))


def test_tensor_test_function_rejects_nonsolenoidal():
    s = make_space(2, 1, 0)
    bad = Mode(eta=lambda t: np.ones_like(t), psi=lambda x: x.copy())
    with pytest.raises(DataError):
        build_tensor_test_function([bad], s, [0.0, 1.0])


def test_tensor_test_function_fixes_discrete_field(rng):
    s = make_space(3, 2, 0)
    w = project_div(s, rng.uniform(-1, 1, s.shapes["u"][:-1]))
    from sthdg.spaces import evaluate_points

    def psi(x):
        return evaluate_points(s, w, x.reshape(-1, 2)).reshape(x.shape)

    mode = Mode(eta=lambda t: np.ones_like(np.asarray(t, dtype=float)), psi=psi,
                grad=lambda x: np.zeros(x.shape[:-1] + (2, 2)))
    tf = build_tensor_test_function([mode], s, [0.0, 1.0])
    assert np.allclose(tf.phi[0][..., 0], w, atol=1e-11)


def test_curl_bump_divergence_and_support():
    b = CurlBump(radius=0.4, power=4)
    x = np.random.default_rng(0).uniform(0, 1, (500, 2))
    J = b.grad(x)
    assert np.abs(J[..., 0, 0] + J[..., 1, 1]).max() <= 1e-12
    h = 1e-6
    fd = (b(x + [h, 0]) - b(x - [h, 0])) / (2 * h)
    assert np.allclose(fd, J[..., :, 0], atol=1e-5)
    far = np.array([[0.0, 0.0], [1.0, 1.0], [0.5, 0.05]])
    assert np.all(b(far) == 0.0)


def _strong_diagnostics(n, N, k_s=2, k_t=1, T=1.0):
    s = make_space(n, k_s, k_t)
    mode = default_test_mode(T)
    times = np.linspace(0, T, N + 1)
    tf = build_tensor_test_function([mode], s, times)
    vol = s.volume(s.k_s, s.qdeg)
    psi = mode.psi(vol.x)
    gpsi = mode.grad(vol.x)
    xt, wt = npleg.leggauss(6)
    sup = grad_err = normv = normV = 0.0
    for i in range(N):
        t0, t1 = times[i], times[i + 1]
        dt = t1 - t0
        L = npleg.legvander(xt, k_t)
        normv += slab_norm_v(s, tf.phi[i], tf.phibar[i], dt)
        for q in range(len(xt)):
            t = t0 + 0.5 * dt * (xt[q] + 1)
            eta = mode.eta(t)
            u = tf.phi[i] @ L[q]
            ub = tf.phibar[i] @ L[q]
            uh = np.einsum("qb,kcb->kqc", vol.phi, u)
            sup = max(sup, np.abs(uh - eta * psi).max())
            G = gradient_values(s, discrete_gradient(s, u, ub), s.qdeg)
            grad_err += 0.5 * dt * wt[q] * np.sum(vol.w[..., None, None] * (G - eta * gpsi) ** 2)
            normV += 0.5 * dt * wt[q] * eta**2 * np.sum(vol.w[..., None, None] * gpsi**2)
        # sample the time direction densely at element quadrature points
        for t in np.linspace(t0, t1, 7):
            coef = eval_time_coeffs(tf.phi[i], t0, t1, t)[0]
            uh = np.einsum("qb,kcb->kqc", vol.phi, coef)
            sup = max(sup, np.abs(uh - mode.eta(t) * psi).max())
    return sup, grad_err, normv / normV


def test_strong_convergence_and_stability_of_test_functions():
    rows = [_strong_diagnostics(n, n) for n in (2, 4, 8)]
    sup, grad, ratio = map(list, zip(*rows))
    assert strictly_decreasing(sup)
    assert strictly_decreasing(grad)
    assert bounded_trend(ratio)
