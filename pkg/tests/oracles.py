"""Element-by-element reference evaluations of the bilinear/trilinear forms.

These loops rebuild geometry from the raw mesh, use their own quadrature and
evaluate every term literally, so they share no tables with the assembly.
"""
import numpy as np
from numpy.polynomial import legendre as npleg

from sthdg.basis import simplex_basis


def _tri_rule(n):
    a, wa = npleg.leggauss(n)
    b, wb = npleg.leggauss(n)
    pts, wts = [], []
    for ai, wai in zip(a, wa):            # Duffy with Legendre in both directions
        for bi, wbi in zip(b, wb):
            x = 0.25 * (1 + ai) * (1 - bi)
            y = 0.5 * (1 + bi)
            pts.append((x, y))
            wts.append(wai * wbi * (1 - bi) / 8.0)
    return np.array(pts), np.array(wts)


class Element:
    def __init__(self, space, K):
        P = space.mesh.vertices[space.mesh.triangles[K]]
        self.P = P
        self.J = np.column_stack([P[1] - P[0], P[2] - P[0]])
        self.det = abs(np.linalg.det(self.J))
        self.invJ = np.linalg.inv(self.J)

    def ref(self, x):
        return np.linalg.solve(self.J, np.asarray(x) - self.P[0])


def _field(space, coeffs, K, x, k=None):
    """Value and gradient of element vector field coeffs (ne, 2, nb) at physical x."""
    e = Element(space, K)
    basis = simplex_basis(space.k_s if k is None else k)
    phi, g = basis.eval_grad(e.ref(x)[None])
    g = g[0] @ e.invJ
    return coeffs[K] @ phi[0], coeffs[K] @ g          # (2,), (2, 2)


def _facet(space, fcoeffs, F, x):
    f = space.faces
    p0, p1 = space.mesh.vertices[f.vertices[F]]
    s = np.linalg.norm(np.asarray(x) - p0) / np.linalg.norm(p1 - p0)
    L = npleg.legvander(np.array([2 * s - 1]), space.k_s)[0] * np.sqrt(2 * np.arange(space.k_s + 1) + 1)
    return fcoeffs[F] @ L


def _element_faces(space, K):
    """(face id, outward normal, endpoints) for the three faces of K."""
    f = space.faces
    out = []
    for F in space.faces.element_faces[K]:
        n = f.normal[F] if f.left[F] == K else -f.normal[F]
        out.append((F, n, space.mesh.vertices[f.vertices[F]]))
    return out


def _edge_points(p0, p1, n):
    x, w = npleg.leggauss(n)
    s = 0.5 * (x + 1)
    L = np.linalg.norm(p1 - p0)
    return p0 + s[:, None] * (p1 - p0), 0.5 * w * L


def o_h(space, w, u, ub, v, vb, n=10):
    """-sum int_K (w.grad v).u + sum int_dK ((w.n)^+ u + (w.n)^- ubar).(v - vbar).

    The kink of |w.n| is integrated with the Gauss rule the assembly uses on
    edges (same points), everything else with an independent rule."""
    nface = space.qdeg // 2 + 1
    tp, tw = _tri_rule(n)
    total = 0.0
    for K in range(space.ne):
        e = Element(space, K)
        for xi, wq in zip(tp, tw):
            x = e.P[0] + e.J @ xi
            wv, _ = _field(space, w, K, x)
            uv, _ = _field(space, u, K, x)
            _, gv = _field(space, v, K, x)
            total -= wq * e.det * (gv @ wv) @ uv
        for F, nrm, (p0, p1) in _element_faces(space, K):
            xs, ws = _edge_points(p0, p1, nface)
            for x, wq in zip(xs, ws):
                wn = _field(space, w, K, x)[0] @ nrm
                flux = max(wn, 0) * _field(space, u, K, x)[0] + min(wn, 0) * _facet(space, ub, F, x)
                total += wq * flux @ (_field(space, v, K, x)[0] - _facet(space, vb, F, x))
    return total


def a_h(space, alpha, u, ub, v, vb, n=8):
    tp, tw = _tri_rule(n)
    hK = space.mesh.diameters()
    total = 0.0
    for K in range(space.ne):
        e = Element(space, K)
        for xi, wq in zip(tp, tw):
            x = e.P[0] + e.J @ xi
            total += wq * e.det * np.sum(_field(space, u, K, x)[1] * _field(space, v, K, x)[1])
        for F, nrm, (p0, p1) in _element_faces(space, K):
            xs, ws = _edge_points(p0, p1, n)
            for x, wq in zip(xs, ws):
                uu, gu = _field(space, u, K, x)
                vv, gv = _field(space, v, K, x)
                mu = uu - _facet(space, ub, F, x)
                mv = vv - _facet(space, vb, F, x)
                total += wq * (alpha / hK[K] * mu @ mv - (gu @ nrm) @ mv - (gv @ nrm) @ mu)
    return total


def b_h(space, p, pb, v, n=8):
    """-sum int_K p div v + sum int_dK (v.n) pbar."""
    tp, tw = _tri_rule(n)
    pbasis = simplex_basis(space.k_s - 1)
    total = 0.0
    for K in range(space.ne):
        e = Element(space, K)
        for xi, wq in zip(tp, tw):
            x = e.P[0] + e.J @ xi
            pv = p[K] @ pbasis.eval(xi[None])[0]
            total -= wq * e.det * pv * np.trace(_field(space, v, K, x)[1])
        for F, nrm, (p0, p1) in _element_faces(space, K):
            xs, ws = _edge_points(p0, p1, n)
            for x, wq in zip(xs, ws):
                total += wq * (_field(space, v, K, x)[0] @ nrm) * _facet(space, pb[:, None, :], F, x)[0]
    return total
