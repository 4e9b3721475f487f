"""Franks-type semiconjugacy diagnostics for lifts of maps near a linear model.

For a lift G(x) = A x + p(x) with p periodic, and the left eigenfunctional
pi^u of A (pi^u(A v) = lam pi^u(v)), telescoping lam^{-n} pi^u(G^n x) gives

    H^u(x) = pi^u(x) + sum_{n >= 0} lam^{-(n+1)} pi^u(p(G^n x)),

which satisfies H^u(G x) = lam H^u(x).  The stable counterpart with
mu = 1/lam uses the backward orbit:

    H^s(x) = pi^s(x) - sum_{k >= 1} mu^{k-1} pi^s(p(G^{-k} x)).

Because p is periodic only the orbit mod 1 is needed, which keeps the
evaluation free of overflow for long truncations.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import minimize
from scipy.spatial import ConvexHull

from .core import LeafArc, grid_nodes, grow_leaf_arc, wrap
from .maps import DASurfaceMap, LinearToral, SkewProduct


def unstable_functional(A: LinearToral):
    """Unit left eigenvectors (pi^u, pi^s) of the matrix of A."""
    M = A.matrix
    vals, vecs = np.linalg.eig(M.T)
    vals, vecs = vals.real, vecs.real
    iu = int(np.argmax(np.abs(vals)))
    pu = vecs[:, iu] / np.linalg.norm(vecs[:, iu])
    ps = vecs[:, 1 - iu] / np.linalg.norm(vecs[:, 1 - iu])
    if pu @ A.e_u < 0:
        pu = -pu
    if ps @ A.e_s < 0:
        ps = -ps
    return pu, ps


class LiftedMap:
    """G(x) = A x + p(x) on R^2 with p periodic.

    G(x + z) = G(x) + A z for integer z.  ``dp`` is the Jacobian of p.
    """

    def __init__(self, A: LinearToral, p: Callable | None = None, dp: Callable | None = None,
                 name: str = ""):
        self.A = A
        self._p = p
        self._dp = dp
        self.name = name

    def p(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self._p is None:
            return np.zeros_like(x)
        return self._p(wrap(x))

    def dp(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self._dp is None:
            return np.zeros((len(x), 2, 2))
        return self._dp(wrap(x))

    @property
    def is_linear(self) -> bool:
        return self._p is None

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return x @ self.A.matrix.T + self.p(x)

    def jacobian(self, x):
        return self.A.matrix + self.dp(x)

    def torus(self, x):
        """The induced map on T^2."""
        return wrap(self(wrap(x)))

    def inverse(self, y, tol: float = 1e-14, maxit: int = 50):
        """Newton solve of G(x) = y on the lift, started from A^{-1} y."""
        y = np.atleast_2d(np.asarray(y, dtype=float))
        x = y @ self.A.inv_matrix.T
        if self.is_linear:
            return x
        for _ in range(maxit):
            r = self(x) - y
            dx = np.linalg.solve(self.jacobian(x), r[..., None])[..., 0]
            x = x - dx
            if np.max(np.abs(dx)) < tol * (1 + np.max(np.abs(x))):
                break
        return x

    def torus_inverse(self, y):
        return wrap(self.inverse(wrap(y)))


def linear_lift(A: LinearToral) -> LiftedMap:
    return LiftedMap(A, name="linear")


def da_lift(g: DASurfaceMap) -> LiftedMap:
    """Lift of the DA map; its perturbation is parallel to e_s."""
    A = g.base

    def dp(x):
        return g.jacobian(x) - A.matrix

    return LiftedMap(A, g.displacement, dp, name="da")


def perturbed_lift(A: LinearToral, eps: float = 0.02) -> LiftedMap:
    """G(x) = A x + eps (sin 2 pi x_2, sin 2 pi (x_1 + x_2) + cos 2 pi x_1)."""
    tp = 2 * np.pi

    def p(x):
        return eps * np.column_stack([np.sin(tp * x[:, 1]),
                                      np.sin(tp * (x[:, 0] + x[:, 1])) + np.cos(tp * x[:, 0])])

    def dp(x):
        J = np.zeros((len(x), 2, 2))
        c = np.cos(tp * (x[:, 0] + x[:, 1]))
        J[:, 0, 1] = tp * np.cos(tp * x[:, 1])
        J[:, 1, 0] = tp * (c - np.sin(tp * x[:, 0]))
        J[:, 1, 1] = tp * c
        return eps * J

    return LiftedMap(A, p, dp, name=f"perturbed(eps={eps})")


@dataclass
class SemiconjEvaluator:
    pi_u: np.ndarray
    pi_s: np.ndarray
    lam: float
    mu: float
    N_terms: int
    R_bound: float
    sup_pu_p: float


def sup_projected_perturbation(G: LiftedMap, functional, n: int = 256) -> float:
    """sup_x |functional . p(x)|: grid maximum refined by local optimisation."""
    if G.is_linear:
        return 0.0
    x = grid_nodes(n)
    vals = np.abs(G.p(x) @ functional)
    best = float(vals.max())
    for i in np.argsort(vals)[-4:]:
        res = minimize(lambda z: -abs(float(G.p(z[None, :])[0] @ functional)), x[i],
                       method="Nelder-Mead", options={"xatol": 1e-12, "fatol": 1e-15})
        best = max(best, -float(res.fun))
    return best


def make_evaluator(G: LiftedMap, N_terms: int = 40) -> SemiconjEvaluator:
    if N_terms < 1:
        raise ValueError("N_terms must be >= 1")
    pu, ps = unstable_functional(G.A)
    lam = G.A.lambda_u
    sup_u = sup_projected_perturbation(G, pu)
    return SemiconjEvaluator(pu, ps, lam, G.A.lambda_s, N_terms, sup_u / (abs(lam) - 1), sup_u)


def compute_Hu(ev: SemiconjEvaluator, G: LiftedMap, x, N_terms: int | None = None):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    N = ev.N_terms if N_terms is None else N_terms
    H = x @ ev.pi_u
    if G.is_linear:
        return H
    y = wrap(x)
    w = 1.0
    for _ in range(N):
        w /= ev.lam
        H = H + w * (G.p(y) @ ev.pi_u)
        y = G.torus(y)
        if not np.all(np.isfinite(y)):
            raise OverflowError("orbit left the finite range")
    return H


def compute_Hs(ev: SemiconjEvaluator, G: LiftedMap, x, N_terms: int | None = None):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    N = ev.N_terms if N_terms is None else N_terms
    H = x @ ev.pi_s
    if G.is_linear:
        return H
    y = wrap(x)
    w = 1.0
    for _ in range(N):
        y = G.torus_inverse(y)
        H = H - w * (G.p(y) @ ev.pi_s)
        w *= ev.mu
        if not np.all(np.isfinite(y)):
            raise OverflowError("orbit left the finite range")
    return H


def brute_force_Hu(ev: SemiconjEvaluator, G: LiftedMap, x, n: int = 30):
    """lam^{-n} pi^u(G^n x) computed on the lift."""
    y = np.atleast_2d(np.asarray(x, dtype=float))
    for _ in range(n):
        y = G(y)
    return (y @ ev.pi_u) / ev.lam ** n


def commutation_residual(ev, G, x, N_terms=None) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return np.abs(compute_Hu(ev, G, G(x), N_terms) - ev.lam * compute_Hu(ev, G, x, N_terms))


# --------------------------------------------------------------------------
# stable leaf constancy

def stable_field(G: LiftedMap, n_iter: int = 40):
    """Unit stable line field of the torus map, by pulling back with DG^{-1}."""
    if G.is_linear:
        e = G.A.e_s.copy()
        return lambda pts: np.broadcast_to(e, np.shape(pts)).copy()

    def fn(pts):
        pts = np.atleast_2d(pts)
        orbit = [wrap(pts)]
        for _ in range(n_iter):
            orbit.append(G.torus(orbit[-1]))
        v = np.broadcast_to(G.A.e_s, pts.shape).copy()
        for y in orbit[-2::-1]:
            v = np.linalg.solve(G.jacobian(y), v[..., None])[..., 0]
            v /= np.linalg.norm(v, axis=1, keepdims=True)
        return v

    return fn


@dataclass
class ConstancyResult:
    spread: float
    arc: LeafArc
    values: np.ndarray


def stable_leaf_constancy(G: LiftedMap, ev: SemiconjEvaluator, x, arc_len: float = 1.0,
                          step: float = 1.0 / 64, field=None) -> ConstancyResult:
    """Spread of H^u along a stable arc of total length ``arc_len`` through x."""
    field = field or stable_field(G)
    arc = grow_leaf_arc(np.asarray(x, dtype=float), field, arc_len / 2, step, field_id="E^s")
    vals = compute_Hu(ev, G, arc.points)
    return ConstancyResult(float(vals.max() - vals.min()), arc, vals)


def pushed_spread(G: LiftedMap, ev: SemiconjEvaluator, points, n: int) -> float:
    """Spread of H^u over G^n(points); n < 0 uses G^{-1}."""
    y = np.atleast_2d(np.asarray(points, dtype=float))
    step = G if n >= 0 else G.inverse
    for _ in range(abs(n)):
        y = step(y)
    v = compute_Hu(ev, G, y)
    return float(v.max() - v.min())


# --------------------------------------------------------------------------
# length versus volume

class SkewLift:
    """Lift of a skew product over a lifted base map: (x, s) -> (G x, vert(x, s))."""

    def __init__(self, base: LiftedMap, f: SkewProduct | None = None, inverse: bool = False):
        self.base = base
        self.f = f
        self.inverse_mode = inverse

    def __call__(self, p):
        p = np.atleast_2d(np.asarray(p, dtype=float))
        x, s = p[:, :2], p[:, 2]
        if not self.inverse_mode:
            s_new = s if self.f is None else self.f.vert(wrap(x), s)
            return np.column_stack([self.base(x), s_new])
        y = self.base.inverse(x)
        s_new = s if self.f is None else self.f.vert_inverse(wrap(y), s)
        return np.column_stack([y, s_new])


def _diameter(pts):
    if len(pts) < 2:
        return 0.0
    try:
        hull = ConvexHull(pts, qhull_options="QJ")
        v = pts[np.unique(hull.simplices)]
    except Exception:
        v = pts
    if len(v) > 4000:
        v = v[np.linspace(0, len(v) - 1, 4000).astype(int)]
    d = np.linalg.norm(v[:, None, :] - v[None, :, :], axis=-1)
    return float(d.max())


@dataclass
class LengthVolumeTable:
    rows: list
    truncated: bool = False

    def as_array(self):
        return np.array(self.rows, dtype=float)

    columns = ("n", "length", "diameter", "pu_extent", "ps_extent")


def length_volume_diagnostic(f3, J: LeafArc, n_max: int, pi_u, pi_s,
                             max_seg: float = 0.05, max_points: int = 200_000) -> LengthVolumeTable:
    """Iterate an arc by the lifted map, re-sampling so segments stay short.

    Each row is (n, length, diameter, pi^u extent, pi^s extent); extents use
    the base coordinates.  Stops early (``truncated``) if the point budget
    would be exceeded.
    """
    pts = np.asarray(J.points, dtype=float)
    params = np.linspace(0.0, 1.0, len(pts))
    rows = [_row(0, pts, pi_u, pi_s)]
    history = [pts]  # reference polylines at each time, for refinement

    for n in range(1, n_max + 1):
        img = f3(pts)
        while True:
            seg = np.linalg.norm(np.diff(img, axis=0), axis=1)
            long = np.flatnonzero(seg > max_seg)
            if len(long) == 0:
                break
            if len(img) + len(long) > max_points:
                return LengthVolumeTable(rows, truncated=True)
            mid_par = 0.5 * (params[long] + params[long + 1])
            mid = _interp_polyline(history[0], np.linspace(0, 1, len(history[0])), mid_par)
            for _ in range(n):
                mid = f3(mid)
            params = np.insert(params, long + 1, mid_par)
            img = np.insert(img, long + 1, mid, axis=0)
        pts = img
        rows.append(_row(n, pts, pi_u, pi_s))
    return LengthVolumeTable(rows)


def _interp_polyline(poly, par, t):
    return np.column_stack([np.interp(t, par, poly[:, j]) for j in range(poly.shape[1])])


def _row(n, pts, pi_u, pi_s):
    length = float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))
    pu = pts[:, :2] @ pi_u
    ps = pts[:, :2] @ pi_s
    return (n, length, _diameter(pts), float(np.ptp(pu)), float(np.ptp(ps)))
