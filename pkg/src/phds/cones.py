"""Cone fields, their duals, rate certification and subbundle estimation.

A cone at a point is described by a frame B = [c | a_1 | ... ] (center
direction first) and one slope t_j per transverse axis:

    v = B @ (x_0, x_1, ...)  is in the cone  iff  sum_j (x_j / t_j)^2 <= x_0^2.

With an orthonormal frame and equal slopes this is the circular cone of
half-angle arctan(t).  The dual cone (closure of the complement) flips the
inequality.  Frames also define the norm used in the rate conditions:
||v||_x = ||B(x)^{-1} v||, which is the flat norm for orthonormal frames and
an adapted norm when the frame is the estimated splitting.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import HeightGraph, PointCloud, leaf_hits, product_dist, DirectionField

# --------------------------------------------------------------------------
# cone fields


@dataclass
class ConeField:
    points: np.ndarray
    frames: np.ndarray
    slopes: np.ndarray
    dual: bool = False
    grid_shape: tuple | None = None

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.frames = np.asarray(self.frames, dtype=float)
        self.slopes = np.asarray(self.slopes, dtype=float)
        k, d = self.points.shape
        if self.frames.shape != (k, d, d) or self.slopes.shape != (k, d - 1):
            raise ValueError("inconsistent cone field layout")
        if not (np.all(np.isfinite(self.slopes)) and np.all(self.slopes > 0)):
            raise ValueError("cone slopes must be finite and positive")

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def center(self) -> np.ndarray:
        return self.frames[:, :, 0]

    @property
    def half_angles(self) -> np.ndarray:
        return np.arctan(self.slopes)

    def coords(self, v) -> np.ndarray:
        return np.linalg.solve(self.frames, np.asarray(v, dtype=float)[..., None])[..., 0]

    def norm(self, v) -> np.ndarray:
        return np.linalg.norm(self.coords(v), axis=-1)

    def margin(self, v) -> np.ndarray:
        """Signed membership margin in [-1, 1]; >= 0 iff v is in this cone."""
        return coords_margin(self.coords(v), self.slopes, self.dual)

    def contains(self, v, tol: float = 0.0) -> np.ndarray:
        return self.margin(v) >= -tol

    def circular_2d(self):
        """(center, half-angle) of a planar field; the dual is reported around d^perp."""
        if self.dim != 2:
            raise ValueError("only defined for planar cone fields")
        theta = self.half_angles[:, 0]
        if not self.dual:
            return self.center, theta
        return self.frames[:, :, 1], np.pi / 2 - theta


class DualConeField(ConeField):
    pass


def coords_margin(c, slopes, dual=False):
    """Margin of frame coordinates c: (|x_0| - T) / |x| for the primal cone.

    T = sqrt(sum (x_j / t_j)^2) measures transverse size in slope units.
    The dual margin is the negative.
    """
    c = np.asarray(c, dtype=float)
    T = np.sqrt(np.sum((c[..., 1:] / slopes) ** 2, axis=-1))
    a = np.abs(c[..., 0])
    scale = np.maximum(a, T)
    scale = np.where(scale > 0, scale, 1.0)
    m = (a - T) / scale
    return -m if dual else m


def dualize(C: ConeField) -> ConeField:
    cls = ConeField if C.dual else DualConeField
    return cls(C.points, C.frames, C.slopes, not C.dual, C.grid_shape)


def orthonormal_frame(center) -> np.ndarray:
    """Orthonormal frames whose first column is the given unit center."""
    c = np.atleast_2d(np.asarray(center, dtype=float))
    c = c / np.linalg.norm(c, axis=1, keepdims=True)
    k, d = c.shape
    if d == 2:
        perp = np.column_stack([-c[:, 1], c[:, 0]])
        return np.stack([c, perp], axis=-1)
    # Householder completion
    e1 = np.zeros(d)
    e1[0] = 1.0
    F = np.empty((k, d, d))
    for i, ci in enumerate(c):
        w = ci - e1
        nw = np.linalg.norm(w)
        H = np.eye(d) if nw < 1e-14 else np.eye(d) - 2 * np.outer(w, w) / nw ** 2
        F[i] = H
        F[i][:, 0] = ci
    return F


def circular_cone_field(points, center, half_angle, grid_shape=None) -> ConeField:
    points = np.atleast_2d(np.asarray(points, dtype=float))
    center = np.broadcast_to(np.asarray(center, dtype=float), points.shape)
    if not 0 < half_angle < np.pi / 2:
        raise ValueError("half-angle must lie in (0, pi/2)")
    F = orthonormal_frame(center)
    slopes = np.full((len(points), points.shape[1] - 1), math.tan(half_angle))
    return ConeField(points, F, slopes, False, grid_shape)


# --------------------------------------------------------------------------
# splitting estimation

def _normalize(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _angle(a, b):
    """Angle between lines spanned by a and b (in [0, pi/2])."""
    c = np.abs(np.sum(_normalize(a) * _normalize(b), axis=-1))
    return np.arccos(np.clip(c, 0.0, 1.0))


@dataclass
class SplittingEstimate:
    points: np.ndarray
    E_u: np.ndarray
    E_s: np.ndarray
    E_c: np.ndarray | None = None
    cu_normal: np.ndarray | None = None
    cs_normal: np.ndarray | None = None
    margins: dict = field(default_factory=dict)

    @property
    def dim(self):
        return self.points.shape[1]

    def frame(self) -> np.ndarray:
        """Columns (E^s, E^c, E^u) in 3D or (E^s, E^u) in 2D."""
        cols = [self.E_s, self.E_c, self.E_u] if self.dim == 3 else [self.E_s, self.E_u]
        return np.stack(cols, axis=-1)


def _backward_orbit(f, x, n):
    orbit = [x]
    for _ in range(n):
        orbit.append(f.inverse(orbit[-1]))
    return orbit[::-1]  # x_{-n}, ..., x_0


def _forward_orbit(f, x, n):
    orbit = [x]
    for _ in range(n):
        orbit.append(f(orbit[-1]))
    return orbit


def _push(J, V):
    """Apply J to each column block of V and re-orthonormalise."""
    W = J @ V
    if W.shape[-1] == 1:
        return W / np.linalg.norm(W, axis=1, keepdims=True)
    Q, _ = np.linalg.qr(W)
    return Q


def _seed(d, k):
    base = np.array([0.57, 0.31, 0.76][:d]) + 0.1 * np.arange(d)
    V = np.stack([np.roll(base, j) for j in range(k)], axis=-1)
    Q, _ = np.linalg.qr(V)
    return Q


def estimate_splitting(f, points, n_forward: int = 60, n_backward: int = 60,
                       margin_steps: int = 1, check: bool = True) -> SplittingEstimate:
    """Power-iteration estimate of the invariant subbundles at ``points``.

    E^u (and E^cu in 3D) is the image under Df^n of a generic subspace placed
    at x_{-n}; E^s (and E^cs) is the preimage under Df^n of a generic subspace
    at x_n.  In 3D, E^c = E^cu cap E^cs.
    """
    x = np.atleast_2d(np.asarray(points, dtype=float))
    k, d = x.shape
    back = _backward_orbit(f, x, n_backward)
    fwd = _forward_orbit(f, x, n_forward)
    Jb = [f.jacobian(p) for p in back[:-1]]
    Jf = [f.jacobian(p) for p in fwd[:-1]]
    ncu = d - 1 if d == 3 else 1
    U = np.broadcast_to(_seed(d, ncu), (k, d, ncu)).copy()
    Ucu = None
    for J in Jb:
        U = _push(J, U)
    if d == 3:
        Ucu = U
        V1 = np.broadcast_to(_seed(d, 1), (k, d, 1)).copy()
        for J in Jb:
            V1 = _push(J, V1)
        E_u = V1[..., 0]
    else:
        E_u = U[..., 0]
    S = np.broadcast_to(_seed(d, ncu)[::-1], (k, d, ncu)).copy()
    S1 = np.broadcast_to(_seed(d, 1)[::-1], (k, d, 1)).copy()
    for J in Jf[::-1]:
        Jinv = np.linalg.inv(J)
        S = _push(Jinv, S)
        S1 = _push(Jinv, S1)
    E_s = S1[..., 0]
    est = SplittingEstimate(x, _orient(E_u), _orient(E_s))
    if d == 3:
        n_cu = _normalize(np.cross(Ucu[..., 0], Ucu[..., 1]))
        n_cs = _normalize(np.cross(S[..., 0], S[..., 1]))
        est.E_c = _orient(_normalize(np.cross(n_cu, n_cs)))
        est.cu_normal = n_cu
        est.cs_normal = n_cs
    est.margins = domination_margins(f, est, margin_steps)
    if check:
        for name, m in est.margins.items():
            bad = np.flatnonzero(~(m > 1))
            if len(bad):
                i = int(bad[0])
                raise ValueError(f"no domination ({name}) at cell {i}: point {x[i].tolist()}")
    return est


def _orient(v):
    """Fix the sign of a line field (largest component positive)."""
    i = np.argmax(np.abs(v), axis=1)
    s = np.sign(v[np.arange(len(v)), i])
    return v * s[:, None]


def iterate_jacobian(f, x, m: int):
    """D(f^m)(x) and f^m(x)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    J = np.broadcast_to(np.eye(x.shape[1]), (len(x), x.shape[1], x.shape[1])).copy()
    for _ in range(m):
        J = f.jacobian(x) @ J
        x = f(x)
    return J, x


def bundle_rates(f, est: SplittingEstimate, m: int = 1):
    """Euclidean growth of each estimated direction under D(f^m)."""
    J, _ = iterate_jacobian(f, est.points, m)
    rates = {"s": np.linalg.norm(J @ est.E_s[..., None], axis=(1, 2)),
             "u": np.linalg.norm(J @ est.E_u[..., None], axis=(1, 2))}
    if est.E_c is not None:
        rates["c"] = np.linalg.norm(J @ est.E_c[..., None], axis=(1, 2))
    return rates


def domination_margins(f, est: SplittingEstimate, m: int = 1) -> dict:
    r = bundle_rates(f, est, m)
    if "c" in r:
        return {"c/s": r["c"] / r["s"], "u/c": r["u"] / r["c"]}
    return {"u/s": r["u"] / r["s"]}


def equivariance_residual(f, est: SplittingEstimate, est_image: SplittingEstimate) -> dict:
    """max angle between Df E^i(x) and E^i(f x), per bundle."""
    J = f.jacobian(est.points)
    out = {}
    for name in ("E_u", "E_c", "E_s"):
        a = getattr(est, name)
        b = getattr(est_image, name)
        if a is None:
            continue
        out[name] = float(np.max(_angle((J @ a[..., None])[..., 0], b)))
    return out


# --------------------------------------------------------------------------
# adapted cones and certification

class AdaptedCones:
    """Cones about E^s in the adapted frame (E^s, E^c, E^u) for F = f^m.

    With a_i the growth of E^i under DF and r = min(a_c, a_u) / a_s, the rate
    is lambda(x) = a_s sqrt(r / 2) and the slope toward E^j is
    t_j^2 = safety (lambda^2 - a_s^2) / (a_j^2 - lambda^2).  These make (i)
    hold along each axis with room to spare, while (iii) holds on images of
    the dual cone whenever the domination ratio comfortably exceeds 2.
    """

    def __init__(self, f, m: int = 1, n_iter: int = 60, safety: float = 0.5):
        self.f = f
        self.m = m
        self.n_iter = n_iter
        self.safety = safety

    def __call__(self, points):
        est = estimate_splitting(self.f, points, self.n_iter, self.n_iter, check=False)
        B = est.frame()
        J, _ = iterate_jacobian(self.f, est.points, self.m)
        a = np.linalg.norm(J @ B, axis=1)  # growth of each frame column
        a_s, a_t = a[:, 0], a[:, 1:]
        r = np.min(a_t, axis=1) / a_s
        lam = a_s * np.sqrt(r / 2)
        with np.errstate(invalid="ignore", divide="ignore"):
            t2 = self.safety * (lam[:, None] ** 2 - a_s[:, None] ** 2) / (a_t ** 2 - lam[:, None] ** 2)
        t = np.sqrt(np.where(t2 > 0, t2, np.nan))
        bad = ~np.all(np.isfinite(t), axis=1)
        t[bad] = 1e-12
        cones = ConeField(est.points, B, t)
        return cones, lam, est, r


@dataclass
class ConditionResult:
    condition: str
    worst_margin: float
    violations: int
    samples: int
    violator: dict | None = None

    def to_dict(self):
        return {"condition": self.condition, "worst_margin": self.worst_margin,
                "violations": self.violations, "samples": self.samples,
                "violator": self.violator}


@dataclass
class CertificationReport:
    results: list
    m: int
    ph_range_ok: bool
    rate_range: tuple

    @property
    def passed(self) -> bool:
        return all(r.violations == 0 for r in self.results)

    @property
    def worst_margin(self) -> float:
        return min(r.worst_margin for r in self.results)

    @property
    def total_samples(self) -> int:
        return self.results[0].samples if self.results else 0

    def __getitem__(self, name):
        return next(r for r in self.results if r.condition == name)

    def to_dict(self):
        return {"iterate_m": self.m, "passed": self.passed,
                "rate_in_(0,1/2)": self.ph_range_ok,
                "rate_range": list(self.rate_range),
                "conditions": [r.to_dict() for r in self.results]}


def _sample_cone_vectors(slopes, n_dir, rng, dual):
    """Frame coordinates of n_dir vectors per cell in the cone (or its dual).

    Half the vectors sit on the common boundary, the rest inside.
    """
    k, dt = slopes.shape
    phi = rng.uniform(0, 2 * np.pi, size=(k, n_dir))
    if dt == 1:
        dirs = np.sign(np.cos(phi))[..., None]
    else:
        dirs = np.stack([np.cos(phi), np.sin(phi)], axis=-1)
    trans = dirs * slopes[:, None, :]
    rad = rng.uniform(0, 1, size=(k, n_dir))
    rad[:, : n_dir // 2] = 1.0
    if not dual:
        x0 = np.ones((k, n_dir, 1))
        return np.concatenate([x0, rad[..., None] * trans], axis=-1)
    x0 = (rad * rng.choice([-1.0, 1.0], size=(k, n_dir)))[..., None]
    return np.concatenate([x0, trans], axis=-1)


def _violator(points, cell, vec):
    return {"cell": int(cell), "point": points[cell].tolist(), "vector": vec.tolist()}


def certify_invariance(f, cones, samples, m: int = 1, n_dir: int = 16,
                       rng: np.random.Generator | None = None,
                       region=None) -> CertificationReport:
    """Sampled check of the three cone conditions for F = f^m.

    ``cones(points)`` returns (ConeField, rate) at arbitrary points, or a
    tuple whose first two entries are those.  For each sample y and each
    direction: (i) v in C(y) has ||DF v|| < lambda(y) ||v||; (ii) v in C*(y)
    has DF v in C*(F y); (iii) for w in C*(y), v = DF(y) w satisfies
    ||DF(F y) v|| > 2 lambda(F y) ||v||.  Norms are the cone frames' norms.
    """
    rng = rng or np.random.default_rng(0)
    y = np.atleast_2d(np.asarray(samples, dtype=float))
    if region is not None and not np.all(region(y)):
        raise ValueError("certification samples leave the certified region")
    J0, x = iterate_jacobian(f, y, m)
    J1, z = iterate_jacobian(f, x, m)
    if region is not None and not np.all(region(x)):
        raise ValueError("orbit leaves the certified region")
    pts = np.vstack([y, x, z])
    out = cones(pts)
    C, lam = out[0], np.asarray(out[1])
    k = len(y)
    By, Bx, Bz = C.frames[:k], C.frames[k:2 * k], C.frames[2 * k:]
    ty, tx = C.slopes[:k], C.slopes[k:2 * k]
    lam_y, lam_x = lam[:k], lam[k:2 * k]
    # DF expressed in frame coordinates
    My = np.linalg.solve(Bx, J0 @ By)
    Mx = np.linalg.solve(Bz, J1 @ Bx)
    results = []

    c1 = _sample_cone_vectors(ty, n_dir, rng, dual=False)
    img = np.einsum("kij,knj->kni", My, c1)
    ratio = np.linalg.norm(img, axis=-1) / np.linalg.norm(c1, axis=-1)
    marg = 1.0 - ratio / lam_y[:, None]
    results.append(_summarise("i", marg, y, c1))

    c2 = _sample_cone_vectors(ty, n_dir, rng, dual=True)
    img2 = np.einsum("kij,knj->kni", My, c2)
    marg2 = coords_margin(img2, tx[:, None, :], dual=True)
    results.append(_summarise("ii", marg2, y, c2))

    img3 = np.einsum("kij,knj->kni", Mx, img2)
    ratio3 = np.linalg.norm(img3, axis=-1) / np.linalg.norm(img2, axis=-1)
    marg3 = ratio3 / (2.0 * lam_x[:, None]) - 1.0
    results.append(_summarise("iii", marg3, y, c2))

    ph = bool(np.all((lam > 0) & (lam < 0.5)))
    return CertificationReport(results, m, ph, (float(lam.min()), float(lam.max())))


def _summarise(name, marg, points, coords):
    worst = np.unravel_index(np.argmin(marg), marg.shape)
    nviol = int(np.sum(~(marg > 0)))
    viol = _violator(points, worst[0], coords[worst]) if nviol else None
    return ConditionResult(name, float(marg[worst]), nviol, int(marg.size), viol)


def constant_cones(field: ConeField, rate: float):
    """Evaluator for a spatially constant cone field (translation invariant maps)."""

    def fn(points):
        points = np.atleast_2d(points)
        k = len(points)
        C = ConeField(points, np.broadcast_to(field.frames[0], (k,) + field.frames.shape[1:]),
                      np.broadcast_to(field.slopes[0], (k,) + field.slopes.shape[1:]))
        return C, np.full(k, rate)

    return fn


def choose_iterate(f, points, r_target: float = 8.0, m_max: int = 12, n_iter: int = 60) -> int:
    """Smallest m whose sampled domination ratio min(a_c, a_u) / a_s exceeds r_target."""
    for m in range(1, m_max + 1):
        _, _, _, r = AdaptedCones(f, m, n_iter)(points)
        if np.min(r) > r_target:
            return m
    raise ValueError(f"domination ratio stays below {r_target} up to m = {m_max}")


# --------------------------------------------------------------------------
# Cone pullback

def local_action(f, x, w, n: int):
    """F^n(w) = f^n(x + w) - f^n(x), computed on lifts."""
    x = np.atleast_2d(x)
    a, b = x + w, x.copy()
    for _ in range(n):
        a_new, b_new = f(a), f(b)
        # unwrap the base coordinates of the perturbed orbit next to the reference one
        d = a_new[:, :2] - b_new[:, :2]
        a_new = a_new.copy()
        a_new[:, :2] = b_new[:, :2] + d - np.round(d)
        a, b = a_new, b_new
    return a - b


def coneback_horizon(f, cones, n: int, samples, radii=None, n_dir: int = 16,
                     rng: np.random.Generator | None = None, cap: float = 1.0) -> float:
    """Largest radius r (from ``radii``) such that every tested w in C* with
    ||w|| <= r satisfies F^{n+1}(w) in Df^n(C*(f x)).

    Membership is decided by pulling F^{n+1}(w) back with Df^n(f x)^{-1} and
    testing the dual cone at f x.
    """
    rng = rng or np.random.default_rng(1)
    if radii is None:
        radii = cap * 2.0 ** -np.arange(0, 27)
    radii = np.sort(np.asarray(radii, dtype=float))[::-1]
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    x1 = f(x)
    Jn, _ = iterate_jacobian(f, x1, n)
    C, _ = cones(x)[:2]
    C1, _ = cones(x1)[:2]
    coords = _sample_cone_vectors(C.slopes, n_dir, rng, dual=True)
    W = np.einsum("kij,knj->kni", C.frames, coords)
    W /= np.linalg.norm(W, axis=-1, keepdims=True)
    ok_down_to = None
    for r in radii:
        pts = np.repeat(x, n_dir, axis=0)
        w = (r * W).reshape(-1, x.shape[1])
        img = local_action(f, pts, w, n + 1)
        back = np.linalg.solve(np.repeat(Jn, n_dir, axis=0), img[..., None])[..., 0]
        c = np.linalg.solve(np.repeat(C1.frames, n_dir, axis=0), back[..., None])[..., 0]
        good = coords_margin(c, np.repeat(C1.slopes, n_dir, axis=0), dual=True) >= -1e-9
        if np.all(good):
            if ok_down_to is None:
                ok_down_to = r
        else:
            ok_down_to = None
    return float(ok_down_to) if ok_down_to is not None else 0.0


# --------------------------------------------------------------------------
# Tangency of a graph to the centre-stable cones

@dataclass
class TangencyResult:
    passed: bool
    leaf_ok: bool
    tangent_fraction: float
    n_samples: int
    offenders: list = field(default_factory=list)
    leaf_witness: tuple | None = None

    def __bool__(self):
        return self.passed


def graph_tangent_frames(S: HeightGraph):
    """Tangent vectors (1, 0, u_x) and (0, 1, u_y) by periodic central differences."""
    h = S.spacing
    ux = (np.roll(S.u, -1, 0) - np.roll(S.u, 1, 0)) / (2 * h)
    uy = (np.roll(S.u, -1, 1) - np.roll(S.u, 1, 1)) / (2 * h)
    k = S.n * S.n
    t1 = np.column_stack([np.ones(k), np.zeros(k), ux.ravel()])
    t2 = np.column_stack([np.zeros(k), np.ones(k), uy.ravel()])
    return t1, t2


def plane_in_dual(C: ConeField, t1, t2, n_dir: int = 32) -> np.ndarray:
    """Worst dual-cone margin over unit directions of span(t1, t2)."""
    th = np.linspace(0, np.pi, n_dir, endpoint=False)
    V = np.cos(th)[None, :, None] * t1[:, None, :] + np.sin(th)[None, :, None] * t2[:, None, :]
    c = np.linalg.solve(C.frames[:, None, :, :], V[..., None])[..., 0]
    m = coords_margin(c, C.slopes[:, None, :], dual=True)
    return np.min(m, axis=1)


def tangency_test(L, f, leaf_field: DirectionField, return_threshold: float = 5.0,
                  cones=None, stride: int = 4, step: float = 1.0 / 256,
                  required_fraction: float = 0.99, tol: float = 1e-9) -> TangencyResult:
    """Leaf-return and tangent-plane checks for a candidate periodic set.

    (a) Leaves grown from sampled points meet L again only at the start
    (within ``return_threshold``).  (b) The tangent plane of L lies in the
    dual cone at >= ``required_fraction`` of the samples.
    """
    if isinstance(L, PointCloud):
        pts = L.points
        if len(pts) <= 1:
            return TangencyResult(True, True, 1.0, len(pts))
        from .core import grow_leaf_arc
        for p in pts:
            arc = grow_leaf_arc(p, leaf_field, return_threshold, step=step)
            far = np.abs(arc.arclength) > tol
            d = product_dist(arc.points[far][:, None, :], pts[None, :, :])
            if np.any(d < tol):
                return TangencyResult(False, False, 0.0, len(pts), leaf_witness=(p,))
        return TangencyResult(True, True, 1.0, len(pts))

    S: HeightGraph = L
    cloud = S.cloud().points.reshape(S.n, S.n, 3)[::stride, ::stride].reshape(-1, 3)
    d = leaf_hits(cloud, leaf_field, S, cutoff=return_threshold, step=step,
                  min_sep=S.spacing, on_tol=tol)
    leaf_ok = bool(np.all(np.isinf(d)))
    witness = None
    if not leaf_ok:
        i = int(np.argmin(d))
        witness = (cloud[i], float(d[i]))
    frac = 1.0
    offenders = []
    if cones is not None:
        t1, t2 = graph_tangent_frames(S)
        sel = np.arange(S.n * S.n).reshape(S.n, S.n)[::stride, ::stride].ravel()
        C = cones(cloud)[0]
        marg = plane_in_dual(C, t1[sel], t2[sel])
        good = marg >= -tol
        frac = float(np.mean(good))
        worst = np.argsort(marg)[:10]
        offenders = [(cloud[i].tolist(), float(marg[i])) for i in worst if marg[i] < -tol]
    passed = leaf_ok and frac >= required_fraction
    return TangencyResult(passed, leaf_ok, frac, len(cloud), offenders, witness)
