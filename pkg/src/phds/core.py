"""Torus geometry, leaf arcs and the distances used by the periodicity machinery.

Points of T^2 are stored as arrays with coordinates in [0, 1); points of
T^2 x R carry a third, unconstrained fiber coordinate.  Leaf arcs are kept in
lifted (universal cover) coordinates so that arclength and displacement are
plain Euclidean quantities.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

DEFAULT_LEAF_STEP = 1.0 / 1024
MAX_LEAF_STEP = 1.0 / 16
DU_CUTOFF = 50.0

# A direction field maps an (k, d) array of points to (k, d) unit vectors.
DirectionField = Callable[[np.ndarray], np.ndarray]


class LeafIntegrationError(RuntimeError):
    """Raised when a direction field is undefined along a leaf.

    The arc integrated up to the failure is kept in ``partial``.
    """

    def __init__(self, message: str, partial: "LeafArc | None" = None):
        super().__init__(message)
        self.partial = partial


# --------------------------------------------------------------------------
# torus points

def wrap(p) -> np.ndarray:
    """Reduce coordinates mod 1 into [0, 1)."""
    p = np.asarray(p, dtype=float)
    if not np.all(np.isfinite(p)):
        raise ValueError("wrap: non-finite coordinates")
    r = np.mod(p, 1.0)
    # np.mod can round tiny negatives up to exactly 1.0
    r[r >= 1.0] = 0.0
    return r + 0.0  # normalise -0.0


def centered(d) -> np.ndarray:
    """Representative of a displacement mod 1 in [-1/2, 1/2)."""
    d = np.asarray(d, dtype=float)
    return d - np.floor(d + 0.5)


_TRANSLATES = np.array([(i, j) for i in (-1, 0, 1) for j in (-1, 0, 1)], dtype=float)


def torus_dist(a, b) -> np.ndarray | float:
    """Flat distance on T^2: minimum over the 9 lattice translates."""
    a = wrap(a)
    b = wrap(b)
    diff = (a - b)[..., None, :] + _TRANSLATES
    d = np.sqrt(np.min(np.sum(diff * diff, axis=-1), axis=-1))
    return float(d) if d.ndim == 0 else d


def product_dist(a, b) -> np.ndarray | float:
    """Distance on T^2 x R (flat product metric)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    dt = torus_dist(a[..., :2], b[..., :2])
    ds = a[..., 2] - b[..., 2]
    d = np.sqrt(dt * dt + ds * ds)
    return float(d) if np.ndim(d) == 0 else d


# --------------------------------------------------------------------------
# point clouds and Hausdorff distance

@dataclass(frozen=True)
class PointCloud:
    """Finite point set in T^2 (``ambient='torus'``) or T^2 x R (``'product'``)."""

    points: np.ndarray
    ambient: str = "torus"

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        dim = {"torus": 2, "product": 3}.get(self.ambient)
        if dim is None:
            raise ValueError(f"unknown ambient space {self.ambient!r}")
        if pts.shape[-1] != dim:
            raise ValueError(f"{self.ambient} points need {dim} coordinates")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)

    def metric(self, a, b):
        return torus_dist(a, b) if self.ambient == "torus" else product_dist(a, b)


def _directed_hausdorff(X: PointCloud, Y: PointCloud, k: int = 4) -> float:
    """sup_{x in X} inf_{y in Y} d(x, y), exact up to the metric's own rounding.

    A periodic kd-tree proposes the k nearest candidates; the reported distance
    is recomputed with the same formula a brute-force loop would use.
    """
    xs, ys = X.points, Y.points
    if X.ambient == "torus":
        box = [1.0, 1.0]
        xd, yd = wrap(xs), wrap(ys)
    else:
        lo = min(xs[:, 2].min(), ys[:, 2].min())
        span = max(xs[:, 2].max(), ys[:, 2].max()) - lo
        # a fiber period longer than twice the span never wraps a nearest pair
        height = 2.0 * span + 1.0
        box = [1.0, 1.0, height]
        xd = np.column_stack([wrap(xs[:, :2]), xs[:, 2] - lo])
        yd = np.column_stack([wrap(ys[:, :2]), ys[:, 2] - lo])
    tree = cKDTree(yd, boxsize=box)
    kk = min(k, len(ys))
    _, idx = tree.query(xd, k=kk)
    idx = np.asarray(idx).reshape(len(xs), kk)
    d = X.metric(xs[:, None, :], ys[idx])
    return float(np.max(np.min(np.atleast_2d(d), axis=1)))


def hausdorff_distance(X: PointCloud, Y: PointCloud) -> float:
    """Hausdorff distance between two nonempty clouds of the same space."""
    if len(X) == 0 or len(Y) == 0:
        raise ValueError("hausdorff_distance: empty point cloud")
    if X.ambient != Y.ambient:
        raise ValueError("hausdorff_distance: clouds live in different spaces")
    return max(_directed_hausdorff(X, Y), _directed_hausdorff(Y, X))


def hausdorff_bruteforce(X: PointCloud, Y: PointCloud) -> float:
    """O(|X||Y|) reference implementation."""
    xs, ys = X.points, Y.points
    rows = np.array([np.min(X.metric(x, ys)) for x in xs])
    cols = np.array([np.min(X.metric(y, xs)) for y in ys])
    return float(max(rows.max(), cols.max()))


# --------------------------------------------------------------------------
# height graphs over the periodic grid

@dataclass
class HeightGraph:
    """Graph of u: T^2 -> R sampled at the nodes (i/n, j/n).

    ``u[i, j]`` is the height over the node (i/n, j/n).  Off-grid values come
    from periodic bilinear interpolation.
    """

    u: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)
        if self.u.ndim != 2 or self.u.shape[0] != self.u.shape[1]:
            raise ValueError("HeightGraph needs a square n x n array")
        if not np.all(np.isfinite(self.u)):
            raise ValueError("HeightGraph heights must be finite")

    @property
    def n(self) -> int:
        return self.u.shape[0]

    @property
    def spacing(self) -> float:
        return 1.0 / self.n

    @classmethod
    def constant(cls, n: int, value: float, **prov) -> "HeightGraph":
        return cls(np.full((n, n), float(value)), dict(prov))

    def nodes(self) -> np.ndarray:
        return grid_nodes(self.n)

    def interp(self, x) -> np.ndarray:
        return bilinear(self.u, x)

    def cloud(self) -> PointCloud:
        return PointCloud(np.column_stack([self.nodes(), self.u.ravel()]), "product")

    def copy(self, **prov) -> "HeightGraph":
        return HeightGraph(self.u.copy(), {**self.provenance, **prov})


def grid_nodes(n: int) -> np.ndarray:
    """Row-major (n*n, 2) array of the nodes (i/n, j/n)."""
    g = np.arange(n) / n
    a, b = np.meshgrid(g, g, indexing="ij")
    return np.column_stack([a.ravel(), b.ravel()])


def bilinear_weights(n: int, x):
    """Corner indices and weights of periodic bilinear interpolation."""
    x = wrap(x)
    t = x * n
    i0 = np.floor(t).astype(np.int64)
    f = t - i0
    i0 %= n
    i1 = (i0 + 1) % n
    fx, fy = f[..., 0], f[..., 1]
    idx = np.stack([
        i0[..., 0] * n + i0[..., 1],
        i1[..., 0] * n + i0[..., 1],
        i0[..., 0] * n + i1[..., 1],
        i1[..., 0] * n + i1[..., 1],
    ], axis=-1)
    w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=-1)
    return idx, w


def bilinear(u: np.ndarray, x) -> np.ndarray:
    idx, w = bilinear_weights(u.shape[0], x)
    return np.sum(u.ravel()[idx] * w, axis=-1)


# --------------------------------------------------------------------------
# leaf arcs

@dataclass
class LeafArc:
    """Polyline approximating a leaf, in lifted coordinates."""

    points: np.ndarray
    arclength: np.ndarray
    direction_field_id: str = ""
    tangents: np.ndarray | None = None

    @property
    def length(self) -> float:
        return float(self.arclength[-1] - self.arclength[0])


def _aligned(field_fn, pts, ref):
    v = np.asarray(field_fn(pts), dtype=float)
    sgn = np.sign(np.sum(v * ref, axis=-1))
    sgn[sgn == 0] = 1.0
    return v * sgn[..., None]


def rk4_leaf_step(field_fn: DirectionField, pts: np.ndarray, ref: np.ndarray, h: float):
    """One RK4 step along a line field, orienting every stage along ``ref``."""
    k1 = _aligned(field_fn, pts, ref)
    k2 = _aligned(field_fn, pts + 0.5 * h * k1, k1)
    k3 = _aligned(field_fn, pts + 0.5 * h * k2, k1)
    k4 = _aligned(field_fn, pts + h * k3, k1)
    return pts + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4), k1


def _integrate(field_fn, start, direction, length, h):
    nsteps = int(math.ceil(length / h - 1e-12)) if length > 0 else 0
    hh = length / nsteps if nsteps else 0.0
    pts = [start]
    tans = []
    p = start[None, :]
    ref = direction[None, :]
    for _ in range(nsteps):
        p_new, k1 = rk4_leaf_step(field_fn, p, ref, hh)
        if not np.all(np.isfinite(p_new)):
            return np.array(pts), np.array(tans), False
        tans.append(k1[0])
        ref = k1
        p = p_new
        pts.append(p[0])
    return np.array(pts), np.array(tans), True


def grow_leaf_arc(start, field_fn: DirectionField, half_length: float,
                  step: float = DEFAULT_LEAF_STEP, field_id: str = "",
                  max_step: float = MAX_LEAF_STEP) -> LeafArc:
    """Integrate a unit line field for arclength ``half_length`` both ways.

    Uses classical RK4 with the step shrunk so an integer number of steps
    covers each half.  The field is evaluated on lifted points; it is the
    field's job to reduce them mod 1 if it is periodic.
    """
    if step <= 0 or step > max_step:
        raise ValueError(f"step must lie in (0, {max_step}]")
    start = np.asarray(start, dtype=float)
    if half_length <= 0:
        return LeafArc(start[None, :], np.zeros(1), field_id, np.zeros((0, len(start))))
    d0 = np.asarray(field_fn(start[None, :]), dtype=float)[0]
    if not np.all(np.isfinite(d0)):
        raise LeafIntegrationError("direction field undefined at start",
                                   LeafArc(start[None, :], np.zeros(1), field_id))
    fwd, tf, ok_f = _integrate(field_fn, start, d0, half_length, step)
    bwd, tb, ok_b = _integrate(field_fn, start, -d0, half_length, step)
    pts = np.vstack([bwd[::-1], fwd[1:]])
    tans = np.vstack([-tb[::-1].reshape(-1, len(start)), tf.reshape(-1, len(start))])
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)]) - np.sum(seg[: len(bwd) - 1])
    arc = LeafArc(pts, s, field_id, tans)
    if not (ok_f and ok_b):
        raise LeafIntegrationError("direction field undefined along the leaf", arc)
    return arc


def endpoint_convergence_order(start, field_fn: DirectionField, length: float,
                               steps=(1 / 16, 1 / 32, 1 / 64)) -> float:
    """Observed order p from endpoint differences under step halving."""
    ends = [grow_leaf_arc(start, field_fn, length, h).points[-1] for h in steps]
    e1 = np.linalg.norm(ends[0] - ends[1])
    e2 = np.linalg.norm(ends[1] - ends[2])
    if e2 == 0.0:
        return math.inf
    return math.log2(e1 / e2)


def constant_field(vec) -> DirectionField:
    v = np.asarray(vec, dtype=float)
    v = v / np.linalg.norm(v)

    def fn(pts):
        return np.broadcast_to(v, np.shape(pts)).copy()

    return fn


# --------------------------------------------------------------------------
# leaf distances between height graphs

def leaf_hits(starts: np.ndarray, field_fn: DirectionField, target: HeightGraph,
              cutoff: float = DU_CUTOFF, step: float = 1.0 / 256,
              min_sep: float = 0.0, on_tol: float = 1e-12) -> np.ndarray:
    """Arclength from each start to the first meeting with ``target``, both ways.

    A meeting is a sign change of s - u_T(x) between consecutive RK4 nodes
    (located by linear interpolation) or a node with |s - u_T(x)| <= on_tol.
    Meetings closer than ``min_sep`` to the start are ignored.  Returns +inf
    where no meeting occurs within ``cutoff``.
    """
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    best = np.full(len(starts), np.inf)

    def gap(p):
        return p[:, 2] - target.interp(p[:, :2])

    g0 = gap(starts)
    if min_sep <= 0:
        best[np.abs(g0) <= on_tol] = 0.0
    d0 = np.asarray(field_fn(starts), dtype=float)
    # march both orientations together so one side's hit bounds the other
    k0 = len(starts)
    ids = np.concatenate([np.arange(k0), np.arange(k0)])
    p = np.vstack([starts, starts])
    ref = np.vstack([d0, -d0])
    g_prev = np.concatenate([g0, g0])
    keep = best[ids] > 0
    ids, p, ref, g_prev = ids[keep], p[keep], ref[keep], g_prev[keep]
    nsteps = int(math.ceil(cutoff / step))
    for k in range(1, nsteps + 1):
        if len(ids) == 0:
            break
        p, ref = rk4_leaf_step(field_fn, p, ref, step)
        s_prev, s_now = (k - 1) * step, k * step
        g_now = gap(p)
        crossed = (np.sign(g_now) != np.sign(g_prev)) & (g_prev != 0)
        frac = np.where(crossed, g_prev / np.where(crossed, g_prev - g_now, 1.0), 1.0)
        where = np.where(crossed, s_prev + frac * step, s_now)
        hit = (crossed | (np.abs(g_now) <= on_tol)) & (where >= min_sep) & (where <= cutoff)
        if np.any(hit):
            np.minimum.at(best, ids[hit], where[hit])
        keep = ~hit & (s_now < best[ids])
        ids, p, ref, g_prev = ids[keep], p[keep], ref[keep], g_now[keep]
    return best


def dist_u(S: HeightGraph, T: HeightGraph, leaf_field: DirectionField,
           cutoff: float = DU_CUTOFF, step: float = 1.0 / 256,
           stride: int = 1) -> float:
    """max(sup_{x in S} dist_u(x, T), sup_{y in T} dist_u(y, S)).

    Leaves are shot from the graph nodes (every ``stride``-th along each
    axis).  Returns ``math.inf`` if some leaf misses the other graph within
    ``cutoff``.
    """
    if S.n != T.n:
        raise ValueError("dist_u: graphs must share the base grid")
    sup = 0.0
    for A, B in ((S, T), (T, S)):
        if np.array_equal(A.u, B.u):
            continue
        cloud = A.cloud().points.reshape(A.n, A.n, 3)[::stride, ::stride].reshape(-1, 3)
        d = leaf_hits(cloud, leaf_field, B, cutoff, step)
        sup = max(sup, float(np.max(d)))
        if math.isinf(sup):
            return math.inf
    return sup


@dataclass
class WellPositionedResult:
    ok: bool
    witness: tuple | None = None
    leaf_distance: float = math.inf

    def __bool__(self):
        return self.ok


def well_positioned(S: HeightGraph, leaf_field: DirectionField, threshold: float = 5.0,
                    step: float = 1.0 / 256, stride: int = 1, on_tol: float = 1e-9,
                    min_sep: float | None = None) -> WellPositionedResult:
    """True iff no leaf from a node of S meets S again within ``threshold``.

    ``min_sep`` (default one grid spacing) excludes the trivial meeting at the
    start point itself.  On failure the witness is (start point, leaf distance).
    """
    if min_sep is None:
        min_sep = S.spacing
    cloud = S.cloud().points.reshape(S.n, S.n, 3)[::stride, ::stride].reshape(-1, 3)
    d = leaf_hits(cloud, leaf_field, S, cutoff=threshold, step=step,
                  min_sep=min_sep, on_tol=on_tol)
    if np.all(np.isinf(d)):
        return WellPositionedResult(True)
    i = int(np.argmin(d))
    return WellPositionedResult(False, (cloud[i], float(d[i])), float(d[i]))
