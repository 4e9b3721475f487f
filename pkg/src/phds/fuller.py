"""Cross sections of flows by Fuller averaging.

Given a flow psi on a compact manifold with boundary, a function
g: M -> [0, 1] and a constant ell such that g holds a value in {0, 1} once an
orbit is more than ell away from any time where 0 < g < 1, orbits split into
classes X_{i,j} by the limits of g in backward and forward time.  With

    g_n(x) = (1/2n) int_{-n}^{n} g(psi_t x) dt,    p = sum_n 2^{-n} g_n,

p increases strictly along X_{0,1} orbits, so p^{-1}(1/2) meets each of
them exactly once.  All integrals are evaluated from a single sampled orbit
per point: g along psi_t(x) on a grid of step h, then a cumulative
trapezoid integral from which every g_n (and p along a window of times)
is read off by differences.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.optimize import brentq
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .core import HeightGraph, bilinear, dist_u, grid_nodes, wrap
from .graph_transform import GraphTransform, detect_periodic, find_invariant_torus, vertical_field
from .maps import LinearToral, SkewProduct, cat_map


class Unclassified(RuntimeError):
    """g did not settle in {0, 1} within the horizon."""


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# --------------------------------------------------------------------------
# flows

@dataclass
class FlowSystem:
    """A flow on M_0 together with the function g and the constant ell.

    ``flow(t, x)`` broadcasts: x has shape (..., dim) and t is broadcast
    against x[..., 0].  Flows built from a velocity field only accept a
    scalar t; ``analytic`` tells the orbit sampler which path to use.
    ``periodic`` marks coordinates living in [0, 1) mod 1.
    """

    dim: int
    flow: Callable
    g: Callable
    ell: float
    boundary: Callable | None = None
    periodic: tuple = ()
    step: float = 1.0 / 1024
    analytic: bool = True
    time_scale: float = 1.0
    name: str = ""
    velocity: Callable | None = None

    def __post_init__(self):
        if self.ell <= 0:
            raise ValueError("ell must be positive")
        m = 1.0 / self.step
        if abs(m - round(m)) > 1e-9:
            raise ValueError("step must be 1/m for an integer m")
        if not self.periodic:
            self.periodic = (False,) * self.dim

    @property
    def steps_per_unit(self) -> int:
        return int(round(1.0 / self.step))

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        if self.time_scale == 1.0:
            return self.flow(t, x)
        return self.flow(np.asarray(t) * self.time_scale, x)

    def normalized(self, target: float = 0.9) -> "FlowSystem":
        """Rescale time so that ell < 1; the factor is kept in ``time_scale``."""
        if self.ell < 1.0:
            return self
        c = self.ell / target
        if not self.analytic:
            raise ValueError("only analytic flows can be rescaled")
        return replace(self, ell=self.ell / c, time_scale=self.time_scale * c)

    def reversed(self) -> "FlowSystem":
        flow = self.flow
        return replace(self, flow=lambda t, x: flow(-np.asarray(t), x),
                       name=f"{self.name}-reversed")

    def metric(self, a, b) -> np.ndarray:
        d = np.abs(np.asarray(a, float) - np.asarray(b, float))
        per = np.asarray(self.periodic, bool)
        d[..., per] = np.minimum(d[..., per], 1.0 - d[..., per])
        return np.linalg.norm(d, axis=-1)


def from_velocity(velocity: Callable, dim: int, g: Callable, ell: float, dt: float = 1.0 / 256,
                  **kw) -> FlowSystem:
    """A flow obtained by composing classical RK4 steps of size <= dt."""

    def rk4(x, h):
        k1 = velocity(x)
        k2 = velocity(x + 0.5 * h * k1)
        k3 = velocity(x + 0.5 * h * k2)
        k4 = velocity(x + h * k3)
        return x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)

    def flow(t, x):
        t = float(t)
        n = max(1, math.ceil(abs(t) / dt - 1e-12))
        h = t / n
        y = np.array(x, dtype=float)
        if t == 0.0:
            return y
        for _ in range(n):
            y = rk4(y, h)
        return y

    fs = FlowSystem(dim, flow, g, ell, step=dt, analytic=False, **kw)
    fs.velocity = velocity
    fs._rk4 = rk4
    return fs


def check_cocycle(fs: FlowSystem, x, s: float, t: float) -> float:
    """sup |psi_s(psi_t x) - psi_{s+t}(x)| over the rows of x."""
    x = np.atleast_2d(x)
    return float(np.max(fs.metric(fs(s, fs(t, x)), fs(s + t, x))))


def check_boundary(fs: FlowSystem, samples) -> bool:
    """g takes values in {0, 1} at the boundary samples."""
    v = fs.g(np.atleast_2d(samples))
    return bool(np.all((v == 0.0) | (v == 1.0)))


# --------------------------------------------------------------------------
# orbit sampling

def _chunks(n_points: int, n_times: int, budget: int = 4_000_000):
    size = max(1, budget // max(1, n_times))
    for a in range(0, n_points, size):
        yield slice(a, min(n_points, a + size))


def orbit_g(fs: FlowSystem, x: np.ndarray, K: int) -> np.ndarray:
    """g(psi_t x) for t = k h, k = -K..K; shape (n, 2K + 1)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    h = fs.step
    if fs.analytic:
        t = (np.arange(2 * K + 1) - K) * h
        return fs.g(fs(t[None, :], x[:, None, :]))
    out = np.empty((len(x), 2 * K + 1))
    out[:, K] = fs.g(x)
    for sign in (1, -1):
        y = x.copy()
        for k in range(1, K + 1):
            y = fs._rk4(y, sign * h)
            out[:, K + sign * k] = fs.g(y)
    return out


def _cumulative(gv: np.ndarray, h: float) -> np.ndarray:
    return cumulative_trapezoid(gv, dx=h, axis=1, initial=0.0)


def _p_window(G: np.ndarray, K: int, m: int, N: int, J: int) -> np.ndarray:
    """p at offsets j = -J..J (in steps) from a cumulative integral centred at K."""
    j = np.arange(-J, J + 1)
    p = np.zeros((G.shape[0], len(j)))
    for n in range(1, N + 1):
        p += 2.0 ** -n * (G[:, K + j + n * m] - G[:, K + j - n * m]) / (2 * n)
    return p


def average_gn(fs: FlowSystem, x, n: int) -> np.ndarray:
    """g_n(x) by composite trapezoid quadrature at the flow step."""
    if n < 1:
        raise ValueError("n must be >= 1")
    x = np.atleast_2d(x)
    K = n * fs.steps_per_unit
    out = np.empty(len(x))
    for sl in _chunks(len(x), 2 * K + 1):
        G = _cumulative(orbit_g(fs, x[sl], K), fs.step)
        out[sl] = (G[:, -1] - G[:, 0]) / (2 * n)
    return out


def section_function_p(fs: FlowSystem, x, N: int = 30) -> np.ndarray:
    """Truncated sum_{n <= N} 2^{-n} g_n(x); the tail is at most 2^{-N}."""
    if N < 1:
        raise ValueError("N must be >= 1")
    x = np.atleast_2d(x)
    m = fs.steps_per_unit
    K = N * m
    out = np.empty(len(x))
    for sl in _chunks(len(x), 2 * K + 1):
        G = _cumulative(orbit_g(fs, x[sl], K), fs.step)
        out[sl] = _p_window(G, K, m, N, 0)[:, 0]
    return out


@dataclass
class FlowDerivative:
    value: np.ndarray
    brackets: np.ndarray  # g(psi_n x) - g(psi_{-n} x), shape (k, N)

    @property
    def terms(self) -> np.ndarray:
        n = np.arange(1, self.brackets.shape[1] + 1)
        return 2.0 ** -n * self.brackets / (2 * n)


def flow_derivative_p(fs: FlowSystem, x, N: int = 30) -> FlowDerivative:
    """D_psi p_N(x) = sum 2^{-n} [g(psi_n x) - g(psi_{-n} x)] / (2n)."""
    x = np.atleast_2d(x)
    n = np.arange(1, N + 1, dtype=float)
    if fs.analytic:
        fwd = fs.g(fs(n[None, :], x[:, None, :]))
        bwd = fs.g(fs(-n[None, :], x[:, None, :]))
    else:
        fwd = np.column_stack([fs.g(fs(k, x)) for k in n])
        bwd = np.column_stack([fs.g(fs(-k, x)) for k in n])
    br = fwd - bwd
    d = FlowDerivative(np.zeros(len(x)), br)
    d.value = d.terms.sum(axis=1)
    return d


# --------------------------------------------------------------------------
# classification

@dataclass
class OrbitClass:
    i: int
    j: int
    t_back: float   # time (<= 0) from which g held its backward limit
    t_fwd: float    # time (>= 0) from which g held its forward limit
    span: float     # diameter of the sampled times with 0 < g < 1

    @property
    def pair(self):
        return (self.i, self.j)


def _settled(a: np.ndarray, ell: float, h: float):
    """Limit of g along one time direction; ``a[0]`` is t = 0."""
    trans = np.flatnonzero((a > 0.0) & (a < 1.0))
    last = trans[-1] if len(trans) else -1
    held = (len(a) - 1 - last) * h
    v = a[-1]
    if held > ell and v in (0.0, 1.0) and np.all(a[last + 1:] == v):
        return int(v), (last + 1) * h
    return None, None


def _classify_rows(gv: np.ndarray, K: int, ell: float, h: float, raise_on_fail=True):
    out = []
    for row in gv:
        i, tb = _settled(row[K::-1], ell, h)
        j, tf = _settled(row[K:], ell, h)
        trans = np.flatnonzero((row > 0.0) & (row < 1.0))
        span = (trans[-1] - trans[0]) * h if len(trans) else 0.0
        if i is None or j is None:
            if raise_on_fail:
                raise Unclassified("unclassified: g did not settle in {0,1} within the horizon")
            out.append(None)
            continue
        out.append(OrbitClass(i, j, -tb, tf, span))
    return out


def classify_orbit(fs: FlowSystem, x, horizon: float = 8.0) -> OrbitClass:
    """(lim_{t->-inf} g, lim_{t->+inf} g) along the orbit of a single point.

    A direction is settled once g has held one value of {0, 1} for longer
    than ell after the last time with 0 < g < 1.
    """
    if horizon <= fs.ell:
        raise ValueError("horizon must exceed ell")
    K = int(math.ceil(horizon * fs.steps_per_unit))
    gv = orbit_g(fs, np.atleast_2d(x), K)
    return _classify_rows(gv, K, fs.ell, fs.step)[0]


def classify_many(fs: FlowSystem, xs, horizon: float = 8.0):
    """Like classify_orbit, with None for points that do not settle."""
    xs = np.atleast_2d(xs)
    K = int(math.ceil(horizon * fs.steps_per_unit))
    out = []
    for sl in _chunks(len(xs), 2 * K + 1):
        out += _classify_rows(orbit_g(fs, xs[sl], K), K, fs.ell, fs.step, raise_on_fail=False)
    return out


# --------------------------------------------------------------------------
# section extraction

@dataclass
class SectionData:
    points: np.ndarray
    seed_index: np.ndarray
    times: np.ndarray
    p_values: np.ndarray
    classes: np.ndarray            # (k, 2) class of each stored point
    seed_classes: list             # OrbitClass or None per seed
    crossings: np.ndarray          # sign changes of p - 1/2 per seed over the window
    sectionless: list
    N: int
    root_tol: float
    time_scale: float
    periodic: tuple
    labels: np.ndarray | None = None
    adjacency_radius: float | None = None

    def __len__(self):
        return len(self.points)

    @property
    def n_components(self) -> int:
        return 0 if self.labels is None or len(self.labels) == 0 else int(self.labels.max()) + 1

    def to_dict(self):
        return {
            "N": self.N, "root_tol": self.root_tol, "time_scale": self.time_scale,
            "n_points": len(self), "n_components": self.n_components,
            "sectionless": [int(i) for i in self.sectionless],
            "points": self.points.tolist(), "p_values": self.p_values.tolist(),
            "seed_index": self.seed_index.tolist(), "times": self.times.tolist(),
            "classes": self.classes.tolist(),
            "labels": None if self.labels is None else self.labels.tolist(),
        }

    def csv_rows(self):
        header = [f"x{i}" for i in range(self.points.shape[1] if len(self) else 0)]
        header += ["p", "seed", "t", "class_i", "class_j", "label"]
        rows = []
        for k in range(len(self)):
            lab = -1 if self.labels is None else int(self.labels[k])
            rows.append([*self.points[k], self.p_values[k], int(self.seed_index[k]),
                         self.times[k], *map(int, self.classes[k]), lab])
        return header, rows


def _interp_G(G: np.ndarray, gv: np.ndarray, K: int, h: float, t: float) -> float:
    """Exact integral of the piecewise-linear interpolant of g, from the centre."""
    u = t / h + K
    k = min(max(int(math.floor(u)), 0), len(G) - 2)
    tau = (u - k) * h
    return G[k] + gv[k] * tau + (gv[k + 1] - gv[k]) * tau * tau / (2 * h)


def _p_continuous(G, gv, K, h, N, t):
    s = 0.0
    for n in range(1, N + 1):
        s += 2.0 ** -n * (_interp_G(G, gv, K, h, t + n) - _interp_G(G, gv, K, h, t - n)) / (2 * n)
    return s


def _polish(fs: FlowSystem, pts: np.ndarray, N: int, root_tol: float, maxit: int = 6):
    """Newton steps along the flow on p(x) = 1/2 with freshly centred quadrature."""
    shift = np.zeros(len(pts))
    pv = section_function_p(fs, pts, N)
    for _ in range(maxit):
        bad = np.abs(pv - 0.5) >= root_tol
        if not np.any(bad):
            break
        d = flow_derivative_p(fs, pts[bad], N).value
        dt = np.where(d > 0, -(pv[bad] - 0.5) / np.where(d > 0, d, 1.0), 0.0)
        pts[bad] = _flow_each(fs, dt, pts[bad])
        shift[bad] += dt
        pv[bad] = section_function_p(fs, pts[bad], N)
    return pts, pv, shift


def _flow_each(fs: FlowSystem, t: np.ndarray, x: np.ndarray) -> np.ndarray:
    if fs.analytic:
        return fs(t, x)
    return np.vstack([fs(float(s), x[[i]]) for i, s in enumerate(t)])


def extract_section(fs: FlowSystem, seeds, N: int = 30, root_tol: float = 1e-10,
                    window: float = 8.0) -> SectionData:
    """Points of p^{-1}(1/2) on the orbits of the seeds.

    The flow is first rescaled so that ell < 1.  For an X_{0,1} seed the
    single root of p(psi_t seed) = 1/2 with |t| <= window is stored; seeds of
    other classes contribute every crossing their p-profile shows.  Seeds
    with no crossing are listed in ``sectionless``.
    """
    fs = fs.normalized()
    seeds = np.atleast_2d(np.asarray(seeds, dtype=float))
    h, m = fs.step, fs.steps_per_unit
    J = int(round(window * m))
    K = N * m + J
    pts, sidx, times, cls = [], [], [], []
    seed_classes, crossings, sectionless = [], [], []
    for sl in _chunks(len(seeds), 2 * K + 1):
        gv = orbit_g(fs, seeds[sl], K)
        classes = _classify_rows(gv, K, fs.ell, h, raise_on_fail=False)
        G = _cumulative(gv, h)
        pw = _p_window(G, K, m, N, J) - 0.5
        for r, idx in enumerate(range(sl.start, sl.stop)):
            oc = classes[r]
            seed_classes.append(oc)
            s = np.sign(pw[r])
            ch = np.flatnonzero(s[:-1] * s[1:] < 0)
            zeros = np.flatnonzero(s == 0)
            roots = [(j - J) * h for j in zeros]
            for j in ch:
                roots.append(brentq(lambda t: _p_continuous(G[r], gv[r], K, h, N, t) - 0.5,
                                    (j - J) * h, (j + 1 - J) * h, xtol=1e-15))
            crossings.append(len(ch) + len(zeros))
            if not roots:
                sectionless.append(idx)
                continue
            if oc is not None and oc.pair == (0, 1):
                roots = roots[:1]
            for t in sorted(roots):
                sidx.append(idx)
                times.append(t)
                cls.append(oc.pair if oc is not None else (-1, -1))
    sidx = np.array(sidx, dtype=int)
    times = np.array(times, dtype=float)
    if len(sidx):
        start = _flow_each(fs, times, seeds[sidx])
        P, pv, shift = _polish(fs, start, N, root_tol)
        times = times + shift
    else:
        P, pv = np.zeros((0, fs.dim)), np.zeros(0)
    per = np.asarray(fs.periodic, bool)
    if len(P):
        P[:, per] = wrap(P[:, per])
    return SectionData(P, sidx, times, pv, np.array(cls, dtype=int).reshape(-1, 2),
                       seed_classes, np.array(crossings), sectionless, N, root_tol,
                       fs.time_scale, tuple(fs.periodic))


def sign_changes_along_orbit(fs: FlowSystem, x, N: int = 30, window: float = 8.0) -> np.ndarray:
    """Number of sign changes of p - 1/2 along psi_t(x), |t| <= window."""
    fs = fs.normalized()
    x = np.atleast_2d(x)
    m = fs.steps_per_unit
    J = int(round(window * m))
    K = N * m + J
    out = []
    for sl in _chunks(len(x), 2 * K + 1):
        G = _cumulative(orbit_g(fs, x[sl], K), fs.step)
        s = np.sign(_p_window(G, K, m, N, J) - 0.5)
        s = s[:, s.any(axis=0)] if s.size else s
        out += [int(np.sum(row[:-1] * row[1:] < 0)) for row in s]
    return np.array(out)


# --------------------------------------------------------------------------
# components

def _periodic_tree(points: np.ndarray, periodic, pad: float):
    per = np.asarray(periodic, bool)
    lo = points.min(axis=0)
    shifted = points - np.where(per, 0.0, lo)
    box = np.where(per, 1.0, np.ptp(points, axis=0) + 2 * pad + 1.0)
    shifted = np.where(per, np.mod(shifted, 1.0), shifted)
    return cKDTree(shifted, boxsize=box), lambda q: np.where(per, np.mod(q, 1.0), q - np.where(per, 0.0, lo))


def split_components(sd: SectionData, adjacency_radius: float) -> SectionData:
    """Connected components of the section under the adjacency relation d <= r.

    Labels are ordered by the lexicographically smallest point of each
    component, so they do not depend on the order of the points.
    """
    k = len(sd.points)
    if k == 0:
        return replace(sd, labels=np.zeros(0, dtype=int), adjacency_radius=adjacency_radius)
    tree, _ = _periodic_tree(sd.points, sd.periodic, adjacency_radius)
    pairs = tree.query_pairs(adjacency_radius, output_type="ndarray")
    adj = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(k, k))
    _, lab = connected_components(adj, directed=False)
    order = np.lexsort(sd.points.T[::-1])
    first = {}
    for i in order:
        first.setdefault(lab[i], len(first))
    labels = np.array([first[c] for c in lab], dtype=int)
    return replace(sd, labels=labels, adjacency_radius=adjacency_radius)


# --------------------------------------------------------------------------
# compatibility with a map

def project_to_section(fs: FlowSystem, pts, N: int = 30, root_tol: float = 1e-10,
                       window: float = 8.0):
    """The first point of p^{-1}(1/2) on each orbit (NaN row if none)."""
    sd = extract_section(fs, pts, N, root_tol, window)
    out = np.full((len(np.atleast_2d(pts)), fs.dim), np.nan)
    seen = set()
    for k, i in enumerate(sd.seed_index):
        if i not in seen:
            out[i] = sd.points[k]
            seen.add(i)
    return out


def check_f_compatibility(f: Callable, fs: FlowSystem, sd: SectionData, k_max: int = 4,
                          n_check: int = 8, tol: float = 1e-6) -> int | None:
    """Smallest k <= k_max such that f^k, followed by projection along orbits,
    returns every section point to its own component."""
    if sd.labels is None:
        raise ValueError("split the section into components first")
    if len(sd.points) == 0:
        return None
    N, rt = sd.N, sd.root_tol
    fsn = fs.normalized()
    pick = sd.points[np.linspace(0, len(sd.points) - 1, min(n_check, len(sd.points))).astype(int)]
    a = project_to_section(fs, f(pick), N, rt)
    b = project_to_section(fs, f(fsn(0.5 * fsn.ell, pick)), N, rt)
    if np.any(np.isnan(a)) or np.any(np.isnan(b)) or np.max(fs.metric(a, b)) > tol:
        raise ValueError("f does not preserve the orbits of the flow on the sampled points")
    tree, tr = _periodic_tree(sd.points, sd.periodic, sd.adjacency_radius or 0.0)
    Y = sd.points
    for k in range(1, k_max + 1):
        Y = project_to_section(fs, f(Y), N, rt)
        if np.any(np.isnan(Y)):
            return None
        d, nn = tree.query(tr(Y))
        if np.all(d <= (sd.adjacency_radius or tol)) and np.array_equal(sd.labels[nn], sd.labels):
            return k
    return None


# --------------------------------------------------------------------------
# test flows

def _clamp01(v):
    return np.clip(v, 0.0, 1.0)


def _stack(first, rest, x):
    """Assemble a broadcast state with ``first`` replacing coordinate 0."""
    shape = np.broadcast_shapes(first.shape, x[..., 0].shape)
    cols = [np.broadcast_to(first, shape)]
    cols += [np.broadcast_to(x[..., i], shape) for i in rest]
    return np.stack(cols, axis=-1)


def logistic_flow(reverse: bool = False, step: float = 1.0 / 1024) -> FlowSystem:
    """y' = y (3 - y) on [0, 3] x S^1 with g = clamp(y - 1, 0, 1)."""

    def flow(t, x):
        t = np.asarray(t, dtype=float)
        if reverse:
            t = -t
        y = x[..., 0]
        e = np.exp(-3.0 * np.abs(t))
        fwd = 3 * y / (y + (3 - y) * e)
        bwd = 3 * y * e / (3 - y + y * e)
        with np.errstate(invalid="ignore", divide="ignore"):
            yt = np.where(t >= 0, fwd, bwd)
        yt = np.where((y == 0) | (y == 3), y, yt)
        return _stack(yt, [1], x)

    return FlowSystem(2, flow, lambda x: _clamp01(x[..., 0] - 1.0), math.log(4.0) / 3,
                      boundary=lambda x: (x[..., 0] == 0) | (x[..., 0] == 3),
                      periodic=(False, True), step=step,
                      name="logistic-reversed" if reverse else "logistic")


def logistic_velocity_flow(dt: float = 1.0 / 256) -> FlowSystem:
    return from_velocity(lambda x: np.column_stack([x[:, 0] * (3 - x[:, 0]), np.zeros(len(x))]),
                         2, lambda x: _clamp01(x[..., 0] - 1.0), math.log(4.0) / 3, dt=dt,
                         periodic=(False, True), name="logistic-rk4")


def annulus2_flow(step: float = 1.0 / 1024) -> FlowSystem:
    """y' = sin^2(pi y) sgn(2 - y) on [0, 4] x S^1.

    The invariant circles y = 0..4 cut M_0 into four bands.  g is a bump on
    the outer bands (orbits in U_{0,0}) and rises to 1 at y = 2 from both
    sides, so the two middle bands lie in X_{0,1}.  y -> 4 - y conjugates the
    flow to itself and swaps the middle bands.
    """

    def flow(t, x):
        t = np.asarray(t, dtype=float)
        y = x[..., 0]
        k = np.minimum(np.floor(y), 3.0)
        fr = y - k
        inside = (fr > 0) & (fr < 1)
        sig = np.where(y < 2, 1.0, -1.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = 1.0 / np.tan(np.pi * np.where(inside, fr, 0.5)) - sig * np.pi * t
        yt = np.where(inside, k + (0.5 - np.arctan(z) / np.pi), y)
        return _stack(yt, [1], x)

    def g(x):
        y = x[..., 0]
        c = _clamp01((np.minimum(y, 4 - y) - 0.25) / 0.5)
        bump = (4 * c * (1 - c)) ** 2
        ramp = _clamp01((np.minimum(y, 4 - y) - 1.25) / 0.5)
        return np.where(np.minimum(y, 4 - y) < 1, bump, ramp)

    return FlowSystem(2, flow, g, 0.65, boundary=lambda x: (x[..., 0] == 0) | (x[..., 0] == 4),
                      periodic=(False, True), step=step, name="annulus2")


def annulus2_reflection(x):
    x = np.array(x, dtype=float)
    x[..., 0] = 4.0 - x[..., 0]
    return x


def vertical_flow(L: float = 1.0, center: float = 0.0, step: float = 1.0 / 1024) -> FlowSystem:
    """Unit vertical flow on T^2 x R with g = clamp((s - center + L) / 2L, 0, 1)."""

    def flow(t, x):
        t = np.asarray(t, dtype=float)
        return np.stack(np.broadcast_arrays(x[..., 0], x[..., 1], x[..., 2] + t), axis=-1)

    return FlowSystem(3, flow, lambda x: _clamp01((x[..., 2] - center + L) / (2 * L)), 2 * L,
                      periodic=(True, True, False), step=step, name="vertical")


def horizontal_flow(direction, step: float = 1.0 / 1024) -> FlowSystem:
    """Unit flow along a fixed base direction on T^2 x R with g = clamp(s)."""
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)

    def flow(t, x):
        t = np.asarray(t, dtype=float)
        return np.stack(np.broadcast_arrays(np.mod(x[..., 0] + d[0] * t, 1.0),
                                            np.mod(x[..., 1] + d[1] * t, 1.0), x[..., 2] + 0 * t),
                        axis=-1)

    return FlowSystem(3, flow, lambda x: _clamp01(x[..., 2]), 1.0, periodic=(True, True, False),
                      step=step, name="horizontal")


def _logit(s):
    with np.errstate(divide="ignore"):
        return np.log(s) - np.log1p(-s)


def _expit(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class MockPhcrossMap(SkewProduct):
    """A x (fiber contraction toward the graph s = c(x)) on T^2 x [0, 1].

    In the logit coordinate z = log(s / (1 - s)) the fiber map is affine,
    z -> logit c(A x) + kappa (z - logit c(x)), so the graph of c is
    invariant and attracting and s = 0, 1 are fixed.
    """

    def __init__(self, base: LinearToral | None = None, kappa: float = 0.05, amp: float = 0.1):
        self.base = base or cat_map()
        self.kappa = kappa
        self.amp = amp

    def c(self, x):
        x = np.asarray(x, dtype=float)
        return 0.5 + self.amp * np.sin(2 * np.pi * x[..., 0]) + 0.5 * self.amp * np.cos(2 * np.pi * x[..., 1])

    def c_grad(self, x):
        x = np.asarray(x, dtype=float)
        return np.stack([2 * np.pi * self.amp * np.cos(2 * np.pi * x[..., 0]),
                         -np.pi * self.amp * np.sin(2 * np.pi * x[..., 1])], axis=-1)

    def _lc(self, x):
        return _logit(self.c(x))

    def _lc_grad(self, x):
        c = self.c(x)
        return self.c_grad(x) / (c * (1 - c))[..., None]

    def vert(self, x, s):
        x = np.atleast_2d(x)
        with np.errstate(invalid="ignore"):
            z = self._lc(self.base(x)) + self.kappa * (_logit(np.asarray(s, float)) - self._lc(x))
        return _expit(z)

    def vert_ds(self, x, s):
        s = np.asarray(s, dtype=float)
        v = self.vert(x, s)
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.kappa * v * (1 - v) / (s * (1 - s))

    def vert_dx(self, x, s):
        x = np.atleast_2d(x)
        v = self.vert(x, s)
        dz = self._lc_grad(self.base(x)) @ self.base.matrix - self.kappa * self._lc_grad(x)
        return (v * (1 - v))[:, None] * dz

    def vert_inverse(self, x, t):
        x = np.atleast_2d(x)
        z = self._lc(x) + (_logit(np.asarray(t, float)) - self._lc(self.base(x))) / self.kappa
        return _expit(z)

    def invariant_graph(self, n: int) -> HeightGraph:
        return HeightGraph(self.c(grid_nodes(n)).reshape(n, n), {"source": "mock-exact"})


def mock_flow(a: float = 0.1, step: float = 1.0 / 1024) -> FlowSystem:
    """Unit flow in the logit fiber coordinate on T^2 x [0, 1]; g = clamp((s-a)/(1-2a))."""

    def flow(t, x):
        t = np.asarray(t, dtype=float)
        with np.errstate(divide="ignore"):
            s = _expit(_logit(x[..., 2]) + t)
        return np.stack(np.broadcast_arrays(x[..., 0], x[..., 1], s), axis=-1)

    ell = 2 * math.log((1 - a) / a)
    return FlowSystem(3, flow, lambda x: _clamp01((x[..., 2] - a) / (1 - 2 * a)), ell,
                      boundary=lambda x: (x[..., 2] == 0) | (x[..., 2] == 1),
                      periodic=(True, True, False), step=step, name="mock")


# --------------------------------------------------------------------------
# the pipeline

@dataclass
class PipelineReport:
    stages: dict = field(default_factory=dict)

    def to_dict(self):
        return self.stages


def phcross_pipeline(f: SkewProduct, fs: FlowSystem, N: int = 30, s0: float = 0.0,
                     seed_n: int = 32, grid_n: int = 128, k_max: int = 4,
                     root_tol: float = 1e-10, tol: float = 1e-10, max_iter: int = 500,
                     hypothesis_samples: int = 16):
    """Section, permutation period, dist_u check and graph refinement.

    The flow runs along the fibers, which are the unstable leaves of f^{-1}
    (equivalently, f contracts them).  Seeds sit at height ``s0`` over a
    seed_n x seed_n grid; the section found there is upsampled to grid_n and
    refined by the graph transform of f.  Returns (Lambda, PipelineReport).
    """
    rep = PipelineReport()
    nodes = grid_nodes(seed_n)
    seeds = np.column_stack([nodes, np.full(len(nodes), float(s0))])

    fsn = fs.normalized()
    classes = classify_many(fsn, seeds, horizon=N + 8.0)
    if any(c is None for c in classes):
        raise PipelineError("classification", "unclassified orbits: g never settles in {0,1}")
    pairs = [c.pair for c in classes]
    if (0, 1) not in pairs:
        raise PipelineError("classification", "no X_{0,1} orbits")
    span = max(c.span for c in classes)
    if span > fsn.ell + 2 * fsn.step:
        raise PipelineError("classification", f"transition span {span:.3g} exceeds ell")
    rep.stages["classification"] = {"seeds": len(seeds), "X01": pairs.count((0, 1)),
                                    "time_scale": fsn.time_scale, "max_span": span}

    idx = np.linspace(0, len(seeds) - 1, min(hypothesis_samples, len(seeds))).astype(int)
    img = classify_many(fsn, f(seeds[idx]), horizon=N + 8.0)
    bad = [i for i, c in zip(idx, img) if c is None or c.pair != pairs[i]]
    if bad:
        raise PipelineError("hypotheses", f"limits of g change under f at seeds {bad}")
    rep.stages["hypotheses"] = {"limit_compatibility_samples": len(idx)}

    sd = extract_section(fs, seeds, N, root_tol)
    if sd.sectionless:
        raise PipelineError("section", f"{len(sd.sectionless)} seeds have no crossing")
    if not np.allclose(sd.points[:, :2], wrap(seeds[sd.seed_index, :2]), atol=1e-12):
        raise PipelineError("section", "flow is not vertical; the section is not a graph")
    u = np.empty(len(seeds))
    u[sd.seed_index] = sd.points[:, 2]
    coarse = u.reshape(seed_n, seed_n)
    jump = max(np.max(np.abs(np.diff(coarse, axis=0))), np.max(np.abs(np.diff(coarse, axis=1))))
    sd = split_components(sd, 1.5 / seed_n + jump)
    rep.stages["section"] = {"points": len(sd), "components": sd.n_components,
                             "max_p_error": float(np.max(np.abs(sd.p_values - 0.5)))}

    k = check_f_compatibility(f, fs, sd, k_max)
    if k is None:
        raise PipelineError("compatibility", f"no iterate k <= {k_max} fixes the components")
    rep.stages["compatibility"] = {"k": k}

    S = HeightGraph(bilinear(coarse, grid_nodes(grid_n)).reshape(grid_n, grid_n),
                    {"source": "section", "seed_n": seed_n})
    op = GraphTransform(f, grid_n)
    d = dist_u(S, op(S, k), vertical_field(), step=1.0 / 256, stride=max(1, grid_n // 32))
    if not math.isfinite(d):
        raise PipelineError("dist_u", "dist_u(S, f^k S) is infinite")
    rep.stages["dist_u"] = {"value": d}

    Lam, tr = find_invariant_torus(f, S, tol=tol, max_iter=max_iter, op=op)
    if not tr.converged:
        raise PipelineError("refinement", f"graph transform did not converge ({tr.final_residual:.3g})")
    per = detect_periodic(Lam, f, k_max=k_max)
    rep.stages["refinement"] = {**tr.to_dict(), "period": per.period}
    Lam.provenance.update({"source": "phcross", "k": k})
    return Lam, rep
