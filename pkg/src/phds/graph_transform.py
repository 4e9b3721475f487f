"""Invariant tori as height graphs via the forward graph transform.

For a skew product f(x, s) = (g(x), vert(x, s)) the image of the graph of u
is the graph of

    u'(y) = vert(g^{-1} y, u(g^{-1} y)),

and a fixed point of u -> u' is an f-invariant graph.  Off-grid values of u
come from periodic bilinear interpolation, so one step is a sparse gather
followed by a pointwise fiber map.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import (DU_CUTOFF, DirectionField, HeightGraph, PointCloud, bilinear,
                   bilinear_weights, constant_field, dist_u, grid_nodes,
                   hausdorff_distance)
from .maps import SkewProduct

__all__ = [
    "HeightGraph", "GraphTransform", "TransformReport", "transform_step",
    "find_invariant_torus", "invariance_residual", "detect_periodic",
    "pairwise_separation", "vertical_field", "normalization_iterate",
]


def vertical_field() -> DirectionField:
    """Unstable line field of f^{-1} for any skew product: the fiber direction."""
    return constant_field([0.0, 0.0, 1.0])


class GraphTransform:
    """The operator u -> u' for a fixed map and grid, with preimages cached."""

    def __init__(self, f: SkewProduct, n: int):
        self.f = f
        self.n = n
        self.nodes = grid_nodes(n)
        self.pre = f.base.inverse(self.nodes)
        self._idx, self._w = bilinear_weights(n, self.pre)
        self._fiber = f.fiber_map(self.pre)

    def apply(self, u: np.ndarray) -> np.ndarray:
        s = np.sum(u.ravel()[self._idx] * self._w, axis=1)
        return self._fiber(s).reshape(self.n, self.n)

    def __call__(self, S: HeightGraph, k: int = 1) -> HeightGraph:
        u = S.u
        for _ in range(k):
            u = self.apply(u)
        return HeightGraph(u, {**S.provenance, "transformed": S.provenance.get("transformed", 0) + k})


def transform_step(f: SkewProduct, u: HeightGraph, op: GraphTransform | None = None) -> HeightGraph:
    op = op or GraphTransform(f, u.n)
    return op(u)


@dataclass
class TransformReport:
    iterations: int
    residuals: list = field(default_factory=list)
    final_residual: float = math.inf
    converged: bool = False
    tol: float = 0.0

    def to_dict(self):
        return {"iterations": self.iterations, "final_residual": self.final_residual,
                "converged": self.converged, "tol": self.tol,
                "residual_history": list(map(float, self.residuals))}


def find_invariant_torus(f: SkewProduct, u0: HeightGraph, tol: float = 1e-8,
                         max_iter: int = 500, op: GraphTransform | None = None,
                         collar: float | None = None):
    """Iterate the graph transform until sup|u_{k+1} - u_k| < tol."""
    if collar is not None and np.max(np.abs(u0.u)) > collar:
        raise ValueError("initial graph leaves the collar |s| <= C")
    op = op or GraphTransform(f, u0.n)
    u = u0.u.copy()
    report = TransformReport(0, tol=tol)
    for k in range(1, max_iter + 1):
        v = op.apply(u)
        r = float(np.max(np.abs(v - u)))
        report.residuals.append(r)
        u = v
        report.iterations = k
        if r < tol:
            report.converged = True
            break
    report.final_residual = report.residuals[-1] if report.residuals else 0.0
    prov = {**u0.provenance, "iterations": report.iterations,
            "residual": report.final_residual}
    return HeightGraph(u, prov), report


def invariance_residual(f: SkewProduct, S: HeightGraph, at: str = "preimages") -> float:
    """sup_x |u(g(x)) - vert(x, u(x))|.

    ``at='preimages'`` samples x = g^{-1}(node), where u(g(x)) is a stored
    node value and only u(x) is interpolated.  ``at='nodes'`` samples the
    grid nodes themselves and interpolates u(g(x)) instead.
    """
    if at == "preimages":
        x = f.base.inverse(S.nodes())
        lhs = S.u.ravel()
    elif at == "nodes":
        x = S.nodes()
        lhs = S.interp(f.base(x))
    else:
        raise ValueError("at must be 'preimages' or 'nodes'")
    rhs = f.vert(x, S.interp(x))
    return float(np.max(np.abs(lhs - rhs)))


def graph_image_cloud(f: SkewProduct, S: HeightGraph) -> PointCloud:
    """f applied to the node points of the graph (not re-gridded)."""
    return PointCloud(f(S.cloud().points), "product")


def normalization_iterate(f: SkewProduct, S: HeightGraph, target: float = 2.0,
                          m_max: int = 12) -> int | None:
    """Smallest m with the fiber expansion of f^{-m} above ``target`` on S.

    The fiber direction is the unstable direction of f^{-1}; along the graph
    its expansion over m backward steps is the product of 1 / vert_ds along
    the backward orbit.  Returns None if no m <= m_max works.
    """
    p = S.cloud().points
    logs = np.zeros(len(p))
    for m in range(1, m_max + 1):
        p = f.inverse(p)
        logs -= np.log(np.abs(f.vert_ds(p[:, :2], p[:, 2])))
        if np.min(logs) > math.log(target):
            return m
    return None


@dataclass
class PeriodicResult:
    period: int | None
    distances: dict = field(default_factory=dict)
    refinement_errors: dict = field(default_factory=dict)
    normalization_m: int | None = None

    def __bool__(self):
        return self.period is not None


def detect_periodic(S: HeightGraph, f: SkewProduct, k_max: int = 4,
                    leaf_field: DirectionField | None = None, tol: float = 1e-8,
                    match_tol: float = 1e-6, max_iter: int = 500,
                    du_step: float = 1.0 / 256) -> PeriodicResult:
    """Smallest k <= k_max for which S is recovered from f^k(S).

    A candidate k needs dist_u(S, f^k S) < 1/2 along the leaf field (default:
    the fiber direction), and the fiber-contraction refinement of f^k(S)
    under f^k must converge back to S within ``match_tol`` in sup norm.
    """
    leaf_field = leaf_field or vertical_field()
    op = GraphTransform(f, S.n)
    out = PeriodicResult(None, normalization_m=normalization_iterate(f, S))
    Sk = S
    for k in range(1, k_max + 1):
        Sk = op(Sk)
        d = dist_u(S, Sk, leaf_field, cutoff=DU_CUTOFF, step=du_step)
        out.distances[k] = d
        if not d < 0.5:
            continue
        u = Sk.u.copy()
        for _ in range(max_iter):
            v = u
            for _ in range(k):
                v = op.apply(v)
            r = np.max(np.abs(v - u))
            u = v
            if r < tol:
                break
        err = float(np.max(np.abs(u - S.u)))
        out.refinement_errors[k] = err
        if err < match_tol:
            out.period = k
            return out
    return out


def pairwise_separation(tori: list[HeightGraph]):
    """Hausdorff distance matrix of the graph point clouds and its off-diagonal min."""
    if len(tori) < 2:
        raise ValueError("need at least two tori")
    clouds = [T.cloud() for T in tori]
    m = len(clouds)
    D = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1, m):
            D[i, j] = D[j, i] = hausdorff_distance(clouds[i], clouds[j])
    off = D[~np.eye(m, dtype=bool)]
    return float(off.min()), D


def zero_set_mismatch(S: HeightGraph, K_mask: np.ndarray, thresh: float) -> float:
    """Area fraction of the symmetric difference of {|u| < thresh} and K."""
    if K_mask.shape != S.u.shape:
        raise ValueError("mask and graph grids differ")
    return float(np.mean((np.abs(S.u) < thresh) != K_mask))


def set_invariance_distance(f: SkewProduct, S: HeightGraph) -> float:
    """d_H between f(nodes of S) and the graph, evaluated on node clouds."""
    return hausdorff_distance(graph_image_cloud(f, S), S.cloud())


def bilinear_at(S: HeightGraph, x) -> np.ndarray:
    return bilinear(S.u, x)
