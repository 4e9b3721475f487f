"""The acceptance suite: one numbered property check per criterion.

Each check returns a CriterionResult; ``run_all`` evaluates them in order,
sharing the expensive calzone objects (basin, tori) through a Context.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.optimize import brentq

from . import cones, core, fuller, graph_transform as gt, maps, semiconj


@dataclass
class CriterionResult:
    number: int
    title: str
    passed: bool
    detail: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        info = ", ".join(f"{k}={_fmt(v)}" for k, v in self.detail.items())
        return f"[{tag}] criterion {self.number:2d} {self.title}: {info}"

    def to_dict(self):
        return {"number": self.number, "title": self.title, "passed": self.passed,
                "detail": {k: _jsonable(v) for k, v in self.detail.items()}}


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.3g}"
    return str(v)


def _jsonable(v):
    if isinstance(v, (np.floating, float)):
        return float(v)
    if isinstance(v, (np.integer, int)) and not isinstance(v, bool):
        return int(v)
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


class Context:
    """Lazily built objects shared between criteria."""

    def __init__(self, params: maps.CalzoneParams | None = None, grid_n: int = 256,
                 fine_n: int = 512, seed: int = 0, threads: int = 1):
        self.params = params or maps.CalzoneParams()
        self.grid_n = grid_n
        self.fine_n = fine_n
        self.rng = np.random.default_rng(seed)
        self.threads = threads

    @cached_property
    def f(self) -> maps.CalzoneMap:
        return maps.build_calzone(self.params)

    def torus(self, n: int, sign: float = 1.0):
        key = ("torus", n, sign)
        if key not in self.__dict__:
            self.__dict__[key] = gt.find_invariant_torus(self.f, core.HeightGraph.constant(n, sign))
        return self.__dict__[key]

    @cached_property
    def fine_basin(self) -> maps.BasinPartition:
        return maps.compute_basin(self.f.g, grid_n=self.fine_n, workers=self.threads)

    @cached_property
    def adapted(self) -> cones.AdaptedCones:
        return cones.AdaptedCones(self.f, m=6)


# --------------------------------------------------------------------------
# criteria

def criterion_1(ctx: Context) -> CriterionResult:
    f = ctx.f
    b, lam = f.beta, f.lam
    C = b.C
    errs = {
        "beta(0)": abs(float(b(0.0))),
        "beta(+-1)": max(abs(float(b(1.0)) - 1), abs(float(b(-1.0)) + 1)),
        "beta'(+-1)": max(abs(float(b.deriv(1.0)) - lam), abs(float(b.deriv(-1.0)) - lam)),
        "beta'(0)": abs(float(b.deriv(0.0)) - b.beta0),
    }
    s = np.concatenate([np.linspace(C, 3 * C, 200), -np.linspace(C, 3 * C, 200)])
    errs["linear tail"] = float(np.max(np.abs(b(s) - lam * s)))
    pts = ctx.rng.uniform(-1.2 * C, 1.2 * C, 1000)
    h = 1e-5
    fd = (b(pts + h) - b(pts - h)) / (2 * h)
    rel_beta = float(np.max(np.abs(fd - b.deriv(pts)) / np.abs(b.deriv(pts))))
    a = f.alpha
    x = core.wrap(a.q + ctx.rng.uniform(-a.r_out * 1.2, a.r_out * 1.2, (1000, 2)))
    ha = 1e-7
    gfd = np.column_stack([(a(x + ha * e) - a(x - ha * e)) / (2 * ha) for e in np.eye(2)])
    ga = a.gradient(x)
    # relative to the gradient's scale: alpha' vanishes at both radii
    rel_alpha = float(np.max(np.linalg.norm(gfd - ga, axis=1)) / np.max(np.linalg.norm(ga, axis=1)))
    ok = max(errs.values()) < 1e-9 and rel_beta < 1e-6 and rel_alpha < 1e-6
    return CriterionResult(1, "beta/alpha construction", ok,
                           {"max_constraint_error": max(errs.values()),
                            "beta_fd_rel": rel_beta, "alpha_fd_rel": rel_alpha})


def criterion_2(ctx: Context) -> CriterionResult:
    f = ctx.f
    P = np.array([[*f.q, 0.0], [*f.q, 1.0], [*f.q, -1.0]])
    img = f(P)
    err = float(np.max(np.abs(np.column_stack([core.centered(img[:, :2] - P[:, :2]),
                                               img[:, 2] - P[:, 2]]))))
    return CriterionResult(2, "fixed points (q,0), (q,+-1)", err < 1e-12, {"max_error": err})


def criterion_3(ctx: Context) -> CriterionResult:
    n = ctx.grid_n
    up, rp = ctx.torus(n, 1.0)
    um, rm = ctx.torus(n, -1.0)
    sym = float(np.max(np.abs(um.u + up.u)))
    res = gt.invariance_residual(ctx.f, up, at="preimages")
    ok = (rp.converged and rp.iterations <= 500 and rp.final_residual < 1e-8
          and float(up.u.min()) >= -1e-12 and sym < 1e-10 and res < 1e-6)
    return CriterionResult(3, f"invariant tori at {n}^2", ok,
                           {"iterations": rp.iterations, "residual": rp.final_residual,
                            "min_u_plus": float(up.u.min()), "sym_error": sym,
                            "invariance_residual": res})


def criterion_4(ctx: Context) -> CriterionResult:
    n = ctx.fine_n
    up, _ = ctx.torus(n, 1.0)
    basin = ctx.fine_basin
    mism = gt.zero_set_mismatch(up, basin.in_K, 3e-8)
    return CriterionResult(4, f"T+ zero set vs K at {n}^2", mism < 0.02,
                           {"mismatch_area": mism, "K_area": basin.area(maps.K_CELL),
                            "zero_set_area": float(np.mean(np.abs(up.u) < 3e-8))})


def region_samples(ctx: Context, n_cells: int = 6250, levels: int = 33) -> np.ndarray:
    """Points between T_- and T_+: random cells at heights theta * u_+."""
    n = ctx.grid_n
    up, _ = ctx.torus(n, 1.0)
    cells = ctx.rng.integers(0, n * n, n_cells)
    th = np.linspace(-1, 1, levels)[ctx.rng.integers(0, levels, n_cells)]
    x = core.grid_nodes(n)[cells]
    P = np.column_stack([x, th * up.u.ravel()[cells]])
    q = ctx.f.q
    extra = np.array([[*q, 0.0], [*q, 1.0], [*q, -1.0], [q[0] + 0.01, q[1], 0.0]])
    return np.vstack([P, extra])


def criterion_5(ctx: Context, n_cells: int = 6250) -> CriterionResult:
    P = region_samples(ctx, n_cells)
    rep = cones.certify_invariance(ctx.f, ctx.adapted, P, m=ctx.adapted.m, n_dir=16, rng=ctx.rng)
    total = sum(r.violations for r in rep.results)
    ok = rep.passed and rep.worst_margin > 0 and rep.total_samples >= 100_000
    return CriterionResult(5, "cone certification on X", ok,
                           {"samples": rep.total_samples, "violations": total,
                            "worst_margin": rep.worst_margin, "iterate_m": rep.m,
                            **{f"margin_{r.condition}": r.worst_margin for r in rep.results}})


def criterion_6(ctx: Context) -> CriterionResult:
    up, _ = ctx.torus(ctx.grid_n, 1.0)
    res = cones.tangency_test(up, ctx.f, gt.vertical_field(), 5.0, cones=ctx.adapted, stride=4)
    return CriterionResult(6, "tangency test on T+", res.passed,
                           {"leaf_ok": res.leaf_ok, "tangent_fraction": res.tangent_fraction,
                            "samples": res.n_samples})


def criterion_7(ctx: Context) -> CriterionResult:
    up, _ = ctx.torus(ctx.grid_n, 1.0)
    um, _ = ctx.torus(ctx.grid_n, -1.0)
    p1 = gt.detect_periodic(up, ctx.f, 3)
    p2 = gt.detect_periodic(up, maps.reflect(ctx.f), 3)
    sep, _ = gt.pairwise_separation([up, um])
    ok = p1.period == 1 and p2.period == 2 and sep > 0
    return CriterionResult(7, "periodicity machinery", ok,
                           {"k_f": p1.period, "k_reflected": p2.period, "separation": sep})


def logistic_p_exact(y0: float, N: int = 30) -> float:
    """p for the logistic test flow from the closed-form orbit integral.

    Along y(t) = 3 y0 e^{3t} / (3 - y0 + y0 e^{3t}), int y dt = log(3 - y0 + y0 e^{3t}).
    """
    if y0 <= 0:
        return 0.0
    if y0 >= 3:
        return 1.0 - 2.0 ** -N

    def Iy(t):
        return math.log(3 - y0 + y0 * math.exp(3 * t))

    t1 = math.log((3 - y0) / (2 * y0)) / 3
    t2 = math.log(2 * (3 - y0) / y0) / 3

    def integral(a, b):
        tot = 0.0
        lo, hi = max(a, t1), min(b, t2)
        if hi > lo:
            tot += Iy(hi) - Iy(lo) - (hi - lo)
        lo = max(a, t2)
        if b > lo:
            tot += b - lo
        return tot

    return sum(2.0 ** -n * integral(-n, n) / (2 * n) for n in range(1, N + 1))


def criterion_8(ctx: Context) -> CriterionResult:
    fs = fuller.logistic_flow(step=1.0 / 2048)
    N = 30
    seeds = np.column_stack([np.full(8, 0.8), np.arange(8) / 8])
    sd = fuller.extract_section(fs, seeds, N, 1e-10)
    ys = np.linspace(1.0, 2.0, 2001)
    pv = np.array([logistic_p_exact(y, N) for y in ys]) - 0.5
    j = int(np.flatnonzero(np.sign(pv[:-1]) != np.sign(pv[1:]))[0])
    y_scan = brentq(lambda y: logistic_p_exact(y, N) - 0.5, ys[j], ys[j + 1], xtol=1e-14)
    y_err = float(np.max(np.abs(sd.points[:, 0] - y_scan)))

    fs_c = fuller.logistic_flow(step=1.0 / 512)
    x = np.column_stack([ctx.rng.uniform(0.05, 2.95, 100), ctx.rng.uniform(0, 1, 100)])
    classes = fuller.classify_many(fs_c, x)
    x01 = np.array([c is not None and c.pair == (0, 1) for c in classes])
    changes = fuller.sign_changes_along_orbit(fs_c, x[x01], N)
    once = int(np.sum(changes == 1))

    d = fuller.flow_derivative_p(fs_c, x[x01], N)
    n = np.arange(1, N + 1)
    bound = d.brackets / (2 * n)
    in_range = bool(np.all((bound >= 0) & (bound <= 1 / (2 * n) + 1e-9)))
    stab = np.array([max(-c.t_back, c.t_fwd) for c, k in zip(classes, x01) if k])
    past = n[None, :] > stab[:, None]
    eq = bool(np.all(np.abs(bound - 1 / (2 * n))[past] < 1e-12))
    ok = y_err < 1e-6 and once == int(x01.sum()) == 100 and in_range and eq
    return CriterionResult(8, "Fuller 1D oracle", ok,
                           {"y_star": float(sd.points[0, 0]), "y_err": y_err,
                            "x01_orbits": int(x01.sum()), "single_crossing": once,
                            "terms_in_range": in_range, "terms_equal_past_stabilization": eq})


def criterion_9(ctx: Context, N: int = 15) -> CriterionResult:
    fs = fuller.logistic_flow(step=1.0 / 256)
    x = np.column_stack([ctx.rng.uniform(0, 3, 1000), ctx.rng.uniform(0, 1, 1000)])
    gap = np.abs(fuller.section_function_p(fs, x, N) - fuller.section_function_p(fs, x, 2 * N))
    worst = float(gap.max())
    return CriterionResult(9, "truncation bound", worst <= 2.0 ** -N,
                           {"N": N, "max_gap": worst, "bound": 2.0 ** -N})


def criterion_10(ctx: Context) -> CriterionResult:
    mock = fuller.MockPhcrossMap()
    Lm, _ = fuller.phcross_pipeline(mock, fuller.mock_flow(), N=30, s0=0.5, seed_n=16, grid_n=256)
    mock_err = float(np.max(np.abs(Lm.u - mock.invariant_graph(256).u)))
    n = 128
    Lc, rep = fuller.phcross_pipeline(ctx.f, fuller.vertical_flow(center=0.25), N=30, s0=0.0,
                                      seed_n=16, grid_n=n)
    direct, _ = ctx.torus(n, 1.0)
    dh = core.hausdorff_distance(Lc.cloud(), direct.cloud())
    ok = mock_err < 1e-6 and dh < 2.0 / n
    return CriterionResult(10, "phcross pipeline", ok,
                           {"mock_sup_error": mock_err, "calzone_dH": dh, "bound": 2.0 / n,
                            "k": rep.stages["compatibility"]["k"]})


def criterion_11(ctx: Context) -> CriterionResult:
    A = maps.cat_map()
    lin = semiconj.linear_lift(A)
    ev0 = semiconj.make_evaluator(lin)
    x = ctx.rng.uniform(-3, 3, (1000, 2))
    exact = bool(np.array_equal(semiconj.compute_Hu(ev0, lin, x), x @ ev0.pi_u))

    G = semiconj.perturbed_lift(A)
    ev = semiconj.make_evaluator(G, N_terms=40)
    comm = float(np.max(semiconj.commutation_residual(ev, G, x)))
    z = ctx.rng.integers(-3, 4, (1000, 2)).astype(float)
    lat = float(np.max(np.abs(semiconj.compute_Hu(ev, G, x + z) - semiconj.compute_Hu(ev, G, x)
                              - z @ ev.pi_u)))
    x4 = ctx.rng.uniform(0, 1, (10_000, 2))
    dev = float(np.max(np.abs(semiconj.compute_Hu(ev, G, x4) - x4 @ ev.pi_u)))
    x2 = x[:100]
    brute = float(np.max(np.abs(semiconj.brute_force_Hu(ev, G, x2, 30) - semiconj.compute_Hu(ev, G, x2))))
    ok = exact and comm < 1e-8 and lat < 1e-10 and dev <= ev.R_bound and brute < 1e-6
    return CriterionResult(11, "semiconjugacy", ok,
                           {"linear_exact": exact, "commutation": comm, "lattice": lat,
                            "max_dev": dev, "R_bound": ev.R_bound, "brute_force": brute})


def criterion_12(ctx: Context) -> CriterionResult:
    a = core.PointCloud(np.column_stack([ctx.rng.uniform(0, 1, (1000, 2)),
                                         ctx.rng.normal(0, 0.5, 1000)]), "product")
    b = core.PointCloud(np.column_stack([ctx.rng.uniform(0, 1, (1000, 2)),
                                         ctx.rng.normal(0, 0.5, 1000)]), "product")
    fast, slow = core.hausdorff_distance(a, b), core.hausdorff_bruteforce(a, b)

    def swirl(p):
        v = np.column_stack([-p[:, 1], p[:, 0]])
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    order = core.endpoint_convergence_order(np.array([1.0, 0.0]), swirl, 1.0)
    ok = fast == slow and order >= 2
    return CriterionResult(12, "metric oracles", ok,
                           {"hausdorff": fast, "bruteforce": slow, "leaf_order": order})


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6,
            criterion_7, criterion_8, criterion_9, criterion_10, criterion_11, criterion_12]


def run_all(ctx: Context | None = None, only=None, log=print) -> list[CriterionResult]:
    ctx = ctx or Context()
    out = []
    for i, fn in enumerate(CRITERIA, start=1):
        if only and i not in only:
            continue
        t = time.perf_counter()
        try:
            r = fn(ctx)
        except Exception as exc:  # a crash is a failure of that criterion
            r = CriterionResult(i, fn.__name__, False, {"error": f"{type(exc).__name__}: {exc}"})
        r.seconds = time.perf_counter() - t
        if log:
            log(r.line())
        out.append(r)
    return out
