"""The derived-from-Anosov surface map, the fiber profiles and the calzone skew product.

Conventions: points of T^2 are (k, 2) arrays, points of T^2 x R are (k, 3)
arrays whose last column is the fiber coordinate s.  Every map exposes
``__call__``, ``inverse`` and ``jacobian`` acting on such arrays.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from numpy.polynomial import Polynomial
from scipy.interpolate import PPoly

from .core import centered, grid_nodes, torus_dist, wrap

# --------------------------------------------------------------------------
# smooth transitions

_S5 = Polynomial([0, 0, 0, 10, -15, 6])


def smoothstep(t):
    """Quintic smoothstep 10t^3 - 15t^4 + 6t^5, clamped to [0, 1]."""
    t = np.clip(t, 0.0, 1.0)
    return t * t * t * (10.0 + t * (-15.0 + 6.0 * t))


def smoothstep_deriv(t):
    t = np.asarray(t, dtype=float)
    inside = (t > 0) & (t < 1)
    return np.where(inside, 30.0 * t * t * (1.0 - t) ** 2, 0.0)


def monotone_solve(fun, target, lo, hi, tol=1e-15, maxit=200):
    """Vectorised safeguarded Newton for increasing scalar functions.

    ``fun(s)`` returns (value, derivative).  ``[lo, hi]`` must bracket the
    root of fun(s) = target.  Newton steps that leave the bracket are
    replaced by bisection.  Returns (root, converged mask).
    """
    target = np.asarray(target, dtype=float)
    lo = np.array(np.broadcast_to(lo, target.shape), dtype=float)
    hi = np.array(np.broadcast_to(hi, target.shape), dtype=float)
    s = 0.5 * (lo + hi)
    done = np.zeros(target.shape, dtype=bool)
    for _ in range(maxit):
        val, der = fun(s)
        r = val - target
        lo = np.where(r < 0, s, lo)
        hi = np.where(r > 0, s, hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            s_new = s - r / der
        bad = ~np.isfinite(s_new) | (s_new <= lo) | (s_new >= hi)
        s_new = np.where(bad, 0.5 * (lo + hi), s_new)
        s_new = np.where(r == 0, s, s_new)
        done = np.abs(s_new - s) <= tol * (1.0 + np.abs(s))
        s = s_new
        if np.all(done):
            break
    return s, done


class NewtonFailure(RuntimeError):
    pass


# --------------------------------------------------------------------------
# linear toral automorphisms

@dataclass(frozen=True)
class LinearToral:
    """Hyperbolic automorphism of T^2 given by an integer matrix."""

    matrix: np.ndarray
    lambda_u: float
    lambda_s: float
    e_u: np.ndarray
    e_s: np.ndarray

    @property
    def inv_matrix(self) -> np.ndarray:
        a, b, c, d = self.matrix.ravel()
        det = a * d - b * c
        return np.array([[d, -b], [-c, a]], dtype=float) / det

    def lift(self, x):
        return np.asarray(x, dtype=float) @ self.matrix.T

    def __call__(self, x):
        return wrap(self.lift(x))

    def inverse(self, y):
        return wrap(np.asarray(y, dtype=float) @ self.inv_matrix.T)

    def jacobian(self, x):
        x = np.atleast_2d(x)
        return np.broadcast_to(self.matrix, (len(x), 2, 2)).copy()

    def eigen_coords(self, z):
        """Coordinates of displacement(s) z in the (e_u, e_s) frame."""
        z = np.asarray(z, dtype=float)
        basis = np.column_stack([self.e_u, self.e_s])
        return z @ np.linalg.inv(basis).T


def make_linear(matrix) -> LinearToral:
    m = np.asarray(matrix)
    if m.shape != (2, 2):
        raise ValueError("matrix must be 2x2")
    if not np.all(np.equal(np.mod(m, 1), 0)):
        raise ValueError("matrix entries must be integers")
    m = m.astype(float)
    det = round(np.linalg.det(m))
    if abs(det) != 1:
        raise ValueError("matrix must have determinant +-1")
    vals, vecs = np.linalg.eig(m)
    if np.any(np.abs(vals.imag) > 0) or np.any(np.abs(np.abs(vals.real) - 1) < 1e-12):
        raise ValueError("not hyperbolic: eigenvalue on the unit circle")
    vals = vals.real
    vecs = vecs.real
    order = np.argsort(-np.abs(vals))
    lu, ls = vals[order]
    eu, es = vecs[:, order[0]], vecs[:, order[1]]
    eu = eu / np.linalg.norm(eu)
    es = es / np.linalg.norm(es)
    if eu[0] < 0 or (eu[0] == 0 and eu[1] < 0):
        eu = -eu
    # (e_u, e_s) positively oriented
    if eu[0] * es[1] - eu[1] * es[0] < 0:
        es = -es
    # the closed-form trace/determinant eigenvalues are more accurate than eig
    tr = m[0, 0] + m[1, 1]
    disc = math.sqrt(tr * tr - 4 * det)
    lu_exact = (tr + math.copysign(disc, tr)) / 2
    return LinearToral(m, lu_exact, det / lu_exact, eu, es)


def cat_map() -> LinearToral:
    return make_linear([[2, 1], [1, 1]])


# --------------------------------------------------------------------------
# derived-from-Anosov deformation

def _ppoly_from_pieces(breaks, pieces) -> PPoly:
    """PPoly from numpy Polynomials written in the local variable (x - break)."""
    deg = max(p.degree() for p in pieces)
    c = np.zeros((deg + 1, len(pieces)))
    for j, p in enumerate(pieces):
        coef = p.coef[::-1]
        c[deg + 1 - len(coef):, j] = coef
    return PPoly(c, np.asarray(breaks, dtype=float))


def _step_poly(width: float, v0: float, v1: float) -> Polynomial:
    """Polynomial going from v0 to v1 over [0, width] with flat ends."""
    return v0 + (v1 - v0) * _S5(Polynomial([0, 1.0 / width]))


def _integrate_pieces(breaks, dpieces, c0=0.0):
    """Antiderivative pieces with continuity across breakpoints."""
    out = []
    acc = c0
    for j, p in enumerate(dpieces):
        P = p.integ() + acc
        out.append(P)
        acc = P(breaks[j + 1] - breaks[j])
    return out, acc


@dataclass
class CenterProfile:
    """Odd map phi(s) on the center line with phi'(0) = mu.

    phi(s) = ls*s for |s| >= R and phi' >= c_min everywhere, so that the
    local dynamics on the center line has a repelling fixed point at 0 and
    two attracting fixed points at +-s_star.
    """

    ls: float
    mu: float
    R: float
    c_min: float
    poly: PPoly = field(repr=False, default=None)
    dpoly: PPoly = field(repr=False, default=None)
    s_star: float = 0.0

    @classmethod
    def build(cls, ls, mu, R, c_min, w_down=0.05, w_up=0.2):
        if not 0 < c_min < ls:
            raise ValueError("c_min must lie in (0, lambda_s)")
        if mu <= 1:
            raise ValueError("deform_strength must exceed 1 to make q repelling")
        kappa = (ls - c_min) / (mu - ls)
        a = (kappa * (1 - w_down - w_up / 2) - w_down * (1 - kappa) / 2) / (1 + kappa)
        if a <= 0:
            raise ValueError("deform_strength too large for the requested c_min")
        # eta' on [0, 1] in the scaled variable t = s / R
        breaks = np.array([0.0, a, a + w_down, 1 - w_up, 1.0])
        dp = [Polynomial([1.0]), _step_poly(w_down, 1.0, -kappa),
              Polynomial([-kappa]), _step_poly(w_up, -kappa, 0.0)]
        # phi'(s) = ls + (mu - ls) eta'(s / R), in the unscaled variable
        sb = breaks * R
        dphi = [ls + (mu - ls) * p(Polynomial([0, 1.0 / R])) for p in dp]
        phi, end = _integrate_pieces(sb, dphi)
        obj = cls(ls, mu, R, c_min)
        obj.poly = _ppoly_from_pieces(sb, phi)
        obj.dpoly = _ppoly_from_pieces(sb, dphi)
        if abs(end - ls * R) > 1e-12 * R:
            raise ValueError("center profile does not close up")
        # nonzero fixed point of phi
        ss = np.linspace(0, R, 20001)[1:]
        d = obj(ss) - ss
        k = int(np.flatnonzero(d < 0)[0])
        from scipy.optimize import brentq
        obj.s_star = brentq(lambda s: float(obj(np.array([s]))[0] - s), ss[k - 1], ss[k],
                            xtol=1e-15)
        return obj

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        a = np.abs(s)
        v = np.where(a < self.R, self.poly(np.minimum(a, self.R)), self.ls * a)
        return np.sign(s) * v

    def deriv(self, s):
        a = np.abs(np.asarray(s, dtype=float))
        return np.where(a < self.R, self.dpoly(np.minimum(a, self.R)), self.ls)


class DASurfaceMap:
    """g = A o h, where h pushes along e_s inside a box around q.

    In eigen-coordinates (u, s) centred at q,
        g(u, s) = (lambda_u u, lambda_s s + rho(u) (phi(s) - lambda_s s)),
    so g agrees with A off the box |u| < R_u, |s| < R_s, the lines u = const
    are permuted (E^c = e_s exactly), and Dg(q) = diag(lambda_u, mu).
    The box is inscribed in the disk of radius ``deform_radius`` about q.
    """

    def __init__(self, base: LinearToral, q=(0.0, 0.0), deform_radius: float = 0.4,
                 deform_strength: float = 2.2, c_min: float = 0.25,
                 u_fraction: float = 0.35, flat_fraction: float = 0.4):
        if not 0 < deform_radius < 0.5:
            raise ValueError("deform_radius must lie in (0, 1/2)")
        self.base = base
        self.q = wrap(np.asarray(q, dtype=float))
        if torus_dist(base(self.q), self.q) > 1e-12:
            raise ValueError("q must be a fixed point of the linear map")
        if base.lambda_s <= 0:
            raise ValueError("the construction needs a positive stable eigenvalue")
        self.deform_radius = deform_radius
        self.deform_strength = deform_strength
        self.R_u = u_fraction * deform_radius
        self.R_s = 0.999 * math.sqrt(deform_radius ** 2 - self.R_u ** 2)
        self.flat = flat_fraction * self.R_u
        self.center = CenterProfile.build(base.lambda_s, deform_strength, self.R_s, c_min)
        self._P = np.column_stack([base.e_u, base.e_s])
        self._Pinv = np.linalg.inv(self._P)

    # local coordinates -------------------------------------------------
    def local(self, x):
        z = centered(np.asarray(x, dtype=float) - self.q)
        us = z @ self._Pinv.T
        return z, us[..., 0], us[..., 1]

    def rho(self, u):
        return 1.0 - smoothstep((np.abs(u) - self.flat) / (self.R_u - self.flat))

    def rho_deriv(self, u):
        t = (np.abs(u) - self.flat) / (self.R_u - self.flat)
        return -np.sign(u) * smoothstep_deriv(t) / (self.R_u - self.flat)

    def _push(self, u, s):
        """Displacement of h along e_s (in s units)."""
        ls = self.base.lambda_s
        return self.rho(u) * (self.center(s) - ls * s) / ls

    # map ------------------------------------------------------------------
    def displacement(self, x):
        """p(x) = G(x) - A x for the lift G; periodic in x."""
        _, u, s = self.local(x)
        d = self._push(u, s)
        return (d[..., None] * self.base.e_s) @ self.base.matrix.T

    def lift(self, x):
        x = np.asarray(x, dtype=float)
        return x @ self.base.matrix.T + self.displacement(x)

    def __call__(self, x):
        return wrap(self.lift(x))

    def inverse(self, y, return_status=False):
        y = np.atleast_2d(np.asarray(y, dtype=float))
        z = self.base.inverse(y)
        zc, u, t = self.local(z)
        inside = (np.abs(u) < self.R_u) & (np.abs(t) < self.R_s)
        out = z.copy()
        ok = np.ones(len(y), dtype=bool)
        if np.any(inside):
            ui, ti = u[inside], t[inside]
            ls = self.base.lambda_s
            r = self.rho(ui)

            def fun(s):
                val = s + r * (self.center(s) - ls * s) / ls
                der = 1.0 + r * (self.center.deriv(s) - ls) / ls
                return val, der

            # h' lies in [c_min / ls, mu / ls] along e_s
            a = ls / self.deform_strength
            b = ls / self.center.c_min
            lo = np.minimum(a * ti, b * ti)
            hi = np.maximum(a * ti, b * ti)
            s, conv = monotone_solve(fun, ti, lo - 1e-300, hi + 1e-300)
            ok[inside] = conv
            local = ui[:, None] * self.base.e_u + s[:, None] * self.base.e_s
            out[inside] = wrap(self.q + local)
        if return_status:
            return out, ok
        if not np.all(ok):
            raise NewtonFailure("inverse of the DA map did not converge")
        return out

    def jacobian(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        _, u, s = self.local(x)
        ls = self.base.lambda_s
        lu = self.base.lambda_u
        r = self.rho(u)
        b = self.rho_deriv(u) * (self.center(s) - ls * s)
        c = ls + r * (self.center.deriv(s) - ls)
        J = np.zeros((len(x), 2, 2))
        J[:, 0, 0] = lu
        J[:, 1, 0] = b
        J[:, 1, 1] = c
        return self._P @ J @ self._Pinv

    def min_expansion(self, x):
        """Smallest singular value of Dg at each point."""
        return np.linalg.svd(self.jacobian(x), compute_uv=False)[:, -1]


def make_da(base: LinearToral, q=(0.0, 0.0), radius: float = 0.4, strength: float = 2.2,
            c_min: float = 0.25, check_n: int = 128) -> DASurfaceMap:
    """Build the DA map and verify it on a sample grid."""
    g = DASurfaceMap(base, q, radius, strength, c_min)
    x = grid_nodes(check_n) + 0.5 / check_n
    J = g.jacobian(x)
    det = np.linalg.det(J)
    if np.min(np.abs(det)) < 1e-3:
        raise ValueError("deformation too strong: Jacobian degenerates")
    # E^c = e_s is invariant; its rate must stay below the quotient rate lambda_u
    rate_c = np.linalg.norm(J @ base.e_s, axis=-1)
    if np.max(rate_c) >= base.lambda_u:
        raise ValueError("deform_strength must stay below lambda_u for weak domination")
    ev = np.linalg.eigvals(g.jacobian(g.q[None, :])[0])
    if np.min(np.abs(ev)) <= 1:
        raise ValueError("q is not repelling")
    return g


# --------------------------------------------------------------------------
# fiber profiles

@dataclass
class BetaProfile:
    """Odd C^2 increasing map of R with fixed points -1, 0, 1.

    beta'(0) = beta0, beta'(+-1) = lam and beta(s) = lam s for |s| >= C.
    The derivative is a piecewise polynomial built from smoothstep pieces
    and beta is its exact antiderivative.
    """

    lam: float
    C: float
    beta0: float
    poly: PPoly = field(repr=False, default=None)
    dpoly: PPoly = field(repr=False, default=None)
    delta: float = 0.0

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        a = np.abs(s)
        v = np.where(a < self.C, self.poly(np.minimum(a, self.C)), self.lam * a)
        return np.sign(s) * v

    def deriv(self, s):
        a = np.abs(np.asarray(s, dtype=float))
        return np.where(a < self.C, self.dpoly(np.minimum(a, self.C)), self.lam)

    @property
    def knots(self):
        return self.poly.x

    @property
    def min_slope(self) -> float:
        return min(self.delta, self.lam)

    @property
    def max_slope(self) -> float:
        return max(self.beta0, self.lam)


def make_beta(lam: float = 0.1, C: float = 15.0, beta0: float = 1.5,
              upper_bound: float = math.inf) -> BetaProfile:
    if not 0 < lam < 0.5:
        raise ValueError("lambda must lie in (0, 1/2)")
    if not 1 < beta0 < upper_bound:
        raise ValueError("beta0 must lie in (1, min |Dg(q) v|)")
    if C <= 1:
        raise ValueError("C must exceed 1")
    # on [0, 1]: beta' = lam + (beta0 - lam) S with S = 1 then a smooth drop to 0
    m = (1 - lam) / (beta0 - lam)
    if m > 0.5:
        a = 2 * m - 1
        b0 = [0.0, a, 1.0]
        d0 = [Polynomial([beta0]), _step_poly(1 - a, beta0, lam)]
    else:
        w = 2 * m
        b0 = [0.0, w, 1.0]
        d0 = [_step_poly(w, beta0, lam), Polynomial([lam])]
    # on [1, C]: beta' = lam - (lam - delta) B, B a plateau bump
    w1 = min(1.0, (C - 1) / 4)
    delta = lam - (1 - lam) / (C - 1 - w1)
    if delta <= 0:
        raise ValueError(
            f"infeasible beta: monotone beta with beta(1) = 1 and beta(s) = lam*s beyond C "
            f"needs lam*C > 1 with room for the transition (lam={lam}, C={C})")
    b1 = [1.0, 1.0 + w1, C - w1, C]
    d1 = [_step_poly(w1, lam, delta), Polynomial([delta]), _step_poly(w1, delta, lam)]
    breaks = np.array(b0 + b1[1:])
    dpieces = d0 + d1
    pieces, end = _integrate_pieces(breaks, dpieces)
    beta = BetaProfile(lam, C, beta0)
    beta.poly = _ppoly_from_pieces(breaks, pieces)
    beta.dpoly = _ppoly_from_pieces(breaks, dpieces)
    beta.delta = delta
    if abs(end - lam * C) > 1e-12 * C:
        raise ValueError("beta profile does not meet the linear collar")
    return beta


@dataclass
class AlphaBump:
    """alpha = 1 on the r_in disk about q, 0 outside the r_out disk."""

    q: np.ndarray
    r_in: float
    r_out: float

    def radius(self, x):
        return torus_dist(x, self.q)

    def __call__(self, x):
        r = np.asarray(self.radius(x))
        return 1.0 - smoothstep((r - self.r_in) / (self.r_out - self.r_in))

    def gradient(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        z = centered(x - self.q)
        r = np.linalg.norm(z, axis=-1)
        dr = -smoothstep_deriv((r - self.r_in) / (self.r_out - self.r_in)) / (self.r_out - self.r_in)
        safe = np.where(r > 0, r, 1.0)
        return (dr / safe)[:, None] * z


def make_alpha(q=(0.0, 0.0), r_in: float = 0.02, r_out: float = 0.045) -> AlphaBump:
    if not 0 < r_in < r_out < 0.5:
        raise ValueError("radii must satisfy 0 < r_in < r_out < 1/2")
    return AlphaBump(wrap(np.asarray(q, dtype=float)), r_in, r_out)


# --------------------------------------------------------------------------
# skew products over T^2

class SkewProduct:
    """f(x, s) = (g(x), vert(x, s)) with vert strictly increasing in s."""

    base = None

    def vert(self, x, s):
        raise NotImplementedError

    def vert_ds(self, x, s):
        raise NotImplementedError

    def vert_dx(self, x, s):
        raise NotImplementedError

    def vert_inverse(self, x, t):
        raise NotImplementedError

    def __call__(self, p):
        p = np.atleast_2d(np.asarray(p, dtype=float))
        x, s = p[:, :2], p[:, 2]
        return np.column_stack([self.base(x), self.vert(x, s)])

    def inverse(self, p):
        p = np.atleast_2d(np.asarray(p, dtype=float))
        x = self.base.inverse(p[:, :2])
        return np.column_stack([x, self.vert_inverse(x, p[:, 2])])

    def jacobian(self, p):
        p = np.atleast_2d(np.asarray(p, dtype=float))
        x, s = p[:, :2], p[:, 2]
        J = np.zeros((len(p), 3, 3))
        J[:, :2, :2] = self.base.jacobian(x)
        J[:, 2, :2] = self.vert_dx(x, s)
        J[:, 2, 2] = self.vert_ds(x, s)
        return J

    def iterate(self, p, n: int):
        for _ in range(n):
            p = self(p)
        return p

    def fiber_map(self, x):
        """s -> vert(x, s) for fixed base points, with x-dependent data cached."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return lambda s: self.vert(x, s)


class ProductMap(SkewProduct):
    """(x, s) -> (B x, lam s)."""

    def __init__(self, base, lam: float):
        self.base = base
        self.lam = lam

    def vert(self, x, s):
        return self.lam * np.asarray(s, dtype=float)

    def vert_ds(self, x, s):
        return np.full(np.shape(s), self.lam)

    def vert_dx(self, x, s):
        return np.zeros(np.shape(x))

    def vert_inverse(self, x, t):
        return np.asarray(t, dtype=float) / self.lam


class CalzoneMap(SkewProduct):
    """f(x, s) = (g(x), (1 - alpha(x)) lam s + alpha(x) beta(s))."""

    def __init__(self, g: DASurfaceMap, alpha: AlphaBump, beta: BetaProfile, lam: float):
        self.base = g
        self.g = g
        self.alpha = alpha
        self.beta = beta
        self.lam = lam

    @property
    def q(self):
        return self.g.q

    def vert(self, x, s):
        a = self.alpha(x)
        s = np.asarray(s, dtype=float)
        return (1.0 - a) * self.lam * s + a * self.beta(s)

    def vert_ds(self, x, s):
        a = self.alpha(x)
        return (1.0 - a) * self.lam + a * self.beta.deriv(s)

    def fiber_map(self, x):
        a = self.alpha(np.atleast_2d(x))
        m = np.flatnonzero(a > 0)
        am = a[m]
        lam = self.lam

        def fn(s):
            s = np.asarray(s, dtype=float)
            out = lam * s
            sm = s[m]
            out[m] = (1.0 - am) * lam * sm + am * self.beta(sm)
            return out

        return fn

    def vert_dx(self, x, s):
        s = np.asarray(s, dtype=float)
        return self.alpha.gradient(x) * (self.beta(s) - self.lam * s)[:, None]

    def vert_inverse(self, x, t):
        t = np.asarray(t, dtype=float)
        a = self.alpha(x)
        out = t / self.lam
        m = a > 0
        if np.any(m):
            am, tm = a[m], t[m]

            def fun(s):
                return ((1 - am) * self.lam * s + am * self.beta(s),
                        (1 - am) * self.lam + am * self.beta.deriv(s))

            lo_slope, hi_slope = self.beta.min_slope, self.beta.max_slope
            lo = np.minimum(tm / lo_slope, tm / hi_slope)
            hi = np.maximum(tm / lo_slope, tm / hi_slope)
            s, ok = monotone_solve(fun, tm, lo - 1e-300, hi + 1e-300)
            if not np.all(ok):
                raise NewtonFailure("fiber inverse did not converge")
            out[m] = s
        return out


class ReflectedMap(SkewProduct):
    """R o f with R(x, s) = (x, -s)."""

    def __init__(self, inner: SkewProduct):
        self.inner = inner
        self.base = inner.base

    def vert(self, x, s):
        return -self.inner.vert(x, s)

    def vert_ds(self, x, s):
        return -self.inner.vert_ds(x, s)

    def vert_dx(self, x, s):
        return -self.inner.vert_dx(x, s)

    def vert_inverse(self, x, t):
        return self.inner.vert_inverse(x, -np.asarray(t, dtype=float))

    def fiber_map(self, x):
        inner = self.inner.fiber_map(x)
        return lambda s: -inner(s)


def reflect(f: SkewProduct) -> ReflectedMap:
    return ReflectedMap(f)


def assemble_f(g: DASurfaceMap, alpha: AlphaBump, beta: BetaProfile, lam: float,
               basin: "BasinPartition | None" = None, check_n: int = 128) -> CalzoneMap:
    if abs(beta.lam - lam) > 0:
        raise ValueError("collar mismatch: beta.lam differs from lambda")
    if not 0 < lam < 0.5:
        raise ValueError("lambda must lie in (0, 1/2)")
    x = grid_nodes(check_n) + 0.5 / check_n
    sigma = g.min_expansion(np.vstack([x, g.q[None, :]]))
    if np.min(sigma) <= 2 * lam:
        raise ValueError(f"|Dg v| > 2 lambda fails: min singular value {np.min(sigma):.4g}")
    ev = np.abs(np.linalg.eigvals(g.jacobian(g.q[None, :])[0]))
    if beta.beta0 >= np.min(ev):
        raise ValueError("beta0 must stay below the weakest expansion of Dg(q)")
    if basin is not None:
        margin = basin.disk_margin(alpha.r_out)
        if margin <= 0:
            raise ValueError("alpha support is not inside the computed basin of q")
    return CalzoneMap(g, alpha, beta, lam)


@dataclass
class CalzoneParams:
    matrix: tuple = ((2, 1), (1, 1))
    lam: float = 0.1
    C: float = 15.0
    beta0: float = 1.5
    deform_radius: float = 0.4
    deform_strength: float = 2.2
    c_min: float = 0.25
    r_in: float = 0.02
    r_out: float = 0.045


def build_calzone(params: CalzoneParams | None = None) -> CalzoneMap:
    p = params or CalzoneParams()
    if not 0 < p.lam < 0.5:
        raise ValueError("lambda must lie in (0, 1/2)")
    A = make_linear(p.matrix)
    g = make_da(A, radius=p.deform_radius, strength=p.deform_strength, c_min=p.c_min)
    upper = float(np.min(g.min_expansion(g.q[None, :])))
    beta = make_beta(p.lam, p.C, p.beta0, upper)
    alpha = make_alpha(g.q, p.r_in, p.r_out)
    return assemble_f(g, alpha, beta, p.lam)


# --------------------------------------------------------------------------
# basin of repulsion

B_CELL, K_CELL, UNDECIDED = 1, 0, 2


@dataclass
class BasinPartition:
    n: int
    labels: np.ndarray  # (n, n) of K_CELL / B_CELL / UNDECIDED at nodes (i/n, j/n)
    q: np.ndarray
    entry_time: np.ndarray
    core_radius: float = 0.0  # radius of a disk about q proven to lie in B(q)

    @property
    def in_basin(self):
        return self.labels == B_CELL

    @property
    def in_K(self):
        return self.labels == K_CELL

    def area(self, label) -> float:
        return float(np.mean(self.labels == label))

    def disk_margin(self, r: float) -> float:
        return self.core_radius - r


def _backward_status(g: DASurfaceMap, x, max_iter: int, tol: float, stay: int):
    """Entry step of the backward orbit into the tol-ball of q (-1 if none).

    A point counts as entered only if it is still inside the ball for
    ``stay`` further backward steps.  Points are retired once decided.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float)).copy()
    k = len(x)
    entry = np.full(k, -1)
    undecided = np.zeros(k, dtype=bool)
    idx = np.arange(k)
    first = np.full(k, -1)
    for it in range(max_iter + stay + 1):
        near = np.linalg.norm(centered(x - g.q), axis=1) < tol
        f = first[idx]
        f = np.where(near & (f < 0), it, f)
        f = np.where(~near, -1, f)
        first[idx] = f
        confirmed = (f >= 0) & (it - f >= stay)
        entry[idx[confirmed]] = f[confirmed]
        retire = confirmed | ((f < 0) & (it >= max_iter))
        keep = ~retire
        idx, x = idx[keep], x[keep]
        if len(idx) == 0:
            break
        x, ok = g.inverse(x, return_status=True)
        if not np.all(ok):
            undecided[idx[~ok]] = True
            idx, x = idx[ok], x[ok]
    labels = np.where(entry >= 0, B_CELL, K_CELL)
    labels[undecided] = UNDECIDED
    return labels, entry


def core_radius(g: DASurfaceMap) -> float:
    """Radius of a disk about q contained in the rectangle |u| < flat, |s| < s_star.

    That rectangle is backward invariant and contracts onto q, so it lies in B(q).
    """
    return min(g.flat, g.center.s_star)


def compute_basin(g: DASurfaceMap, q=None, grid_n: int = 512, max_iter: int = 200,
                  tol: float = 1e-3, stay: int = 5, workers: int = 1) -> BasinPartition:
    """Label grid nodes by whether g^{-n}(x) enters and stays in the tol-ball of q.

    Rows of the grid are split into ``workers`` contiguous blocks processed
    in a thread pool; each node's label depends only on its own orbit, so
    the result does not depend on ``workers``.
    """
    qq = g.q if q is None else wrap(np.asarray(q, dtype=float))
    if torus_dist(qq, g.q) > 1e-12:
        raise ValueError("q must be the repelling fixed point of g")
    if tol >= core_radius(g):
        raise ValueError("tol must be smaller than the verified core radius")
    nodes = grid_nodes(grid_n)
    if workers <= 1:
        labels, entry = _backward_status(g, nodes, max_iter, tol, stay)
    else:
        blocks = np.array_split(nodes, workers)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda b: _backward_status(g, b, max_iter, tol, stay), blocks))
        labels = np.concatenate([p[0] for p in parts])
        entry = np.concatenate([p[1] for p in parts])
    return BasinPartition(grid_n, labels.reshape(grid_n, grid_n), qq,
                          entry.reshape(grid_n, grid_n), core_radius(g))


def classify_points(g: DASurfaceMap, points, max_iter: int = 200, tol: float = 1e-3,
                    exact: bool = False) -> np.ndarray:
    """B_CELL / K_CELL labels for arbitrary points.

    With ``exact=True`` the points must be given as rationals; their backward
    orbits are tracked in exact arithmetic while they stay where g is linear,
    which keeps periodic orbits of A periodic instead of drifting off.
    """
    if not exact:
        labels, _ = _backward_status(g, np.asarray(points, dtype=float), max_iter, tol, 5)
        return labels
    Ainv = [[Fraction(int(round(v))) for v in row] for row in g.base.inv_matrix]
    out = []
    for pt in points:
        x = [Fraction(pt[0]) % 1, Fraction(pt[1]) % 1]
        label = K_CELL
        for it in range(max_iter):
            xf = np.array([float(x[0]), float(x[1])])
            if torus_dist(xf, g.q) < tol:
                label = B_CELL
                break
            z = [(Ainv[0][0] * x[0] + Ainv[0][1] * x[1]) % 1,
                 (Ainv[1][0] * x[0] + Ainv[1][1] * x[1]) % 1]
            _, u, s = g.local(np.array([[float(z[0]), float(z[1])]]))
            if g.rho(u)[0] > 0 and abs(s[0]) < g.R_s:
                # the next step is nonlinear: finish in floating point
                label = int(classify_points(g, xf[None, :], max_iter - it, tol)[0])
                break
            x = z
        out.append(label)
    return np.array(out)


# --------------------------------------------------------------------------
# non-wandering set check

@dataclass
class RecurrenceReport:
    fixed_points_recurrent: bool
    K_recurrent_fraction: float
    K_samples: int
    basin_nonrecurrent_fraction: float
    basin_samples: int
    eps: float
    horizon: int


def first_return(f: SkewProduct, p, eps: float, horizon: int, skip: int = 1):
    """Smallest n in [skip, horizon] with d(f^n p, p) < eps, or -1."""
    p = np.atleast_2d(np.asarray(p, dtype=float))
    x = p.copy()
    ret = np.full(len(p), -1)
    for n in range(1, horizon + 1):
        x = f(x)
        d = np.sqrt(torus_dist(x[:, :2], p[:, :2]) ** 2 + (x[:, 2] - p[:, 2]) ** 2)
        hit = (d < eps) & (ret < 0) & (n >= skip)
        ret[hit] = n
    return ret


def nw_recurrence_check(f: CalzoneMap, basin: BasinPartition, eps: float = 0.02,
                        horizon: int = 3000, n_samples: int = 50,
                        rng: np.random.Generator | None = None) -> RecurrenceReport:
    """Orbit search for the recurrent set (K x 0) u ({q} x {-1, 0, 1})."""
    rng = rng or np.random.default_rng(0)
    q = f.q
    fixed = np.array([[q[0], q[1], s] for s in (-1.0, 0.0, 1.0)])
    fixed_ok = bool(np.all(first_return(f, fixed, 1e-12, 1) == 1))
    nodes = grid_nodes(basin.n)
    kidx = np.flatnonzero(basin.in_K.ravel())
    kidx = rng.choice(kidx, size=min(n_samples, len(kidx)), replace=False)
    kp = np.column_stack([nodes[kidx], np.zeros(len(kidx))])
    k_ret = first_return(f, kp, eps, horizon)
    # basin samples kept clear of q and, through a short entry time, of K;
    # points near K shadow it and do come back
    r = torus_dist(nodes, q)
    bidx = np.flatnonzero(basin.in_basin.ravel() & (r > 4 * eps) &
                          (basin.entry_time.ravel() <= 5) & (basin.entry_time.ravel() >= 0))
    bidx = rng.choice(bidx, size=min(n_samples, len(bidx)), replace=False)
    bp = np.column_stack([nodes[bidx], np.zeros(len(bidx))])
    b_ret = first_return(f, bp, eps, horizon)
    return RecurrenceReport(fixed_ok, float(np.mean(k_ret > 0)), len(kp),
                            float(np.mean(b_ret < 0)), len(bp), eps, horizon)
