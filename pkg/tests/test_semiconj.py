import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phds import graph_transform as gt, maps, semiconj
from phds.core import HeightGraph, LeafArc

PHI = (1 + np.sqrt(5)) / 2


@pytest.fixture(scope="module")
def A():
    return maps.cat_map()


@pytest.fixture(scope="module")
def pert(A):
    G = semiconj.perturbed_lift(A)
    return G, semiconj.make_evaluator(G, N_terms=40)


@pytest.fixture(scope="module")
def da():
    G = semiconj.da_lift(maps.build_calzone().g)
    return G, semiconj.make_evaluator(G, N_terms=40)


def _arc(points):
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    return LeafArc(points, np.concatenate([[0.0], np.cumsum(seg)]))


def test_functional_examples(A):
    pu, ps = semiconj.unstable_functional(A)
    np.testing.assert_allclose(pu, np.array([PHI, 1]) / np.hypot(PHI, 1), atol=1e-14)
    v = np.random.default_rng(0).standard_normal((100, 2))
    np.testing.assert_allclose((v @ A.matrix.T) @ pu / (v @ pu), (3 + np.sqrt(5)) / 2, rtol=1e-12)
    np.testing.assert_allclose((v @ A.matrix.T) @ ps / (v @ ps), (3 - np.sqrt(5)) / 2, rtol=1e-9)
    assert np.zeros(2) @ pu == 0
    assert np.array([1.0, 0.0]) @ pu == pu[0]
    assert np.linalg.norm(pu) == pytest.approx(1) and np.linalg.norm(ps) == pytest.approx(1)


def test_lift_invariants(pert, A):
    G, _ = pert
    rng = np.random.default_rng(1)
    x = rng.uniform(-2, 2, (200, 2))
    z = rng.integers(-4, 5, (200, 2)).astype(float)
    np.testing.assert_allclose(G(x + z), G(x) + z @ A.matrix.T, atol=1e-12)
    np.testing.assert_allclose(G.inverse(G(x)), x, atol=1e-12)
    h = 1e-6
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        np.testing.assert_allclose((G(x + e) - G(x - e)) / (2 * h), G.jacobian(x)[:, :, k], atol=1e-7)


def test_linear_is_projection(A):
    G = semiconj.linear_lift(A)
    ev = semiconj.make_evaluator(G)
    x = np.random.default_rng(2).uniform(-3, 3, (100, 2))
    np.testing.assert_array_equal(semiconj.compute_Hu(ev, G, x), x @ ev.pi_u)
    np.testing.assert_array_equal(semiconj.compute_Hs(ev, G, x), x @ ev.pi_s)
    assert ev.R_bound == 0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_lattice_equivariance(seed):
    A = maps.cat_map()
    G = semiconj.perturbed_lift(A)
    ev = semiconj.make_evaluator(G, N_terms=40)
    rng = np.random.default_rng(seed)
    x = rng.uniform(-3, 3, (50, 2))
    z = rng.integers(-5, 6, (50, 2)).astype(float)
    z = z[np.linalg.norm(z, axis=1) <= 5]
    x = x[: len(z)]
    Hu = semiconj.compute_Hu(ev, G, x)
    Hs = semiconj.compute_Hs(ev, G, x)
    assert np.max(np.abs(semiconj.compute_Hu(ev, G, x + z) - Hu - z @ ev.pi_u)) < 1e-10
    assert np.max(np.abs(semiconj.compute_Hs(ev, G, x + z) - Hs - z @ ev.pi_s)) < 1e-10


def test_commutation(pert):
    G, ev = pert
    x = np.random.default_rng(3).uniform(-2, 2, (1000, 2))
    tail = ev.lam ** -ev.N_terms * ev.sup_pu_p * 10
    assert np.max(semiconj.commutation_residual(ev, G, x)) < max(tail, 1e-12)
    Hs = semiconj.compute_Hs(ev, G, x)
    assert np.max(np.abs(semiconj.compute_Hs(ev, G, G(x)) - ev.mu * Hs)) < 1e-12


def test_commutation_doubling(pert):
    G, ev = pert
    x = np.random.default_rng(4).uniform(0, 1, (500, 2))
    N = 4
    r1 = np.max(semiconj.commutation_residual(ev, G, x, N))
    r2 = np.max(semiconj.commutation_residual(ev, G, x, 2 * N))
    assert r2 <= r1
    assert r1 / r2 == pytest.approx(ev.lam ** N, rel=0.5)


def test_R_bound_holds(pert):
    G, ev = pert
    x = np.random.default_rng(5).uniform(0, 1, (10_000, 2))
    assert np.max(np.abs(semiconj.compute_Hu(ev, G, x) - x @ ev.pi_u)) <= ev.R_bound


def test_series_matches_brute_force(pert):
    G, ev = pert
    x = np.random.default_rng(6).uniform(-1, 1, (100, 2))
    brute = semiconj.brute_force_Hu(ev, G, x, 30)
    assert np.max(np.abs(brute - semiconj.compute_Hu(ev, G, x, N_terms=30))) < 1e-9


def test_constancy_linear(A):
    G = semiconj.linear_lift(A)
    ev = semiconj.make_evaluator(G)
    res = semiconj.stable_leaf_constancy(G, ev, [0.3, 0.6], 1.0)
    assert res.spread < 1e-10
    assert res.arc.length == pytest.approx(1.0)


def test_constancy_da(da):
    G, ev = da
    res = semiconj.stable_leaf_constancy(G, ev, [0.3, 0.6], 1.0)
    assert res.spread < 1e-6


def test_pushed_spread(pert):
    G, ev = pert
    res = semiconj.stable_leaf_constancy(G, ev, [0.2, 0.7], 1.0)
    s0 = res.spread
    back = semiconj.pushed_spread(G, ev, res.arc.points, -5)
    fwd = semiconj.pushed_spread(G, ev, res.arc.points, 5)
    assert back <= ev.lam ** -5 * s0 + 1e-12
    assert fwd == pytest.approx(ev.lam ** 5 * s0, rel=1e-3, abs=1e-9)


def test_length_volume_linear(A):
    pu, ps = semiconj.unstable_functional(A)
    f3 = semiconj.SkewLift(semiconj.linear_lift(A))
    J = _arc(np.outer(np.linspace(0, 0.1, 11), np.append(A.e_u, 0.0)))
    t = semiconj.length_volume_diagnostic(f3, J, 5, pu, ps).as_array()
    np.testing.assert_allclose(t[1:, 1] / t[:-1, 1], A.lambda_u, rtol=1e-9)
    np.testing.assert_allclose(t[1:, 2] / t[:-1, 2], A.lambda_u, rtol=1e-9)
    assert np.all(t[:, 4] < 1e-12)


def test_length_volume_collar(A):
    pu, ps = semiconj.unstable_functional(A)
    f3 = semiconj.SkewLift(semiconj.linear_lift(A), maps.ProductMap(A, 0.1), inverse=True)
    J = _arc(np.column_stack([np.full(11, 0.3), np.full(11, 0.6), np.linspace(20, 20.01, 11)]))
    t = semiconj.length_volume_diagnostic(f3, J, 4, pu, ps).as_array()
    np.testing.assert_allclose(t[1:, 1] / t[:-1, 1], 10, rtol=1e-9)
    np.testing.assert_allclose(t[:, 3], t[0, 3], atol=1e-12)


def test_length_volume_calzone_bounded(A):
    f = maps.build_calzone()
    up, _ = gt.find_invariant_torus(f, HeightGraph.constant(32, 1.0))
    h = float(up.interp(np.array([[0.01, 0.0]]))[0])
    pu, ps = semiconj.unstable_functional(A)
    f3 = semiconj.SkewLift(semiconj.da_lift(f.g), maps.reflect(f), inverse=True)
    J = _arc(np.column_stack([np.full(21, 0.01), np.zeros(21), np.linspace(-h, h, 21)]))
    t = semiconj.length_volume_diagnostic(f3, J, 5, pu, ps).as_array()
    assert np.all(t[:, 1] <= 2 * h + 1e-9)


def test_length_volume_truncates(A):
    pu, ps = semiconj.unstable_functional(A)
    f3 = semiconj.SkewLift(semiconj.linear_lift(A))
    J = _arc(np.outer(np.linspace(0, 1, 11), np.append(A.e_u, 0.0)))
    table = semiconj.length_volume_diagnostic(f3, J, 20, pu, ps, max_points=2000)
    assert table.truncated and len(table.rows) < 21
