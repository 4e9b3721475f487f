import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phds import cones, graph_transform as gt, maps
from phds.core import HeightGraph, PointCloud, constant_field


class Identity(maps.SkewProduct):
    base = maps.cat_map()

    def __call__(self, p):
        return np.atleast_2d(np.asarray(p, dtype=float)).copy()

    def jacobian(self, p):
        return np.broadcast_to(np.eye(3), (len(np.atleast_2d(p)), 3, 3)).copy()


@pytest.fixture(scope="module")
def A():
    return maps.cat_map()


@pytest.fixture(scope="module")
def product(A):
    return maps.ProductMap(A, 0.1)


@pytest.fixture(scope="module")
def samples3():
    rng = np.random.default_rng(0)
    return np.column_stack([rng.uniform(size=(300, 2)), rng.uniform(-1, 1, 300)])


@given(st.floats(0.01, 1.5), st.floats(0, 2 * np.pi))
def test_dualize_planar(theta, phi):
    d = np.array([np.cos(phi), np.sin(phi)])
    C = cones.circular_cone_field([[0.1, 0.2]], d, theta)
    D = cones.dualize(C)
    center, angle = D.circular_2d()
    assert abs(abs(center[0] @ d)) < 1e-12
    assert angle[0] == pytest.approx(np.pi / 2 - theta)
    back = cones.dualize(D)
    assert not back.dual
    np.testing.assert_array_equal(back.frames, C.frames)
    np.testing.assert_array_equal(back.slopes, C.slopes)


def test_dual_membership_just_outside():
    theta = 0.3
    C = cones.circular_cone_field([[0.0, 0.0]], [1.0, 0.0], theta)
    a = theta + 0.01
    v = np.array([[np.cos(a), np.sin(a)]])
    assert not C.contains(v)[0]
    assert cones.dualize(C).contains(v)[0]


def test_primal_dual_interiors_disjoint():
    rng = np.random.default_rng(1)
    C = cones.circular_cone_field(rng.uniform(size=(50, 3)), [0.0, 0.0, 1.0], 0.4)
    D = cones.dualize(C)
    v = rng.standard_normal((50, 3))
    assert not np.any((C.margin(v) > 0) & (D.margin(v) > 0))


def test_half_angle_bounds():
    with pytest.raises(ValueError):
        cones.circular_cone_field([[0.0, 0.0]], [1.0, 0.0], np.pi / 2)


def test_certify_product_adapted(product, samples3):
    rep = cones.certify_invariance(product, cones.AdaptedCones(product, m=3), samples3, m=3)
    assert rep.passed and rep.worst_margin > 0
    assert rep.ph_range_ok


def test_certify_product_circular_fails(product, samples3):
    # round cones around the vertical cannot satisfy (i) for a single iterate
    C = cones.circular_cone_field(samples3[:1], [0.0, 0.0, 1.0], 0.2)
    rep = cones.certify_invariance(product, cones.constant_cones(C, 0.3), samples3)
    assert not rep.passed


@pytest.mark.parametrize("rate", [0.3, 1.2])
def test_certify_identity_fails(samples3, rate):
    C = cones.circular_cone_field(samples3[:1], [0.0, 0.0, 1.0], 0.2)
    rep = cones.certify_invariance(Identity(), cones.constant_cones(C, rate), samples3)
    assert not rep.passed
    by = {r.condition: r for r in rep.results}
    if rate > 1:
        assert by["i"].violations == 0
        assert by["iii"].violations > 0 and by["iii"].violator is not None


def test_certify_region_guard(product, samples3):
    with pytest.raises(ValueError):
        cones.certify_invariance(product, cones.AdaptedCones(product, m=3), samples3, m=3,
                                 region=lambda p: np.abs(p[:, 2]) < 0.5)


def test_certification_report_json(product, samples3):
    d = cones.certify_invariance(product, cones.AdaptedCones(product, m=3), samples3, m=3).to_dict()
    assert {c["condition"] for c in d["conditions"]} == {"i", "ii", "iii"}
    for c in d["conditions"]:
        assert set(c) >= {"worst_margin", "violator", "samples"}


def test_shrinking_dual_keeps_pass(product, samples3):
    # wider primal cone = narrower dual cone: (ii)/(iii) test fewer vectors
    base = cones.AdaptedCones(product, m=3)

    def narrower_dual(points):
        C, lam = base(points)[:2]
        return cones.ConeField(C.points, C.frames, C.slopes * 1.5), lam

    r1 = cones.certify_invariance(product, base, samples3, m=3)
    r2 = cones.certify_invariance(product, narrower_dual, samples3, m=3)
    m1 = {r.condition: r.worst_margin for r in r1.results}
    m2 = {r.condition: r.worst_margin for r in r2.results}
    assert m2["ii"] >= m1["ii"] - 1e-12
    assert m2["iii"] >= m1["iii"] - 1e-12


def test_splitting_linear(A):
    rng = np.random.default_rng(2)
    est = cones.estimate_splitting(A, rng.uniform(size=(40, 2)))
    assert np.max(1 - np.abs(est.E_u @ A.e_u)) < 1e-10
    assert np.max(1 - np.abs(est.E_s @ A.e_s)) < 1e-10
    res = cones.equivariance_residual(A, est, cones.estimate_splitting(A, A(est.points)))
    assert max(res.values()) < 1e-3


def test_splitting_product(A, product, samples3):
    est = cones.estimate_splitting(product, samples3[:40])
    np.testing.assert_allclose(np.abs(est.E_s[:, 2]), 1, atol=1e-10)
    np.testing.assert_allclose(np.abs(est.E_c[:, :2] @ A.e_s), 1, atol=1e-10)
    np.testing.assert_allclose(np.abs(est.E_u[:, :2] @ A.e_u), 1, atol=1e-10)


def test_splitting_angles_converge(A):
    # nearby power-iteration depths agree geometrically better
    x = np.random.default_rng(3).uniform(size=(10, 2))
    f = maps.build_calzone().g
    prev = None
    gaps = []
    for n in (4, 8, 16):
        e = cones.estimate_splitting(f, x, n_forward=n, n_backward=n, check=False).E_u
        if prev is not None:
            gaps.append(np.max(1 - np.abs(np.sum(e * prev, axis=1))))
        prev = e
    assert gaps[1] < gaps[0]


def test_coneback_linear_unbounded(product):
    x = np.random.default_rng(4).uniform(size=(10, 2))
    x = np.column_stack([x, np.zeros(10)])
    assert cones.coneback_horizon(product, cones.AdaptedCones(product, m=3), 3, x) == 1.0


def test_coneback_calzone_monotone():
    f = maps.build_calzone()
    ad = cones.AdaptedCones(f, m=6)
    rng = np.random.default_rng(5)
    x = np.column_stack([(f.q + rng.uniform(-0.03, 0.03, (8, 2))) % 1, rng.uniform(-0.5, 0.5, 8)])
    r = [cones.coneback_horizon(f, ad, n, x, rng=np.random.default_rng(0)) for n in (1, 3)]
    assert r[1] > 0
    assert r[1] <= r[0]


def test_tangency_product_leaf_inside():
    A = maps.cat_map()
    S = HeightGraph.constant(16, 0.0)
    res = cones.tangency_test(S, maps.ProductMap(A, 0.1), constant_field(np.append(A.e_u, 0.0)))
    assert not res.passed and not res.leaf_ok


def test_tangency_single_point():
    A = maps.cat_map()
    res = cones.tangency_test(PointCloud(np.array([[0.1, 0.2, 0.3]]), "product"), None,
                              constant_field(np.append(A.e_u, 0.0)))
    assert res.passed


@pytest.mark.slow
def test_tangency_calzone_torus():
    f = maps.build_calzone()
    up, _ = gt.find_invariant_torus(f, HeightGraph.constant(64, 1.0))
    res = cones.tangency_test(up, f, gt.vertical_field(), cones=cones.AdaptedCones(f, m=6), stride=2)
    assert res.passed and res.tangent_fraction >= 0.99
