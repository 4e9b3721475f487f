import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phds import graph_transform as gt, maps
from phds.core import HeightGraph, hausdorff_bruteforce

N = 64


@pytest.fixture(scope="module")
def f():
    return maps.build_calzone()


@pytest.fixture(scope="module")
def tori(f):
    up, rp = gt.find_invariant_torus(f, HeightGraph.constant(N, 1.0))
    um, rm = gt.find_invariant_torus(f, HeightGraph.constant(N, -1.0))
    return up, rp, um, rm


@pytest.fixture(scope="module")
def product():
    return maps.ProductMap(maps.cat_map(), 0.1)


def test_step_zero_graph(f):
    out = gt.transform_step(f, HeightGraph.constant(N, 0.0))
    assert np.all(out.u == 0)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31))
def test_step_product_scales(product, seed):
    u = HeightGraph(np.random.default_rng(seed).uniform(-1, 1, (16, 16)))
    out = gt.transform_step(product, u)
    assert np.abs(out.u).max() == pytest.approx(0.1 * np.abs(u.u).max(), rel=1e-12)


def test_torus_plus(f, tori):
    up, rp, _, _ = tori
    assert rp.converged and rp.final_residual < 1e-8
    assert up.u.min() >= 0
    assert up.u[0, 0] == pytest.approx(1.0, abs=1e-12)
    assert len(rp.residuals) == rp.iterations


def test_torus_symmetry(tori):
    up, _, um, _ = tori
    assert np.max(np.abs(up.u + um.u)) < 1e-10


def test_torus_fixed_point(f, tori):
    up = tori[0]
    again = gt.transform_step(f, up)
    assert np.max(np.abs(again.u - up.u)) < 1e-8
    assert gt.invariance_residual(f, up) < 1e-6


def test_monotone_from_above(f):
    u = HeightGraph.constant(32, 1.0)
    for _ in range(6):
        nxt = gt.transform_step(f, u)
        assert np.all(nxt.u <= u.u + 1e-15) and np.all(nxt.u >= 0)
        u = nxt


def test_set_invariance_first_order(f, tori):
    # the node cloud of a steep graph has vertical gaps of many spacings, so
    # the distance is tested for first-order decay rather than a fixed bound
    d64 = gt.set_invariance_distance(f, tori[0])
    up128, _ = gt.find_invariant_torus(f, HeightGraph.constant(2 * N, 1.0))
    d128 = gt.set_invariance_distance(f, up128)
    assert d64 * N < 16 and d128 * 2 * N < 16
    assert d128 < 0.6 * d64


def test_product_contraction_iterations(product):
    u0 = HeightGraph(np.random.default_rng(1).uniform(-1, 1, (32, 32)))
    tol = 1e-8
    S, rep = gt.find_invariant_torus(product, u0, tol=tol)
    assert rep.converged
    assert np.abs(S.u).max() < tol
    assert rep.iterations <= math.ceil(math.log(tol) / math.log(0.1)) + 1


def test_nonconvergence_reported(f):
    _, rep = gt.find_invariant_torus(f, HeightGraph.constant(16, 1.0), max_iter=2)
    assert not rep.converged and rep.iterations == 2


def test_periodic_examples(f, tori):
    up = tori[0]
    assert gt.detect_periodic(up, f, 3).period == 1
    assert gt.detect_periodic(up, maps.reflect(f), 3).period == 2


def test_periodic_none_for_shifted_product(product):
    S = HeightGraph.constant(16, 0.4)
    res = gt.detect_periodic(S, product, 3)
    assert res.period is None


def test_separation(tori):
    up, _, um, _ = tori
    sep, D = gt.pairwise_separation([up, um])
    # nearest points need not lie vertically above each other in the product
    # metric, so the value is checked against brute force and the vertical bound
    assert sep == hausdorff_bruteforce(up.cloud(), um.cloud())
    assert 0 < sep <= 2 * up.u.max()
    assert D.shape == (2, 2) and D[0, 1] == D[1, 0]
    assert gt.pairwise_separation([up, up])[0] == 0
    zero = HeightGraph.constant(N, 0.0)
    z = gt.pairwise_separation([up, zero])[0]
    assert z == hausdorff_bruteforce(up.cloud(), zero.cloud())
    assert 0 < z <= up.u.max()


def test_zero_set_mismatch_bounds(tori):
    up = tori[0]
    K = np.zeros((N, N), bool)
    m = gt.zero_set_mismatch(up, K, 3e-8)
    assert 0 <= m <= 1
    assert m == pytest.approx(np.mean(np.abs(up.u) < 3e-8))
