import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq

from phds import fuller, maps
from phds.acceptance import logistic_p_exact


@pytest.fixture(scope="module")
def logi():
    return fuller.logistic_flow(step=1.0 / 512)


@pytest.fixture(scope="module")
def annulus():
    return fuller.annulus2_flow(step=1.0 / 512)


def constant_g(fs, c):
    return fuller.FlowSystem(fs.dim, fs.flow, lambda x: np.full(np.shape(x)[:-1], float(c)),
                             fs.ell, periodic=fs.periodic, step=fs.step, name=f"{fs.name}-const")


def test_cocycle(logi, annulus):
    x = np.column_stack([np.linspace(0.1, 2.9, 20), np.linspace(0, 1, 20)])
    assert fuller.check_cocycle(logi, x, 0.7, -1.3) < 1e-12
    assert fuller.check_cocycle(annulus, x, 0.4, 2.1) < 1e-12
    np.testing.assert_allclose(logi(0.0, x), x)


def test_velocity_flow_matches_analytic(logi):
    rk = fuller.logistic_velocity_flow()
    x = np.column_stack([np.linspace(0.2, 2.8, 9), np.zeros(9)])
    np.testing.assert_allclose(rk(1.0, x), logi(1.0, x), atol=1e-8)


def test_boundary_values(logi, annulus):
    b = np.array([[0.0, 0.3], [3.0, 0.3]])
    assert fuller.check_boundary(logi, b)
    assert fuller.check_boundary(annulus, np.array([[0.0, 0.1], [4.0, 0.6]]))


def test_classify_examples(logi):
    assert fuller.classify_orbit(logi, [0.0, 0.2]).pair == (0, 0)
    assert fuller.classify_orbit(logi, [0.8, 0.2]).pair == (0, 1)
    assert fuller.classify_orbit(fuller.logistic_flow(True, 1 / 512), [0.8, 0.2]).pair == (1, 0)


def test_classify_annulus_bands(annulus):
    pairs = [fuller.classify_orbit(annulus, [y, 0.0]).pair for y in (0.5, 1.3, 2.2, 3.6)]
    assert pairs == [(0, 0), (0, 1), (0, 1), (0, 0)]


def test_classify_unclassified():
    fs = fuller.horizontal_flow([1.0, 0.3])
    with pytest.raises(fuller.Unclassified, match="unclassified"):
        fuller.classify_orbit(fs, [0.1, 0.2, 0.5], horizon=4)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.05, 2.95), st.floats(0, 1))
def test_class_constant_along_orbit(y, th):
    fs = fuller.logistic_flow(step=1 / 256)
    x = np.array([y, th])
    c0 = fuller.classify_orbit(fs, x).pair
    assert fuller.classify_orbit(fs, fs(0.8, x)).pair == c0 == (0, 1)


def test_openness_proxy(logi):
    rng = np.random.default_rng(0)
    x = np.column_stack([rng.uniform(0.05, 2.95, 100), rng.uniform(0, 1, 100)])
    a = fuller.classify_many(logi, x)
    b = fuller.classify_many(logi, x + rng.choice([-1, 1], (100, 1)) * [1e-4, 0])
    assert all(p is not None and q is not None and p.pair == q.pair == (0, 1)
               for p, q in zip(a, b))


@pytest.mark.parametrize("c", [0.0, 0.3, 1.0])
def test_average_constant(logi, c):
    fs = constant_g(logi, c)
    for n in (1, 4, 9):
        np.testing.assert_allclose(fuller.average_gn(fs, np.array([[1.2, 0.4]]), n), c, atol=1e-14)


def test_average_symmetric_point(logi):
    # the orbit through y = 3/2 makes g - 1/2 odd in time
    for n in (1, 3, 7):
        assert fuller.average_gn(logi, np.array([[1.5, 0.0]]), n)[0] == pytest.approx(0.5, abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.floats(0, 3), st.integers(1, 12))
def test_average_in_unit_interval(y, n):
    v = fuller.average_gn(fuller.logistic_flow(step=1 / 256), np.array([[y, 0.0]]), n)[0]
    assert 0 <= v <= 1


def test_p_examples(logi):
    N = 30
    x = np.array([[1.1, 0.2]])
    assert fuller.section_function_p(constant_g(logi, 1), x, N)[0] == pytest.approx(1 - 2.0 ** -N, abs=1e-14)
    assert fuller.section_function_p(constant_g(logi, 0), x, N)[0] == 0
    assert fuller.section_function_p(logi, np.array([[0.0, 0.5]]), N)[0] == 0


def test_p_matches_closed_form():
    fs = fuller.logistic_flow(step=1.0 / 2048)
    ys = np.array([0.3, 1.0, 1.4, 2.2])
    got = fuller.section_function_p(fs, np.column_stack([ys, np.zeros(4)]), 20)
    want = [logistic_p_exact(y, 20) for y in ys]
    np.testing.assert_allclose(got, want, atol=1e-6)


def test_truncation_bound(logi):
    x = np.column_stack([np.linspace(0, 3, 50), np.zeros(50)])
    N = 10
    gap = np.abs(fuller.section_function_p(logi, x, N) - fuller.section_function_p(logi, x, 2 * N))
    assert gap.max() <= 2.0 ** -N


def test_flow_derivative_terms(logi):
    N = 20
    x = np.array([[0.8, 0.0], [1.6, 0.3]])
    d = fuller.flow_derivative_p(logi, x, N)
    assert np.all(d.value > 0)
    n = np.arange(1, N + 1)
    per = d.brackets / (2 * n)
    assert np.all((per >= 0) & (per <= 1 / (2 * n) + 1e-9))
    c = fuller.classify_orbit(logi, x[0])
    past = n > max(-c.t_back, c.t_fwd)
    np.testing.assert_allclose(d.terms[0, past], 2.0 ** -n[past] / (2 * n[past]), rtol=1e-12)


def test_flow_derivative_constant_g(logi):
    d = fuller.flow_derivative_p(constant_g(logi, 0.7), np.array([[1.0, 0.0]]), 10)
    assert d.value[0] == 0


def test_flow_derivative_matches_difference_quotient(logi):
    x = np.array([[1.3, 0.0]])
    h = 1e-3
    fd = (fuller.section_function_p(logi, logi(h, x), 20)
          - fuller.section_function_p(logi, logi(-h, x), 20)) / (2 * h)
    assert fuller.flow_derivative_p(logi, x, 20).value[0] == pytest.approx(fd[0], rel=1e-4)


def test_section_1d_oracle():
    fs = fuller.logistic_flow(step=1.0 / 2048)
    N = 30
    sd = fuller.extract_section(fs, np.column_stack([np.full(4, 0.8), np.arange(4) / 4]), N)
    ys = np.linspace(1, 2, 201)
    pv = np.array([logistic_p_exact(y, N) for y in ys]) - 0.5
    j = int(np.flatnonzero(np.sign(pv[:-1]) != np.sign(pv[1:]))[0])
    y_star = brentq(lambda y: logistic_p_exact(y, N) - 0.5, ys[j], ys[j + 1], xtol=1e-14)
    np.testing.assert_allclose(sd.points[:, 0], y_star, atol=1e-6)
    assert np.all(np.abs(sd.p_values - 0.5) < sd.root_tol)
    assert sd.time_scale == 1.0


def test_section_single_crossing(logi):
    rng = np.random.default_rng(1)
    x = np.column_stack([rng.uniform(0.05, 2.95, 40), rng.uniform(0, 1, 40)])
    np.testing.assert_array_equal(fuller.sign_changes_along_orbit(logi, x, 20), 1)
    sd = fuller.extract_section(logi, x, 20)
    assert len(sd.points) == 40
    np.testing.assert_array_equal(np.bincount(sd.seed_index, minlength=40), 1)


def test_section_zero_region_has_no_crossing(logi):
    sd = fuller.extract_section(logi, np.array([[0.0, 0.1], [0.0, 0.6]]), 20)
    assert len(sd.points) == 0 and sorted(sd.sectionless) == [0, 1]


def test_rescaled_section_records_scale():
    fs = fuller.vertical_flow(L=1.0)
    # truncated p(0) = (1 - 2^-N) / 2, so the root sits 2^-N-close to s = 0
    sd = fuller.extract_section(fs, np.array([[0.2, 0.3, -0.7]]), 40)
    assert sd.time_scale == pytest.approx(2.0 / 0.9)
    assert sd.points[0, 2] == pytest.approx(0.0, abs=1e-8)


def test_components(logi, annulus):
    k = 32
    th = np.arange(k) / k
    sd = fuller.split_components(fuller.extract_section(logi, np.column_stack([np.full(k, 0.8), th]), 20), 2.5 / k)
    assert sd.n_components == 1
    seeds = np.column_stack([np.tile([1.3, 2.2], k), np.repeat(th, 2)])
    sa = fuller.split_components(fuller.extract_section(annulus, seeds, 20), 2.5 / k)
    assert sa.n_components == 2
    empty = fuller.split_components(fuller.extract_section(logi, np.array([[0.0, 0.1]]), 20), 0.1)
    assert empty.n_components == 0


def test_component_labels_stable_under_order(annulus):
    k = 16
    th = np.arange(k) / k
    seeds = np.column_stack([np.tile([1.3, 2.2], k), np.repeat(th, 2)])
    a = fuller.split_components(fuller.extract_section(annulus, seeds, 20), 2.5 / k)
    perm = np.random.default_rng(2).permutation(len(seeds))
    b = fuller.split_components(fuller.extract_section(annulus, seeds[perm], 20), 2.5 / k)
    la = {tuple(np.round(p, 9)): l for p, l in zip(a.points, a.labels)}
    lb = {tuple(np.round(p, 9)): l for p, l in zip(b.points, b.labels)}
    assert la == lb


def test_section_exports(annulus):
    sd = fuller.split_components(
        fuller.extract_section(annulus, np.array([[1.3, 0.0], [2.2, 0.5]]), 15), 0.2)
    d = sd.to_dict()
    assert d["N"] == 15 and len(d["points"]) == 2
    header, rows = sd.csv_rows()
    assert len(rows) == 2 and len(rows[0]) == len(header)


@pytest.fixture(scope="module")
def annulus_section(annulus):
    k = 16
    th = np.arange(k) / k
    seeds = np.column_stack([np.tile([1.3, 2.2], k), np.repeat(th, 2)])
    return fuller.split_components(fuller.extract_section(annulus, seeds, 20), 2.5 / k)


def test_compatibility_examples(annulus, annulus_section):
    sd = annulus_section
    assert fuller.check_f_compatibility(lambda x: annulus(0.37, x), annulus, sd) == 1
    assert fuller.check_f_compatibility(lambda x: np.array(x, dtype=float), annulus, sd) == 1
    assert fuller.check_f_compatibility(fuller.annulus2_reflection, annulus, sd) == 2


def test_compatibility_rejects_non_orbit_map(annulus, annulus_section):
    def shear(x):
        x = np.array(x, dtype=float)
        x[..., 1] = (x[..., 1] + 0.3 * x[..., 0]) % 1
        return x
    with pytest.raises(ValueError, match="orbits"):
        fuller.check_f_compatibility(shear, annulus, annulus_section)


def test_pipeline_mock():
    mock = fuller.MockPhcrossMap()
    L, rep = fuller.phcross_pipeline(mock, fuller.mock_flow(), N=30, s0=0.5, seed_n=8, grid_n=64)
    assert np.max(np.abs(L.u - mock.invariant_graph(64).u)) < 1e-6
    assert rep.stages["compatibility"]["k"] == 1


def test_pipeline_rejects_constant_g():
    f = maps.ProductMap(maps.cat_map(), 0.1)
    fs = fuller.horizontal_flow(maps.cat_map().e_u)
    with pytest.raises(fuller.PipelineError) as err:
        fuller.phcross_pipeline(f, fs, N=10, s0=0.5, seed_n=4, grid_n=16)
    assert err.value.stage == "classification"
