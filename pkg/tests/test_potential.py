import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from pam_ageing.analytics import ModelParams
from pam_ageing.errors import DomainError, ResourceError
from pam_ageing.potential import (
    PotentialSpec,
    ball_site_count,
    ball_sites,
    dump_overrides,
    load_overrides,
    scan_candidates,
)


def five_site_field():
    p = ModelParams(1, 2.0)
    ov = {(-2,): 1.1, (-1,): 1.2, (0,): 3.0, (1,): 1.5, (2,): 2.0}
    return PotentialSpec(p, overrides=ov, background=1.0)


@given(st.integers(1, 3), st.integers(0, 12))
def test_ball_count(d, r):
    assert ball_site_count(d, r) == len(ball_sites(d, r))


def test_deterministic_and_order_free(preset):
    a = PotentialSpec(preset, seed=5)
    b = PotentialSpec(preset, seed=5)
    sites = [tuple(s) for s in ball_sites(preset.d, 6).tolist()]
    first = [a.xi(s) for s in sites]
    b.exceedances(200, 3.0)
    second = [b.xi(s) for s in reversed(sites)][::-1]
    assert first == second


def test_seeds_differ(d1):
    a = PotentialSpec(d1, seed=1).dense_ball(100)[1]
    b = PotentialSpec(d1, seed=2).dense_ball(100)[1]
    assert not np.array_equal(a, b)


def test_marginal_law_d1(d1):
    _, v = PotentialSpec(d1, seed=11).dense_ball(500_000)
    v = v[:1_000_000]
    assert len(v) == 1_000_000
    assert np.median(v) == pytest.approx(math.sqrt(2.0), abs=0.01)
    ks = stats.kstest(v, lambda x: 1 - x ** -2.0)
    # 1% critical value of the KS statistic at n = 1e6
    assert ks.statistic < 1.63 / math.sqrt(len(v))


def test_marginal_law_d2(d2):
    _, v = PotentialSpec(d2, seed=3).dense_ball(400)
    assert stats.kstest(v, lambda x: 1 - x ** -4.0).pvalue > 0.001


def test_large_values_have_pareto_count(d1):
    # number of sites above u in a ball of n sites is Poisson-like with mean n u^-alpha
    spec = PotentialSpec(d1, seed=4)
    r = 10 ** 9
    c, v = spec.exceedances(r, 1e4)
    mean = (2 * r + 1) * 1e-8
    assert abs(len(v) - mean) < 5 * math.sqrt(mean)
    assert np.all(np.abs(c).sum(axis=1) <= r)


@given(st.integers(0, 2**32), st.integers(1, 300), st.floats(1.0, 20.0))
def test_exceedances_match_dense_filter_d1(seed, r, thr):
    spec = PotentialSpec(ModelParams(1, 2.0), seed=seed)
    c, v = spec.dense_ball(r)
    keep = v > thr
    c2, v2 = spec.exceedances(r, thr)
    assert np.array_equal(c[keep], c2)
    assert np.array_equal(v[keep], v2)


@given(st.integers(0, 2**32), st.integers(1, 60), st.floats(1.0, 10.0))
def test_exceedances_match_dense_filter_d2(seed, r, thr):
    spec = PotentialSpec(ModelParams(2, 4.0), seed=seed)
    c, v = spec.dense_ball(r)
    keep = v > thr
    c2, v2 = spec.exceedances(r, thr)
    assert np.array_equal(c[keep], c2)
    assert np.array_equal(v[keep], v2)


def test_values_agree_across_queries(preset):
    spec = PotentialSpec(preset, seed=9)
    c, v = spec.exceedances(2000 if preset.d == 1 else 300, 5.0)
    assert [spec.xi(tuple(s)) for s in c.tolist()] == v.tolist()
    box = spec.box_values(5)
    for s in ball_sites(preset.d, 5).tolist():
        assert box[tuple(x + 5 for x in s)] == spec.xi(tuple(s))


@given(st.integers(0, 2**20), st.integers(0, 100), st.integers(1, 400), st.floats(1.0, 5.0), st.floats(0.0, 0.05))
def test_profile_query_matches_filter(seed, r_min, width, base, slope):
    spec = PotentialSpec(ModelParams(1, 2.0), seed=seed)
    level = lambda r: base + slope * r
    r_max = r_min + width
    c, v = spec.dense_ball(r_max)
    n = np.abs(c).sum(axis=1)
    keep = (n > r_min) & (v > np.array([level(int(x)) for x in n]))
    c2, v2 = spec.exceedances_profile(r_min, r_max, level)
    assert np.array_equal(c[keep], c2)
    assert np.array_equal(v[keep], v2)


def test_profile_query_d2_with_overrides(d2):
    spec = PotentialSpec(d2, seed=2, overrides={(3, 4): 50.0, (0, 1): 1.0})
    level = lambda r: 2.0 + 0.02 * r
    c, v = spec.dense_ball(80)
    n = np.abs(c).sum(axis=1)
    keep = (n > 2) & (v > np.array([level(int(x)) for x in n]))
    c2, v2 = spec.exceedances_profile(2, 80, level)
    assert np.array_equal(c[keep], c2) and np.array_equal(v[keep], v2)
    assert (3, 4) in {tuple(x) for x in c2.tolist()}


def test_overrides_take_precedence(d1):
    spec = PotentialSpec(d1, seed=1, overrides={(5,): 42.0})
    assert spec.xi((5,)) == 42.0
    c, v = spec.exceedances(10, 41.0)
    assert c.tolist() == [[5]] and v.tolist() == [42.0]
    assert spec.box_values(6)[11] == 42.0


def test_override_validation(d1, d2):
    with pytest.raises(DomainError):
        PotentialSpec(d1, overrides={(1,): 0.5})
    with pytest.raises(DomainError):
        PotentialSpec(d2, overrides={(1,): 2.0})
    with pytest.raises(DomainError):
        PotentialSpec(d1, background=0.2)


def test_budget(d2):
    spec = PotentialSpec(d2, seed=0, site_budget=1000)
    with pytest.raises(ResourceError):
        spec.dense_ball(100)
    with pytest.raises(ResourceError):
        spec.box_values(100)


def test_override_roundtrip(tmp_path, d2):
    spec = PotentialSpec(d2, overrides={(1, -2): 3.5, (0, 0): 9.0}, background=1.0)
    path = tmp_path / "ov.json"
    dump_overrides(spec, path)
    again = PotentialSpec(d2, **load_overrides(path))
    assert again.overrides == spec.overrides and again.background == 1.0


def test_scan_radius_zero(d1):
    spec = PotentialSpec(d1, seed=3)
    x0 = spec.xi((0,))
    assert scan_candidates(spec, 5.0, 0, 3) == [((0,), x0, x0)]


def test_scan_five_site_field():
    spec = five_site_field()
    assert scan_candidates(spec, 1.0, 2, 1) == [((0,), 3.0, 3.0)]
    # enumeration oracle: phi_1 = (-2: gated, -1: 1.01768, 0: 3, 1: 1.09453, 2: 0.61371)
    top = scan_candidates(spec, 1.0, 2, 2)
    assert top[1][0] == (1,)
    assert top[1][2] == pytest.approx(1.0945348918918356, abs=1e-14)
    full = scan_candidates(spec, 1.0, 2, 5)
    assert [r[0] for r in full] == [(0,), (1,), (-1,), (2,)]
    assert full[3][2] == pytest.approx(2 - 2 * math.log(2), abs=1e-14)
