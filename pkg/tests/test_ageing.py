import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

import oracles
from pam_ageing.ageing import (
    ageing_cdf,
    envelope_experiment,
    estimate_Z_persistence,
    estimate_profile_persistence,
    fan_out,
    i_tail_constants,
    i_theta,
    i_theta_curve,
    ks_censored,
    moderate_deviation_check,
    one_minus_i_theta,
    replica_seed,
    residual_samples,
    small_theta_slope,
    top_w_cdf,
)
from pam_ageing.analytics import ModelParams, beta_fn
from pam_ageing.errors import DomainError
from pam_ageing.limit import sample_top_point
from pam_ageing.solver import SolverConfig

D1 = ModelParams(1, 2.0)
D2 = ModelParams(2, 4.0)


def i_d1_closed(theta: float) -> float:
    # for d=1, alpha=2 the weight reduces to 1 + theta v, so I = 2 int_0^1 v/(1+theta v) dv
    return 2.0 * (1.0 / theta - math.log1p(theta) / theta ** 2)


def i_oracle(d: int, alpha: float, theta: float) -> float:
    f = lambda v: v ** (alpha - d) * (1 - v) ** (d - 1) / oracles.inv_phi_direct(d, alpha, theta, v)
    val, _ = integrate.quad(f, 0.0, 1.0, epsabs=1e-13, epsrel=1e-11, limit=200)
    return val / beta_fn(alpha - d + 1, d)


def test_i_theta_zero(preset):
    assert abs(i_theta(preset, 0.0) - 1.0) < 1e-9
    assert one_minus_i_theta(preset, 0.0) == 0.0


@pytest.mark.parametrize("theta", [1e-3, 0.25, 1.0, 4.0, 100.0])
def test_i_theta_d1_closed_form(theta):
    assert i_theta(D1, theta) == pytest.approx(i_d1_closed(theta), rel=1e-9)


@pytest.mark.parametrize("theta", [0.1, 1.0, 10.0])
def test_i_theta_d2_oracle(theta):
    assert i_theta(D2, theta) == pytest.approx(i_oracle(2, 4.0, theta), rel=1e-8)


def test_i_theta_curve_matches_scalar(preset):
    th = [0.0, 0.01, 0.5, 2.0, 50.0, 1e4]
    curve = i_theta_curve(preset, th)
    for t, c in zip(th, curve):
        assert c == pytest.approx(i_theta(preset, t), rel=1e-8, abs=1e-12)


@given(st.floats(0.0, 1e3), st.floats(0.0, 1e3))
def test_i_theta_monotone(a, b):
    lo, hi = sorted((a, b))
    assert i_theta(D1, hi) <= i_theta(D1, lo) + 1e-12


def test_one_minus_matches_complement(preset):
    for th in (1e-6, 1e-3, 0.5, 3.0):
        assert one_minus_i_theta(preset, th) == pytest.approx(1.0 - i_theta(preset, th), rel=1e-6, abs=1e-12)


def test_i_theta_domain():
    with pytest.raises(DomainError):
        i_theta(D1, -0.1)
    with pytest.raises(DomainError):
        i_theta(D1, math.inf)


def test_tail_constants():
    big1, c0 = i_tail_constants(D1)
    assert big1 == pytest.approx(2.0, rel=1e-12)
    assert c0 == pytest.approx(7.0 / 3.0, rel=1e-9)
    big2, _ = i_tail_constants(D2)
    assert big2 == pytest.approx(6.0, rel=1e-12)
    assert 1e4 * i_theta(D1, 1e4) == pytest.approx(2.0, rel=5e-3)
    assert 1e8 * i_theta(D2, 1e4) == pytest.approx(6.0, rel=5e-3)


def test_small_theta_slope():
    # d=1: 1 - I(theta) = theta int 2 v^2 dv + O(theta^2), slope 2/3
    assert small_theta_slope(D1) == pytest.approx(2.0 / 3.0, rel=1e-9)
    for p in (D1, D2):
        th = 1e-5
        assert one_minus_i_theta(p, th) / th == pytest.approx(small_theta_slope(p), rel=1e-3)


def test_ks_censored_exact_sample():
    cdf = lambda x: np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
    x = np.array([0.1, 0.3, 0.5, 0.7, 0.9])
    dist, pval = ks_censored(x, cdf, 1.0)
    assert dist == pytest.approx(0.1, abs=1e-15)
    assert pval > 0.9
    # all censored at the cap: empirical mass on [0, cap] is zero
    dist, _ = ks_censored(np.full(4, np.inf), cdf, 0.5)
    assert dist == pytest.approx(0.5)


def test_ks_censored_detects_shift():
    rng = np.random.default_rng(3)
    cdf = lambda x: 1.0 - np.exp(-np.asarray(x, dtype=float))
    good = rng.exponential(1.0, 2000)
    bad = rng.exponential(1.5, 2000)
    cap = 3.0
    good[good > cap] = np.inf
    bad[bad > cap] = np.inf
    assert ks_censored(good, cdf, cap)[1] > 0.01
    assert ks_censored(bad, cdf, cap)[1] < 1e-6


def test_ageing_cdf_interpolation(preset):
    cdf = ageing_cdf(preset)
    th = np.array([0.0, 0.003, 0.7, 13.0, 900.0])
    assert np.allclose(cdf(th), [1.0 - i_theta(preset, t) for t in th], atol=1e-6)
    assert cdf(np.array([1e9]))[0] <= 1.0


def _square(x):
    return x * x


def test_fan_out_order():
    tasks = list(range(23))
    assert fan_out(_square, tasks, 1) == fan_out(_square, tasks, 2) == [x * x for x in tasks]


def test_replica_seed_distinct():
    seeds = {replica_seed(5, r) for r in range(1000)}
    assert len(seeds) == 1000
    assert replica_seed(5, 0) != replica_seed(6, 0)


def test_z_persistence_theta_zero():
    rep = estimate_Z_persistence(D1, 20.0, 0.0, 30, 1)
    assert rep.estimates["persistence"]["value"] == 1.0


def test_z_persistence_monotone_in_theta():
    rows = residual_samples(D1, 50.0, 60, 2, 8.0)
    ratios = np.array([r["ratio"] for r in rows])
    ps = [float(np.mean(ratios > th)) for th in (0.25, 1.0, 4.0)]
    assert ps[0] >= ps[1] >= ps[2]
    rep = estimate_Z_persistence(D1, 50.0, 1.0, 60, 2)
    assert rep.estimates["persistence"]["value"] == ps[1]


def test_residual_samples_deterministic():
    a = residual_samples(D1, 40.0, 8, 9, 2.0)
    b = residual_samples(D1, 40.0, 8, 9, 2.0, jobs=2)
    assert a == b


def test_residual_samples_domain():
    with pytest.raises(DomainError):
        residual_samples(D1, 1.0, 5, 0, 1.0)
    with pytest.raises(DomainError):
        residual_samples(D1, 10.0, 0, 0, 1.0)


def test_moderate_deviation_guard():
    # theta_t = sqrt(log t) < 2 for t < e^4
    with pytest.raises(DomainError):
        moderate_deviation_check(D1, 50.0, 10, 0)


def test_top_w_cdf_against_sampling(preset):
    rho, y = sample_top_point(preset, 40_000, 11)
    w = y + preset.q * rho
    u = np.quantile(w, [0.1, 0.5, 0.9])
    emp = np.array([np.mean(w <= v) for v in u])
    assert np.allclose(top_w_cdf(preset, u), emp, atol=0.01)


def test_envelope_domain():
    with pytest.raises(DomainError):
        envelope_experiment(D1, "other", 20, 0)
    with pytest.raises(DomainError):
        envelope_experiment(D1, "convergent", 5, 0)


def test_envelope_report_shape():
    rep = envelope_experiment(D1, "divergent", 12, 0)
    assert len(rep.extra["ratio"]) == 12
    run = rep.extra["tail_running_max"]
    assert all(b <= a for a, b in zip(run, run[1:]))
    assert "repeated_exceedances" in rep.verdicts


# replicas with a huge potential value inside the covering box are skipped
LIGHT = SolverConfig(work_budget=2e7)


def test_profile_persistence_short_window():
    rep = estimate_profile_persistence(D1, 5.0, 1e-3, 0.25, 5, 1, config=LIGHT)
    assert rep.estimates["persistence"]["value"] == 1.0
    assert rep.estimates["persistence"]["n"] >= 4


def test_profile_persistence_monotone_in_eps():
    lo = estimate_profile_persistence(D1, 5.0, 1.0, 0.02, 5, 1, config=LIGHT)
    hi = estimate_profile_persistence(D1, 5.0, 1.0, 0.45, 5, 1, config=LIGHT)
    assert hi.estimates["persistence"]["value"] >= lo.estimates["persistence"]["value"]
    # same replicas, same flows: only the threshold differs
    assert lo.extra["sup_diff"] == hi.extra["sup_diff"]


def test_profile_persistence_domain():
    for eps in (0.0, 0.5, 0.7):
        with pytest.raises(DomainError):
            estimate_profile_persistence(D1, 8.0, 1.0, eps, 2, 0)


def test_profile_work_budget_counts_errors():
    rep = estimate_profile_persistence(D1, 8.0, 1.0, 0.25, 3, 1, config=SolverConfig(work_budget=1.0))
    assert rep.extra["errors"] == 3 and rep.estimates["persistence"]["n"] == 0


@pytest.mark.slow
def test_profile_matches_tracker_on_matched_seeds():
    t, theta, n = 30.0, 1.0, 16
    prof = estimate_profile_persistence(D1, t, theta, 0.25, n, 3, n_obs=40,
                                        config=SolverConfig(work_budget=3e8))
    z = {r["rep"]: r["ratio"] > theta for r in residual_samples(D1, t, n, 3, theta)}
    matched = [z[k] for k in prof.extra["reps"]]
    m = len(matched)
    assert m >= n // 2
    pz = sum(matched) / m
    pp = prof.estimates["persistence"]["value"]
    se = math.sqrt(pz * (1 - pz) / m + prof.estimates["persistence"]["stderr"] ** 2)
    assert abs(pp - pz) <= max(3 * se, 0.05)
