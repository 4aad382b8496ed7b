import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from pam_ageing.analytics import ModelParams
from pam_ageing.errors import DomainError, ResourceError, StabilityError
from pam_ageing.potential import PotentialSpec
from pam_ageing.solver import (
    Solver,
    SolverConfig,
    apply_generator,
    embed,
    expm_oracle,
    point_mass,
    residual_lifetime_X,
    solve,
    stability_bound,
    step,
)

D1 = ModelParams(1, 2.0)
D2 = ModelParams(2, 4.0)


def fixed(radius: int, **kw) -> SolverConfig:
    return SolverConfig(initial_radius=radius, fixed_box=True, **kw)


def two_site_field():
    return PotentialSpec(D1, overrides={(1,): 4.0, (3,): 6.0}, background=1.0)


def test_single_site_box():
    spec = PotentialSpec(D1, overrides={(0,): 3.7}, background=1.0)
    solver = Solver(spec, fixed(0))
    st = solver.evolve(solver.initial_state(), 2.5)
    assert st.v.tolist() == [1.0]
    assert st.log_mass == pytest.approx((3.7 - 2.0) * 2.5, rel=1e-9)


def test_symmetric_pair_stays_symmetric():
    spec = PotentialSpec(D1, overrides={(-1,): 2.5, (1,): 2.5, (0,): 1.3}, background=1.0)
    solver = Solver(spec, fixed(1))
    st = solver.initial_state()
    for t in np.linspace(0.1, 4.0, 40):
        st = solver.evolve(st, float(t))
        assert st.v[0] == st.v[2]


@pytest.mark.parametrize("d,radius,t", [(1, 3, 0.5), (1, 3, 5.0), (1, 100, 2.0), (2, 7, 1.0), (2, 7, 4.0)])
def test_matches_matrix_exponential(d, radius, t):
    params = D1 if d == 1 else D2
    spec = PotentialSpec(params, seed=17)
    solver = Solver(spec, fixed(radius))
    st = solver.evolve(solver.initial_state(), t)
    v_ref, log_ref = oracles.expm_profile(solver.xi_box(radius), t)
    big = v_ref > 1e-12
    np.testing.assert_allclose(st.v[big], v_ref[big], rtol=1e-6)
    assert np.max(np.abs(st.v - v_ref)) < 1e-9
    assert st.log_mass == pytest.approx(log_ref, rel=1e-6)


def test_package_oracle_agrees_with_test_oracle():
    xi = PotentialSpec(D2, seed=2).box_values(3)
    a, la = expm_oracle(xi, 1.3)
    b, lb = oracles.expm_profile(xi, 1.3)
    np.testing.assert_allclose(a, b, atol=1e-13)
    assert la == pytest.approx(lb, rel=1e-12)


def test_mass_conservation_per_step():
    spec = PotentialSpec(D2, seed=5)
    xi = spec.box_values(6)
    st = point_mass(2, 6)
    dt = 0.02 / (xi.max() + 8)
    for _ in range(300):
        st = step(st, xi, dt)
        assert abs(st.total() - 1.0) < 1e-9
        assert st.v.min() >= 0.0


def test_stability_guard():
    xi = PotentialSpec(D1, seed=1).box_values(4)
    st = point_mass(1, 4)
    with pytest.raises(StabilityError):
        step(st, xi, 1.01 * stability_bound(xi, 2.5))
    with pytest.raises(DomainError):
        step(st, xi, -1.0)


def test_generator_is_symmetric():
    xi = PotentialSpec(D2, seed=3).box_values(2)
    gen = oracles.dirichlet_generator(xi)
    rng = np.random.default_rng(0)
    a, b = rng.random(xi.shape), rng.random(xi.shape)
    assert np.allclose(apply_generator(a, xi).ravel(), gen @ a.ravel())
    assert float((apply_generator(a, xi) * b).sum()) == pytest.approx(float((a * apply_generator(b, xi)).sum()))


def test_embed_preserves_profile():
    st = point_mass(2, 3)
    big = embed(st, 5)
    assert big.v.shape == (11, 11) and big.value_at((0, 0)) == 1.0 and big.total() == 1.0
    with pytest.raises(DomainError):
        embed(big, 4)


def test_growing_box_matches_large_fixed_box():
    spec = PotentialSpec(D1, seed=9)
    grow = Solver(spec, SolverConfig(initial_radius=4))
    a = grow.evolve(grow.initial_state(), 6.0)
    assert grow.growths > 0
    r = a.box_radius
    ref = Solver(PotentialSpec(D1, seed=9), fixed(r))
    b = ref.evolve(ref.initial_state(), 6.0)
    assert a.log_mass == pytest.approx(b.log_mass, rel=1e-8)
    assert np.max(np.abs(a.v - b.v)) < 1e-8


def test_budget_error():
    spec = PotentialSpec(D2, seed=1)
    with pytest.raises(ResourceError):
        Solver(spec, SolverConfig(initial_radius=50, site_budget=1000)).xi_box(50)


def test_dominant_origin_never_moves():
    spec = PotentialSpec(D1, overrides={(0,): 50.0}, background=1.0)
    series = solve(spec, 5.0, np.linspace(0.05, 5.0, 100))
    assert all(series.peak_site(k) == (0,) for k in range(len(series.t)))
    assert residual_lifetime_X(series, 1.0).censored


def test_two_site_profile_switch():
    xi_cfg = fixed(8)
    spec = two_site_field()
    solver = Solver(spec, xi_cfg)
    series = solver.run(3.0, np.linspace(0.01, 3.0, 300), keep_states=True)
    sites = [series.peak_site(k) for k in range(len(series.t))]
    after = [s for s, t in zip(sites, series.t) if t >= 1.5]
    assert after[0] == (1,) and after[-1] == (3,)
    # exactly one switch in the window
    assert sum(a != b for a, b in zip(after, after[1:])) == 1
    res = residual_lifetime_X(series, 1.5, solver, rel_tol=1e-6)
    assert res.refined and not res.censored
    box = solver.xi_box(8)
    sigma = oracles.expm_switch_time(box, 8 + 1, 8 + 3, 1.5, 3.0)
    assert 1.5 + res.value == pytest.approx(sigma, rel=1e-5)
    assert res.value == pytest.approx(0.12275, abs=1e-4)


def test_residual_slope_minus_one():
    spec = two_site_field()
    series = solve(spec, 3.0, np.linspace(0.01, 3.0, 300))
    ts = series.t[100:250]
    vals = np.array([residual_lifetime_X(series, float(t)).value for t in ts])
    steps = np.diff(vals)
    # slope -1 between switches, upward jumps at switches
    affine = np.isclose(steps, -np.diff(ts), atol=1e-12)
    assert np.all(affine | (steps > 0))
    assert 1 <= np.count_nonzero(~affine) <= 2


def test_localization_regression():
    # fraction of observer times with v(t, X_t) > 0.9, per quarter of [0, 30]
    series = solve(PotentialSpec(D1, seed=5), 30.0, np.linspace(0.3, 30.0, 100))
    frac = [float((series.v_peak[i:i + 25] > 0.9).mean()) for i in range(0, 100, 25)]
    assert frac == [0.72, 1.0, 1.0, 1.0]
    assert all(b >= a for a, b in zip(frac, frac[1:]))


def test_solve_is_deterministic():
    a = solve(PotentialSpec(D2, seed=4), 2.0, [0.5, 1.0, 1.5])
    b = solve(PotentialSpec(D2, seed=4), 2.0, [1.5, 0.5, 1.0])
    assert np.array_equal(a.v_peak, b.v_peak) and np.array_equal(a.log_mass, b.log_mass)


@settings(max_examples=20)
@given(st.floats(1.0, 20.0), st.floats(0.05, 1.0))
def test_single_site_growth_rate(x, t):
    spec = PotentialSpec(D2, overrides={(0, 0): x}, background=1.0)
    solver = Solver(spec, fixed(0))
    st = solver.evolve(solver.initial_state(), t)
    assert st.log_mass == pytest.approx((x - 4.0) * t, rel=1e-9, abs=1e-12)
