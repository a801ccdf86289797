import math

import numpy as np
import pytest

from oracles import enclosed_charge_field
from vpscatter import waveop as wo
from vpscatter.dynamics import integrate_canonical
from vpscatter.errors import CertificateError, DomainError
from vpscatter.field import FieldConfig
from vpscatter.phase_space import invert, to_canonical
from vpscatter.profiles import GaussianProfile, ZeroProfile

CFG = FieldConfig(softening=0.2)
TOL = 1e-8


def _mu(eps=0.1):
    return GaussianProfile(eps, 0.3, 1.0, center_a=(0.5, 0, 0))


@pytest.fixture(scope="module")
def setup():
    return wo.prepare_asymptotic(_mu(), cfg=CFG, n=3)


@pytest.fixture(scope="module")
def state(setup):
    return wo.picard_iterate(setup, cfg=CFG, tol=TOL, max_iter=12)


@pytest.fixture(scope="module")
def zero_state():
    zs = wo.prepare_asymptotic(ZeroProfile(), cfg=CFG, n=3)
    return wo.picard_iterate(zs, cfg=CFG, tol=TOL)


def test_zero_datum(zero_state):
    assert len(zero_state.setup.sigma0) == 0
    assert zero_state.setup.asym.is_zero
    assert zero_state.converged and zero_state.n == 1 and zero_state.sup_diff == [0.0]
    rec = wo.theta_norm_monitor(zero_state)
    for name in ("A", "B", "C"):
        assert rec.checks[name]["max"] == 0.0
    ph = wo.reconstruct_physical(zero_state, 1.0)
    assert ph.chart == "physical" and len(ph) == 0


def test_relabeling_swaps_slots(setup):
    rng = np.random.default_rng(0)
    w, z = rng.normal(size=(10, 3)), rng.normal(size=(10, 3))
    np.testing.assert_array_equal(setup.profile(w, z), setup.mu_inf(z, w))


def test_analytic_limit_field_matches_enclosed_charge():
    eps, sa, sb = 0.1, 0.3, 1.0
    setup = wo.prepare_asymptotic(GaussianProfile(eps, sa, sb), cfg=CFG, n=2, mode="analytic")
    rho0 = eps**2 * (math.pi * sa**2) ** 1.5
    r = np.linspace(0.3, 4.0, 10)
    d = np.array([0.48, 0.6, 0.64])
    E = setup.asym.E0(r[:, None] * d)
    ref = enclosed_charge_field(lambda t: rho0 * math.exp(-t * t / sb**2), r)
    assert np.max(np.abs(E @ d - ref) / ref) < 1e-3


def test_frozen_first_iterate_two_realizations_agree(setup):
    grid = wo.TimeGrid.canonical(1.0, 1e-3)
    src = wo.initial_source(setup.sigma0, setup.asym, grid, CFG, "frozen")
    flow, _ = integrate_canonical(setup.sigma0, grid, setup.asym, src, CFG)
    for s in (grid.nodes[5], grid.nodes[-1]):
        back = flow.evaluate(float(s), flow.states[float(s)], setup.profile, reverse="implicit")
        np.testing.assert_allclose(back, setup.sigma0.value, rtol=0,
                                   atol=1e-10 * np.max(setup.sigma0.value))


def test_small_data_picard_contracts_on_unit_interval(state):
    assert state.converged and state.T_star == 1.0
    assert state.n <= 8 and state.sup_diff[-1] < TOL
    assert all(r <= 0.5 for r in state.ratios)


def test_converged_flow_is_a_fixed_point(state):
    assert wo.extra_sweep(state) < 2 * TOL


def test_different_initial_iterates_reach_the_same_limit(setup, state):
    other = wo.picard_iterate(setup, cfg=CFG, tol=TOL, initial="free")
    assert other.converged
    for s in state.test_nodes:
        assert np.max(np.abs(other.test_values[s] - state.test_values[s])) < 10 * TOL


def test_floor_refinement_keeps_the_limit():
    su = wo.prepare_asymptotic(_mu(1.0), cfg=CFG, n=2)
    vals = []
    for s_min in (1e-3, 5e-4):
        st = wo.picard_iterate(su, cfg=CFG, tol=TOL, s_min=s_min)
        vals.append(st.flow.evaluate(1.0, st.test_points, su.profile))
    assert np.max(np.abs(vals[0] - vals[1])) < 1e-6 * np.max(np.abs(vals[0]))


def test_large_data_failure_carries_history():
    su = wo.prepare_asymptotic(_mu(20.0), cfg=CFG, n=2)
    with pytest.raises(CertificateError) as info:
        wo.picard_iterate(su, cfg=CFG, max_iter=3, halvings=1)
    assert info.value.gate == "picard"
    assert len(info.value.history) == 2


def test_K_bounds_report(state):
    rep = wo.verify_K_bounds(state)
    assert rep["E_decay_pass"] and rep["E_decay_slope"] >= 0.9
    for name in ("gradz", "gradw", "hess"):
        assert 0 < rep[name]["fitted_constant"] < math.inf
        assert max(rep[name]["per_node"]) <= rep[name]["fitted_constant"]


def test_theta_norms_and_invariants(state):
    rec = wo.theta_norm_monitor(state, n_second=8)
    for name in ("A", "B", "C"):
        assert rec.checks[name]["pass"]
    assert rec.checks["moment"]["pass"]
    assert rec.checks["L2_drift"] < 1e-10


def test_reconstruction_round_trip(state):
    ph = wo.reconstruct_physical(state, 1.0)
    assert ph.chart == "physical" and ph.time == 1.0
    assert ph.total_charge == state.setup.sigma0.total_charge
    inv = invert(ph)
    w, z = to_canonical(1.0, inv.positions, inv.momenta, state.setup.asym, ph.lam)
    np.testing.assert_allclose(np.hstack([w, z]), state.flow.states[1.0], rtol=0, atol=1e-12)
    with pytest.raises(DomainError):
        wo.reconstruct_physical(state, 2.0)
