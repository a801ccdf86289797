import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vpscatter.asymptotic import AsymptoticData
from vpscatter.errors import DomainError
from vpscatter.phase_space import (Ensemble, GridSpec, PhasePoint, from_canonical, invert,
                                   jacobian_canonical, modified_frame, quadrature_charge,
                                   read_snapshot, sample_profile, theta, time_reflect,
                                   to_canonical, write_snapshot)
from vpscatter.profiles import GaussianProfile, ZeroProfile

ZERO = AsymptoticData.zero()


def _pp(t, x, v, chart="physical"):
    return PhasePoint(np.array(x, float), np.array(v, float), chart, t)


def test_invert_unit_time_keeps_position_and_sets_p_to_x_minus_v():
    out = invert(_pp(1.0, (3, 0, 0), (1, 0, 0)))
    assert out.chart == "inverted" and out.time == 1.0
    np.testing.assert_array_equal(out.position, [3, 0, 0])
    np.testing.assert_array_equal(out.momentum, [2, 0, 0])


def test_invert_direct_substitution():
    out = invert(_pp(4.0, (8, 0, 0), (2, 0, 0)))
    assert out.time == 0.25
    np.testing.assert_array_equal(out.position, [2, 0, 0])
    np.testing.assert_array_equal(out.momentum, [0, 0, 0])


def test_invert_twice_is_identity_on_random_points():
    rng = np.random.default_rng(1)
    t = rng.uniform(0.1, 10, 1000)
    x = rng.normal(size=(1000, 3)) * 5
    v = rng.normal(size=(1000, 3)) * 5
    err = 0.0
    for ti, xi, vi in zip(t, x, v):
        back = invert(invert(_pp(ti, xi, vi)))
        assert back.chart == "physical"
        scale = np.maximum(1.0, np.abs(np.concatenate([xi, vi])))
        err = max(err, abs(back.time - ti) / ti,
                  float(np.max(np.abs(np.concatenate([back.position - xi, back.momentum - vi])) / scale)))
    assert err < 1e-12


@pytest.mark.parametrize("t", [0.0, -1.0])
def test_invert_rejects_singular_time(t):
    with pytest.raises(DomainError, match="singular"):
        invert(_pp(t, (1, 0, 0), (0, 0, 0)))


def test_ensemble_involution_preserves_charge_exactly():
    prof = GaussianProfile(0.3, 1.0, 0.5)
    e = sample_profile(prof, "physical", GridSpec.cube(2, 1, 3, 3), time=2.0)
    f = invert(e)
    assert f.chart == "inverted" and f.time == 0.5
    assert f.total_charge == e.total_charge
    np.testing.assert_allclose(invert(f).current, e.current, rtol=0, atol=1e-14)


def test_to_canonical_at_unit_time_is_shear():
    q, p = np.array([[1.0, 2, 3]]), np.array([[0.5, -1, 2]])
    asym = AsymptoticData.constant((1.0, 2.0, 3.0))
    w, z = to_canonical(1.0, q, p, asym, 1)
    np.testing.assert_array_equal(w, q - p)
    np.testing.assert_array_equal(z, p)


def test_to_canonical_free_case():
    rng = np.random.default_rng(2)
    q, p = rng.normal(size=(10, 3)), rng.normal(size=(10, 3))
    for s in (0.01, 0.3, 1.0):
        w, z = to_canonical(s, q, p, ZERO, 1)
        np.testing.assert_allclose(w, q - s * p, rtol=0, atol=1e-15)
        np.testing.assert_array_equal(z, p)


def test_canonical_round_trip_constant_field():
    asym = AsymptoticData.constant((0.7, 0, 0))
    rng = np.random.default_rng(3)
    q, p = rng.normal(size=(20, 3)), rng.normal(size=(20, 3))
    w, z = to_canonical(0.5, q, p, asym, 1)
    q2, p2 = from_canonical(0.5, w, z, asym, 1)
    assert np.max(np.abs(q2 - q)) < 1e-14 and np.max(np.abs(p2 - p)) < 1e-14


def test_canonical_round_trip_against_potential_form():
    # quadratic potential phi0 = -x.Mx/2 gives E0 = -grad phi0 = Mx
    M = np.array([[0.4, 0.1, 0.0], [0.1, -0.2, 0.05], [0.0, 0.05, 0.3]])
    asym = AsymptoticData.linear(M)
    rng = np.random.default_rng(4)
    q, p = rng.normal(size=(20, 3)), rng.normal(size=(20, 3))
    for lam in (1, -1):
        for s in (1e-3, 0.2, 1.0):
            w, z = to_canonical(s, q, p, asym, lam)
            grad_phi0 = -(q - s * p) @ M.T
            np.testing.assert_allclose(z, p + lam * math.log(s) * grad_phi0, atol=1e-13)
            q2, p2 = from_canonical(s, w, z, asym, lam)
            assert np.max(np.abs(q2 - q)) < 1e-12 and np.max(np.abs(p2 - p)) < 1e-12


def test_to_canonical_rejects_zero_time_and_from_canonical_limit():
    with pytest.raises(DomainError):
        to_canonical(0.0, np.zeros((1, 3)), np.zeros((1, 3)), ZERO, 1)
    q, p = from_canonical(0.0, np.ones((1, 3)), np.ones((1, 3)), ZERO, 1)
    np.testing.assert_array_equal(q, np.ones((1, 3)))
    assert np.all(np.isnan(p))


def test_jacobian_canonical_structure():
    J = jacobian_canonical(1.0, np.zeros(3), AsymptoticData.radial_gaussian((0, 0, 0), 1.0, 1.0), 1)
    expect = np.block([[np.eye(3), -np.eye(3)], [np.zeros((3, 3)), np.eye(3)]])
    np.testing.assert_array_equal(J, expect)
    J0 = jacobian_canonical(0.3, np.zeros(3), ZERO, 1)
    assert np.allclose(J0[3:, :3], 0) and np.linalg.det(J0) == pytest.approx(1, abs=1e-15)


def test_jacobian_canonical_det_random_symmetric_gradients():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(200):
        A = rng.normal(size=(3, 3))
        G = (A + A.T)
        G *= 10 / max(np.linalg.norm(G, 2), 1e-12) * rng.uniform()
        asym = AsymptoticData.linear(G)
        for s in (1e-4, 0.3, 1.0):
            J = jacobian_canonical(s, rng.normal(size=3), asym, int(rng.choice([-1, 1])))
            worst = max(worst, abs(np.linalg.det(J) - 1))
    assert worst < 1e-10


def test_jacobian_matches_finite_differences():
    asym = AsymptoticData.radial_gaussian((0.2, 0, 0), 0.5, 0.8)
    q, p, s = np.array([0.3, -0.2, 0.4]), np.array([0.1, 0.5, -0.3]), 0.2
    w0 = q - s * p
    J = jacobian_canonical(s, w0, asym, 1)
    h = 1e-6
    num = np.empty((6, 6))
    for j in range(6):
        d = np.zeros(6)
        d[j] = h
        wp, zp = to_canonical(s, (q + d[:3])[None], (p + d[3:])[None], asym, 1)
        wm, zm = to_canonical(s, (q - d[:3])[None], (p - d[3:])[None], asym, 1)
        num[:, j] = (np.concatenate([wp[0], zp[0]]) - np.concatenate([wm[0], zm[0]])) / (2 * h)
    np.testing.assert_allclose(J, num, atol=1e-7)


def test_theta_special_values():
    z = np.array([[1.0, 2.0, 2.0]])
    assert theta(0.0, z)[0] == pytest.approx(math.sqrt(10))
    assert theta(1.0, np.zeros((1, 3)))[0] == 0.5
    with pytest.raises(DomainError):
        theta(-0.1, z)


@settings(max_examples=300, deadline=None)
@given(st.floats(1e-6, 1e3), st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3))
def test_theta_sandwich(s, z):
    z = np.array([z])
    jz = math.sqrt(1 + float(np.sum(z**2)))
    th = float(theta(s, z)[0])
    m = min(jz, 1 / s)
    assert 0.5 * m * (1 - 1e-12) <= th <= m * (1 + 1e-12)


def test_modified_frame_examples():
    asym = AsymptoticData.constant((1.0, 0, 0))
    Q, P = modified_frame(math.exp(-1), np.zeros((1, 3)), np.zeros((1, 3)), asym, 1)
    np.testing.assert_allclose(Q, [[-math.exp(-1), 0, 0]], atol=1e-15)
    np.testing.assert_allclose(P, [[-1, 0, 0]], atol=1e-15)
    q, p = np.array([[1.0, 2, 3]]), np.array([[0.5, 0.5, -1]])
    Q, P = modified_frame(1.0, q, p, asym, 1)
    np.testing.assert_array_equal(Q, q + p)
    np.testing.assert_array_equal(P, p)
    Q, P = modified_frame(0.3, q, p, ZERO, 1)
    np.testing.assert_allclose(Q, q + 0.3 * p, atol=1e-15)
    with pytest.raises(DomainError):
        modified_frame(0.0, q, p, ZERO, 1)


def test_sample_zero_profile_is_empty():
    e = sample_profile(ZeroProfile(), "physical", GridSpec.cube(1, 1, 3, 3))
    assert len(e) == 0 and e.total_charge == 0


def test_gaussian_charge_quadrature_converges_to_closed_form():
    eps = 0.3
    prof = GaussianProfile(eps, 1.0, 1.0)
    grid = GridSpec.cube(8.0, 8.0, 32, 32)
    # charge is the integral of the squared profile: eps^2 int exp(-|x|^2) dx over R^6
    ref = eps**2 * math.pi**3
    assert abs(quadrature_charge(prof, grid) - ref) / ref < 1e-3


def test_isotropic_unit_gaussian_charge():
    # eps exp(-(|a|^2+|b|^2)/2) squared integrates to eps^2 pi^3
    prof = GaussianProfile(1.0, 1.0, 1.0)
    assert prof.total_charge() == pytest.approx(math.pi**3)


def test_sampled_charge_matches_quadrature_and_scales_quadratically():
    grid = GridSpec.cube(4.0, 4.0, 8, 8)
    e1 = sample_profile(GaussianProfile(0.1, 1, 1), "inverted", grid, cutoff=0.0)
    e2 = sample_profile(GaussianProfile(0.2, 1, 1), "inverted", grid, cutoff=0.0)
    assert e2.total_charge == pytest.approx(4 * e1.total_charge, rel=1e-14)
    assert e1.total_charge == pytest.approx(quadrature_charge(GaussianProfile(0.1, 1, 1), grid), rel=1e-12)
    direct = math.fsum(e1.weight * e1.value**2)
    assert abs(e1.total_charge - direct) <= 1e-12 * direct


def test_sample_profile_rejects_empty_grid():
    with pytest.raises(ValueError):
        sample_profile(GaussianProfile(0.1), "physical", GridSpec.cube(1, 1, 0, 0))


def test_time_reflect():
    e = Ensemble(np.array([[0, 0, 0, 1, 2, 3.0]]), np.array([[0, 0, 0, 1, 2, 3.0]]), [0.5], [1.0],
                 "physical", 2.0)
    r = time_reflect(e)
    np.testing.assert_array_equal(r.momenta, [[-1, -2, -3]])
    assert r.time == -2.0 and r.total_charge == e.total_charge
    rr = time_reflect(r)
    np.testing.assert_array_equal(rr.current, e.current)
    assert rr.time == e.time
    with pytest.raises(DomainError):
        time_reflect(invert(e))


def test_snapshot_round_trip_is_exact(tmp_path):
    prof = GaussianProfile(0.2, 1.0, 0.5, center_b=(0.3, 0, 0))
    e = sample_profile(prof, "inverted", GridSpec.cube(2, 1, 3, 3), time=0.7, lam=-1)
    path = tmp_path / "snap.txt"
    write_snapshot(path, e)
    first = path.read_text().splitlines()[0]
    assert first == f"# chart=inverted time=0.7 lambda=-1 n={len(e)}"
    back = read_snapshot(path)
    assert back.chart == e.chart and back.time == e.time and back.lam == -1
    np.testing.assert_array_equal(back.current, e.current)
    np.testing.assert_array_equal(back.label, e.label)
    np.testing.assert_array_equal(back.value, e.value)
    np.testing.assert_array_equal(back.weight, e.weight)
