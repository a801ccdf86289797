from dataclasses import replace

import numpy as np
import pytest

from vpscatter import forward as fw
from vpscatter.config import profile_grid
from vpscatter.dynamics import TimeGrid
from vpscatter.errors import CertificateError, DomainError
from vpscatter.field import FieldConfig, kernel_field
from vpscatter.phase_space import sample_profile
from vpscatter.profiles import GaussianProfile

SOFT = 0.2


def _run(eps, coupling=True, n=3, s_min=1e-3, **kw):
    prof = GaussianProfile(eps, 1.0, 0.3, center_b=(0.5, 0, 0))
    e = sample_profile(prof, "inverted", profile_grid(prof, n), time=1.0)
    grid = TimeGrid.geometric(1.0, s_min, substeps=2)
    return fw.run_forward(e, grid, FieldConfig(softening=SOFT, coupling=coupling), profile=prof,
                          n_probe=5, **kw)


@pytest.fixture(scope="module")
def small():
    return _run(0.1)


@pytest.fixture(scope="module")
def half():
    return _run(0.05)


@pytest.fixture(scope="module")
def free():
    return _run(0.1, coupling=False)


def test_free_run_probes_follow_free_field(free):
    e1 = free.gamma1
    for i in (0, 7, len(free.s) - 1):
        s = free.s[i]
        pos = e1.positions + (s - 1) * e1.momenta
        ref = kernel_field(pos, e1.charges, free.probes, SOFT).E
        np.testing.assert_allclose(free.E_probe[i], ref, rtol=1e-10, atol=1e-14 * np.max(np.abs(ref)))


def test_free_run_limit_profile_is_free_shift(free):
    x = fw.extract_E0(free)
    lp = fw.extract_limit_profile(free, x, n=3)
    assert max(lp.diffs) < 1e-10
    q, p = lp.points[:, :3], lp.points[:, 3:]
    np.testing.assert_allclose(lp.gamma0, free.profile(q + p, p), rtol=1e-10,
                               atol=1e-12 * np.max(np.abs(free.gamma1.value)))


def test_free_run_field_converges_at_slope_one(free):
    x = fw.extract_E0(free)
    assert x.cauchy_decreasing
    assert 0.9 <= x.slope <= 1.3


def test_small_data_run_reaches_floor_with_volume_preserved(small):
    assert small.s[-1] == pytest.approx(1e-3)
    dets = [np.linalg.det(J) for J in small.flow.jacobians.values()]
    assert max(float(np.max(np.abs(d - 1))) for d in dets) < 1e-6


def test_field_is_quadratic_in_amplitude_at_initial_node(small):
    double = _run(0.2, s_min=0.5)
    np.testing.assert_allclose(double.E_probe[0], 4 * small.E_probe[0], rtol=1e-12, atol=1e-18)


def test_small_data_field_limit_rate_and_scaling(small, half):
    x = fw.extract_E0(small)
    xh = fw.extract_E0(half)
    assert x.cauchy_decreasing and x.slope >= 0.9
    sup = np.max(np.abs(x.E0))
    assert np.max(np.abs(x.E0 - 4 * xh.E0)) < 0.05 * sup


def test_extract_E0_refuses_non_cauchy_history(small):
    E = small.E_probe.copy()
    pairs = fw.dyadic_pairs(small.s)
    # make the last dyadic difference grow
    i, j = pairs[-1]
    E[j] = E[i] + 10 * (E[j] - E[i]) + 1e-3
    with pytest.raises(CertificateError):
        fw.extract_E0(replace(small, E_probe=E))


def test_extract_E0_needs_nodes_below_quarter():
    run = _run(0.1, s_min=0.2)
    with pytest.raises(DomainError):
        fw.extract_E0(run)


def test_gauge_transform(small, free):
    pts = np.random.default_rng(0).normal(size=(12, 6)) * 0.5
    at_one = fw.gauge_transform(small, 1.0, pts)
    np.testing.assert_array_equal(at_one.values, small.evaluate(1.0, pts)[0])
    s = float(small.s[20])
    g = fw.gauge_transform(small, s, pts)
    assert g.refinement_diff < 1e-4
    assert np.max(np.abs(g.shift)) > 0
    gf = fw.gauge_transform(free, s, pts)
    np.testing.assert_array_equal(gf.values, free.evaluate(s, pts)[0])


def test_small_data_limit_profile_certificate(small):
    x = fw.extract_E0(small)
    lp = fw.extract_limit_profile(small, x, n=3)
    assert lp.emitted and lp.decreasing and len(lp.diffs) >= 4
    assert lp.charge_rel_error < 1e-3


def test_norm_monitor(small, free):
    rec = fw.norm_monitor(small)
    assert rec.checks["L2_drift"] < 1e-10
    assert rec.fits["M2"]["exponent"] <= 2.5
    assert rec.fits["D"]["exponent"] <= 5.5
    rec_free = fw.norm_monitor(free)
    assert all(abs(f["exponent"]) < 1e-12 for f in rec_free.fits.values())
    text = fw.format_norm_rows(rec)
    assert text.startswith("# s L2 M0 M1 M2 Dq Dp Esup")
    assert len(text.splitlines()) == len(small.s) + 1


def test_large_data_warns_but_runs():
    with pytest.warns(RuntimeWarning, match="eps0"):
        run = _run(1.0, s_min=0.5, eps0=1e-3)
    assert run.notes


def test_inverted_chart_required(small):
    e = small.gamma1.with_current(small.gamma1.current, chart="physical")
    with pytest.raises(DomainError):
        fw.run_forward(e, small.grid, small.cfg)


def test_data_norms_of_gaussian():
    prof = GaussianProfile(0.1, 1.0, 0.3)
    e = sample_profile(prof, "inverted", profile_grid(prof, 3))
    d = fw.data_norms(e, prof)
    assert d["L2"] == pytest.approx(e.l2_norm)
    # momenta are sampled within 2.5 widths of the centre
    assert 0 < d["p2_sup"] <= 0.1 * (1 + 3 * 0.75**2)
    assert d["total"] == pytest.approx(d["L2"] + d["p2_sup"] + d["grad_sup"])
