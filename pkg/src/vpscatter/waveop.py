"""Wave operator: solve the canonical system from the singular time s = 0 by
Picard iteration, audit the bootstrap norms, and map the result back to the
physical chart.

Relabeling: the asymptotic profile mu_inf(a, b) (a position-like, b
velocity-like) becomes sigma0(w, z) = mu_inf(a=z, b=w), so w plays the role
of the asymptotic velocity.  E0 is the field (not the potential) of the
b-marginal of mu_inf^2.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .asymptotic import AsymptoticData
from .diagnostics import DiagnosticsRecord, jbracket, loglog_slope
from .dynamics import (StoredSource, TimeGrid, canonical_rhs, grad_K, hessian_K,
                       integrate_canonical)
from .errors import CertificateError, DomainError
from .field import FieldConfig
from .phase_space import (Ensemble, GridSpec, canonical_positions, from_canonical, invert,
                          japanese, sample_profile, theta)
from .profiles import SwappedProfile

MAX_HALVINGS = 4


# --- asymptotic data -----------------------------------------------------------------

@dataclass
class AsymptoticSetup:
    sigma0: Ensemble
    asym: AsymptoticData
    profile: object          # sigma0 as a function of (w, z)
    mu_inf: object
    c0: dict
    field_of_data: AsymptoticData = None
    notes: list = field(default_factory=list)


def sigma0_grid(mu_inf, n=4, half_widths=2.5):
    """(w, z) sampling grid: w spans the b-support of mu_inf, z its a-support."""
    ca, ra, cb, rb = mu_inf.support()
    fa = min(1.0, half_widths / getattr(mu_inf, "support_widths", 6.0))
    w_half, z_half = max(rb * fa, 1e-3), max(ra * fa, 1e-3)
    lo = tuple(np.asarray(cb) - w_half) + tuple(np.asarray(ca) - z_half)
    hi = tuple(np.asarray(cb) + w_half) + tuple(np.asarray(ca) + z_half)
    return GridSpec(lo, hi, (n,) * 6)


def c0_quantities(sigma0, profile, asym):
    """Data-side smallness constants (sample maxima, so lower estimates)."""
    out = {"L2": sigma0.l2_norm}
    if len(sigma0):
        w, z = sigma0.label[:, :3], sigma0.label[:, 3:]
        jz = japanese(z)
        v = np.abs(sigma0.value)
        out["z5_sup"] = float(np.max(jz**5 * v))
        g = profile.grad(w, z)
        h = profile.hessian(w, z)
        out["grad_w"] = float(np.max(np.abs(g[:, :3])))
        out["z_grad_z"] = float(np.max(jz[:, None] * np.abs(g[:, 3:])))
        out["hess_ww"] = float(np.max(np.abs(h[:, :3, :3])))
        out["z_hess_wz"] = float(np.max(jz[:, None, None] * np.abs(h[:, :3, 3:])))
        out["z2_hess_zz"] = float(np.max(jz[:, None, None] ** 2 * np.abs(h[:, 3:, 3:])))
        out["sup"] = float(np.max(v))
    else:
        for k in ("z5_sup", "grad_w", "z_grad_z", "hess_ww", "z_hess_wz", "z2_hess_zz", "sup"):
            out[k] = 0.0
    out["sigma_total"] = sum(out[k] for k in ("L2", "z5_sup", "sup", "grad_w", "z_grad_z",
                                              "hess_ww", "z_hess_wz", "z2_hess_zz"))
    norms = asym.norms() if not asym.is_zero else {"W3inf": 0.0}
    out["E0_W3"] = norms["W3inf"]
    out["c0"] = max(out["sigma_total"], math.sqrt(out["E0_W3"]))
    return out


def prepare_asymptotic(mu_inf, grid=None, lam=1, cfg=None, mode="ensemble", w3_bound=None, n=4):
    """Sample sigma0 in the canonical chart at s = 0 and build E0."""
    cfg = cfg or FieldConfig()
    profile = SwappedProfile(mu_inf)
    grid = grid or sigma0_grid(mu_inf, n)
    sigma0 = sample_profile(profile, "canonical", grid, time=0.0, lam=lam, relabeled_from="mu_inf")
    notes = []
    if len(sigma0):
        field_of_data = AsymptoticData.from_charges(sigma0.positions, sigma0.charges,
                                                    cfg.softening, cfg.summation, profile=mu_inf)
    else:
        field_of_data = AsymptoticData.zero()
    if len(sigma0) == 0 or not cfg.coupling:
        # without coupling the frame correction vanishes along with the force
        asym = AsymptoticData.zero()
    elif mode == "analytic":
        gauss = mu_inf.b_marginal_gaussian()
        if gauss is None:
            raise DomainError(f"no closed-form E0 for {type(mu_inf).__name__}; use mode='ensemble'")
        center, rho0, sigma = gauss
        asym = AsymptoticData.radial_gaussian(center, rho0, sigma, profile=mu_inf)
    elif mode == "ensemble":
        asym = field_of_data
    else:
        raise ValueError(f"unknown asymptotic-field mode {mode!r}")
    c0 = c0_quantities(sigma0, profile, asym)
    if w3_bound is not None and c0["E0_W3"] > w3_bound:
        msg = f"E0 W^(3,inf) estimate {c0['E0_W3']:.3e} exceeds the configured bound {w3_bound:g}"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        notes.append(msg)
    return AsymptoticSetup(sigma0, asym, profile, mu_inf, c0, field_of_data, notes)


# --- Picard iteration -------------------------------------------------------------------

def source_times(grid):
    """Every time at which a canonical run evaluates its field: step boundaries and midpoints."""
    t = grid.fine_times()
    mids = [0.5 * (a + b) for a, b in zip(t[1:-1], t[2:])]
    return sorted(set(t.tolist()) | set(mids))


def initial_source(sigma0, asym, grid, cfg, kind="frozen"):
    """Field source of the zeroth iterate.

    ``frozen``: sigma(s) = sigma0 in (w, z), charges at q(s, w, z).
    ``free``: charges streamed freely, q = w + s z.
    """
    times = source_times(grid)
    y = sigma0.current
    pos = []
    for s in times:
        if kind == "frozen":
            pos.append(canonical_positions(s, y[:, :3], y[:, 3:], asym, sigma0.lam))
        elif kind == "free":
            pos.append(y[:, :3] + s * y[:, 3:])
        else:
            raise ValueError(f"unknown initial iterate {kind!r}")
    return StoredSource(times, pos, sigma0.charges, cfg, "inverted")


def test_set(sigma0, grid, stride=4, n=3, scale=2.0):
    """Nodes (every ``stride``-th nonzero node plus the last) and a (w, z) probe lattice."""
    nodes = list(grid.nodes[1::stride])
    if nodes[-1] != grid.nodes[-1]:
        nodes.append(grid.nodes[-1])
    if len(sigma0) == 0:
        return [float(s) for s in nodes], np.zeros((0, 6))
    c = np.asarray(sigma0.charges)
    y = sigma0.current
    m = np.average(y, axis=0, weights=c)
    sd = np.sqrt(np.average((y - m) ** 2, axis=0, weights=c))
    axes = [m[j] + scale * max(sd[j], 1e-3) * np.linspace(-1, 1, n) for j in range(6)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return [float(s) for s in nodes], np.stack([g.ravel() for g in mesh], axis=1)


@dataclass
class PicardState:
    n: int
    flow: object
    sup_diff: list
    ratios: list
    converged: bool
    T_star: float
    grid: TimeGrid
    setup: AsymptoticSetup
    cfg: FieldConfig
    test_nodes: list
    test_points: np.ndarray
    test_values: dict
    attempts: list = field(default_factory=list)

    @property
    def contraction_ratio(self):
        return self.ratios[-1] if self.ratios else None

    def to_dict(self):
        return {"iterations": self.n, "sup_diff": self.sup_diff, "ratios": self.ratios,
                "converged": self.converged, "T_star": self.T_star,
                "grid": self.grid.describe(), "attempts": self.attempts,
                "test_nodes": self.test_nodes, "n_test_points": int(len(self.test_points)),
                "c0": self.setup.c0}


def _evaluate_iterate(flow, profile, nodes, points, reverse="explicit"):
    return {s: flow.evaluate(s, points, profile, reverse) for s in nodes}


def _sweep_diff(new, old):
    diffs = [float(np.max(np.abs(new[s] - old[s]))) for s in new if new[s].size]
    return max(diffs) if diffs else 0.0


def _picard_once(setup, grid, cfg, tol, max_iter, initial, stride, n_test, guard, ratio_gate,
                 reverse):
    sigma0, asym, profile = setup.sigma0, setup.asym, setup.profile
    nodes, pts = test_set(sigma0, grid, stride, n_test)
    if len(sigma0) == 0:
        flow, _ = integrate_canonical(sigma0, grid, asym, None, cfg, guard=guard)
        zeros = {s: np.zeros(len(pts)) for s in nodes}
        return flow, [0.0], [], True, zeros, nodes, pts, None
    source = initial_source(sigma0, asym, grid, cfg, initial)
    if initial == "frozen":
        old = {s: np.asarray(profile(pts[:, :3], pts[:, 3:])) for s in nodes}
    else:
        old = {s: np.zeros(len(pts)) for s in nodes}
    sup_diff, ratios = [], []
    flow = None
    for _ in range(max_iter):
        flow, _ = integrate_canonical(sigma0, grid, asym, source, cfg, guard=guard)
        new = _evaluate_iterate(flow, profile, nodes, pts, reverse)
        d = _sweep_diff(new, old)
        sup_diff.append(d)
        if len(sup_diff) >= 2:
            ratios.append(d / sup_diff[-2] if sup_diff[-2] > 0 else 0.0)
        if d < tol:
            return flow, sup_diff, ratios, True, new, nodes, pts, None
        if len(ratios) >= 2 and ratios[-1] >= 1.0:
            return flow, sup_diff, ratios, False, new, nodes, pts, "non-contractive"
        if ratio_gate is not None and len(ratios) >= 2 and ratios[-1] > ratio_gate:
            return flow, sup_diff, ratios, False, new, nodes, pts, "contraction ratio above gate"
        old = new
        source = flow.stored_source()
    return flow, sup_diff, ratios, False, old, nodes, pts, "max_iter reached"


def picard_iterate(setup, grid=None, cfg=None, tol=1e-8, max_iter=12, initial="frozen",
                   T_star=1.0, s_min=1e-3, substeps=1, halvings=MAX_HALVINGS, stride=4, n_test=3,
                   guard=1e6, ratio_gate=None, reverse="explicit"):
    """Picard iteration on [0, T*]; T* is halved on failure up to ``halvings`` times.

    Iterate n+1 pushes sigma0 through the flow of K_n, whose field comes from
    the stored sample positions of iterate n.  The contraction metric is the
    sup over the test set of |sigma_(n+1) - sigma_(n)|, both evaluated by
    backward characteristics.
    """
    cfg = cfg or FieldConfig()
    attempts = []
    T = T_star
    for h in range(halvings + 1):
        g = grid if (grid is not None and h == 0) else TimeGrid.canonical(T, s_min, substeps=substeps)
        flow, sup_diff, ratios, ok, vals, nodes, pts, why = _picard_once(
            setup, g, cfg, tol, max_iter, initial, stride, n_test, guard, ratio_gate, reverse)
        attempts.append({"T_star": float(g.nodes[-1]), "sup_diff": sup_diff, "ratios": ratios,
                         "converged": ok, "reason": why})
        if ok:
            return PicardState(len(sup_diff), flow, sup_diff, ratios, True, float(g.nodes[-1]), g,
                               setup, cfg, nodes, pts, vals, attempts)
        T = float(g.nodes[-1]) / 2.0
        if T <= s_min * 2:
            break
    raise CertificateError(f"Picard iteration failed after {len(attempts)} attempts "
                           f"({attempts[-1]['reason']})", gate="picard", history=attempts)


def extra_sweep(state, reverse="explicit"):
    """One more sweep fed with the converged flow; returns the test-set sup change."""
    setup = state.setup
    flow, _ = integrate_canonical(setup.sigma0, state.grid, setup.asym, state.flow.stored_source(),
                                  state.cfg)
    new = _evaluate_iterate(flow, setup.profile, state.test_nodes, state.test_points, reverse)
    return _sweep_diff(new, state.test_values)


def self_consistent_run(state, tangents=True, guard=1e6):
    """Converged solution pushed once more with its own field and tangent maps."""
    setup = state.setup
    flow, _ = integrate_canonical(setup.sigma0, state.grid, setup.asym, state.flow.stored_source(),
                                  state.cfg, tangents=tangents, guard=guard)
    return flow


# --- bound audits -----------------------------------------------------------------

def verify_K_bounds(state, flow=None, probes=None, s_fit_max=0.25, reference=None,
                    stability_factor=2.0):
    """Measured left sides of the K bounds with fitted constants per node.

    Constants: |grad_z K| <= 2 C, |grad_w K| <= C (min(1/s, |z|) + <ln s>^3),
    |K_wz| + |theta K_zz| + |theta^-1 K_ww| <= C <ln s>^4.  Also the decay
    slope of sup |E(s) - E0| on spatial probes.  With a ``reference`` report
    (another resolution) a pass needs the constants to agree within
    ``stability_factor``.
    """
    flow = flow or state.flow
    setup = state.setup
    asym, lam = setup.asym, setup.sigma0.lam
    src = flow.stored_source()
    nodes = [s for s in sorted(flow.states) if s > 0]
    rec = {"s": [], "gradz": [], "gradw": [], "hess": [], "E_minus_E0": []}
    if probes is None:
        y0 = setup.sigma0.current
        if len(y0):
            c, half = _box3(y0[:, :3], setup.sigma0.charges)
            ax = np.linspace(-half, half, 7)
            probes = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1).reshape(-1, 3) + c
        else:
            probes = np.zeros((1, 3))
    E0p = asym.E0(probes)
    for s in nodes:
        y = flow.states[s]
        rec["s"].append(s)
        if len(y) == 0:
            for k in ("gradz", "gradw", "hess", "E_minus_E0"):
                rec[k].append(0.0)
            continue
        w, z = y[:, :3], y[:, 3:]
        q = canonical_positions(s, w, z, asym, lam)
        fv = src(s, q, order=1, self_index=np.arange(len(q)))
        gw, gz = grad_K(s, w, z, fv.E, asym, lam)
        H = hessian_K(s, w, z, asym, None, lam, fv.grad, fv.E)
        th = theta(s, z)
        lnb = float(jbracket(math.log(s)))
        nz = np.linalg.norm(z, axis=1)
        rec["gradz"].append(float(np.max(np.linalg.norm(gz, axis=1))) / 2.0)
        rec["gradw"].append(float(np.max(np.linalg.norm(gw, axis=1) / (np.minimum(1 / s, nz) + lnb**3))))
        comb = (np.max(np.abs(H[:, :3, 3:]), axis=(1, 2)) + th * np.max(np.abs(H[:, 3:, 3:]), axis=(1, 2))
                + np.max(np.abs(H[:, :3, :3]), axis=(1, 2)) / th)
        rec["hess"].append(float(np.max(comb)) / lnb**4)
        rec["E_minus_E0"].append(float(np.max(np.linalg.norm(src(s, probes).E - E0p, axis=1))))
    s_arr = np.array(rec["s"])
    diff = np.array(rec["E_minus_E0"])
    sel = s_arr <= s_fit_max * (1 + 1e-12)
    slope = loglog_slope(s_arr[sel], diff[sel], floor=1e-14 * max(float(np.max(np.abs(E0p))), 1e-300))
    report = {"s": rec["s"], "E_minus_E0": rec["E_minus_E0"], "E_decay_slope": slope,
              "E_decay_pass": bool(len(setup.sigma0) == 0 or slope >= 0.9)}
    for name in ("gradz", "gradw", "hess"):
        const = float(np.max(rec[name])) if rec[name] else 0.0
        entry = {"per_node": rec[name], "fitted_constant": const, "pass": bool(np.isfinite(const))}
        if reference is not None:
            ref = reference[name]["fitted_constant"]
            ratio = max(const / ref, ref / const) if ref > 0 and const > 0 else 1.0
            entry.update(reference_constant=ref, stability_ratio=ratio,
                         **{"pass": bool(ratio <= stability_factor)})
        report[name] = entry
    return report


def _box3(x, c):
    m = np.average(x, axis=0, weights=c)
    sd = float(np.sqrt(np.max(np.average((x - m) ** 2, axis=0, weights=c))))
    return m, 2.5 * max(sd, 1e-3)


def _second_derivs(flow, profile, s, y, h):
    """Hessian of sigma(s, .) at points y by central differences of traced values."""
    m = len(y)
    H = np.empty((m, 6, 6))
    f0 = flow.evaluate(s, y, profile)
    shifts = {}

    def val(i, a, j=None, b=0):
        key = (i, a, j, b)
        if key not in shifts:
            yy = y.copy()
            yy[:, i] += a * h
            if j is not None:
                yy[:, j] += b * h
            shifts[key] = flow.evaluate(s, yy, profile)
        return shifts[key]

    for i in range(6):
        H[:, i, i] = (val(i, 1) - 2 * f0 + val(i, -1)) / h**2
        for j in range(i + 1, 6):
            H[:, i, j] = H[:, j, i] = (val(i, 1, j, 1) - val(i, 1, j, -1) - val(i, -1, j, 1)
                                      + val(i, -1, j, -1)) / (4 * h * h)
    return H


def theta_norm_monitor(state, flow=None, nodes=None, n_second=32, h=1e-3, ell=2, seed=0):
    """A, B, C bootstrap quantities per node with pass flags against 4 c0.

    B uses tangent maps (grad sigma = J^{-T} grad sigma0); C uses central
    differences of traced values on a fixed subset of samples.
    """
    flow = flow or self_consistent_run(state)
    setup = state.setup
    sig0, prof = setup.sigma0, setup.profile
    if nodes is None:
        nodes = [0.0] + list(state.test_nodes)
    c0 = setup.c0["c0"]
    nodes = sorted(flow.states) if nodes is None else sorted(nodes)
    cols = {k: np.zeros(len(nodes)) for k in ("L2", "A", "B", "C", "moment")}
    if len(sig0):
        g0 = prof.grad(sig0.label[:, :3], sig0.label[:, 3:])
        rng = np.random.default_rng(seed)
        sub = np.sort(rng.choice(len(sig0), size=min(n_second, len(sig0)), replace=False))
        mom0 = float(np.max(japanese(sig0.current) ** ell * np.abs(sig0.value)))
    for k, s in enumerate(nodes):
        y = flow.states[s]
        cols["L2"][k] = sig0.l2_norm
        if len(y) == 0:
            continue
        v = np.abs(sig0.value)
        z = y[:, 3:]
        cols["A"][k] = sig0.l2_norm + float(np.max(japanese(z) ** 5 * v))
        th = theta(s, z)
        if s in flow.jacobians:
            J = flow.jacobians[s]
            g = np.linalg.solve(np.swapaxes(J, 1, 2), g0[:, :, None])[:, :, 0]
            cols["B"][k] = (float(np.max(np.abs(g[:, :3])))
                            + float(np.max(th[:, None] * np.abs(g[:, 3:]))))
        if s > 0:
            Hs = _second_derivs(flow, prof, s, y[sub], h)
            ths = th[sub]
            cols["C"][k] = (float(np.max(np.abs(Hs[:, :3, :3])))
                            + float(np.max(ths[:, None, None] * np.abs(Hs[:, :3, 3:])))
                            + float(np.max(ths[:, None, None] ** 2 * np.abs(Hs[:, 3:, 3:]))))
        else:
            hs = prof.hessian(y[sub, :3], y[sub, 3:])
            cols["C"][k] = (float(np.max(np.abs(hs[:, :3, :3]))) + float(np.max(np.abs(hs[:, :3, 3:])))
                            + float(np.max(np.abs(hs[:, 3:, 3:]))))
        cols["moment"][k] = float(np.max(japanese(y) ** ell * v)) / mom0 if mom0 > 0 else 0.0
    rec = DiagnosticsRecord(np.array(nodes), cols)
    bound = 4.0 * c0
    for name in ("A", "B", "C"):
        rec.checks[name] = {"max": float(np.max(cols[name])), "bound": bound,
                            "pass": bool(np.max(cols[name]) <= bound + 1e-300)}
    rec.checks["moment"] = {"fitted_constant": float(np.max(cols["moment"])),
                            "pass": bool(np.max(cols["moment"]) <= 2.0)}
    L2 = cols["L2"]
    rec.checks["L2_drift"] = float(np.max(np.abs(L2 - L2[0])) / L2[0]) if L2[0] > 0 else 0.0
    rec.notes.append("bounds use 4 c0 with c0 from sample maxima of the data")
    return rec


# --- back to the physical chart ------------------------------------------------------

def reconstruct_physical(state_or_flow, s_target=1.0):
    """Canonical node state -> inverted chart -> physical chart at t = 1/s."""
    flow = state_or_flow.flow if isinstance(state_or_flow, PicardState) else state_or_flow
    if not s_target > 0:
        raise DomainError("reconstruction needs s_target > 0")
    try:
        e = flow.ensemble_at(s_target)
    except ValueError:
        raise DomainError(f"s={s_target} is outside the stored flow (nodes up to "
                          f"{max(flow.states):g})") from None
    if len(e) == 0:
        return Ensemble(e.label, e.current, e.value, e.weight, "physical", 1.0 / s_target, e.lam,
                        e.label_chart, e.label_time, dict(e.meta))
    q, p = from_canonical(s_target, e.current[:, :3], e.current[:, 3:], flow.asym, e.lam)
    inv = e.with_current(np.hstack([q, p]), chart="inverted", time=s_target)
    return invert(inv)


def canonical_rhs_at(flow, s, y):
    """Vector field of the stored flow at (s, y), for diagnostics."""
    q = canonical_positions(s, y[:, :3], y[:, 3:], flow.asym, flow.lam)
    return canonical_rhs(s, y, flow.source(s, q).E, flow.asym, flow.lam)
