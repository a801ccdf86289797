"""Forward scattering: integrate the inverted system from s = 1 towards s = 0,
extract the limit field E0 and the limit profile, and monitor norm growth.
"""

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .asymptotic import AsymptoticData
from .diagnostics import DiagnosticsRecord, log_exponent, loglog_slope
from .dynamics import StoredSource, TimeGrid, run_kdk
from .errors import CertificateError, DomainError
from .field import FieldConfig, current_density
from .phase_space import modified_frame, modified_frame_inverse

# <ln s> exponents of the a-priori bounds: moments <p>^a grow like <ln s>^a,
# q-gradients like <ln s>^5, p-gradients stay bounded
BOUND_EXPONENTS = {"L2": 0.0, "M0": 0.0, "M1": 1.0, "M2": 2.0, "Dq": 5.0, "Dp": 0.0, "D": 5.0}
EXPONENT_SLACK = 0.5


def _box(points, weights):
    c = np.average(points, axis=0, weights=weights)
    rms = np.sqrt(np.average(np.sum((points - c) ** 2, axis=1), weights=weights) / 3.0)
    return c, rms


def probe_box(e, scale=2.5):
    """Cube covering the charge-weighted spread of q1 and of the free limit q1 - p1."""
    if len(e) == 0:
        return np.zeros(3), 1.0
    c = np.asarray(e.charges)
    q = e.positions
    c1, r1 = _box(q, c)
    c2, r2 = _box(q - e.momenta, c)
    center = 0.5 * (c1 + c2)
    half = 0.5 * float(np.max(np.abs(c1 - c2))) + scale * max(r1, r2, 1e-3)
    return center, half


def lattice(center, half, n):
    ax = np.linspace(-half, half, n)
    g = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1).reshape(-1, 3)
    return g + np.asarray(center)


def data_norms(e, profile=None, grad=True):
    """The three smallness quantities of the forward theorem (sample maxima)."""
    if len(e) == 0:
        return {"L2": 0.0, "p2_sup": 0.0, "grad_sup": 0.0, "total": 0.0}
    v = np.abs(e.value)
    p2 = 1.0 + np.sum(e.momenta**2, axis=1)
    out = {"L2": e.l2_norm, "p2_sup": float(np.max(p2 * v))}
    if profile is not None and grad:
        g = profile.grad(e.label[:, :3], e.label[:, 3:])
        out["grad_sup"] = float(np.max(np.linalg.norm(g, axis=1)))
    else:
        out["grad_sup"] = float("nan")
    out["total"] = out["L2"] + out["p2_sup"] + (0.0 if math.isnan(out["grad_sup"]) else out["grad_sup"])
    return out


@dataclass
class ForwardRun:
    """A stored forward run plus field probes at every node (nodes decreasing in s)."""

    flow: object
    grid: TimeGrid
    gamma1: object
    profile: object
    cfg: FieldConfig
    probes: np.ndarray
    s: np.ndarray
    E_probe: np.ndarray
    gradE_probe: np.ndarray
    norms: dict
    notes: list = field(default_factory=list)

    @property
    def lam(self):
        return self.gamma1.lam

    def ensemble_at(self, s):
        return self.flow.ensemble_at(s)

    def node_index(self, s):
        i = int(np.argmin(np.abs(self.s - s)))
        if not math.isclose(self.s[i], s, rel_tol=1e-12):
            raise ValueError(f"s={s!r} is not a node of this run")
        return i

    def field_at(self, s, points, order=0):
        return self.flow.source()(s, np.atleast_2d(points), order)

    def evaluate(self, s, points, trust_radius=None):
        """gamma(s, q, p) by backward characteristics to s = 1."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        feet = self.flow.trace(pts, s, self.s[0])
        warn = self.flow.trust_warning(s, pts, trust_radius)
        if len(pts) == 0:
            return np.zeros(0), warn
        return np.asarray(self.profile(feet[:, :3], feet[:, 3:])), warn


def run_forward(gamma1, grid, cfg, profile=None, probes=None, n_probe=9, tangents=True,
                eps0=None, refresh="kick", cond_guard=1e8, grad_norms=True):
    """Integrate the inverted system from s = 1 down the geometric grid."""
    if gamma1.chart != "inverted":
        raise DomainError(f"forward runs start from inverted-chart data, got {gamma1.chart!r}")
    if grid.kind != "geometric":
        raise ValueError("forward runs need a geometric grid")
    if not math.isclose(gamma1.time, grid.nodes[0]):
        raise ValueError(f"data time {gamma1.time} does not match the first node {grid.nodes[0]}")
    notes = []
    norms = data_norms(gamma1, profile, grad=grad_norms)
    if eps0 is not None and norms["total"] > eps0:
        msg = (f"data norm {norms['total']:.3e} exceeds eps0={eps0:g}; the small-data theory "
               "does not cover this run")
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        notes.append(msg)
    if probes is None:
        center, half = probe_box(gamma1)
        probes = lattice(center, half, n_probe)
    flow, _ = run_kdk(gamma1, grid, cfg, tangents=tangents, refresh=refresh, cond_guard=cond_guard)
    flow.profile = profile
    # probes always measure the field of the data, also when the force is switched off
    src = StoredSource(flow.times, flow.positions, flow.charges, replace(cfg, coupling=True), "inverted")
    s_nodes = np.asarray(grid.nodes, dtype=float)
    E = np.empty((s_nodes.size, len(probes), 3))
    G = np.empty((s_nodes.size, len(probes), 3, 3))
    for i, s in enumerate(s_nodes):
        fv = src(s, probes, order=1)
        E[i] = fv.E
        G[i] = fv.grad
    if flow.meta.get("cond_exceeded"):
        notes.append(f"tangent condition above {cond_guard:g} at {len(flow.meta['cond_exceeded'])} nodes")
    return ForwardRun(flow, grid, gamma1, profile, cfg, np.asarray(probes), s_nodes, E, G, norms, notes)


# --- limit field --------------------------------------------------------------

def dyadic_pairs(s_nodes, s_max=0.25):
    """Index pairs (i, j) with s_i = 2^-k s_0 <= s_max and s_j = s_i / 2, both nodes present."""
    s = np.asarray(s_nodes)
    pairs = []
    for i, si in enumerate(s):
        if si > s_max * (1 + 1e-12):
            continue
        k = math.log2(s[0] / si)
        if abs(k - round(k)) > 1e-9:
            continue
        j = np.flatnonzero(np.isclose(s, 0.5 * si, rtol=1e-12, atol=0))
        if j.size:
            pairs.append((i, int(j[0])))
    return pairs


def _decreasing(diffs, floor):
    return all(b < a or (a <= floor and b <= floor) for a, b in zip(diffs[:-1], diffs[1:]))


@dataclass
class E0Extract:
    E0: np.ndarray
    probes: np.ndarray
    s_min: float
    pair_s: list
    cauchy: list
    cauchy_decreasing: bool
    tail_diff: float
    rate_s: np.ndarray
    rate_diff: np.ndarray
    slope: float
    asym: AsymptoticData

    def to_dict(self):
        return {
            "s_min": self.s_min,
            "E0_probe": self.E0.tolist(),
            "probes": self.probes.tolist(),
            "cauchy": {"pair_s": self.pair_s, "sup_diff": self.cauchy,
                       "decreasing": self.cauchy_decreasing, "tail_diff": self.tail_diff},
            "rate": {"s": self.rate_s.tolist(), "sup_diff": self.rate_diff.tolist(),
                     "slope": self.slope},
        }


def _sup(a):
    return float(np.max(np.linalg.norm(a, axis=-1))) if a.size else 0.0


def extract_E0(run, s_fit_max=0.25, cauchy_tol=None, n_pairs=4, require=True):
    """E0 := E(s_min) on the probes, with dyadic Cauchy certificate and rate fit.

    The certificate asks the sup differences over the last ``n_pairs`` dyadic
    pairs below ``s_fit_max`` to decrease.
    """
    s = run.s
    if np.sum(s < s_fit_max) < 4:
        raise DomainError("need at least four nodes below s = 0.25 to extract E0")
    k = int(np.argmin(s))
    E0 = run.E_probe[k]
    pairs = dyadic_pairs(s, s_fit_max)
    diffs = [_sup(run.E_probe[i] - run.E_probe[j]) for i, j in pairs]
    scale = max(_sup(E0), 1e-300)
    decreasing = len(diffs) >= min(n_pairs, 2) and _decreasing(diffs[-n_pairs:], 1e-14 * scale)
    order = np.argsort(s)
    tail = _sup(run.E_probe[order[1]] - run.E_probe[order[0]])
    sel = (s <= s_fit_max * (1 + 1e-12)) & (s > s[k])
    rate_s = s[sel]
    rate = np.array([_sup(run.E_probe[i] - E0) for i in np.flatnonzero(sel)])
    slope = loglog_slope(rate_s, rate, floor=1e-14 * scale)
    if require and not decreasing:
        raise CertificateError("field differences over dyadic pairs are not decreasing; "
                               "no limit field emitted", gate="E0_cauchy", history=diffs)
    if require and cauchy_tol is not None and tail > cauchy_tol:
        raise CertificateError(f"smallest-node field difference {tail:.3e} above tolerance "
                               f"{cauchy_tol:g}", gate="E0_cauchy_tol", history=diffs)
    st = run.flow.ensemble_at(s[k])
    asym = AsymptoticData.from_charges(st.positions, st.charges, run.cfg.softening,
                                       run.cfg.summation)
    return E0Extract(E0, run.probes, float(s[k]), [float(s[i]) for i, _ in pairs], diffs,
                     decreasing, tail, rate_s, rate, slope, asym)


# --- gauge ------------------------------------------------------------------------

@dataclass
class GaugeResult:
    values: np.ndarray
    shift: np.ndarray
    refinement_diff: float
    outside_trust_region: np.ndarray


def _log_trapezoid(times, fields):
    """int_1^s E ds'/s' = int_0^{ln s} E dtau over the given times (descending from 1)."""
    tau = np.log(times)
    acc = np.zeros_like(fields[0])
    for a in range(len(times) - 1):
        acc += 0.5 * (tau[a + 1] - tau[a]) * (fields[a] + fields[a + 1])
    return acc


def gauge_transform(run, s, points, trust_radius=None):
    """Gamma(s, q, p) = gamma(s, q, p + lam int_1^s E(s', q) ds'/s').

    The log-time integral is a trapezoid over every stored step boundary;
    ``refinement_diff`` is the change in Gamma when only every other
    boundary is used.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    src = run.flow.source()
    q = pts[:, :3]
    times = run.flow.times[: run.flow.time_index(s) + 1]
    fields = [src(t, q).E for t in times]
    shift = run.lam * _log_trapezoid(times, fields)
    shifted = pts.copy()
    shifted[:, 3:] += shift
    vals, warn = run.evaluate(s, shifted, trust_radius)
    refinement = 0.0
    if len(times) > 2 and len(pts):
        idx = list(range(0, len(times), 2))
        if idx[-1] != len(times) - 1:
            idx.append(len(times) - 1)
        coarse = run.lam * _log_trapezoid(times[idx], [fields[i] for i in idx])
        alt = pts.copy()
        alt[:, 3:] += coarse
        refinement = float(np.max(np.abs(run.evaluate(s, alt)[0] - vals)))
    if warn.any():
        warnings.warn(f"{int(warn.sum())} gauge-shifted points leave the trust region",
                      RuntimeWarning, stacklevel=2)
    return GaugeResult(vals, shift, refinement, warn)


# --- limit profile ----------------------------------------------------------------

@dataclass
class LimitProfile:
    points: np.ndarray
    gamma0: np.ndarray | None
    pair_s: list
    diffs: list
    decreasing: bool
    charge_rel_error: float
    emitted: bool

    def to_dict(self):
        return {"pair_s": self.pair_s, "sup_diff": self.diffs, "decreasing": self.decreasing,
                "charge_rel_error": self.charge_rel_error, "emitted": self.emitted,
                "gamma0": None if self.gamma0 is None else self.gamma0.tolist(),
                "points": self.points.tolist()}


def limit_probe_points(run, asym, n=4, scale=2.0):
    """(q, p) lattice covering the modified-frame preimage of the samples at s_min."""
    s_min = float(run.s[-1])
    st = run.flow.ensemble_at(s_min)
    if len(st) == 0:
        return np.zeros((0, 6))
    q = modified_frame_inverse(s_min, st.positions, st.momenta)
    p = st.momenta - run.lam * math.log(s_min) * asym.E0(q)
    c = np.asarray(st.charges)
    axes = []
    for arr in (q, p):
        m = np.average(arr, axis=0, weights=c)
        sd = np.sqrt(np.average((arr - m) ** 2, axis=0, weights=c))
        for j in range(3):
            axes.append(m[j] + scale * max(sd[j], 1e-3) * np.linspace(-1, 1, n))
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=1)


def nu_values(run, asym, s, points):
    """nu(s, q, p) = gamma(s, A(s, q, p)) with the modified frame A built from E0."""
    pts = np.atleast_2d(points)
    Q, P = modified_frame(s, pts[:, :3], pts[:, 3:], asym, run.lam)
    return run.evaluate(s, np.hstack([Q, P]))[0]


def extract_limit_profile(run, e0x, points=None, n=4, n_pairs=4, require=True):
    """gamma0 := nu(s_min) with a decreasing dyadic-difference certificate.

    Without coupling the characteristics are free and the frame correction
    is dropped, so nu is exactly s-independent.
    """
    asym = e0x.asym if run.cfg.coupling else AsymptoticData.zero()
    if points is None:
        points = limit_probe_points(run, asym, n)
    pairs = dyadic_pairs(run.s, s_max=1.0)
    pairs = pairs[-n_pairs:] if len(pairs) >= n_pairs else pairs
    cache = {}

    def nu(i):
        if i not in cache:
            cache[i] = nu_values(run, asym, float(run.s[i]), points)
        return cache[i]

    diffs = [float(np.max(np.abs(nu(i) - nu(j)))) if len(points) else 0.0 for i, j in pairs]
    floor = 1e-13 * max(float(np.max(np.abs(run.gamma1.value))) if len(run.gamma1) else 0.0, 1e-300)
    decreasing = len(pairs) >= n_pairs and _decreasing(diffs, floor)
    k = len(run.s) - 1
    s_min = float(run.s[k])
    # charge of the limit profile: nu at the modified-frame preimage of the samples
    st = run.flow.ensemble_at(s_min)
    if len(st):
        q = modified_frame_inverse(s_min, st.positions, st.momenta)
        p = st.momenta - run.lam * math.log(s_min) * asym.E0(q)
        v = nu_values(run, asym, s_min, np.hstack([q, p]))
        charge = math.fsum(st.weight * v**2)
        ref = run.gamma1.total_charge
        rel = abs(charge - ref) / ref
    else:
        rel = 0.0
    emitted = decreasing or not require
    gamma0 = nu(k) if emitted else None
    if require and not decreasing:
        raise CertificateError("dyadic differences of nu are not decreasing; no limit profile "
                               "emitted", gate="nu_cauchy", history=diffs)
    return LimitProfile(np.asarray(points), gamma0, [float(run.s[i]) for i, _ in pairs], diffs,
                        decreasing, rel, emitted)


# --- norm monitor ----------------------------------------------------------------

def norm_monitor(run, current_width=None):
    """Per-node norms of gamma with fitted <ln s> exponents.

    Sup norms are maxima over samples or probes, so they under-estimate the
    true suprema.  Gradients use the tangent maps: grad gamma = J^{-T} grad gamma1.
    """
    s = run.s
    n = s.size
    cols = {k: np.zeros(n) for k in ("L2", "M0", "M1", "M2", "Dq", "Dp", "Esup",
                                     "Linf", "P2", "gradEsup", "jsup")}
    width = current_width or (run.cfg.softening if run.cfg.softening > 0 else
                              float(np.max(np.ptp(run.probes, axis=0))) / 8)
    e1 = run.gamma1
    have_grad = run.profile is not None and bool(run.flow.jacobians)
    g1 = run.profile.grad(e1.label[:, :3], e1.label[:, 3:]) if have_grad and len(e1) else None
    for i, si in enumerate(s):
        st = run.flow.ensemble_at(si)
        v = np.abs(st.value)
        cols["L2"][i] = st.l2_norm
        cols["Esup"][i] = _sup(run.E_probe[i])
        cols["gradEsup"][i] = float(np.max(np.abs(run.gradE_probe[i]))) if run.gradE_probe[i].size else 0.0
        if len(st) == 0:
            continue
        jp = np.sqrt(1.0 + np.sum(st.momenta**2, axis=1))
        for a in (0, 1, 2):
            cols[f"M{a}"][i] = float(np.max(jp**a * v))
        cols["Linf"][i] = cols["M0"][i]
        cols["P2"][i] = float(np.max(np.sum(st.momenta**2, axis=1) * v))
        if g1 is not None:
            J = run.flow.jacobians[float(si)]
            g = np.linalg.solve(np.swapaxes(J, 1, 2), g1[:, :, None])[:, :, 0]
            cols["Dq"][i] = float(np.max(np.linalg.norm(g[:, :3], axis=1)))
            cols["Dp"][i] = float(np.max(np.linalg.norm(g[:, 3:], axis=1)))
        j = current_density(st.positions, st.momenta, st.charges, run.probes, width)
        cols["jsup"][i] = _sup(j)
    cols["D"] = np.maximum(cols["Dq"], cols["Dp"])
    cols["E_probe"] = run.E_probe
    rec = DiagnosticsRecord(s, cols)
    for name, bound in BOUND_EXPONENTS.items():
        if name in ("Dq", "Dp", "D") and g1 is None:
            continue
        k = log_exponent(s, cols[name])
        rec.fits[name] = {"exponent": k, "bound": bound, "pass": bool(k <= bound + EXPONENT_SLACK)}
    L2 = cols["L2"]
    rec.checks["L2_drift"] = float(np.max(np.abs(L2 - L2[0])) / L2[0]) if L2[0] > 0 else 0.0
    rec.notes.append("sup norms are sample/probe maxima (under-estimates of the true suprema)")
    rec.notes.append(f"current density smoothed with a Gaussian of width {width:.4g}")
    return rec


NORM_ROWS = ("L2", "M0", "M1", "M2", "Dq", "Dp", "Esup")


def format_norm_rows(rec):
    lines = ["# s " + " ".join(NORM_ROWS)]
    for row in rec.rows(NORM_ROWS):
        lines.append(" ".join(f"{x:.10e}" for x in row))
    return "\n".join(lines) + "\n"
