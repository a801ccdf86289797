"""Characteristic integrators for the physical, inverted and canonical charts.

Physical chart:   dx/dt = v,  dv/dt = lam E(t, x)
Inverted chart:   dq/ds = p,  dp/ds = lam s^-1 E(s, q)
Canonical chart:  dw/ds = -lam E(s, q),
                  dz/ds = lam s^-1 [E(s, q) - E0(w)] + lam^2 ln(s) grad E0(w)^T E(s, q),
                  q = w + s z + lam s ln(s) E0(w).

The first two use kick-drift-kick (in tau = ln s for the inverted chart, so
the 1/s weight of the kick is integrated exactly); the canonical chart uses
explicit midpoint steps on a geometric grid, with a closed-form first step
out of the singular time s = 0.

Runs store the source positions used at every field evaluation, so single
characteristics can later be re-integrated against exactly the same fields.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import DomainError, NumericalGuardError
from .field import FieldConfig, FieldValues, kernel_field
from .phase_space import Ensemble, canonical_positions

DEFAULT_LOG2_RATIO = -0.25


# --- time grids ------------------------------------------------------------------

@dataclass(frozen=True)
class TimeGrid:
    """Ordered nodes plus a substep count per node interval.

    ``uniform`` grids are for the physical chart.  ``geometric`` grids hold
    s_{k+1} = ratio * s_k down to an explicit floor s_min (the final node);
    ``canonical`` grids are the same nodes in increasing order, prefixed by 0.
    """

    kind: str
    nodes: np.ndarray
    substeps: int = 1
    ratio: float | None = None
    s_min: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "nodes", np.asarray(self.nodes, dtype=float))
        if self.kind not in ("uniform", "geometric", "canonical"):
            raise ValueError(f"unknown grid kind {self.kind!r}")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        if self.nodes.size < 2:
            raise ValueError("a time grid needs at least two nodes")

    @classmethod
    def uniform(cls, t0, t1, dt, substeps=1):
        n = max(int(round(abs(t1 - t0) / dt)), 1)
        return cls("uniform", t0 + (t1 - t0) * np.arange(n + 1) / n, substeps)

    @staticmethod
    def _geometric_nodes(s_start, s_min, log2_ratio):
        if not 0 < s_min < s_start:
            raise DomainError(f"geometric grid needs 0 < s_min < s_start (got {s_min}, {s_start})")
        nodes = [s_start]
        k = 1
        while True:
            s = s_start * 2.0 ** (k * log2_ratio)
            if s <= s_min * (1 + 1e-9):
                break
            nodes.append(s)
            k += 1
        nodes.append(s_min)
        return np.array(nodes)

    @classmethod
    def geometric(cls, s_start=1.0, s_min=1e-3, log2_ratio=DEFAULT_LOG2_RATIO, substeps=1):
        nodes = cls._geometric_nodes(s_start, s_min, log2_ratio)
        return cls("geometric", nodes, substeps, 2.0**log2_ratio, s_min)

    @classmethod
    def canonical(cls, T=1.0, s_min=1e-3, log2_ratio=DEFAULT_LOG2_RATIO, substeps=1):
        nodes = cls._geometric_nodes(T, s_min, log2_ratio)[::-1]
        return cls("canonical", np.concatenate([[0.0], nodes]), substeps, 2.0**log2_ratio, s_min)

    def fine_times(self):
        """All step boundaries; substeps are uniform in t (uniform grids) or in ln s."""
        out = [self.nodes[0]]
        for a, b in zip(self.nodes[:-1], self.nodes[1:]):
            if self.kind == "uniform" or a == 0.0:
                sub = [a + (b - a) * j / self.substeps for j in range(1, self.substeps + 1)]
                if a == 0.0:
                    sub = [b]
            else:
                sub = [a * (b / a) ** (j / self.substeps) for j in range(1, self.substeps + 1)]
            sub[-1] = b
            out.extend(sub)
        return np.array(out)

    def refined(self):
        """Same nodes with twice the substeps (for self-convergence checks)."""
        return TimeGrid(self.kind, self.nodes, 2 * self.substeps, self.ratio, self.s_min)

    def describe(self):
        return {"kind": self.kind, "n_nodes": int(self.nodes.size), "first": float(self.nodes[0]),
                "last": float(self.nodes[-1]), "substeps": self.substeps, "ratio": self.ratio,
                "s_min": self.s_min}


# --- field sources -------------------------------------------------------------

class ZeroSource:
    def __call__(self, t, targets, order=0, self_index=None):
        m = np.atleast_2d(targets).shape[0]
        return FieldValues(np.zeros((m, 3)), np.zeros((m, 3, 3)) if order >= 1 else None)


class AnalyticSource:
    """Prescribed field E(x) (or E(t, x) with ``time_dependent``) and its gradient."""

    def __init__(self, E, grad=None, time_dependent=False):
        self.E = E
        self.grad = grad
        self.time_dependent = time_dependent

    @classmethod
    def from_asymptotic(cls, asym):
        return cls(asym.E0, asym.grad_E0)

    def __call__(self, t, targets, order=0, self_index=None):
        x = np.atleast_2d(targets)
        args = (t, x) if self.time_dependent else (x,)
        out = FieldValues(np.asarray(self.E(*args), dtype=float))
        if order >= 1:
            if self.grad is None:
                raise ValueError("analytic source has no gradient")
            out.grad = np.asarray(self.grad(*args), dtype=float)
        return out


class StoredSource:
    """Charges at recorded positions, one position array per time."""

    def __init__(self, times, positions, charges, cfg, chart):
        self.times = [float(t) for t in times]
        self.index = {t: i for i, t in enumerate(self.times)}
        self.positions = positions
        self.charges = np.ascontiguousarray(charges, dtype=float)
        self.cfg = cfg
        self.chart = chart

    def positions_at(self, t):
        try:
            return self.positions[self.index[float(t)]]
        except KeyError:
            raise KeyError(f"no stored sources at time {t!r}") from None

    def __call__(self, t, targets, order=0, self_index=None):
        x = np.atleast_2d(targets)
        if not self.cfg.coupling:
            return ZeroSource()(t, x, order)
        idx = self_index if self.cfg.exclude_self else None
        return kernel_field(self.positions_at(t), self.charges, x,
                            self.cfg.softening_at(self.chart, t), order, self.cfg.summation,
                            self_index=idx, skip_coincident=self.cfg.exclude_self)

    def __len__(self):
        return len(self.charges)


def _own_index(source, n, cfg):
    """Self indices when a stored source is made of the integrated samples themselves.

    Only for the bare kernel: with softening the counterpart's term is finite
    and stays in, so backward traces (which have no indices) see the same field.
    """
    if (cfg.exclude_self and cfg.softening == 0 and isinstance(source, StoredSource)
            and len(source) == n):
        return np.arange(n)
    return None


def _self_values(positions, charges, cfg, chart, t, order):
    if not cfg.coupling:
        return ZeroSource()(t, positions, order)
    n = positions.shape[0]
    idx = np.arange(n) if cfg.exclude_self else None
    return kernel_field(positions, charges, positions, cfg.softening_at(chart, t), order,
                        cfg.summation, self_index=idx, skip_coincident=idx is not None)


# --- kick-drift-kick (physical / inverted) -----------------------------------------

def kick_drift(chart, ta, tb):
    """Half-kick weight and drift length of one KDK step from ta to tb."""
    if chart == "physical":
        return 0.5 * (tb - ta), tb - ta
    if chart == "inverted":
        if ta <= 0 or tb <= 0:
            raise DomainError(f"inverted-chart step touches s <= 0 ({ta} -> {tb}); "
                              "the singular time is handled in the canonical chart")
        return 0.5 * math.log(tb / ta), tb - ta
    raise ValueError(f"KDK steps are defined for physical/inverted charts, not {chart!r}")


@dataclass
class KDKFlow:
    """A stored physical or inverted run.

    ``positions[i]`` are the source positions that generated the field at
    ``times[i]``; ``states`` and ``jacobians`` hold sample data at nodes.
    """

    chart: str
    lam: int
    cfg: FieldConfig
    times: np.ndarray
    node_times: np.ndarray
    positions: list
    charges: np.ndarray
    base: Ensemble
    states: dict = field(default_factory=dict)
    jacobians: dict = field(default_factory=dict)
    node_fields: dict = field(default_factory=dict)
    refresh: str = "kick"
    external: object = None
    profile: object = None
    meta: dict = field(default_factory=dict)

    def source(self):
        if self.external is not None:
            return self.external
        return StoredSource(self.times, self.positions, self.charges, self.cfg, self.chart)

    def time_index(self, t):
        i = int(np.argmin(np.abs(self.times - t)))
        if not math.isclose(self.times[i], t, rel_tol=1e-12, abs_tol=1e-300):
            raise ValueError(f"time {t!r} is not a step boundary of this run")
        return i

    def ensemble_at(self, t):
        i = self.time_index(t)
        tt = float(self.times[i])
        if tt not in self.states:
            raise KeyError(f"no stored state at time {t!r}")
        return self.base.with_current(self.states[tt], time=tt)

    def trace(self, points, t_from, t_to):
        """Re-integrate characteristics through the stored fields between two step boundaries."""
        i0 = self.time_index(t_from)
        i1 = self.time_index(t_to)
        y = np.array(points, dtype=float).reshape(-1, 6)
        if i0 == i1:
            return y
        src = self.source()
        step = 1 if i1 > i0 else -1
        idx = list(range(i0, i1 + step, step))
        E_a = src(self.times[idx[0]], y[:, :3]).E
        for a, b in zip(idx[:-1], idx[1:]):
            ta, tb = self.times[a], self.times[b]
            k, d = kick_drift(self.chart, ta, tb)
            y[:, 3:] += self.lam * k * E_a
            y[:, :3] += d * y[:, 3:]
            E_b = src(tb, y[:, :3]).E
            y[:, 3:] += self.lam * k * E_b
            E_a = E_b
        return y

    def feet(self, t, points):
        return self.trace(points, t, self.times[0])

    def trust_warning(self, t, points, radius):
        """Mask of points farther than ``radius`` from every source at time t."""
        if radius is None or self.external is not None:
            return np.zeros(len(points), dtype=bool)
        pos = self.positions[self.time_index(t)]
        if pos.shape[0] == 0:
            return np.ones(len(points), dtype=bool)
        d = kernels.nearest_distance(np.ascontiguousarray(np.atleast_2d(points)[:, :3]),
                                     np.ascontiguousarray(pos))
        return d > radius


def integrate_kdk(e, times, cfg, source=None, tangents=False, node_times=None, refresh="kick",
                  cond_guard=1e8, store_states=True):
    """Kick-drift-kick through ``times`` (a fine list of step boundaries).

    ``source=None`` means the self-consistent field of the ensemble.  With
    ``refresh='node'`` the self-consistent field is recomputed only at node
    times and frozen per sample in between.
    """
    chart = e.chart
    if chart not in ("physical", "inverted"):
        raise ValueError("integrate_kdk needs a physical or inverted ensemble")
    times = np.asarray(times, dtype=float)
    if not math.isclose(times[0], e.time, rel_tol=1e-12, abs_tol=1e-300):
        raise ValueError(f"ensemble time {e.time} does not match the first step time {times[0]}")
    node_times = times if node_times is None else np.asarray(node_times, dtype=float)
    node_set = {float(t) for t in node_times}
    lam = e.lam
    y = np.array(e.current, dtype=float)
    c = np.asarray(e.charges)
    order = 1 if tangents else 0
    jac = np.broadcast_to(np.eye(6), (len(e), 6, 6)).copy() if tangents else None
    flags = {"cond_exceeded": []}

    own = _own_index(source, len(e), cfg)

    def field_at(t, pos, idx_fresh):
        if source is not None:
            return source(t, pos, order, own)
        if refresh == "node" and not idx_fresh:
            return None
        return _self_values(pos, c, cfg, chart, t, order)

    positions = [y[:, :3].copy()]
    states, jacs = {}, {}
    t0 = float(times[0])
    fv = field_at(t0, y[:, :3], True)
    frozen = fv
    if t0 in node_set and store_states:
        states[t0] = y.copy()
        if tangents:
            jacs[t0] = jac.copy()
    for ta, tb in zip(times[:-1], times[1:]):
        ta, tb = float(ta), float(tb)
        k, d = kick_drift(chart, ta, tb)
        if tangents:
            jac[:, 3:, :] += lam * k * np.einsum("nij,njk->nik", fv.grad, jac[:, :3, :])
        y[:, 3:] += lam * k * fv.E
        y[:, :3] += d * y[:, 3:]
        if tangents:
            jac[:, :3, :] += d * jac[:, 3:, :]
        fresh = tb in node_set
        nxt = field_at(tb, y[:, :3], fresh)
        if nxt is None:
            nxt = frozen
        elif refresh == "node":
            frozen = nxt
        fv = nxt
        if tangents:
            jac[:, 3:, :] += lam * k * np.einsum("nij,njk->nik", fv.grad, jac[:, :3, :])
        y[:, 3:] += lam * k * fv.E
        if not np.all(np.isfinite(y)):
            bad = int(np.argmax(~np.all(np.isfinite(y), axis=1)))
            raise NumericalGuardError(f"non-finite phase point for sample {bad} at time {tb:.6g}",
                                      last_good=ta, sample=bad)
        if source is None and refresh == "node" and not fresh:
            positions.append(positions[-1])
        else:
            positions.append(y[:, :3].copy())
        if tb in node_set and store_states:
            states[tb] = y.copy()
            if tangents:
                jacs[tb] = jac.copy()
                if len(e):
                    cond = np.linalg.cond(jac)
                    if np.max(cond) > cond_guard:
                        flags["cond_exceeded"].append(tb)
    if flags["cond_exceeded"]:
        warnings.warn(f"tangent-map condition number above {cond_guard:g} at "
                      f"{len(flags['cond_exceeded'])} nodes", RuntimeWarning, stacklevel=2)
    flow = KDKFlow(chart, lam, cfg, times, node_times, positions, c, e, states, jacs,
                   refresh=refresh, external=source, meta=flags)
    final = e.with_current(y, time=float(times[-1]))
    return flow, final


def step_physical(e, dt, cfg, source=None):
    """One leapfrog step of the physical chart."""
    if e.chart != "physical":
        raise ValueError("step_physical needs a physical-chart ensemble")
    return integrate_kdk(e, [e.time, e.time + dt], cfg, source, store_states=False)[1]


def step_inverted(e, s_from, s_to, cfg, substeps=1, source=None):
    """KDK in tau = ln s from s_from to s_to (either direction)."""
    if e.chart != "inverted":
        raise ValueError("step_inverted needs an inverted-chart ensemble")
    if s_to <= 0 or s_from <= 0:
        raise DomainError(f"inverted-chart steps need s > 0 (got {s_from} -> {s_to}); "
                          "use the wave operator for s = 0")
    times = s_from * (s_to / s_from) ** (np.arange(substeps + 1) / substeps)
    times[0], times[-1] = s_from, s_to
    return integrate_kdk(e, times, cfg, source, store_states=False)[1]


def run_kdk(e, grid, cfg, source=None, tangents=False, refresh="kick", cond_guard=1e8):
    """Integrate over a TimeGrid, storing node states (and tangents)."""
    return integrate_kdk(e, grid.fine_times(), cfg, source, tangents, grid.nodes, refresh, cond_guard)


# --- canonical chart -------------------------------------------------------------

def grad_K(s, w, z, E, asym, lam):
    """(grad_w K, grad_z K) given the field E = E(s, q(s, w, z))."""
    e0 = asym.E0(w)
    g0 = asym.grad_E0(w)
    gw = -lam / s * (E - e0) - lam**2 * math.log(s) * np.einsum("nai,na->ni", g0, E)
    gz = -lam * E
    return gw, gz


def canonical_rhs(s, y, E, asym, lam):
    gw, gz = grad_K(s, y[:, :3], y[:, 3:], E, asym, lam)
    return np.hstack([gz, -gw])


def hessian_K(s, w, z, asym, field_source, lam, gradE=None, E=None):
    """6x6 Hessian of K per sample, blocks (K_ww, K_wz; K_zw, K_zz).

    K_ww = -lam/s (G - G0) - lam^2 ln s (G G0 + G0 G + E . d^2 E0)
           - lam^3 s ln^2 s G0 G G0,
    K_wz = -lam G - lam^2 s ln s G0 G,   K_zz = -lam s G,
    with G = grad E(s, q) and G0 = grad E0(w), both symmetric.
    """
    s = float(s)
    if not s > 0:
        raise DomainError(f"hessian of K needs s > 0, got {s!r}")
    w = np.atleast_2d(w)
    z = np.atleast_2d(z)
    if gradE is None or E is None:
        q = canonical_positions(s, w, z, asym, lam)
        fv = field_source(s, q, order=1)
        E, gradE = fv.E, fv.grad
    G = gradE
    G0 = asym.grad_E0(w)
    T0 = asym.hess_E0(w)
    ln = math.log(s)
    GG0 = np.einsum("nij,njk->nik", G, G0)
    G0G = np.einsum("nij,njk->nik", G0, G)
    K_ww = (-lam / s * (G - G0)
            - lam**2 * ln * (GG0 + G0G + np.einsum("na,najk->njk", E, T0))
            - lam**3 * s * ln**2 * np.einsum("nij,njk->nik", G0G, G0))
    K_wz = -lam * G - lam**2 * s * ln * G0G
    K_zz = -lam * s * G
    H = np.empty((w.shape[0], 6, 6))
    H[:, :3, :3] = K_ww
    H[:, :3, 3:] = K_wz
    H[:, 3:, :3] = np.swapaxes(K_wz, 1, 2)
    H[:, 3:, 3:] = K_zz
    return H


def _rhs_jacobian(H):
    """d/dy of (grad_z K, -grad_w K) from the Hessian blocks."""
    Df = np.empty_like(H)
    Df[:, :3, :3] = H[:, 3:, :3]
    Df[:, :3, 3:] = H[:, 3:, 3:]
    Df[:, 3:, :3] = -H[:, :3, :3]
    Df[:, 3:, 3:] = -H[:, :3, 3:]
    return Df


def first_step_map(y0, s1, E_star, asym, lam):
    """Closed-form step from s = 0 to s1 with the field frozen at its s1 value.

    The bracket s^-1 [E - E0(w)] is split into s^-1 [E(s, q) - E0(q)], taken
    linear in s on [0, s1], plus s^-1 [E0(q) - E0(w)] expanded to first order
    in q - w = s z + lam s ln(s) E0(w); the ln s terms use
    int_0^s1 ln s ds = s1 (ln s1 - 1).
    """
    w0, z0 = y0[:, :3], y0[:, 3:]
    e0w = asym.E0(w0)
    g0 = asym.grad_E0(w0)
    q_star = canonical_positions(s1, w0, z0, asym, lam)
    e0q = asym.E0(q_star)
    L = s1 * (math.log(s1) - 1.0)
    w1 = w0 - lam * s1 * E_star
    z1 = (z0 + lam * (E_star - e0q)
          + lam * s1 * np.einsum("nij,nj->ni", g0, z0)
          + lam**2 * L * np.einsum("nij,nj->ni", g0, e0w)
          + lam**2 * L * np.einsum("nai,na->ni", g0, E_star))
    return np.hstack([w1, z1])


@dataclass
class CanonicalFlow:
    """A stored canonical run from s = 0.

    ``positions`` maps every field-evaluation time (nodes and midpoints) to
    the spatial positions of the samples at that time; ``states`` holds
    (w, z) at nodes.  ``source`` is the field the samples were pushed through.
    """

    lam: int
    cfg: FieldConfig
    asym: object
    times: np.ndarray
    positions: dict
    charges: np.ndarray
    base: Ensemble
    source: object
    states: dict = field(default_factory=dict)
    jacobians: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def fine_times(self):
        return np.asarray(self.meta["fine_times"])

    def stored_source(self):
        ts = sorted(self.positions)
        return StoredSource(ts, [self.positions[t] for t in ts], self.charges, self.cfg, "inverted")

    def ensemble_at(self, s):
        s = self.node_time(s)
        return self.base.with_current(self.states[s], time=s)

    def node_time(self, s):
        i = int(np.argmin(np.abs(self.times - s)))
        if not math.isclose(self.times[i], s, rel_tol=1e-12, abs_tol=1e-300):
            raise ValueError(f"s={s!r} is not a node of this canonical run")
        return float(self.times[i])

    def trace_to_zero(self, s, points, reverse="explicit"):
        """Backward characteristics from node s down to s = 0."""
        s = self.node_time(s)
        y = np.array(points, dtype=float).reshape(-1, 6)
        fine = self.fine_times
        i = int(np.searchsorted(fine, s))
        while i > 0:
            sa, sb = float(fine[i - 1]), float(fine[i])
            y = canonical_step_back(y, sa, sb, self.asym, self.source, self.lam, reverse)
            i -= 1
        return y

    def evaluate(self, s, points, profile, reverse="explicit"):
        feet = self.trace_to_zero(s, points, reverse)
        if len(feet) == 0:
            return np.zeros(0)
        return profile(feet[:, :3], feet[:, 3:])


def _field_E(source, s, q):
    return source(s, q, order=0).E


def canonical_step(y, sa, sb, asym, source, lam, guard=None, tangents=None, self_index=None):
    """Explicit midpoint from sa > 0 to sb; returns (y_b, y_mid, jac_b)."""
    h = sb - sa
    sm = 0.5 * (sa + sb)
    order = 1 if tangents is not None else 0
    qa = canonical_positions(sa, y[:, :3], y[:, 3:], asym, lam)
    fa = source(sa, qa, order, self_index)
    _guard(sa, y, fa.E, asym, guard)
    ka = canonical_rhs(sa, y, fa.E, asym, lam)
    ym = y + 0.5 * h * ka
    qm = canonical_positions(sm, ym[:, :3], ym[:, 3:], asym, lam)
    fm = source(sm, qm, order, self_index)
    km = canonical_rhs(sm, ym, fm.E, asym, lam)
    yb = y + h * km
    jac_b = None
    if tangents is not None:
        Da = _rhs_jacobian(hessian_K(sa, y[:, :3], y[:, 3:], asym, None, lam, fa.grad, fa.E))
        Dm = _rhs_jacobian(hessian_K(sm, ym[:, :3], ym[:, 3:], asym, None, lam, fm.grad, fm.E))
        inner = np.eye(6) + 0.5 * h * Da
        step = np.eye(6)[None] + h * np.einsum("nij,njk->nik", Dm, inner)
        jac_b = np.einsum("nij,njk->nik", step, tangents)
    return yb, ym, jac_b


def _guard(s, y, E, asym, guard):
    if guard is None or len(y) == 0:
        return
    bracket = np.linalg.norm(E - asym.E0(y[:, :3]), axis=1) / s
    worst = int(np.argmax(bracket))
    if bracket[worst] > guard:
        raise NumericalGuardError(
            f"singular bracket |s^-1 (E - E0)| = {bracket[worst]:.3e} exceeds guard {guard:g} "
            f"at s={s:.4g} for sample {worst}", last_good=s, sample=worst)


def canonical_step_back(y, sa, sb, asym, source, lam, reverse="explicit", tol=1e-15, max_iter=50):
    """Step a characteristic from sb back to sa (sa may be 0)."""
    if sa == 0.0:
        E1 = lambda yy: _field_E(source, sb, canonical_positions(sb, yy[:, :3], yy[:, 3:], asym, lam))  # noqa: E731
        return _invert_map(lambda yy: first_step_map(yy, sb, E1(yy), asym, lam), y, tol, max_iter)
    if reverse == "explicit":
        return canonical_step(y, sb, sa, asym, source, lam)[0]
    return _invert_map(lambda yy: canonical_step(yy, sa, sb, asym, source, lam)[0], y, tol, max_iter)


def _invert_map(F, target, tol, max_iter):
    """Solve F(y) = target by the fixed-point iteration y <- y + (target - F(y))."""
    y = target.copy()
    scale = max(float(np.max(np.abs(target))) if target.size else 0.0, 1.0)
    for _ in range(max_iter):
        r = target - F(y)
        y = y + r
        if r.size == 0 or np.max(np.abs(r)) <= tol * scale:
            break
    return y


class SelfCanonicalSource:
    """Self-consistent field of a canonical ensemble.

    The targets are the samples' own positions, so they double as the sources.
    """

    def __init__(self, charges, cfg):
        self.charges = charges
        self.cfg = cfg

    def __call__(self, s, targets, order=0, self_index=None):
        if not self.cfg.coupling:
            return ZeroSource()(s, targets, order)
        n = len(targets)
        idx = np.arange(n) if self.cfg.exclude_self else None
        return kernel_field(targets, self.charges, targets, self.cfg.softening, order,
                            self.cfg.summation, self_index=idx, skip_coincident=idx is not None)


def integrate_canonical(e, grid, asym, source, cfg, tangents=False, guard=1e6, fd_step=1e-6,
                        cond_guard=1e8):
    """Push a canonical ensemble at s = 0 through the grid (nodes ascending from 0).

    ``source`` supplies E(s, .) at every node and midpoint (e.g. the stored
    positions of the previous Picard iterate); ``None`` means the
    self-consistent field, evaluated from the samples' own positions.
    """
    if e.chart != "canonical":
        raise ValueError("integrate_canonical needs a canonical-chart ensemble")
    times = grid.fine_times() if isinstance(grid, TimeGrid) else np.asarray(grid, dtype=float)
    if times[0] != 0.0 or e.time != 0.0:
        raise DomainError("canonical runs start at the singular time s = 0")
    lam = e.lam
    y = np.array(e.current, dtype=float)
    c = np.asarray(e.charges)
    if not cfg.coupling:
        source = ZeroSource()
    self_consistent = source is None
    src = SelfCanonicalSource(c, cfg) if self_consistent else source
    own = np.arange(len(e)) if self_consistent and cfg.exclude_self else _own_index(src, len(e), cfg)
    positions = {0.0: y[:, :3].copy()}
    states = {0.0: y.copy()}
    jacs = {}
    jac = np.broadcast_to(np.eye(6), (len(e), 6, 6)).copy() if tangents else None
    if tangents:
        jacs[0.0] = jac.copy()
    node_set = {float(t) for t in (grid.nodes if isinstance(grid, TimeGrid) else times)}
    cond_flags = []

    # first step out of s = 0 with the field frozen at its s1 value
    s1 = float(times[1])
    q_star = canonical_positions(s1, y[:, :3], y[:, 3:], asym, lam)
    first_src = StoredSource([s1], [q_star], c, cfg, "inverted") if self_consistent else src
    E_star = src(s1, q_star, 0, own).E

    def first(yy):
        # sources stay at the unperturbed positions while differencing
        qs = canonical_positions(s1, yy[:, :3], yy[:, 3:], asym, lam)
        return first_step_map(yy, s1, first_src(s1, qs, 0, own).E, asym, lam)

    y1 = first_step_map(y, s1, E_star, asym, lam)
    if tangents and len(e):
        J1 = np.empty((len(e), 6, 6))
        for j in range(6):
            yp = y.copy()
            ym = y.copy()
            yp[:, j] += fd_step
            ym[:, j] -= fd_step
            J1[:, :, j] = (first(yp) - first(ym)) / (2 * fd_step)
        jac = np.einsum("nij,njk->nik", J1, jac)
    y = y1
    positions[s1] = canonical_positions(s1, y[:, :3], y[:, 3:], asym, lam)
    states[s1] = y.copy()
    if tangents:
        jacs[s1] = jac.copy()

    for sa, sb in zip(times[1:-1], times[2:]):
        sa, sb = float(sa), float(sb)
        yb, ym, jb = canonical_step(y, sa, sb, asym, src, lam, guard, jac, own)
        sm = 0.5 * (sa + sb)
        positions[sm] = canonical_positions(sm, ym[:, :3], ym[:, 3:], asym, lam)
        y = yb
        positions[sb] = canonical_positions(sb, y[:, :3], y[:, 3:], asym, lam)
        if tangents:
            jac = jb
        if sb in node_set:
            states[sb] = y.copy()
            if tangents:
                jacs[sb] = jac.copy()
                if len(e) and np.max(np.linalg.cond(jac)) > cond_guard:
                    cond_flags.append(sb)
    if cond_flags:
        warnings.warn(f"tangent-map condition number above {cond_guard:g} at {len(cond_flags)} nodes",
                      RuntimeWarning, stacklevel=2)
    node_times = np.array(sorted(states))
    stored = source
    if self_consistent:
        ts = sorted(positions)
        stored = StoredSource(ts, [positions[t] for t in ts], c, cfg, "inverted")
    flow = CanonicalFlow(lam, cfg, asym, node_times, positions, c, e, stored, states, jacs,
                         meta={"cond_exceeded": cond_flags, "fine_times": times.tolist()})
    return flow, e.with_current(y, time=float(times[-1]))


def step_canonical(e, s_from, s_to, asym, field_source, cfg, guard=1e6):
    """One canonical step; from s_from = 0 the frozen-field first step is used."""
    if e.chart != "canonical":
        raise ValueError("step_canonical needs a canonical-chart ensemble")
    y = np.array(e.current, dtype=float)
    src = ZeroSource() if not cfg.coupling else field_source
    if s_from == 0.0:
        qs = canonical_positions(s_to, y[:, :3], y[:, 3:], asym, e.lam)
        y = first_step_map(y, s_to, src(s_to, qs).E, asym, e.lam)
    else:
        y = canonical_step(y, s_from, s_to, asym, src, e.lam, guard)[0]
    return e.with_current(y, time=s_to)


# --- solution evaluation -----------------------------------------------------------

@dataclass
class SolutionValues:
    values: np.ndarray
    feet: np.ndarray
    outside_trust_region: np.ndarray


def evaluate_solution(flow, s, points, profile=None, trust_radius=None):
    """Solution value at (s, points): the initial profile at the backward foot."""
    profile = profile if profile is not None else flow.profile
    if profile is None:
        raise ValueError("no initial profile attached to this run")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if isinstance(flow, CanonicalFlow):
        feet = flow.trace_to_zero(s, pts)
        warn = np.zeros(len(pts), dtype=bool)
        if trust_radius is not None:
            q = canonical_positions(s, pts[:, :3], pts[:, 3:], flow.asym, flow.lam)
            src = flow.positions[flow.node_time(s)]
            if src.shape[0]:
                warn = kernels.nearest_distance(np.ascontiguousarray(q), np.ascontiguousarray(src)) > trust_radius
    else:
        feet = flow.feet(s, pts)
        warn = flow.trust_warning(s, pts, trust_radius)
    if warn.any():
        warnings.warn(f"{int(warn.sum())} evaluation points lie outside the stored-field trust region",
                      RuntimeWarning, stacklevel=2)
    vals = profile(feet[:, :3], feet[:, 3:]) if len(feet) else np.zeros(0)
    return SolutionValues(np.asarray(vals), feet, warn)


def jacobian_determinants(jacs):
    return {t: np.linalg.det(J) if len(J) else np.zeros(0) for t, J in jacs.items()}
