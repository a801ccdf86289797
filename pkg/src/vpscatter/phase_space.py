"""Charts, the pseudo-conformal involution, the canonical chart and ensembles.

Three charts are used throughout:

* ``physical``  (t, x, v)
* ``inverted``  (s, q, p) = I(t, x, v) = (1/t, x/t, x - t v)
* ``canonical`` (s, w, z) with w = q - s p and z = p - lam ln(s) E0(w)

Ensembles are weighted characteristic samples.  Values and weights are
fixed at creation; only the current phase point moves.
"""

import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .errors import DomainError

CHARTS = ("physical", "inverted", "canonical")
VALUE_CUTOFF = 1e-8


def _check_chart(chart):
    if chart not in CHARTS:
        raise ValueError(f"unknown chart {chart!r}; expected one of {CHARTS}")


@dataclass(frozen=True)
class PhasePoint:
    position: np.ndarray
    momentum: np.ndarray
    chart: str
    time: float

    def __post_init__(self):
        _check_chart(self.chart)
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "momentum", np.asarray(self.momentum, dtype=float).reshape(3))
        object.__setattr__(self, "time", float(self.time))

    def as_array(self):
        return np.concatenate([self.position, self.momentum])


@dataclass(frozen=True)
class Sample:
    label: PhasePoint
    current: PhasePoint
    value: float
    weight: float


@dataclass(frozen=True, eq=False)
class Ensemble:
    """Weighted samples sharing one chart and one time stamp.

    ``label`` and ``current`` are (N, 6) arrays of (position, momentum).
    Labels are expressed in ``label_chart`` at ``label_time``.
    """

    label: np.ndarray
    current: np.ndarray
    value: np.ndarray
    weight: np.ndarray
    chart: str
    time: float
    lam: int = 1
    label_chart: str | None = None
    label_time: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        _check_chart(self.chart)
        if self.lam not in (-1, 1):
            raise ValueError("lam must be +1 (repulsive) or -1 (attractive)")
        for name in ("label", "current"):
            arr = np.array(getattr(self, name), dtype=float).reshape(-1, 6)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        for name in ("value", "weight"):
            arr = np.array(getattr(self, name), dtype=float).reshape(-1)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        n = self.current.shape[0]
        if not (self.label.shape[0] == n == self.value.size == self.weight.size):
            raise ValueError("label, current, value and weight lengths differ")
        if np.any(self.weight <= 0):
            raise ValueError("quadrature weights must be positive")
        object.__setattr__(self, "time", float(self.time))
        if self.label_chart is None:
            object.__setattr__(self, "label_chart", self.chart)
        if self.label_time is None:
            object.__setattr__(self, "label_time", self.time)

    def __len__(self):
        return self.current.shape[0]

    @property
    def positions(self):
        return self.current[:, :3]

    @property
    def momenta(self):
        return self.current[:, 3:]

    @cached_property
    def charges(self):
        c = self.weight * self.value**2
        c.setflags(write=False)
        return c

    @cached_property
    def total_charge(self):
        return math.fsum(self.charges)

    @cached_property
    def l2_norm(self):
        return math.sqrt(self.total_charge)

    def samples(self):
        for i in range(len(self)):
            yield Sample(
                label=PhasePoint(self.label[i, :3], self.label[i, 3:], self.label_chart, self.label_time),
                current=PhasePoint(self.current[i, :3], self.current[i, 3:], self.chart, self.time),
                value=float(self.value[i]),
                weight=float(self.weight[i]),
            )

    def with_current(self, current, chart=None, time=None, **meta):
        """New ensemble with moved phase points; values and weights are shared."""
        new_meta = dict(self.meta)
        new_meta.update(meta)
        return replace(
            self,
            current=np.array(current, dtype=float),
            chart=self.chart if chart is None else chart,
            time=self.time if time is None else time,
            meta=new_meta,
        )

    def subset(self, idx):
        return Ensemble(
            self.label[idx], self.current[idx], self.value[idx], self.weight[idx],
            self.chart, self.time, self.lam, self.label_chart, self.label_time, dict(self.meta),
        )


def empty_ensemble(chart, time, lam=1, **meta):
    z6 = np.zeros((0, 6))
    return Ensemble(z6, z6, np.zeros(0), np.zeros(0), chart, time, lam, meta=meta)


# --- the involution ---------------------------------------------------------

def invert_arrays(t, x, v):
    """(t, x, v) -> (1/t, x/t, x - t v); the map is its own inverse."""
    t = float(t)
    if not t > 0:
        raise DomainError(f"pseudo-conformal inversion is singular at time {t!r} (need time > 0)")
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    return 1.0 / t, x / t, x - t * v


def invert(obj):
    """Apply the involution to a PhasePoint or an Ensemble, toggling the chart."""
    if isinstance(obj, PhasePoint):
        if obj.chart == "canonical":
            raise DomainError("the involution acts on physical/inverted charts only")
        s, q, p = invert_arrays(obj.time, obj.position, obj.momentum)
        other = "inverted" if obj.chart == "physical" else "physical"
        return PhasePoint(q, p, other, s)
    if isinstance(obj, Ensemble):
        if obj.chart == "canonical":
            raise DomainError("the involution acts on physical/inverted charts only")
        s, q, p = invert_arrays(obj.time, obj.positions, obj.momenta)
        other = "inverted" if obj.chart == "physical" else "physical"
        return obj.with_current(np.hstack([q, p]), chart=other, time=s)
    raise TypeError(f"cannot invert {type(obj).__name__}")


# --- canonical chart --------------------------------------------------------

def _E0(asym, w):
    return np.asarray(asym.E0(np.atleast_2d(w)), dtype=float).reshape(np.shape(w))


def to_canonical(s, q, p, asym, lam):
    """(q, p) -> (w, z) with w = q - s p and z = p - lam ln(s) E0(w)."""
    s = float(s)
    if not s > 0:
        raise DomainError(f"canonical chart map needs s > 0, got s={s!r}")
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    w = q - s * p
    z = p - lam * math.log(s) * _E0(asym, w)
    return w, z


def from_canonical(s, w, z, asym, lam):
    """(w, z) -> (q, p); at s = 0 the position is w and the momentum is undefined (nan)."""
    s = float(s)
    if s < 0:
        raise DomainError(f"canonical chart map needs s >= 0, got s={s!r}")
    w = np.asarray(w, dtype=float)
    z = np.asarray(z, dtype=float)
    if s == 0.0:
        return w.copy(), np.full_like(z, np.nan)
    e0 = _E0(asym, w)
    ln = math.log(s)
    q = w + s * z + lam * s * ln * e0
    p = z + lam * ln * e0
    return q, p


def canonical_positions(s, w, z, asym, lam):
    """Spatial positions q(s, w, z), continuous down to s = 0."""
    s = float(s)
    if s == 0.0:
        return np.array(w, dtype=float)
    return from_canonical(s, w, z, asym, lam)[0]


def jacobian_canonical(s, w, asym, lam):
    """d(w, z)/d(q, p) at a single point; blocks (Id, -s Id; -lam ln s G0, Id + lam s ln s G0)."""
    s = float(s)
    if not s > 0:
        raise DomainError(f"canonical Jacobian needs s > 0, got s={s!r}")
    g0 = np.asarray(asym.grad_E0(np.atleast_2d(w)), dtype=float).reshape(3, 3)
    ln = math.log(s)
    eye = np.eye(3)
    jac = np.empty((6, 6))
    jac[:3, :3] = eye
    jac[:3, 3:] = -s * eye
    jac[3:, :3] = -lam * ln * g0
    jac[3:, 3:] = eye + lam * s * ln * g0
    return jac


def japanese(z):
    z = np.asarray(z, dtype=float)
    return np.sqrt(1.0 + np.sum(z * z, axis=-1))


def theta(s, z):
    """Compression weight <z> / (1 + s <z>)."""
    if np.any(np.asarray(s) < 0):
        raise DomainError("theta needs s >= 0")
    jz = japanese(z)
    return jz / (1.0 + s * jz)


def modified_frame(s, q, p, asym, lam):
    """(q, p) -> (q + p s + lam s ln(s) E0(q), p + lam ln(s) E0(q))."""
    s = float(s)
    if not s > 0:
        raise DomainError(f"modified frame needs s > 0, got s={s!r}")
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    e0 = _E0(asym, q)
    ln = math.log(s)
    return q + p * s + lam * s * ln * e0, p + lam * ln * e0


def modified_frame_inverse(s, Q, P):
    """Inverse of modified_frame: q = Q - P s, then p = P - lam ln(s) E0(q) (left to the caller)."""
    return np.asarray(Q, dtype=float) - float(s) * np.asarray(P, dtype=float)


# --- sampling ----------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    """Cell-centred tensor grid on R^3 x R^3 with independent per-axis extents."""

    lo: tuple
    hi: tuple
    counts: tuple

    def __post_init__(self):
        for name in ("lo", "hi", "counts"):
            val = getattr(self, name)
            if np.ndim(val) == 0:
                val = (val,) * 6
            object.__setattr__(self, name, tuple(val))
        if not (len(self.lo) == len(self.hi) == len(self.counts) == 6):
            raise ValueError("grid spec needs six axes")
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ValueError("grid extents must satisfy hi > lo")

    @classmethod
    def cube(cls, pos_half, mom_half, n_pos, n_mom, pos_center=(0, 0, 0), mom_center=(0, 0, 0)):
        lo = tuple(c - pos_half for c in pos_center) + tuple(c - mom_half for c in mom_center)
        hi = tuple(c + pos_half for c in pos_center) + tuple(c + mom_half for c in mom_center)
        return cls(lo, hi, (n_pos,) * 3 + (n_mom,) * 3)

    @property
    def size(self):
        return int(np.prod(self.counts))

    def axes(self):
        out = []
        for lo, hi, n in zip(self.lo, self.hi, self.counts):
            h = (hi - lo) / n
            out.append(lo + h * (np.arange(n) + 0.5))
        return out

    def spacings(self):
        return np.array([(hi - lo) / n for lo, hi, n in zip(self.lo, self.hi, self.counts)])

    @property
    def cell_volume(self):
        return float(np.prod(self.spacings()))

    def points(self):
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


def sample_profile(profile, chart, grid, time=1.0, lam=1, cutoff=VALUE_CUTOFF, **meta):
    """Sample a profile on a tensor grid; cells with |value| < cutoff * max are dropped."""
    _check_chart(chart)
    if grid.size == 0 or any(c <= 0 for c in grid.counts):
        raise ValueError("empty sampling grid")
    pts = grid.points()
    vals = np.asarray(profile(pts[:, :3], pts[:, 3:]), dtype=float)
    vmax = np.max(np.abs(vals)) if vals.size else 0.0
    info = dict(meta, value_cutoff=cutoff, grid_lo=list(grid.lo), grid_hi=list(grid.hi),
                grid_counts=list(grid.counts))
    if vmax == 0.0:
        return empty_ensemble(chart, time, lam, **info)
    keep = np.abs(vals) >= cutoff * vmax
    pts = pts[keep]
    w = np.full(pts.shape[0], grid.cell_volume)
    return Ensemble(pts, pts.copy(), vals[keep], w, chart, time, lam, meta=info)


def quadrature_charge(profile, grid):
    """Integral of profile^2 by midpoint quadrature, separable when the profile allows it."""
    factors = getattr(profile, "separable_factors", lambda: None)()
    if factors is not None:
        scale, funcs = factors
        total = scale**2
        for f, ax, h in zip(funcs, grid.axes(), grid.spacings()):
            total *= math.fsum(np.asarray(f(ax)) ** 2) * h
        return total
    pts = grid.points()
    vals = np.asarray(profile(pts[:, :3], pts[:, 3:]))
    return math.fsum(vals**2) * grid.cell_volume


# --- time reflection -----------------------------------------------------------

def time_reflect(e):
    """Momentum reflection (t, x, v) -> (-t, x, -v) of a physical-chart ensemble."""
    if e.chart != "physical":
        raise DomainError(f"time reflection needs the physical chart, got {e.chart!r}")
    cur = np.array(e.current)
    cur[:, 3:] = -cur[:, 3:]
    flips = e.meta.get("reflections", 0) + 1
    return e.with_current(cur, time=-e.time, reflections=flips)


# --- snapshot I/O ----------------------------------------------------------------

def write_snapshot(path, e):
    header = f"chart={e.chart} time={e.time!r} lambda={e.lam:+d} n={len(e)}"
    data = np.hstack([e.label, e.current, e.value[:, None], e.weight[:, None]])
    np.savetxt(path, data, fmt="%.17g", header=header, comments="# ")


def read_snapshot(path):
    with open(path) as fh:
        header = fh.readline()
    if not header.startswith("#"):
        raise ValueError(f"{path}: missing snapshot header")
    fields = dict(tok.split("=", 1) for tok in header[1:].split())
    n = int(fields["n"])
    if n == 0:
        return empty_ensemble(fields["chart"], float(fields["time"]), int(fields["lambda"]))
    data = np.loadtxt(path, comments="#", ndmin=2).reshape(n, 14)
    return Ensemble(
        data[:, :6], data[:, 6:12], data[:, 12], data[:, 13],
        fields["chart"], float(fields["time"]), int(fields["lambda"]),
    )
