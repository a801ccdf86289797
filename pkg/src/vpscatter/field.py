"""Force-field evaluation, the asymptotic field, current density and the
multiscale decomposition used to audit the field bounds.

All fields carry the 1/(4 pi) normalisation:

    E(Q) = 1/(4 pi) sum_k c_k (Q - q_k) / (|Q - q_k|^2 + delta^2)^{3/2},

with charges c_k = weight_k * value_k^2.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from . import kernels
from .errors import SingularKernelError
from .phase_space import Ensemble, canonical_positions

FOUR_PI = 4.0 * math.pi
SUMMATIONS = ("direct", "compensated")


@dataclass(frozen=True)
class FieldConfig:
    """Kernel settings.

    ``comoving`` scales the softening as delta * max(1, |t|) in the physical
    chart, which makes physical and inverted-chart fields correspond exactly
    under the involution.  ``coupling=False`` switches the interaction off.
    """

    softening: float = 0.0
    exclude_self: bool = True
    summation: str = "compensated"
    comoving: bool = True
    coupling: bool = True

    def __post_init__(self):
        if self.softening < 0:
            raise ValueError("softening must be >= 0")
        if self.summation not in SUMMATIONS:
            raise ValueError(f"summation must be one of {SUMMATIONS}")

    def softening_at(self, chart, time):
        if chart == "physical" and self.comoving:
            return self.softening * max(1.0, abs(float(time)))
        return self.softening

    def describe(self):
        return {"softening": self.softening, "exclude_self": self.exclude_self,
                "summation": self.summation, "comoving": self.comoving,
                "coupling": self.coupling, "normalization": "1/(4 pi)"}


@dataclass
class FieldValues:
    E: np.ndarray
    grad: np.ndarray | None = None
    hess: np.ndarray | None = None


def kernel_field(sources, charges, targets, softening, order=0, summation="compensated",
                 self_index=None, skip_coincident=False):
    """Raw softened-kernel field and derivatives at ``targets``.

    grad[..., i, j] = dE_i/dx_j and hess[..., i, j, k] = d^2 E_i / dx_j dx_k.
    """
    src = np.ascontiguousarray(sources, dtype=float).reshape(-1, 3)
    tgt = np.ascontiguousarray(targets, dtype=float).reshape(-1, 3)
    c = np.ascontiguousarray(charges, dtype=float).reshape(-1)
    m = tgt.shape[0]
    if self_index is None:
        self_index = np.full(m, -1, dtype=np.int64)
    self_index = np.ascontiguousarray(self_index, dtype=np.int64)
    d2 = float(softening) ** 2
    comp = summation == "compensated"
    skip = bool(skip_coincident)
    if src.shape[0] == 0 or m == 0:
        out = FieldValues(np.zeros((m, 3)))
        if order >= 1:
            out.grad = np.zeros((m, 3, 3))
        if order >= 2:
            out.hess = np.zeros((m, 3, 3, 3))
        return out
    if order == 0:
        E, nsing = kernels.coulomb_sum(tgt, src, c, d2, self_index, comp, skip)
        _raise_singular(nsing, tgt)
        return FieldValues(E / FOUR_PI)
    packed, nsing = kernels.coulomb_sum_derivs(tgt, src, c, d2, self_index, order, comp, skip)
    _raise_singular(nsing, tgt)
    packed /= FOUR_PI
    out = FieldValues(packed[:, :3].copy(), kernels.unpack_grad(packed[:, 3:9]))
    if order >= 2:
        out.hess = kernels.unpack_hess(packed[:, 9:19])
    return out


def _raise_singular(nsing, tgt):
    if np.any(nsing):
        i = int(np.argmax(nsing > 0))
        raise SingularKernelError(
            f"unsoftened kernel evaluated at a source location (target {i} at {tgt[i].tolist()}); "
            "use softening > 0 or exclude_self")


@dataclass(frozen=True)
class SourceSet:
    """Spatial positions and charges generating a field."""

    positions: np.ndarray
    charges: np.ndarray

    @classmethod
    def from_ensemble(cls, e, asym=None):
        return cls(source_positions(e, asym), np.asarray(e.charges))


def source_positions(e, asym=None):
    if e.chart == "canonical":
        if asym is None:
            raise ValueError("canonical ensembles need asymptotic data to locate their charges")
        return canonical_positions(e.time, e.current[:, :3], e.current[:, 3:], asym, e.lam)
    return np.asarray(e.positions)


def evaluate_E(source, targets, cfg, order=0, self_index=None, chart=None, time=None, asym=None):
    """Field (and optionally gradient / second derivatives) of a source at targets.

    ``source`` is an Ensemble or a SourceSet.  Passing ``self_index`` (the
    source index coinciding with each target, -1 for none) together with
    ``cfg.exclude_self`` drops self-interaction.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    if isinstance(source, Ensemble):
        chart = source.chart if chart is None else chart
        time = source.time if time is None else time
        src = SourceSet.from_ensemble(source, asym)
    else:
        src = source
    if not cfg.coupling:
        m = targets.shape[0]
        return FieldValues(np.zeros((m, 3)), np.zeros((m, 3, 3)) if order >= 1 else None,
                           np.zeros((m, 3, 3, 3)) if order >= 2 else None)
    delta = cfg.softening_at(chart, time if time is not None else 1.0)
    idx = self_index if cfg.exclude_self else None
    return kernel_field(src.positions, src.charges, targets, delta, order, cfg.summation,
                        self_index=idx, skip_coincident=cfg.exclude_self and idx is not None)


def self_field(e, cfg, order=0, asym=None):
    """Field of an ensemble at its own sample positions (self-interaction excluded)."""
    pos = source_positions(e, asym)
    return evaluate_E(SourceSet(pos, np.asarray(e.charges)), pos, cfg, order,
                      self_index=np.arange(len(e)), chart=e.chart, time=e.time)


# --- asymptotic field ----------------------------------------------------------

@dataclass
class AsymptoticFieldResult:
    E: np.ndarray
    refinement_diff: float
    converged: bool
    tol: float


def _unit_frame(axis):
    axis = axis / np.linalg.norm(axis)
    helper = np.array([1.0, 0, 0]) if abs(axis[0]) < 0.9 else np.array([0, 1.0, 0])
    e1 = np.cross(axis, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    return e1, e2, axis


def _density_field_at(density, v, center, radius, n_panels, n_r, n_theta, n_phi):
    """-1/(4 pi) int_0^R dr int_{S^2} n rho(v + r n) dOmega for one point v."""
    d = center - v
    dist = float(np.linalg.norm(d))
    R = dist + radius
    axis = d if dist > 1e-12 else np.array([0, 0, 1.0])
    e1, e2, e3 = _unit_frame(axis)
    xr, wr = np.polynomial.legendre.leggauss(n_r)
    edges = np.linspace(0.0, R, n_panels + 1)
    r = (0.5 * (edges[1:] - edges[:-1])[:, None] * (xr[None, :] + 1) + edges[:-1, None]).ravel()
    rw = (0.5 * (edges[1:] - edges[:-1])[:, None] * wr[None, :]).ravel()
    ct, wt = np.polynomial.legendre.leggauss(n_theta)
    st = np.sqrt(1 - ct**2)
    phi = 2 * math.pi * np.arange(n_phi) / n_phi
    nvec = (st[:, None, None] * np.cos(phi)[None, :, None] * e1
            + st[:, None, None] * np.sin(phi)[None, :, None] * e2
            + ct[:, None, None] * e3)  # (n_theta, n_phi, 3)
    nvec = nvec.reshape(-1, 3)
    wang = (wt[:, None] * np.full(n_phi, 2 * math.pi / n_phi)[None, :]).ravel()
    pts = v[None, None, :] + r[:, None, None] * nvec[None, :, :]
    rho = density(pts.reshape(-1, 3)).reshape(r.size, -1)
    ang = np.einsum("ra,a,ak->rk", rho, wang, nvec)
    return -(rw @ ang) / FOUR_PI


def density_field(density, targets, center, radius, resolution=1, tol=1e-6):
    """Field of a spatial charge density by spherical quadrature around each target.

    The quadrature is repeated at doubled resolution; the sup difference is
    returned so non-convergence is reported rather than silently absorbed.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    center = np.asarray(center, dtype=float)
    base = dict(n_panels=12 * resolution, n_r=8, n_theta=24 * resolution, n_phi=16 * resolution)
    fine = dict(n_panels=24 * resolution, n_r=8, n_theta=48 * resolution, n_phi=32 * resolution)
    E = np.array([_density_field_at(density, v, center, radius, **fine) for v in targets])
    Ec = np.array([_density_field_at(density, v, center, radius, **base) for v in targets])
    diff = float(np.max(np.abs(E - Ec))) if len(targets) else 0.0
    scale = float(np.max(np.abs(E))) if len(targets) else 0.0
    # the absolute floor covers targets where the field vanishes by symmetry
    converged = diff <= max(tol * scale, 1e-15)
    return AsymptoticFieldResult(E, diff, converged, tol)


def marginal_density_numeric(profile, w, n=16):
    """int profile(y, w)^2 dy by tensor Gauss-Legendre over the profile's a-support."""
    ca, ra, _, _ = profile.support()
    x, wx = np.polynomial.legendre.leggauss(n)
    y1 = ra * x
    grid = np.stack(np.meshgrid(y1, y1, y1, indexing="ij"), -1).reshape(-1, 3) + ca
    wts = (ra**3) * np.einsum("i,j,k->ijk", wx, wx, wx).ravel()
    w = np.atleast_2d(w)
    out = np.empty(w.shape[0])
    for i, wi in enumerate(w):
        vals = profile(grid, np.broadcast_to(wi, grid.shape))
        out[i] = np.dot(wts, vals**2)
    return out


def asymptotic_field(profile, targets, tol=1e-6, resolution=1, warn=True):
    """E_inf(v) = 1/(4 pi) int int (v - w)/|v - w|^3 mu^2(y, w) dy dw.

    The y-integral is done first (closed-form marginal when the family has
    one), then the w-integral by spherical quadrature around each target.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    masses = profile.point_masses()
    if masses is not None:
        E = np.zeros_like(targets)
        for w0, m in masses:
            d = targets - w0
            r = np.linalg.norm(d, axis=1)
            E += m * d / (FOUR_PI * r[:, None] ** 3)
        return AsymptoticFieldResult(E, 0.0, True, tol)
    _, _, cb, rb = profile.support()
    if hasattr(profile, "b_marginal_density"):
        density = profile.b_marginal_density
    else:
        def density(w):
            return marginal_density_numeric(profile, w)
    res = density_field(density, targets, cb, rb, resolution=resolution, tol=tol)
    if warn and not res.converged:
        warnings.warn(f"asymptotic-field quadrature not converged: refinement difference "
                      f"{res.refinement_diff:.3e}", RuntimeWarning, stacklevel=2)
    return res


# --- current density --------------------------------------------------------

def current_density(positions, momenta, charges, targets, width):
    """j(Q) = sum_k c_k p_k K(Q - q_k) with a normalised Gaussian K of the given width."""
    wts = np.asarray(charges)[:, None] * np.asarray(momenta)
    return kernels.gaussian_deposit(np.ascontiguousarray(np.atleast_2d(targets), dtype=float),
                                    np.ascontiguousarray(positions, dtype=float),
                                    np.ascontiguousarray(wts), float(width))


def current_density_of(e, targets, width, asym=None):
    if e.chart == "physical":
        raise ValueError("current density is defined in the inverted or canonical chart")
    if e.chart == "canonical":
        from .phase_space import from_canonical
        q, p = from_canonical(e.time, e.current[:, :3], e.current[:, 3:], asym, e.lam)
    else:
        q, p = e.positions, e.momenta
    return current_density(q, p, e.charges, targets, width)


# --- multiscale decomposition --------------------------------------------------

def _chi_profile(u):
    """Unnormalised radial bump supported on 1/2 <= u <= 2."""
    u = np.asarray(u, dtype=float)
    x = (u - 1.25) / 0.75
    out = np.zeros_like(u)
    inside = np.abs(x) < 1
    out[inside] = np.exp(-1.0 / (1.0 - x[inside] ** 2))
    return out


def _chi_profile_deriv(u):
    u = np.asarray(u, dtype=float)
    x = (u - 1.25) / 0.75
    out = np.zeros_like(u)
    inside = np.abs(x) < 1
    xi = x[inside]
    out[inside] = np.exp(-1.0 / (1.0 - xi**2)) * (-2 * xi / (1 - xi**2) ** 2) / 0.75
    return out


@dataclass
class ScaleDecomposition:
    """Radial cutoff chi on {1/2 <= |y| <= 2} with unit integral over R^3.

    ``calib_const`` makes the velocity shells a partition of unity:
    c * int chi(u/V) dV/V = 1.  ``field_const`` reconstructs the field,
    E = field_const * int E_R dR/R^2.
    """

    scale_nodes: np.ndarray
    velocity_nodes: np.ndarray
    norm: float = field(init=False)
    calib_const: float = field(init=False)
    field_const: float = field(init=False)

    def __post_init__(self):
        self.scale_nodes = np.asarray(self.scale_nodes, dtype=float)
        self.velocity_nodes = np.asarray(self.velocity_nodes, dtype=float)
        opts = dict(epsabs=1e-15, epsrel=1e-13, limit=200)
        vol = 4 * math.pi * integrate.quad(lambda u: _chi_profile(u) * u * u, 0.5, 2.0, **opts)[0]
        self.norm = 1.0 / vol
        i0 = integrate.quad(lambda u: self.norm * _chi_profile(u), 0.5, 2.0, **opts)[0]
        i1 = integrate.quad(lambda u: self.norm * _chi_profile(u) / u, 0.5, 2.0, **opts)[0]
        self.calib_const = 1.0 / i1
        self.field_const = -1.0 / (FOUR_PI * i0)

    @classmethod
    def spanning(cls, r_min, r_max, v_min, v_max, per_octave=24):
        def geo(lo, hi):
            lo, hi = lo / 4.0, hi * 4.0
            n = max(int(math.ceil(per_octave * math.log2(hi / lo))), 2)
            return lo * (hi / lo) ** (np.arange(n + 1) / n)
        return cls(geo(r_min, r_max), geo(v_min, v_max))

    def chi(self, u):
        return self.norm * _chi_profile(u)

    def dchi(self, u):
        return self.norm * _chi_profile_deriv(u)


def _trap_log(nodes):
    """Trapezoid weights in ln(node)."""
    t = np.log(nodes)
    w = np.zeros_like(t)
    dt = np.diff(t)
    w[:-1] += 0.5 * dt
    w[1:] += 0.5 * dt
    return w


@dataclass
class MultiscaleResult:
    E_R: np.ndarray          # (nR, 3)
    E_RV: np.ndarray         # (nR, nV, 3)
    reconstructed: np.ndarray
    direct: np.ndarray
    rel_error: float
    partition_error: float


def multiscale_decompose(positions, momenta, charges, target, dec, softening=0.0):
    """Per-scale pieces E_R and E_{R,V} of the field at one target.

    E_R = sum_k c_k R^{-1} (grad chi)((Q - q_k)/R), and E_{R,V} additionally
    weights each sample by chi(|p_k|/V).  The reconstruction
    field_const * int E_R dR/R^2 (trapezoid in ln R) is compared with the
    direct kernel sum.
    """
    Q = np.asarray(target, dtype=float).reshape(3)
    d = Q[None, :] - np.asarray(positions)
    r = np.linalg.norm(d, axis=1)
    ok = r > 0
    rhat = np.zeros_like(d)
    rhat[ok] = d[ok] / r[ok, None]
    c = np.asarray(charges)
    R = dec.scale_nodes
    V = dec.velocity_nodes
    pm = np.linalg.norm(np.asarray(momenta), axis=1)
    gR = dec.dchi(r[None, :] / R[:, None]) / R[:, None]          # (nR, N)
    E_R = np.einsum("rk,k,kj->rj", gR, c, rhat)
    cv = dec.chi(pm[None, :] / V[:, None])                        # (nV, N)
    E_RV = np.einsum("rk,vk,k,kj->rvj", gR, cv, c, rhat)
    wR = _trap_log(R) / R                                         # dR/R^2 = dlnR / R
    recon = dec.field_const * np.einsum("r,rj->j", wR, E_R)
    direct = kernel_field(positions, c, Q[None, :], softening).E[0]
    rel = float(np.linalg.norm(recon - direct) / max(np.linalg.norm(direct), 1e-300))
    wV = _trap_log(V)
    part = dec.calib_const * np.einsum("v,rvj->rj", wV, E_RV)
    scale = np.max(np.abs(E_R)) if E_R.size else 0.0
    perr = float(np.max(np.abs(part - E_R)) / scale) if scale > 0 else 0.0
    return MultiscaleResult(E_R, E_RV, recon, direct, rel, perr)


# --- empirical bound verification -------------------------------------------

def _fit_constant(lhs, rhs):
    lhs = np.asarray(lhs, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    ok = rhs > 0
    if not ok.any():
        return 0.0
    return float(np.max(lhs[ok] / rhs[ok]))


def bound_report(record, eps=None, reference=None, stability_factor=2.0):
    """Audit the field inequalities on a diagnostics timeline.

    ``record`` columns used: L2, Linf, P2 (sup |p|^2 gamma), M2 (sup <p>^2
    gamma), Dq, Esup, gradEsup, jsup and, for time differences, the probe
    fields stored in ``record.columns['E_probe']`` (nodes x probes x 3).
    Each inequality gets the measured left side, the right-side shape, the
    fitted implied constant (max of lhs/rhs over the run) and a pass flag.
    When a reference record (a run at another resolution) is given, a pass
    also requires the two fitted constants to agree within ``stability_factor``.
    """
    from .diagnostics import jbracket

    s = np.asarray(record.s)
    col = record.columns
    L2, Linf, P2 = col["L2"], col["Linf"], col["P2"]
    ln_b = jbracket(np.log(s))
    if eps is None:
        eps = float(col["M2"][0])
    reports = {}

    # fixed-time bound on E with the optimal split A = sqrt(P2^2 / (L2^2 + Linf^2))
    reports["field_sup"] = dict(lhs=col["Esup"], rhs=2.0 * np.sqrt((L2**2 + Linf**2) * P2**2))
    reports["field_gradient"] = dict(
        lhs=col["gradEsup"],
        rhs=ln_b**4 * L2**2 + P2**2 + ln_b ** (-1.2) * Linf * col["Dq"])

    Ep = np.asarray(col["E_probe"])
    n = len(s)
    if n >= 2:
        i0 = np.arange(n - 1)
        i1 = i0 + 1
        ds = np.abs(s[i1] - s[i0])
        diff = np.max(np.linalg.norm(Ep[i1] - Ep[i0], axis=-1), axis=-1)
        jmax = np.maximum(col["jsup"][i0], col["jsup"][i1])
        m2 = np.maximum(col["M2"][i0], col["M2"][i1])
        reports["field_lipschitz_current"] = dict(
            lhs=diff, rhs=jbracket(np.log(ds)) * ds * jmax + ds**2 * (m2**2 + L2[0] ** 2))
        lo = np.minimum(s[i0], s[i1])
        reports["field_time_continuity"] = dict(
            lhs=diff, rhs=eps**2 * jbracket(np.log(lo)) ** 4 * jbracket(np.log(ds)) ** 2 * ds)
    # convergence rate towards the smallest node
    k = int(np.argmin(s))
    others = np.array([i for i in range(n) if i != k])
    if others.size:
        d0 = np.max(np.linalg.norm(Ep[others] - Ep[k], axis=-1), axis=-1)
        reports["field_rate"] = dict(lhs=d0, rhs=eps**2 * jbracket(np.log(s[others])) ** 6 * s[others])

    out = {}
    for name, rep in reports.items():
        const = _fit_constant(rep["lhs"], rep["rhs"])
        entry = dict(lhs=np.asarray(rep["lhs"]).tolist(), rhs=np.asarray(rep["rhs"]).tolist(),
                     fitted_constant=const, stability_checked=False)
        passed = bool(np.isfinite(const))
        if reference is not None and name in reference:
            ref = reference[name]["fitted_constant"]
            entry["reference_constant"] = ref
            entry["stability_checked"] = True
            if ref > 0 and const > 0:
                ratio = max(const / ref, ref / const)
                passed = passed and ratio <= stability_factor
            entry["stability_ratio"] = ratio if ref > 0 and const > 0 else None
        entry["pass"] = passed
        out[name] = entry
    return out
