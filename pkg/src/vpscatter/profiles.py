"""Built-in data profiles on R^3_a x R^3_b.

A profile is a scalar function mu(a, b) evaluated on (N, 3) arrays.  Each
family also exposes the marginal charge densities int mu^2 db and
int mu^2 da, since the asymptotic field only sees the second one.
"""

import math

import numpy as np
from scipy import integrate

from .errors import ConfigError


class Profile:
    """Base class: finite-difference derivatives unless a family overrides them."""

    fd_step = 1e-4
    support_widths = 6.0    # support() radii in units of the natural width

    def __call__(self, a, b):
        raise NotImplementedError

    def _x(self, a, b):
        return np.hstack([np.atleast_2d(a), np.atleast_2d(b)])

    def _f6(self, x):
        return self(x[:, :3], x[:, 3:])

    def grad(self, a, b):
        x = self._x(a, b)
        h = self.fd_step
        out = np.empty_like(x)
        for j in range(6):
            xp = x.copy()
            xm = x.copy()
            xp[:, j] += h
            xm[:, j] -= h
            out[:, j] = (self._f6(xp) - self._f6(xm)) / (2 * h)
        return out

    def hessian(self, a, b):
        x = self._x(a, b)
        h = self.fd_step * 10
        out = np.empty((x.shape[0], 6, 6))
        for j in range(6):
            xp = x.copy()
            xm = x.copy()
            xp[:, j] += h
            xm[:, j] -= h
            out[:, :, j] = (self.grad(xp[:, :3], xp[:, 3:]) - self.grad(xm[:, :3], xm[:, 3:])) / (2 * h)
        return 0.5 * (out + np.swapaxes(out, 1, 2))

    def separable_factors(self):
        return None

    def point_masses(self):
        return None

    def b_marginal_gaussian(self):
        """(center, rho0, sigma) when int mu^2 da = rho0 exp(-|w-c|^2 / (2 sigma^2))."""
        return None

    def describe(self):
        return {"family": type(self).__name__}


class ZeroProfile(Profile):
    def __call__(self, a, b):
        return np.zeros(np.atleast_2d(a).shape[0])

    def grad(self, a, b):
        return np.zeros((np.atleast_2d(a).shape[0], 6))

    def hessian(self, a, b):
        return np.zeros((np.atleast_2d(a).shape[0], 6, 6))

    def b_marginal_density(self, w):
        return np.zeros(np.atleast_2d(w).shape[0])

    def a_marginal_density(self, x):
        return np.zeros(np.atleast_2d(x).shape[0])

    def support(self):
        return np.zeros(3), 1.0, np.zeros(3), 1.0

    def total_charge(self):
        return 0.0

    def describe(self):
        return {"family": "zero"}


class GaussianProfile(Profile):
    """eps * exp(-|a - ca - k (b - cb)|^2 / (2 sa^2) - |b - cb|^2 / (2 sb^2)).

    With shear k = 0 this is the product Gaussian; k = 1 gives data whose
    spatial and velocity offsets are correlated (a cold beam in x - v).
    """

    def __init__(self, eps, sigma_a=1.0, sigma_b=1.0, center_a=(0, 0, 0), center_b=(0, 0, 0), shear=0.0):
        self.eps = float(eps)
        self.sa = float(sigma_a)
        self.sb = float(sigma_b)
        self.ca = np.asarray(center_a, dtype=float)
        self.cb = np.asarray(center_b, dtype=float)
        self.k = float(shear)
        if self.sa <= 0 or self.sb <= 0:
            raise ConfigError("Gaussian widths must be positive")

    def _uv(self, a, b):
        v = np.atleast_2d(b) - self.cb
        u = np.atleast_2d(a) - self.ca - self.k * v
        return u, v

    def __call__(self, a, b):
        u, v = self._uv(a, b)
        e = np.sum(u * u, axis=1) / (2 * self.sa**2) + np.sum(v * v, axis=1) / (2 * self.sb**2)
        return self.eps * np.exp(-e)

    def grad(self, a, b):
        u, v = self._uv(a, b)
        mu = self(a, b)[:, None]
        ga = -u / self.sa**2
        gb = self.k * u / self.sa**2 - v / self.sb**2
        return mu * np.hstack([ga, gb])

    def hessian(self, a, b):
        u, v = self._uv(a, b)
        mu = self(a, b)
        g = np.hstack([-u / self.sa**2, self.k * u / self.sa**2 - v / self.sb**2])
        dg = np.zeros((6, 6))
        eye = np.eye(3)
        dg[:3, :3] = -eye / self.sa**2
        dg[:3, 3:] = self.k * eye / self.sa**2
        dg[3:, :3] = self.k * eye / self.sa**2
        dg[3:, 3:] = -(self.k**2 / self.sa**2 + 1 / self.sb**2) * eye
        return mu[:, None, None] * (g[:, :, None] * g[:, None, :] + dg)

    def b_marginal_density(self, w):
        v = np.atleast_2d(w) - self.cb
        return self.eps**2 * (math.pi * self.sa**2) ** 1.5 * np.exp(-np.sum(v * v, axis=1) / self.sb**2)

    def a_marginal_density(self, x):
        S = self.sa**2 + self.k**2 * self.sb**2
        d = np.atleast_2d(x) - self.ca
        pref = self.eps**2 * (math.pi * self.sa**2 * self.sb**2 / S) ** 1.5
        return pref * np.exp(-np.sum(d * d, axis=1) / S)

    def b_marginal_gaussian(self):
        return self.cb.copy(), self.eps**2 * (math.pi * self.sa**2) ** 1.5, self.sb / math.sqrt(2.0)

    def total_charge(self):
        return self.eps**2 * math.pi**3 * self.sa**3 * self.sb**3

    def support(self):
        ra = 6.0 * math.hypot(self.sa, self.k * self.sb)
        return self.ca.copy(), ra, self.cb.copy(), 6.0 * self.sb

    def separable_factors(self):
        if self.k != 0.0:
            return None
        funcs = []
        for c, s in [(c, self.sa) for c in self.ca] + [(c, self.sb) for c in self.cb]:
            funcs.append(lambda x, c=c, s=s: np.exp(-((x - c) ** 2) / (2 * s * s)))
        return self.eps, funcs

    def scaled(self, factor):
        return GaussianProfile(self.eps * factor, self.sa, self.sb, self.ca, self.cb, self.k)

    def describe(self):
        return {"family": "gaussian", "eps": self.eps, "sigma_a": self.sa, "sigma_b": self.sb,
                "center_a": self.ca.tolist(), "center_b": self.cb.tolist(), "shear": self.k}


def _bump(r):
    out = np.zeros_like(r)
    inside = r < 1.0
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - r[inside] ** 2))
    return out


_BUMP_SQ_INTEGRAL = 4 * math.pi * integrate.quad(
    lambda r: math.exp(2.0 - 2.0 / (1.0 - r * r)) * r * r, 0.0, 1.0, epsabs=1e-14, epsrel=1e-13)[0]


class BumpProfile(Profile):
    """eps * phi(|a - ca| / ra) * phi(|b - cb| / rb) with phi(r) = exp(1 - 1/(1 - r^2)) on r < 1."""

    support_widths = 2.5

    def __init__(self, eps, radius_a=2.0, radius_b=2.0, center_a=(0, 0, 0), center_b=(0, 0, 0)):
        self.eps = float(eps)
        self.ra = float(radius_a)
        self.rb = float(radius_b)
        self.ca = np.asarray(center_a, dtype=float)
        self.cb = np.asarray(center_b, dtype=float)

    def __call__(self, a, b):
        ra = np.linalg.norm(np.atleast_2d(a) - self.ca, axis=1) / self.ra
        rb = np.linalg.norm(np.atleast_2d(b) - self.cb, axis=1) / self.rb
        return self.eps * _bump(ra) * _bump(rb)

    def b_marginal_density(self, w):
        r = np.linalg.norm(np.atleast_2d(w) - self.cb, axis=1) / self.rb
        return self.eps**2 * self.ra**3 * _BUMP_SQ_INTEGRAL * _bump(r) ** 2

    def a_marginal_density(self, x):
        r = np.linalg.norm(np.atleast_2d(x) - self.ca, axis=1) / self.ra
        return self.eps**2 * self.rb**3 * _BUMP_SQ_INTEGRAL * _bump(r) ** 2

    def total_charge(self):
        return self.eps**2 * (self.ra * self.rb) ** 3 * _BUMP_SQ_INTEGRAL**2

    def support(self):
        return self.ca.copy(), self.ra, self.cb.copy(), self.rb

    def scaled(self, factor):
        return BumpProfile(self.eps * factor, self.ra, self.rb, self.ca, self.cb)

    def describe(self):
        return {"family": "bump", "eps": self.eps, "radius_a": self.ra, "radius_b": self.rb,
                "center_a": self.ca.tolist(), "center_b": self.cb.tolist()}


class PointConcentration(Profile):
    """Charge ``mass`` concentrated at b = w0 (only the asymptotic field is meaningful)."""

    def __init__(self, mass, w0=(0, 0, 0)):
        self.mass = float(mass)
        self.w0 = np.asarray(w0, dtype=float)

    def __call__(self, a, b):
        raise TypeError("a point concentration has no pointwise values; use its asymptotic field")

    def point_masses(self):
        return [(self.w0.copy(), self.mass)]

    def total_charge(self):
        return self.mass

    def support(self):
        return np.zeros(3), 1.0, self.w0.copy(), 1.0

    def describe(self):
        return {"family": "point", "mass": self.mass, "w0": self.w0.tolist()}


class SwappedProfile(Profile):
    """(a, b) -> base(b, a); turns mu_inf(a, b) into sigma_0(w, z) = mu_inf(z, w)."""

    def __init__(self, base):
        self.base = base

    @property
    def support_widths(self):
        return getattr(self.base, "support_widths", 6.0)

    def __call__(self, a, b):
        return self.base(b, a)

    def grad(self, a, b):
        g = self.base.grad(b, a)
        return np.hstack([g[:, 3:], g[:, :3]])

    def hessian(self, a, b):
        h = self.base.hessian(b, a)
        perm = [3, 4, 5, 0, 1, 2]
        return h[:, perm][:, :, perm]

    def b_marginal_density(self, w):
        return self.base.a_marginal_density(w)

    def a_marginal_density(self, x):
        return self.base.b_marginal_density(x)

    def total_charge(self):
        return self.base.total_charge()

    def support(self):
        ca, ra, cb, rb = self.base.support()
        return cb, rb, ca, ra

    def separable_factors(self):
        f = self.base.separable_factors()
        if f is None:
            return None
        return f[0], f[1][3:] + f[1][:3]

    def describe(self):
        return {"family": "swapped", "base": self.base.describe()}


class ReflectedProfile(Profile):
    """(a, b) -> base(a, -b): the momentum reflection used for the past side."""

    def __init__(self, base):
        self.base = base

    @property
    def support_widths(self):
        return getattr(self.base, "support_widths", 6.0)

    def __call__(self, a, b):
        return self.base(a, -np.atleast_2d(b))

    def grad(self, a, b):
        g = self.base.grad(a, -np.atleast_2d(b))
        g[:, 3:] *= -1
        return g

    def hessian(self, a, b):
        h = self.base.hessian(a, -np.atleast_2d(b))
        sign = np.array([1, 1, 1, -1, -1, -1.0])
        return h * sign[None, :, None] * sign[None, None, :]

    def b_marginal_density(self, w):
        return self.base.b_marginal_density(-np.atleast_2d(w))

    def a_marginal_density(self, x):
        return self.base.a_marginal_density(x)

    def b_marginal_gaussian(self):
        g = self.base.b_marginal_gaussian()
        if g is None:
            return None
        return -g[0], g[1], g[2]

    def total_charge(self):
        return self.base.total_charge()

    def support(self):
        ca, ra, cb, rb = self.base.support()
        return ca, ra, -cb, rb

    def separable_factors(self):
        f = self.base.separable_factors()
        if f is None:
            return None
        flipped = [lambda x, g=g: g(-x) for g in f[1][3:]]
        return f[0], f[1][:3] + flipped

    def describe(self):
        return {"family": "reflected", "base": self.base.describe()}


def make_profile(spec):
    """Build a profile from a plain mapping (the ``profile`` block of a run config)."""
    spec = dict(spec)
    family = spec.pop("family", None)
    try:
        if family == "gaussian":
            return GaussianProfile(**spec)
        if family == "bump":
            return BumpProfile(**spec)
        if family == "point":
            return PointConcentration(**spec)
        if family == "zero":
            return ZeroProfile()
    except TypeError as exc:
        raise ConfigError(f"bad {family} profile parameters: {exc}") from exc
    raise ConfigError(f"unknown profile family {family!r}")
