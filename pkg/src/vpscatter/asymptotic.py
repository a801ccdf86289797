"""Asymptotic data: a profile together with evaluators for E0 and its derivatives."""

import math

import numpy as np
from scipy import special

from .field import kernel_field


def _radial_gaussian_HKM(r, rho0, sigma):
    """H, k, m for E = x H(r) of rho0 exp(-r^2 / (2 sigma^2)).

    H = r^-3 int_0^r t^2 rho, k = H'/r and m = k'/r.  A power series is
    used for r < sigma, where the closed forms cancel catastrophically.
    """
    r = np.asarray(r, dtype=float)
    H = np.empty_like(r)
    k = np.empty_like(r)
    m = np.empty_like(r)
    small = r < sigma
    rs = r[small]
    if rs.size:
        x = rs * rs
        H_s = np.zeros_like(rs)
        k_s = np.zeros_like(rs)
        m_s = np.zeros_like(rs)
        for n in range(30):
            a_n = rho0 * (-1) ** n / ((2 * sigma**2) ** n * math.factorial(n) * (2 * n + 3))
            H_s += a_n * x**n
            if n >= 1:
                k_s += 2 * n * a_n * x ** (n - 1)
            if n >= 2:
                m_s += 2 * n * (2 * n - 2) * a_n * x ** (n - 2)
        H[small] = H_s
        k[small] = k_s
        m[small] = m_s
    rl = r[~small]
    if rl.size:
        rho = rho0 * np.exp(-rl**2 / (2 * sigma**2))
        inner = sigma**3 * (math.sqrt(math.pi / 2) * special.erf(rl / (math.sqrt(2) * sigma))
                            - (rl / sigma) * np.exp(-rl**2 / (2 * sigma**2)))
        Hl = rho0 * inner / rl**3
        kl = (rho - 3 * Hl) / rl**2
        ml = (-rho / sigma**2 - 5 * kl) / rl**2
        H[~small] = Hl
        k[~small] = kl
        m[~small] = ml
    return H, k, m


class AsymptoticData:
    """E0 with first and second derivatives; the W^{3,inf} audit uses a finite
    difference of the second derivatives.

    ``grad_E0(x)[..., i, j] = dE0_i/dx_j``, ``hess_E0(x)[..., i, j, k] = d^2 E0_i/dx_j dx_k``.
    """

    def __init__(self, E0, grad_E0, hess_E0, kind, profile=None, box=None, meta=None):
        self._E0 = E0
        self._grad = grad_E0
        self._hess = hess_E0
        self.kind = kind
        self.profile = profile
        self.box = box if box is not None else (np.zeros(3), 3.0)
        self.meta = dict(meta or {})
        self._norms = None

    def E0(self, x):
        return self._E0(np.atleast_2d(np.asarray(x, dtype=float)))

    def grad_E0(self, x):
        return self._grad(np.atleast_2d(np.asarray(x, dtype=float)))

    def hess_E0(self, x):
        return self._hess(np.atleast_2d(np.asarray(x, dtype=float)))

    @property
    def is_zero(self):
        return self.kind == "zero"

    # -- constructors --------------------------------------------------------
    @classmethod
    def zero(cls):
        def z3(x):
            return np.zeros((x.shape[0], 3))

        def z33(x):
            return np.zeros((x.shape[0], 3, 3))

        def z333(x):
            return np.zeros((x.shape[0], 3, 3, 3))
        return cls(z3, z33, z333, "zero")

    @classmethod
    def constant(cls, vec):
        vec = np.asarray(vec, dtype=float).reshape(3)
        return cls(lambda x: np.broadcast_to(vec, (x.shape[0], 3)).copy(),
                   lambda x: np.zeros((x.shape[0], 3, 3)),
                   lambda x: np.zeros((x.shape[0], 3, 3, 3)),
                   "constant", meta={"value": vec.tolist()})

    @classmethod
    def linear(cls, matrix, offset=(0, 0, 0)):
        """E0(x) = M x + b with a symmetric M (a quadratic potential)."""
        M = np.asarray(matrix, dtype=float).reshape(3, 3)
        b = np.asarray(offset, dtype=float)
        return cls(lambda x: x @ M.T + b,
                   lambda x: np.broadcast_to(M, (x.shape[0], 3, 3)).copy(),
                   lambda x: np.zeros((x.shape[0], 3, 3, 3)),
                   "linear", meta={"matrix": M.tolist(), "offset": b.tolist()})

    @classmethod
    def radial_gaussian(cls, center, rho0, sigma, profile=None):
        """Closed-form field of the density rho0 exp(-|x - c|^2 / (2 sigma^2))."""
        c = np.asarray(center, dtype=float)

        def parts(x):
            d = x - c
            r = np.linalg.norm(d, axis=1)
            H, k, m = _radial_gaussian_HKM(r, rho0, sigma)
            return d, H, k, m

        def E0(x):
            d, H, _, _ = parts(x)
            return d * H[:, None]

        def grad(x):
            d, H, k, _ = parts(x)
            return H[:, None, None] * np.eye(3) + k[:, None, None] * d[:, :, None] * d[:, None, :]

        def hess(x):
            d, _, k, m = parts(x)
            eye = np.eye(3)
            t = (np.einsum("ij,nk->nijk", eye, d) + np.einsum("ik,nj->nijk", eye, d)
                 + np.einsum("jk,ni->nijk", eye, d))
            return k[:, None, None, None] * t + m[:, None, None, None] * np.einsum(
                "ni,nj,nk->nijk", d, d, d)
        return cls(E0, grad, hess, "analytic", profile=profile, box=(c, 4.0 * sigma),
                   meta={"center": c.tolist(), "rho0": rho0, "sigma": sigma})

    @classmethod
    def from_charges(cls, positions, charges, softening, summation="compensated", profile=None):
        """E0 generated by point charges (e.g. sigma_0 samples at q = w)."""
        pos = np.asarray(positions, dtype=float).reshape(-1, 3)
        c = np.asarray(charges, dtype=float).reshape(-1)
        uniq, inv = np.unique(pos, axis=0, return_inverse=True)
        cu = np.bincount(inv.ravel(), weights=c, minlength=uniq.shape[0])
        cache = {}

        def eval_at(x, order):
            key = (x.tobytes(), order)
            if key not in cache:
                if len(cache) > 8:
                    cache.clear()
                cache[key] = kernel_field(uniq, cu, x, softening, order=order, summation=summation)
            return cache[key]

        if uniq.shape[0]:
            center = np.average(uniq, axis=0, weights=cu)
            spread = float(np.sqrt(np.average(np.sum((uniq - center) ** 2, axis=1), weights=cu)))
        else:
            center, spread = np.zeros(3), 1.0
        return cls(lambda x: eval_at(x, 0).E,
                   lambda x: eval_at(x, 1).grad,
                   lambda x: eval_at(x, 2).hess,
                   "ensemble", profile=profile, box=(center, 2.0 * max(spread, 1e-3)),
                   meta={"softening": softening, "n_sources": int(uniq.shape[0]),
                         "summation": summation})

    # -- norms ------------------------------------------------------------------
    def probe_lattice(self, n=9):
        c, half = self.box
        ax = np.linspace(-half, half, n)
        g = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1).reshape(-1, 3)
        return g + np.asarray(c)

    def norms(self, n=9, h=1e-3):
        """Sup of |E0|, |grad E0|, |grad^2 E0|, |grad^3 E0| over a probe lattice."""
        if self._norms is None:
            x = self.probe_lattice(n)
            e = self.E0(x)
            g = self.grad_E0(x)
            hs = self.hess_E0(x)
            third = 0.0
            for j in range(3):
                dx = np.zeros(3)
                dx[j] = h
                d3 = (self.hess_E0(x + dx) - self.hess_E0(x - dx)) / (2 * h)
                third = max(third, float(np.max(np.abs(d3))) if d3.size else 0.0)
            vals = [float(np.max(np.abs(a))) if a.size else 0.0 for a in (e, g, hs)]
            self._norms = {"E0_sup": vals[0], "grad_sup": vals[1], "hess_sup": vals[2],
                           "third_sup": third, "W3inf": vals[0] + vals[1] + vals[2] + third,
                           "note": "sup over a probe lattice (a lower estimate of the true norm)"}
        return self._norms

    def describe(self):
        return {"kind": self.kind, **self.meta}
