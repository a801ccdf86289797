"""Compiled direct-summation kernels for the softened Coulomb interaction.

All kernels parallelise over targets only; the reduction over sources runs in
the fixed source order, so repeated calls are bitwise reproducible for a given
thread count.  The 1/(4 pi) normalisation is applied by the callers.
"""

import numba
import numpy as np
from numba import njit, prange

# prefer OpenMP; the bundled TBB is often too old and only produces a warning
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

# unique components of the symmetric gradient / third-order tensors
GRAD_INDEX = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))
HESS_INDEX = (
    (0, 0, 0), (0, 0, 1), (0, 0, 2), (0, 1, 1), (0, 1, 2),
    (0, 2, 2), (1, 1, 1), (1, 1, 2), (1, 2, 2), (2, 2, 2),
)


@njit(parallel=True, cache=True)
def coulomb_sum(tx, sx, c, d2, self_idx, compensated, skip_coincident):
    """Field sum_k c_k r/(|r|^2+d2)^{3/2}, r = target - source_k."""
    M = tx.shape[0]
    N = sx.shape[0]
    out = np.zeros((M, 3))
    nsing = np.zeros(M, np.int64)
    for i in prange(M):
        x0 = tx[i, 0]
        x1 = tx[i, 1]
        x2 = tx[i, 2]
        me = self_idx[i]
        ax = 0.0
        ay = 0.0
        az = 0.0
        cx = 0.0
        cy = 0.0
        cz = 0.0
        for k in range(N):
            if k == me:
                continue
            dx = x0 - sx[k, 0]
            dy = x1 - sx[k, 1]
            dz = x2 - sx[k, 2]
            r2 = dx * dx + dy * dy + dz * dz
            if r2 == 0.0 and d2 == 0.0:
                if not skip_coincident:
                    nsing[i] += 1
                continue
            D = r2 + d2
            f = c[k] / (D * np.sqrt(D))
            if compensated:
                y = dx * f
                t = ax + y
                if abs(ax) >= abs(y):
                    cx += (ax - t) + y
                else:
                    cx += (y - t) + ax
                ax = t
                y = dy * f
                t = ay + y
                if abs(ay) >= abs(y):
                    cy += (ay - t) + y
                else:
                    cy += (y - t) + ay
                ay = t
                y = dz * f
                t = az + y
                if abs(az) >= abs(y):
                    cz += (az - t) + y
                else:
                    cz += (y - t) + az
                az = t
            else:
                ax += dx * f
                ay += dy * f
                az += dz * f
        out[i, 0] = ax + cx
        out[i, 1] = ay + cy
        out[i, 2] = az + cz
    return out, nsing


@njit(cache=True)
def _accumulate(acc, comp, v, n, compensated):
    for m in range(n):
        y = v[m]
        if compensated:
            t = acc[m] + y
            if abs(acc[m]) >= abs(y):
                comp[m] += (acc[m] - t) + y
            else:
                comp[m] += (y - t) + acc[m]
            acc[m] = t
        else:
            acc[m] += y


@njit(parallel=True, cache=True)
def coulomb_sum_derivs(tx, sx, c, d2, self_idx, order, compensated, skip_coincident):
    """Field plus its first (order >= 1) and second (order == 2) derivatives.

    Returns packed arrays: E (M,3), unique gradient entries (M,6) in
    GRAD_INDEX order and unique second-derivative entries (M,10) in
    HESS_INDEX order, where grad[i, j] = d E_i / d x_j.
    """
    M = tx.shape[0]
    N = sx.shape[0]
    ncomp = 3 + 6 + (10 if order >= 2 else 0)
    out = np.zeros((M, ncomp))
    nsing = np.zeros(M, np.int64)
    for i in prange(M):
        acc = np.zeros(ncomp)
        comp = np.zeros(ncomp)
        v = np.zeros(ncomp)
        me = self_idx[i]
        for k in range(N):
            if k == me:
                continue
            r0 = tx[i, 0] - sx[k, 0]
            r1 = tx[i, 1] - sx[k, 1]
            r2_ = tx[i, 2] - sx[k, 2]
            rr = r0 * r0 + r1 * r1 + r2_ * r2_
            if rr == 0.0 and d2 == 0.0:
                if not skip_coincident:
                    nsing[i] += 1
                continue
            D = rr + d2
            inv = 1.0 / D
            f3 = c[k] * inv * np.sqrt(inv)
            f5 = 3.0 * f3 * inv
            v[0] = r0 * f3
            v[1] = r1 * f3
            v[2] = r2_ * f3
            v[3] = f3 - f5 * r0 * r0
            v[4] = -f5 * r0 * r1
            v[5] = -f5 * r0 * r2_
            v[6] = f3 - f5 * r1 * r1
            v[7] = -f5 * r1 * r2_
            v[8] = f3 - f5 * r2_ * r2_
            if order >= 2:
                f7 = 5.0 * f5 * inv
                # -f5 (d_ij r_k + d_ik r_j + d_jk r_i) + f7 r_i r_j r_k
                v[9] = -3.0 * f5 * r0 + f7 * r0 * r0 * r0
                v[10] = -f5 * r1 + f7 * r0 * r0 * r1
                v[11] = -f5 * r2_ + f7 * r0 * r0 * r2_
                v[12] = -f5 * r0 + f7 * r0 * r1 * r1
                v[13] = f7 * r0 * r1 * r2_
                v[14] = -f5 * r0 + f7 * r0 * r2_ * r2_
                v[15] = -3.0 * f5 * r1 + f7 * r1 * r1 * r1
                v[16] = -f5 * r2_ + f7 * r1 * r1 * r2_
                v[17] = -f5 * r1 + f7 * r1 * r2_ * r2_
                v[18] = -3.0 * f5 * r2_ + f7 * r2_ * r2_ * r2_
            _accumulate(acc, comp, v, ncomp, compensated)
        for m in range(ncomp):
            out[i, m] = acc[m] + comp[m]
    return out, nsing


@njit(parallel=True, cache=True)
def gaussian_deposit(tx, sx, wts, width):
    """sum_k wts_k * (2 pi width^2)^{-3/2} exp(-|t - s_k|^2 / (2 width^2))."""
    M = tx.shape[0]
    N = sx.shape[0]
    m = wts.shape[1]
    out = np.zeros((M, m))
    norm = (2.0 * np.pi * width * width) ** -1.5
    a = 0.5 / (width * width)
    cutoff = 40.0
    for i in prange(M):
        for k in range(N):
            dx = tx[i, 0] - sx[k, 0]
            dy = tx[i, 1] - sx[k, 1]
            dz = tx[i, 2] - sx[k, 2]
            e = a * (dx * dx + dy * dy + dz * dz)
            if e > cutoff:
                continue
            g = np.exp(-e) * norm
            for j in range(m):
                out[i, j] += wts[k, j] * g
    return out


@njit(parallel=True, cache=True)
def nearest_distance(tx, sx):
    M = tx.shape[0]
    N = sx.shape[0]
    out = np.empty(M)
    for i in prange(M):
        best = np.inf
        for k in range(N):
            d = 0.0
            for j in range(tx.shape[1]):
                e = tx[i, j] - sx[k, j]
                d += e * e
            if d < best:
                best = d
        out[i] = np.sqrt(best)
    return out


def unpack_grad(packed):
    """(M,6) unique entries -> (M,3,3) symmetric tensor."""
    g = np.empty(packed.shape[:-1] + (3, 3))
    for m, (i, j) in enumerate(GRAD_INDEX):
        g[..., i, j] = packed[..., m]
        g[..., j, i] = packed[..., m]
    return g


def unpack_hess(packed):
    """(M,10) unique entries -> (M,3,3,3) fully symmetric tensor."""
    h = np.empty(packed.shape[:-1] + (3, 3, 3))
    for m, (i, j, k) in enumerate(HESS_INDEX):
        for a, b, c in {(i, j, k), (i, k, j), (j, i, k), (j, k, i), (k, i, j), (k, j, i)}:
            h[..., a, b, c] = packed[..., m]
    return h
