"""Compiled inner loops for the multi-resolution hash grid.

Everything here is deliberately scalar-per-point: the loops fuse the corner
index computation, the trilinear weights, and the table gathers/scatters so
no intermediate (points x levels x corners) arrays are materialized.  All
kernels are dtype-generic (float32 in the engine, float64 in test builds)
and run single-threaded so gradient accumulation order is deterministic.
"""

import numba
import numpy as np

# Corner order: bit 2 -> x, bit 1 -> y, bit 0 -> z (corner 0 is the lower cell
# vertex, corner 7 the upper one).
PRIME_X = np.uint32(1)
PRIME_Y = np.uint32(2654435761)
PRIME_Z = np.uint32(805459861)


@numba.njit(cache=True, fastmath=False)
def _cell_and_frac(t, n):
    # Lower-cell convention: a query exactly on a grid face belongs to the
    # cell below it (frac 1.0), so interpolation gradients are deterministic.
    c = int(np.ceil(t)) - 1
    if c < 0:
        c = 0
    elif c > n - 1:
        c = n - 1
    return c, t - c


@numba.njit(cache=True, fastmath=False)
def _corner_index(cx, cy, cz, n, table_size):
    if (n + 1) * (n + 1) * (n + 1) <= table_size:
        return cx + (n + 1) * (cy + (n + 1) * cz)
    h = np.uint32(cx) * PRIME_X ^ np.uint32(cy) * PRIME_Y ^ np.uint32(cz) * PRIME_Z
    return np.int64(h % np.uint32(table_size))


@numba.njit(cache=True, fastmath=False)
def interp_features(xn, tables, resolutions, n_active):
    """Trilinear features only (occupancy sweeps, SDF-only queries).

    xn: (P,3) coordinates normalized to [0,1]. Returns (P, L*df) with rows of
    inactive levels left at zero.
    """
    npts = xn.shape[0]
    nlev, table_size, nfeat = tables.shape
    out = np.zeros((npts, nlev * nfeat), dtype=tables.dtype)
    for p in range(npts):
        for lev in range(n_active):
            n = resolutions[lev]
            cx, fx = _cell_and_frac(xn[p, 0] * n, n)
            cy, fy = _cell_and_frac(xn[p, 1] * n, n)
            cz, fz = _cell_and_frac(xn[p, 2] * n, n)
            for c in range(8):
                ox = (c >> 2) & 1
                oy = (c >> 1) & 1
                oz = c & 1
                w = (fx if ox else 1.0 - fx) * (fy if oy else 1.0 - fy) * (fz if oz else 1.0 - fz)
                idx = _corner_index(cx + ox, cy + oy, cz + oz, n, table_size)
                for f in range(nfeat):
                    out[p, lev * nfeat + f] += w * tables[lev, idx, f]
    return out


@numba.njit(cache=True, fastmath=False)
def interp_full(xn, tables, resolutions, n_active, inv_extent):
    """Features + spatial gradients + the corner records needed for backward.

    Returns (features, feature_jacobian, corner_idx, corner_w, corner_dw):
      features          (P, L*df)
      feature_jacobian  (P, L*df, 3)   d feature / d world position
      corner_idx        (P, L, 8)      table rows per corner (int64)
      corner_w          (P, L, 8)      trilinear weights
      corner_dw         (P, L, 8, 3)   d weight / d world position
    inv_extent is 1 / (aabb extent) per axis; world gradients include the
    level resolution factor.
    """
    npts = xn.shape[0]
    nlev, table_size, nfeat = tables.shape
    feats = np.zeros((npts, nlev * nfeat), dtype=tables.dtype)
    jac = np.zeros((npts, nlev * nfeat, 3), dtype=tables.dtype)
    cidx = np.zeros((npts, nlev, 8), dtype=np.int64)
    cw = np.zeros((npts, nlev, 8), dtype=tables.dtype)
    cdw = np.zeros((npts, nlev, 8, 3), dtype=tables.dtype)
    for p in range(npts):
        for lev in range(n_active):
            n = resolutions[lev]
            sx = n * inv_extent[0]
            sy = n * inv_extent[1]
            sz = n * inv_extent[2]
            cx, fx = _cell_and_frac(xn[p, 0] * n, n)
            cy, fy = _cell_and_frac(xn[p, 1] * n, n)
            cz, fz = _cell_and_frac(xn[p, 2] * n, n)
            for c in range(8):
                ox = (c >> 2) & 1
                oy = (c >> 1) & 1
                oz = c & 1
                wx = fx if ox else 1.0 - fx
                wy = fy if oy else 1.0 - fy
                wz = fz if oz else 1.0 - fz
                w = wx * wy * wz
                dwx = (wy * wz * sx) if ox else (-wy * wz * sx)
                dwy = (wx * wz * sy) if oy else (-wx * wz * sy)
                dwz = (wx * wy * sz) if oz else (-wx * wy * sz)
                idx = _corner_index(cx + ox, cy + oy, cz + oz, n, table_size)
                cidx[p, lev, c] = idx
                cw[p, lev, c] = w
                cdw[p, lev, c, 0] = dwx
                cdw[p, lev, c, 1] = dwy
                cdw[p, lev, c, 2] = dwz
                for f in range(nfeat):
                    v = tables[lev, idx, f]
                    feats[p, lev * nfeat + f] += w * v
                    jac[p, lev * nfeat + f, 0] += dwx * v
                    jac[p, lev * nfeat + f, 1] += dwy * v
                    jac[p, lev * nfeat + f, 2] += dwz * v
    return feats, jac, cidx, cw, cdw


@numba.njit(cache=True, fastmath=False)
def scatter_first(grad, cidx, cw, dl_dfeat, n_active):
    """Accumulate d loss / d tables from a feature cotangent (P, L*df)."""
    npts = cidx.shape[0]
    nfeat = grad.shape[2]
    for p in range(npts):
        for lev in range(n_active):
            for c in range(8):
                idx = cidx[p, lev, c]
                w = cw[p, lev, c]
                for f in range(nfeat):
                    grad[lev, idx, f] += w * dl_dfeat[p, lev * nfeat + f]


@numba.njit(cache=True, fastmath=False)
def scatter_second(grad, cidx, cdw, u, n_active):
    """Accumulate d loss / d tables from a jacobian cotangent.

    u is (P, L*df, 3): the cotangent of the feature rows of d encoding / dx.
    Because those rows are linear in the table entries, the table gradient is
    u contracted against the cached trilinear-weight spatial gradients.
    """
    npts = cidx.shape[0]
    nfeat = grad.shape[2]
    for p in range(npts):
        for lev in range(n_active):
            for c in range(8):
                idx = cidx[p, lev, c]
                for f in range(nfeat):
                    acc = (
                        u[p, lev * nfeat + f, 0] * cdw[p, lev, c, 0]
                        + u[p, lev * nfeat + f, 1] * cdw[p, lev, c, 1]
                        + u[p, lev * nfeat + f, 2] * cdw[p, lev, c, 2]
                    )
                    grad[lev, idx, f] += acc


@numba.njit(cache=True, fastmath=False)
def hessian_contract(xn, tables, resolutions, n_active, inv_extent, coeff):
    """Sum_a coeff[p,a] * d2(feature_a)/dx dx, shape (P, 3, 3).

    Trilinear interpolation is linear along each axis, so the per-feature
    Hessian has zero diagonal; the mixed entries are piecewise constant per
    cell.  coeff is a (P, L*df) weighting of the feature rows (the d-row of
    the SDF jacobian when this is used for d normal / d position).
    """
    npts = xn.shape[0]
    nlev, table_size, nfeat = tables.shape
    out = np.zeros((npts, 3, 3), dtype=tables.dtype)
    for p in range(npts):
        for lev in range(n_active):
            n = resolutions[lev]
            sx = n * inv_extent[0]
            sy = n * inv_extent[1]
            sz = n * inv_extent[2]
            cx, fx = _cell_and_frac(xn[p, 0] * n, n)
            cy, fy = _cell_and_frac(xn[p, 1] * n, n)
            cz, fz = _cell_and_frac(xn[p, 2] * n, n)
            hxy = 0.0
            hxz = 0.0
            hyz = 0.0
            for c in range(8):
                ox = (c >> 2) & 1
                oy = (c >> 1) & 1
                oz = c & 1
                wx = fx if ox else 1.0 - fx
                wy = fy if oy else 1.0 - fy
                wz = fz if oz else 1.0 - fz
                gx = 1.0 if ox else -1.0
                gy = 1.0 if oy else -1.0
                gz = 1.0 if oz else -1.0
                idx = _corner_index(cx + ox, cy + oy, cz + oz, n, table_size)
                cv = 0.0
                for f in range(nfeat):
                    cv += coeff[p, lev * nfeat + f] * tables[lev, idx, f]
                hxy += cv * gx * gy * wz
                hxz += cv * gx * gz * wy
                hyz += cv * gy * gz * wx
            out[p, 0, 1] += hxy * sx * sy
            out[p, 1, 0] += hxy * sx * sy
            out[p, 0, 2] += hxz * sx * sz
            out[p, 2, 0] += hxz * sx * sz
            out[p, 1, 2] += hyz * sy * sz
            out[p, 2, 1] += hyz * sy * sz
    return out


@numba.njit(cache=True, fastmath=False)
def adam_step(param, grad, m, v, t, lr, beta1, beta2, eps):
    """Fused in-place Adam update over flat (1-D) parameter views."""
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for i in range(param.shape[0]):
        g = grad[i]
        m[i] = beta1 * m[i] + (1.0 - beta1) * g
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g
        param[i] -= lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + eps)
