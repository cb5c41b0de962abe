"""Multi-resolution hash-grid encoding of 3D positions.

A point is encoded as (x, features) where the features are trilinearly
interpolated entries of L learnable tables at geometrically increasing grid
resolutions.  Coarse levels index their grid vertices densely; fine levels
spatially hash them into a fixed-size table.  A coarse-to-fine scalar masks
levels above it to zero (indicator weights), which is how progressive
training limits bandwidth early on.

Besides the forward interpolation this module exposes the three derivative
paths the reconstruction engine needs:

* ``encode_jacobian``  - d encoding / d position (piecewise constant per cell)
* ``backward_first``   - table gradients from a cotangent of the encoding
* ``backward_second``  - table gradients from a cotangent of the *jacobian*
  (the second-order path: the jacobian is linear in the table entries, so
  its derivative w.r.t. a table entry is the trilinear-weight gradient).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels

DEFAULT_AABB = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))


def level_resolutions(num_levels, min_resolution, max_resolution):
    """Per-level grid resolutions on a geometric progression.

    resolution_i = round(min * b**(i-1)) with b chosen so the first level is
    exactly ``min_resolution`` and the last exactly ``max_resolution``.
    """
    if num_levels < 2:
        raise ValueError("need at least 2 levels")
    if not min_resolution < max_resolution:
        raise ValueError("min_resolution must be below max_resolution")
    growth = np.exp((np.log(max_resolution) - np.log(min_resolution)) / (num_levels - 1))
    res = [int(round(min_resolution * growth**i)) for i in range(num_levels)]
    res[0] = int(min_resolution)
    res[-1] = int(max_resolution)
    return res


class MultiResHashGrid:
    """L levels of learnable feature tables over an axis-aligned box.

    tables has shape (levels, table_size, features_per_level); a level uses
    dense row-major vertex indexing iff its full vertex count fits in the
    table, otherwise the xor-prime spatial hash.
    """

    def __init__(
        self,
        num_levels=14,
        min_resolution=16,
        max_resolution=2048,
        features_per_level=2,
        table_size=2**19,
        aabb=DEFAULT_AABB,
        dtype=np.float32,
        rng=None,
    ):
        self.num_levels = int(num_levels)
        self.features_per_level = int(features_per_level)
        self.table_size = int(table_size)
        self.resolutions = np.asarray(
            level_resolutions(num_levels, min_resolution, max_resolution), dtype=np.int64
        )
        lo, hi = np.asarray(aabb[0], dtype=np.float64), np.asarray(aabb[1], dtype=np.float64)
        if not np.all(hi > lo):
            raise ValueError("aabb must have positive extent on each axis")
        self.aabb_min = lo
        self.aabb_extent = hi - lo
        self.dtype = np.dtype(dtype)
        if rng is None:
            self.tables = np.zeros(
                (self.num_levels, self.table_size, self.features_per_level), dtype=self.dtype
            )
        else:
            self.tables = rng.uniform(
                -1e-4, 1e-4, size=(self.num_levels, self.table_size, self.features_per_level)
            ).astype(self.dtype)

    @property
    def encoding_dim(self):
        """Length of the encoded vector: position plus all level features."""
        return 3 + self.num_levels * self.features_per_level

    def level_is_dense(self, level):
        n = int(self.resolutions[level])
        return (n + 1) ** 3 <= self.table_size

    def feature_slice(self, level):
        """Columns of the encoding owned by ``level`` (0-based)."""
        f = self.features_per_level
        return slice(3 + level * f, 3 + (level + 1) * f)

    def normalize(self, x):
        """Map world positions into [0,1]^3, clamping to the box."""
        x = np.asarray(x, dtype=self.dtype)
        xn = (x - self.aabb_min.astype(self.dtype)) / self.aabb_extent.astype(self.dtype)
        return np.clip(xn, 0.0, 1.0)

    def zero_gradient(self):
        return np.zeros_like(self.tables)


@dataclass
class CornerRecords:
    """Backward caches: per point/level, the 8 table rows touched plus the
    trilinear weights and their world-space gradients."""

    indices: np.ndarray  # (P, L, 8) int64
    weights: np.ndarray  # (P, L, 8)
    weight_gradients: np.ndarray  # (P, L, 8, 3)
    active_levels: int


@dataclass
class EncodedPoint:
    """Encoding of a batch of points: e = (x, level features)."""

    e: np.ndarray  # (P, 3 + L*df)
    jacobian: np.ndarray | None  # (P, 3 + L*df, 3) or None
    corner_records: CornerRecords | None


def active_level_count(grid, max_level):
    """Number of leading levels with indicator weight 1 for this cutoff.

    Levels are 1-indexed in the cutoff convention: level i is active iff
    i <= max_level, so a cutoff of 2 activates the two coarsest levels.
    """
    return int(np.clip(np.floor(max_level), 0, grid.num_levels))


def hash_index(cell, level, grid):
    """Table row for an integer grid vertex at ``level``.

    Dense levels use row-major vertex order; hashed levels xor the
    coordinates multiplied by the fixed primes (1, 2654435761, 805459861)
    and reduce modulo the table size.
    """
    cell = np.asarray(cell, dtype=np.int64)
    n = int(grid.resolutions[level])
    if np.any(cell < 0) or np.any(cell > n):
        raise ValueError("cell out of bounds")
    if grid.level_is_dense(level):
        return int(cell[0] + (n + 1) * (cell[1] + (n + 1) * cell[2]))
    mask32 = 0xFFFFFFFF
    h = (
        (int(cell[0]) * int(_kernels.PRIME_X)) & mask32
        ^ (int(cell[1]) * int(_kernels.PRIME_Y)) & mask32
        ^ (int(cell[2]) * int(_kernels.PRIME_Z)) & mask32
    )
    return h % grid.table_size


def _as_batch(x):
    x = np.asarray(x)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def encode(grid, x, max_level, need_jacobian=False):
    """Encode world positions; returns an EncodedPoint batch.

    Positions outside the box are clamped onto it.  The encoded vector starts
    with the raw position; level features above the cutoff are zero.  With
    ``need_jacobian`` the d encoding / d position matrix and the corner
    records used by the backward passes are attached.
    """
    xb, single = _as_batch(x)
    if not np.all(np.isfinite(xb)):
        raise ValueError("invalid position")
    xb = np.ascontiguousarray(xb, dtype=grid.dtype)
    xn = grid.normalize(xb)
    n_active = active_level_count(grid, max_level)
    npts = xb.shape[0]
    if need_jacobian:
        inv_extent = np.ascontiguousarray(1.0 / grid.aabb_extent, dtype=grid.dtype)
        feats, jac_feats, cidx, cw, cdw = _kernels.interp_full(
            xn, grid.tables, grid.resolutions, n_active, inv_extent
        )
        jac = np.zeros((npts, grid.encoding_dim, 3), dtype=grid.dtype)
        jac[:, 0, 0] = 1.0
        jac[:, 1, 1] = 1.0
        jac[:, 2, 2] = 1.0
        jac[:, 3:, :] = jac_feats
        records = CornerRecords(cidx, cw, cdw, n_active)
    else:
        feats = _kernels.interp_features(xn, grid.tables, grid.resolutions, n_active)
        jac = None
        records = None
    e = np.concatenate([xb, feats], axis=1)
    return EncodedPoint(e=e, jacobian=jac, corner_records=records)


def encode_features_only(grid, x, max_level):
    """Lean forward pass returning just the (P, L*df) feature block."""
    xb, _ = _as_batch(x)
    xb = np.ascontiguousarray(xb, dtype=grid.dtype)
    xn = grid.normalize(xb)
    return _kernels.interp_features(
        xn, grid.tables, grid.resolutions, active_level_count(grid, max_level)
    )


def encode_jacobian(grid, x, max_level):
    """d encoding / d position, shape (P, 3 + L*df, 3).

    The first three rows are the identity (position passthrough); feature
    rows hold the analytic trilinear gradient, constant within a cell, with
    masked levels zero.
    """
    return encode(grid, x, max_level, need_jacobian=True).jacobian


def backward_first(grid, point, dl_de, out=None):
    """Accumulate table gradients from a cotangent of the encoding.

    dl_de is (P, 3 + L*df); the position slice is ignored here (positions are
    not table parameters).  Returns the gradient buffer.
    """
    rec = point.corner_records
    if rec is None:
        raise ValueError("stale sample: encode was called without caches")
    if out is None:
        out = grid.zero_gradient()
    dl_feat = np.ascontiguousarray(dl_de[:, 3:], dtype=grid.dtype)
    _kernels.scatter_first(out, rec.indices, rec.weights, dl_feat, rec.active_levels)
    return out


def hessian_contract(grid, x, max_level, coeff):
    """Contract per-feature interpolation Hessians with coefficients.

    Returns (P,3,3): sum over feature rows a of coeff[p,a] * d2 e_a / dx dx,
    the curvature of the encoding at x.  Used for the exact position
    derivative of SDF normals.
    """
    xb, _ = _as_batch(x)
    xb = np.ascontiguousarray(xb, dtype=grid.dtype)
    xn = grid.normalize(xb)
    inv_extent = np.ascontiguousarray(1.0 / grid.aabb_extent, dtype=grid.dtype)
    coeff = np.ascontiguousarray(coeff, dtype=grid.dtype)
    return _kernels.hessian_contract(
        xn, grid.tables, grid.resolutions, active_level_count(grid, max_level), inv_extent, coeff
    )


def backward_second(grid, point, u, out=None):
    """Accumulate table gradients from a cotangent of d encoding / d position.

    u is (P, 3 + L*df, 3), matching the shape of the jacobian.  Only feature
    rows contribute: those rows are linear in the table entries with
    coefficients equal to the trilinear-weight spatial gradients, so the
    gradient is u contracted against the cached weight gradients.
    """
    rec = point.corner_records
    if rec is None:
        raise ValueError("stale sample: encode was called without caches")
    if out is None:
        out = grid.zero_gradient()
    u_feat = np.ascontiguousarray(u[:, 3:, :], dtype=grid.dtype)
    _kernels.scatter_second(out, rec.indices, rec.weight_gradients, u_feat, rec.active_levels)
    return out
