"""Volume rendering of the SDF field along camera rays.

The signed distance is turned into per-interval opacities via the logistic
sigmoid: alpha_i = max((Phi(f_i) - Phi(f_{i+1})) / Phi(f_i), 0) over
consecutive samples, which concentrates the compositing weights at the
zero crossing regardless of the sharpness (the unbiased weighting).  The
last sample of a ray only serves as the forward-difference endpoint of the
previous interval.

Marching steps a fixed stride from box entry to exit and keeps the midpoint
of every step that lands in an occupied cell of a coarse occupancy grid,
which is refreshed periodically from the field's density (logistic density
of the SDF at cell centers, max-decay EMA).

``backward_cotangents`` converts a pixel-color cotangent into per-sample
SDF/color cotangents and the sharpness gradient; everything the field
backward then needs is retained in the RenderRecords.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import field as fieldmod

ALPHA_MAX = 1.0 - 1e-7
LOGISTIC_CLAMP = 80.0
MAX_SAMPLES_PER_RAY = 512
STEP_DIVISOR = 512
EMA_DECAY = 0.95


def sdf_transforms(sharpness, f):
    """Logistic sigmoid and density of the SDF: (Phi, phi).

    Phi(f) = 1 / (1 + exp(-s f)); phi is its derivative w.r.t. f.  The
    argument is clamped to +/-80 so both stay finite in float32.
    """
    f = np.asarray(f)
    z = np.clip(sharpness * f, -LOGISTIC_CLAMP, LOGISTIC_CLAMP)
    phi_cdf = np.empty_like(z)
    pos = z >= 0
    phi_cdf[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    phi_cdf[~pos] = ez / (1.0 + ez)
    density = sharpness * phi_cdf * (1.0 - phi_cdf)
    return phi_cdf, density


def alpha(f_i, f_next, sharpness):
    """Per-interval opacity from the SDF at a sample and its successor."""
    cdf_i, _ = sdf_transforms(sharpness, f_i)
    cdf_j, _ = sdf_transforms(sharpness, f_next)
    return np.clip((cdf_i - cdf_j) / cdf_i, 0.0, ALPHA_MAX)


def composite(alphas, colors):
    """Front-to-back compositing along one ray.

    Returns (color, weights, final transmittance) with weights
    w_i = alpha_i * prod_{j<i} (1 - alpha_j).
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    trans = np.concatenate([[1.0], np.cumprod(1.0 - alphas)])
    weights = trans[:-1] * alphas
    return weights @ colors.reshape(len(alphas), -1), weights, float(trans[-1])


@dataclass
class OccupancyGrid:
    """Coarse box grid marking cells worth sampling."""

    resolution: int = 128
    aabb: tuple = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    threshold: float = 0.01

    def __post_init__(self):
        g = self.resolution
        self.lo = np.asarray(self.aabb[0], dtype=np.float64)
        self.hi = np.asarray(self.aabb[1], dtype=np.float64)
        self.ema = np.zeros((g, g, g), dtype=np.float64)
        self.bits = np.zeros((g, g, g), dtype=bool)
        self.step_size = float(np.linalg.norm(self.hi - self.lo)) / STEP_DIVISOR

    def set_all(self, value=True):
        self.bits[:] = value
        return self

    def cell_centers(self):
        g = self.resolution
        ax = [(self.lo[a] + (np.arange(g) + 0.5) * (self.hi[a] - self.lo[a]) / g) for a in range(3)]
        xx, yy, zz = np.meshgrid(*ax, indexing="ij")
        return np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)

    def bits_at(self, positions):
        g = self.resolution
        cell = ((positions - self.lo) / (self.hi - self.lo) * g).astype(np.int64)
        np.clip(cell, 0, g - 1, out=cell)
        return self.bits[cell[:, 0], cell[:, 1], cell[:, 2]]

    def occupied_fraction(self):
        return float(self.bits.mean())


def update_occupancy(occ, params, max_level, rng=None, point_transform=None, chunk=1 << 18):
    """Refresh the grid from the field: EMA ~ logistic density at cell centers.

    Every cell is visited (desk scale; ``rng`` is accepted for interface
    stability but unused).  ``point_transform`` maps marching-space centers
    into the field's canonical space for dynamic sequences.  A bit is set
    when EMA * step_size exceeds the threshold.
    """
    centers = occ.cell_centers()
    sharpness = params.sharpness
    dvals = np.empty(centers.shape[0], dtype=np.float64)
    for s in range(0, centers.shape[0], chunk):
        pts = centers[s : s + chunk]
        if point_transform is not None:
            pts = point_transform(pts)
        dvals[s : s + chunk] = field_sdf_only(params, pts, max_level)
    _, density = sdf_transforms(sharpness, dvals)
    candidate = density.reshape(occ.ema.shape)
    occ.ema = np.maximum(candidate, EMA_DECAY * occ.ema)
    occ.bits = occ.ema * occ.step_size > occ.threshold
    return occ


def field_sdf_only(params, positions, max_level):
    """Signed distance alone, on the lean encode path (no caches)."""
    from . import hash_encoding as enc
    from . import relu_mlp as mlp

    x = np.ascontiguousarray(positions, dtype=params.dtype)
    feats = enc.encode_features_only(params.grid, x, max_level)
    e_aug = np.concatenate(
        [x, feats, np.ones((x.shape[0], 1), dtype=params.dtype)], axis=1
    )
    y, _ = mlp.forward(params.sdf_net, e_aug)
    return y[:, 0]


@dataclass
class MarchResult:
    ray_ids: np.ndarray  # (P,) int
    t: np.ndarray  # (P,)
    positions: np.ndarray  # (P, 3)
    num_rays: int


def intersect_aabb(origins, dirs, lo, hi):
    """Slab test; returns (t_enter, t_exit) with enter >= 0, exit < enter on miss."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origins) * inv
        t2 = (hi - origins) * inv
    near = np.minimum(t1, t2)
    far = np.maximum(t1, t2)
    # parallel rays: slab constraint is origin inside (else empty range)
    par = np.abs(dirs) < 1e-12
    inside = (origins >= lo) & (origins <= hi)
    near[par] = np.where(inside[par], -np.inf, np.inf)
    far[par] = np.where(inside[par], np.inf, -np.inf)
    t_enter = np.maximum(near.max(axis=1), 0.0)
    t_exit = far.min(axis=1)
    return t_enter, t_exit


def march_rays(origins, dirs, occ):
    """Fixed-stride marching with empty-space skipping.

    Candidate samples sit at step-interval midpoints between box entry and
    exit; those inside occupied cells are kept, capped at 512 per ray.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    m = origins.shape[0]
    dt = occ.step_size
    t_enter, t_exit = intersect_aabb(origins, dirs, occ.lo, occ.hi)
    counts = np.ceil(np.maximum(t_exit - t_enter, 0.0) / dt).astype(np.int64)
    np.clip(counts, 0, MAX_SAMPLES_PER_RAY, out=counts)
    if counts.sum() == 0:
        return MarchResult(np.zeros(0, np.int64), np.zeros(0), np.zeros((0, 3)), m)
    ray_ids = np.repeat(np.arange(m), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(ray_ids.shape[0]) - np.repeat(starts, counts)
    t = t_enter[ray_ids] + (local + 0.5) * dt
    pos = origins[ray_ids] + t[:, None] * dirs[ray_ids]
    keep = occ.bits_at(pos)
    return MarchResult(ray_ids[keep], t[keep], pos[keep], m)


@dataclass
class RenderRecords:
    """Everything retained for the training backward pass."""

    ray_ids: np.ndarray  # (P,) sample -> ray
    t: np.ndarray  # (P,)
    frame_positions: np.ndarray  # (P,3) marching-space positions
    sdf: np.ndarray  # (P,)
    sample_colors: np.ndarray  # (P,3)
    interval_first: np.ndarray  # (I,) sample index i of each interval (i, i+1)
    alphas: np.ndarray  # (I,)
    weights: np.ndarray  # (I,)
    transmittance: np.ndarray  # (m,) residual per ray
    sharpness: float
    num_rays: int
    cache: object = None  # FieldCache (or None for injected analytic fields)

    @property
    def sample_count(self):
        return self.ray_ids.shape[0]


def _segment_transmittance(alphas, interval_ray_ids, num_rays):
    """T before each interval and residual transmittance per ray.

    interval_ray_ids must be sorted (marching emits rays in order).  Computed
    in log space so long opaque runs stay exact instead of underflowing the
    running product for every ray that follows.
    """
    logs = np.log1p(-alphas.astype(np.float64))
    cs = np.concatenate([[0.0], np.cumsum(logs)])
    uniq, first_idx = np.unique(interval_ray_ids, return_index=True)
    seg_start = np.zeros(num_rays, dtype=np.int64)
    seg_start[uniq] = first_idx
    trans_before = np.exp(cs[:-1] - cs[seg_start[interval_ray_ids]])
    resid = np.exp(np.bincount(interval_ray_ids, weights=logs, minlength=num_rays))
    return trans_before, resid


def render_rays(batch, params, occ, max_level, point_transform=None, dir_transform=None):
    """March, evaluate the field, composite; returns (colors (m,3), records).

    ``params`` is either SdfFieldParams or any object with a ``sharpness``
    attribute and an ``evaluate(positions, view_dirs) -> (sdf, colors)``
    method (analytic injection hook for tests).  ``point_transform`` /
    ``dir_transform`` map marching-space samples into the field's canonical
    space (dynamic sequences).
    """
    origins = np.asarray(batch.origins, dtype=np.float64)
    dirs = np.asarray(batch.directions, dtype=np.float64)
    m = origins.shape[0]
    march = march_rays(origins, dirs, occ)
    sharpness = float(params.sharpness)
    if march.t.shape[0] == 0:
        rec = RenderRecords(
            march.ray_ids, march.t, march.positions, np.zeros(0), np.zeros((0, 3)),
            np.zeros(0, np.int64), np.zeros(0), np.zeros(0), np.ones(m), sharpness, m,
        )
        return np.zeros((m, 3)), rec

    pos = march.positions
    vdir = dirs[march.ray_ids]
    if point_transform is not None:
        pos_f = point_transform(pos)
    else:
        pos_f = pos
    if dir_transform is not None:
        vdir_f = dir_transform(vdir)
    else:
        vdir_f = vdir

    if hasattr(params, "evaluate"):
        sdf, colors = params.evaluate(pos_f, vdir_f)
        cache = None
    else:
        cache = fieldmod.eval_field(params, pos_f, vdir_f, max_level)
        sdf, colors = cache.d, cache.colors

    sdf = np.asarray(sdf, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)

    same_ray = march.ray_ids[1:] == march.ray_ids[:-1]
    interval_first = np.nonzero(same_ray)[0]
    alphas = alpha(sdf[interval_first], sdf[interval_first + 1], sharpness)
    interval_ray_ids = march.ray_ids[interval_first]
    trans_before, resid = _segment_transmittance(alphas, interval_ray_ids, m)
    weights = trans_before * alphas
    out = np.zeros((m, 3))
    for ch in range(3):
        out[:, ch] = np.bincount(
            interval_ray_ids, weights=weights * colors[interval_first, ch], minlength=m
        )
    rec = RenderRecords(
        march.ray_ids, march.t, march.positions, sdf, colors,
        interval_first, alphas, weights, resid, sharpness, m, cache,
    )
    return out, rec


def expected_depth(records):
    """Per-ray expected termination depth, sum of w_i t_i."""
    return np.bincount(
        records.ray_ids[records.interval_first],
        weights=records.weights * records.t[records.interval_first],
        minlength=records.num_rays,
    )


def backward_cotangents(records, dl_dray_colors):
    """Chain a pixel-color cotangent back to per-sample quantities.

    Returns (dl_dcolors (P,3), dl_dsdf (P,), dl_dsharpness_log).  Opacity
    clamps (negative numerator, the 1-1e-7 cap) pass zero gradient.
    """
    dl_dc_ray = np.asarray(dl_dray_colors, dtype=np.float64)
    npts = records.sample_count
    dl_dcolors = np.zeros((npts, 3))
    dl_dsdf = np.zeros(npts)
    if npts == 0 or records.interval_first.shape[0] == 0:
        return dl_dcolors, dl_dsdf, 0.0

    ii = records.interval_first
    rids = records.ray_ids[ii]
    alphas = records.alphas
    weights = records.weights
    colors = records.sample_colors[ii]
    s = records.sharpness

    # color cotangent: c_i enters with weight w_i
    dl_dcolors[ii] = weights[:, None] * dl_dc_ray[rids]

    # opacity cotangent: the direct emission term minus the attenuation of
    # everything composited later on the same ray
    a_dot = np.einsum("ij,ij->i", colors, dl_dc_ray[rids])
    wa = weights * a_dot
    descending = np.concatenate([np.cumsum(wa[::-1])[::-1], [0.0]])  # sum_{k'>=k}
    per_ray = np.bincount(rids, weights=wa, minlength=records.num_rays)
    after_ray = np.concatenate([np.cumsum(per_ray[::-1])[::-1][1:], [0.0]])
    suffix = descending[1:] - after_ray[rids]  # sum over later intervals, same ray

    trans_before, _ = _segment_transmittance(alphas, rids, records.num_rays)
    dl_dalpha = trans_before * a_dot - suffix / (1.0 - alphas)

    f_i = records.sdf[ii]
    f_j = records.sdf[ii + 1]
    cdf_i, _ = sdf_transforms(s, f_i)
    cdf_j, _ = sdf_transforms(s, f_j)
    raw = (cdf_i - cdf_j) / cdf_i
    live = (raw > 0.0) & (raw < ALPHA_MAX)

    dpdf_i = s * cdf_i * (1.0 - cdf_i)
    dpdf_j = s * cdf_j * (1.0 - cdf_j)
    da_dfi = np.where(live, cdf_j / cdf_i**2 * dpdf_i, 0.0)
    da_dfj = np.where(live, -dpdf_j / cdf_i, 0.0)
    da_ds = np.where(
        live,
        cdf_j / cdf_i**2 * f_i * cdf_i * (1.0 - cdf_i)
        - f_j * cdf_j * (1.0 - cdf_j) / cdf_i,
        0.0,
    )
    np.add.at(dl_dsdf, ii, dl_dalpha * da_dfi)
    np.add.at(dl_dsdf, ii + 1, dl_dalpha * da_dfj)
    dl_dsharpness = float(np.sum(dl_dalpha * da_ds))
    return dl_dcolors, dl_dsdf, dl_dsharpness * s
