"""The neural field: hash encoding -> SDF MLP -> color MLP.

The SDF network maps the encoded point to (signed distance, 15-dim geometry
feature); the color network maps (position, normal, view direction, signed
distance, geometry feature) to RGB.  Normals are the exact analytic chain
(d sdf / d encoding) @ (d encoding / d position) from the cached forward
pass, never finite differences.

``field_backward`` assembles the complete parameter gradient from per-sample
cotangents.  The normal cotangent requires second-order terms, which split
into exactly two surviving paths (the mixed second derivative of a ReLU MLP
w.r.t. its input vanishes, and the encoding jacobian does not depend on the
MLP weights):

* tables: cotangent of the encoding jacobian = (d sdf / d encoding) outer
  (loss normal cotangent), scattered through the trilinear weight gradients;
* SDF weights: the analytic per-layer contraction with the jacobian-row
  cotangent (d encoding / d position) @ (loss normal cotangent).

The one deviation from strictly bias-free layers: the SDF network input is
the encoding plus a constant-one channel, which acts as a first-layer bias
so the sphere-like geometry init can carry an offset.  The constant channel
has zero spatial derivative, so all jacobian chains simply carry a zero row
for it.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import hash_encoding as enc
from . import relu_mlp as mlp

GEO_FEATURE_DIM = 15
COLOR_IN_DIM = 3 + 3 + 3 + 1 + GEO_FEATURE_DIM  # x, n, v, d, g


def sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class FieldConfig:
    num_levels: int = 14
    min_resolution: int = 16
    max_resolution: int = 2048
    features_per_level: int = 2
    table_size: int = 2**19
    hidden_width: int = 64
    aabb: tuple = enc.DEFAULT_AABB
    dtype: type = np.float32


class SdfFieldParams:
    """All learnable state: hash tables, two MLPs, and the sharpness scalar.

    Sharpness s = exp(sharpness_log) > 0 by construction.
    """

    def __init__(self, grid, sdf_net, color_net, sharpness_log):
        enc_dim = grid.encoding_dim
        if sdf_net.in_dim != enc_dim + 1:
            raise mlp.ShapeError("shape error: sdf net input must be encoding dim + 1")
        if sdf_net.out_dim != 1 + GEO_FEATURE_DIM:
            raise mlp.ShapeError("shape error: sdf net must output 16 values")
        if color_net.in_dim != COLOR_IN_DIM or color_net.out_dim != 3:
            raise mlp.ShapeError("shape error: color net must map 25 -> 3")
        self.grid = grid
        self.sdf_net = sdf_net
        self.color_net = color_net
        self.sharpness_log = np.asarray(sharpness_log, dtype=np.float64).reshape(1)

    @classmethod
    def create(cls, config=None, rng=None, sharpness=20.0):
        config = config or FieldConfig()
        rng = rng or np.random.default_rng(0)
        grid = enc.MultiResHashGrid(
            num_levels=config.num_levels,
            min_resolution=config.min_resolution,
            max_resolution=config.max_resolution,
            features_per_level=config.features_per_level,
            table_size=config.table_size,
            aabb=config.aabb,
            dtype=config.dtype,
            rng=rng,
        )
        w = config.hidden_width
        sdf_net = mlp.MlpWeights.random(
            [grid.encoding_dim + 1, w, 1 + GEO_FEATURE_DIM], rng, dtype=config.dtype
        )
        color_net = mlp.MlpWeights.random([COLOR_IN_DIM, w, w, 3], rng, dtype=config.dtype)
        return cls(grid, sdf_net, color_net, np.log(sharpness))

    @property
    def sharpness(self):
        return float(np.exp(self.sharpness_log[0]))

    @property
    def dtype(self):
        return self.grid.dtype

    def copy(self):
        import copy as _copy

        grid = _copy.copy(self.grid)
        grid.tables = self.grid.tables.copy()
        return SdfFieldParams(
            grid, self.sdf_net.copy(), self.color_net.copy(), self.sharpness_log.copy()
        )


def _fibonacci_directions(n):
    k = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * k / n)
    theta = np.pi * (1 + 5**0.5) * k
    return np.stack(
        [np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1
    )


def sal_geometry_init(params, radius=0.5, rng=None):
    """Initialize the field so the SDF approximates ||x|| - radius.

    The hidden layer is set to +/- direction pairs whose rectified responses
    sum to an estimate of ||x|| (the mean of |<u, x>| over the sphere is
    ||x||/2); one hidden unit carries the constant channel so the output can
    subtract the radius.  Hash tables start near zero, the color net with a
    standard small init, so geometry dominates at step 0.
    """
    rng = rng or np.random.default_rng(0)
    grid, sdf = params.grid, params.sdf_net
    dtype = params.dtype
    grid.tables[:] = rng.uniform(-1e-4, 1e-4, size=grid.tables.shape).astype(dtype)

    width = sdf.layers[0].shape[0]
    enc_dim = grid.encoding_dim
    n_pairs = (width - 2) // 2
    dirs = _fibonacci_directions(n_pairs)
    h1 = np.zeros((width, enc_dim + 1), dtype=np.float64)
    for k in range(n_pairs):
        h1[2 * k, 0:3] = dirs[k]
        h1[2 * k + 1, 0:3] = -dirs[k]
    h1[width - 2, enc_dim] = 1.0  # constant-channel carrier
    h1[:, 3:enc_dim] = rng.standard_normal((width, enc_dim - 3)) * np.sqrt(2.0 / enc_dim)
    sdf.layers[0][:] = h1.astype(dtype)

    h2 = rng.standard_normal(sdf.layers[1].shape) * 0.1
    h2[0, :] = 0.0
    h2[0, : 2 * n_pairs] = 2.0 / n_pairs  # mean of |<u,x>| over directions is ||x||/2
    h2[0, width - 2] = -radius
    sdf.layers[1][:] = h2.astype(dtype)

    for i, h in enumerate(params.color_net.layers):
        fan_in = h.shape[1]
        params.color_net.layers[i][:] = (
            rng.standard_normal(h.shape) * np.sqrt(2.0 / fan_in)
        ).astype(dtype)
    return params


@dataclass
class FieldCache:
    """Everything the backward pass needs about one evaluated batch."""

    x: np.ndarray
    max_level: float
    encoded: enc.EncodedPoint
    e_aug: np.ndarray
    sdf_trace: mlp.ForwardTrace
    sdf_out: np.ndarray
    d_row_jacobian: np.ndarray  # (P, enc_dim+1): d sdf / d augmented encoding
    normals: np.ndarray
    view_dirs: np.ndarray | None = None
    color_in: np.ndarray | None = None
    color_trace: mlp.ForwardTrace | None = None
    colors: np.ndarray | None = None

    @property
    def d(self):
        return self.sdf_out[:, 0]

    @property
    def g(self):
        return self.sdf_out[:, 1:]


@dataclass
class FieldGrads:
    tables: np.ndarray
    sdf_layers: list
    color_layers: list
    dl_dx: np.ndarray | None = None
    dl_dv: np.ndarray | None = None


def _augment(e):
    ones = np.ones((e.shape[0], 1), dtype=e.dtype)
    return np.concatenate([e, ones], axis=1)


def eval_field(params, x, view_dirs=None, max_level=None, need_color=True):
    """Full forward pass over a batch; returns a FieldCache.

    view_dirs is required when need_color; max_level defaults to all levels.
    """
    if max_level is None:
        max_level = params.grid.num_levels
    x = np.atleast_2d(np.asarray(x, dtype=params.dtype))
    point = enc.encode(params.grid, x, max_level, need_jacobian=True)
    e_aug = _augment(point.e)
    sdf_out, trace = mlp.forward(params.sdf_net, e_aug)
    j_d = mlp.input_jacobian_rows(params.sdf_net, trace, [0])[:, 0, :]  # (P, E+1)
    enc_dim = params.grid.encoding_dim
    normals = np.matmul(j_d[:, None, :enc_dim], point.jacobian)[:, 0, :]
    cache = FieldCache(
        x=x,
        max_level=max_level,
        encoded=point,
        e_aug=e_aug,
        sdf_trace=trace,
        sdf_out=sdf_out,
        d_row_jacobian=j_d,
        normals=normals,
    )
    if need_color:
        if view_dirs is None:
            raise ValueError("view_dirs required for color evaluation")
        v = np.atleast_2d(np.asarray(view_dirs, dtype=params.dtype))
        color_in = np.concatenate(
            [x, normals, v, sdf_out[:, :1], sdf_out[:, 1:]], axis=1
        )
        logits, ctrace = mlp.forward(params.color_net, color_in)
        cache.view_dirs = v
        cache.color_in = color_in
        cache.color_trace = ctrace
        cache.colors = sigmoid(logits)
    return cache


def eval_sdf(params, x, max_level=None):
    """(signed distance, geometry feature) at x; returns (d, g, cache)."""
    cache = eval_field(params, x, max_level=max_level, need_color=False)
    return cache.d, cache.g, cache


def eval_normal(params, x, max_level=None):
    """Spatial gradient of the signed distance at x."""
    return eval_field(params, x, max_level=max_level, need_color=False).normals


def eval_color(params, cache, view_dirs):
    """Color for an already-evaluated batch (re-runs only the color net)."""
    v = np.atleast_2d(np.asarray(view_dirs, dtype=params.dtype))
    color_in = np.concatenate(
        [cache.x, cache.normals, v, cache.sdf_out[:, :1], cache.sdf_out[:, 1:]], axis=1
    )
    logits, ctrace = mlp.forward(params.color_net, color_in)
    cache.view_dirs = v
    cache.color_in = color_in
    cache.color_trace = ctrace
    cache.colors = sigmoid(logits)
    return cache.colors


def field_backward(params, cache, dl_dc=None, dl_dd=None, dl_dn=None, need_input_grads=False):
    """Assemble gradients over tables, SDF net and color net from cotangents.

    dl_dc (P,3), dl_dd (P,), dl_dn (P,3); any may be None for zero.  The
    color-net normal input contributes to the total normal cotangent, which
    is then routed through the two second-order paths.  With
    ``need_input_grads`` the first-order position/view cotangents are also
    returned (used by the rigid-transform optimizer; the curvature of the
    interpolated encoding, d normal / d position, is not included there).
    """
    if cache.encoded.corner_records is None:
        raise ValueError("stale sample")
    npts = cache.x.shape[0]
    dtype = params.dtype
    enc_dim = params.grid.encoding_dim

    grads = FieldGrads(
        tables=params.grid.zero_gradient(),
        sdf_layers=params.sdf_net.zero_gradients(),
        color_layers=params.color_net.zero_gradients(),
    )

    q = np.zeros((npts, 3), dtype=dtype) if dl_dn is None else np.asarray(dl_dn, dtype=dtype).copy()
    dd_total = np.zeros(npts, dtype=dtype) if dl_dd is None else np.asarray(dl_dd, dtype=dtype).copy()
    dg = np.zeros((npts, GEO_FEATURE_DIM), dtype=dtype)
    dl_dx = np.zeros((npts, 3), dtype=dtype)
    dl_dv = np.zeros((npts, 3), dtype=dtype)

    if dl_dc is not None:
        if cache.color_trace is None:
            raise ValueError("stale sample")
        c = cache.colors
        dlogits = np.asarray(dl_dc, dtype=dtype) * c * (1.0 - c)
        cgrads, dcolor_in = mlp.backward_first(params.color_net, cache.color_trace, dlogits)
        for gbuf, gnew in zip(grads.color_layers, cgrads):
            gbuf += gnew
        dl_dx += dcolor_in[:, 0:3]
        q += dcolor_in[:, 3:6]
        dl_dv += dcolor_in[:, 6:9]
        dd_total += dcolor_in[:, 9]
        dg += dcolor_in[:, 10:]

    # First-order SDF path: d and g cotangents through the net and tables.
    dl_dy = np.concatenate([dd_total[:, None], dg], axis=1)
    sgrads, de_aug = mlp.backward_first(params.sdf_net, cache.sdf_trace, dl_dy)
    for gbuf, gnew in zip(grads.sdf_layers, sgrads):
        gbuf += gnew
    enc.backward_first(params.grid, cache.encoded, de_aug[:, :enc_dim], out=grads.tables)

    # Second-order paths for the normal cotangent.
    if np.any(q):
        u = cache.d_row_jacobian[:, :enc_dim, None] * q[:, None, :]  # (P, E, 3)
        enc.backward_second(params.grid, cache.encoded, u, out=grads.tables)

        mvec = np.zeros((npts, enc_dim + 1), dtype=dtype)
        mvec[:, :enc_dim] = np.matmul(cache.encoded.jacobian, q[:, :, None])[:, :, 0]
        s2 = mlp.backward_second_row(params.sdf_net, cache.sdf_trace, 0, mvec)
        for gbuf, gnew in zip(grads.sdf_layers, s2):
            gbuf += gnew

    if need_input_grads:
        dl_dx += dd_total[:, None] * cache.normals
        if np.any(dg):
            # geometry-feature rows of the jacobian chained to position
            jg = mlp.input_jacobian_rows(
                params.sdf_net, cache.sdf_trace, list(range(1, 1 + GEO_FEATURE_DIM))
            )[:, :, :enc_dim]
            gjac = np.matmul(jg, cache.encoded.jacobian)  # (P, 15, 3)
            dl_dx += np.matmul(dg[:, None, :], gjac)[:, 0, :]
        if np.any(q):
            # d normal / d position: the MLP contributes nothing (piecewise
            # linear), leaving only the interpolation curvature.
            hess = enc.hessian_contract(
                params.grid, cache.x, cache.max_level, cache.d_row_jacobian[:, 3:enc_dim]
            )
            dl_dx += np.matmul(q[:, None, :], hess)[:, 0, :]
        grads.dl_dx = dl_dx
        grads.dl_dv = dl_dv
    return grads
