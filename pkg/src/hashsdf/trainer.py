"""Static-scene training loop.

One step: sample a ray batch (90% foreground by default), render through the
occupancy grid, take the Huber color loss plus weighted Eikonal penalty on
the per-sample normals, push cotangents through the renderer and field, and
apply per-group Adam.  The coarse-to-fine cutoff starts at 2 levels and
gains one level every 2.5% of the run; hash-table levels above it receive
structurally zero gradients and are skipped by the optimizer.  Everything is
driven by one seeded generator so a run is a pure function of (dataset,
config), and the checkpoint stores enough state (parameters, moments, rng,
occupancy) to resume bit-identically.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels, checkpoint
from . import field as fieldmod
from . import renderer, scene_io


@dataclass
class TrainConfig:
    # loop
    total_steps: int = 15000
    batch_size: int = 4096
    seed: int = 0
    # loss
    eikonal_weight: float = 0.1
    huber_delta: float = 0.1
    fg_fraction: float = 0.9
    # optimizer (cosine decay to lr_final_fraction over the run)
    lr_tables: float = 1e-2
    lr_mlp: float = 1e-3
    lr_final_fraction: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-15
    # progressive level schedule
    level_init: int = 2
    level_increment_fraction: float = 0.025
    # occupancy grid
    occupancy_resolution: int = 128
    occupancy_update_every: int = 16
    occupancy_threshold: float = 0.01
    # field shape
    num_levels: int = 14
    min_resolution: int = 16
    max_resolution: int = 2048
    features_per_level: int = 2
    table_size: int = 2**19
    hidden_width: int = 64
    init_radius: float = 0.5
    init_sharpness: float = 20.0
    dtype: str = "float32"
    # dynamic sequences
    first_frame_steps: int = 2000
    frame_steps: int = 1100
    transform_only_steps: int = 100
    transform_lr: float = 1e-3
    transform_joint_lr: float = 1e-4
    frame_lr_scale: float = 0.3

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


@dataclass
class LossReport:
    step: int
    color: float
    eikonal: float
    total: float
    level: int
    psnr: float
    sample_count: int = 0


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def like(cls, array):
        return cls(np.zeros_like(array), np.zeros_like(array))


def huber(residual, delta):
    """Classic Huber loss, branches meeting at |r| = delta."""
    r = np.asarray(residual)
    a = np.abs(r)
    return np.where(a <= delta, 0.5 * r * r / delta, a - 0.5 * delta)


def huber_grad(residual, delta):
    r = np.asarray(residual)
    return np.where(np.abs(r) <= delta, r / delta, np.sign(r))


def color_loss(rendered, targets, delta):
    """Mean over rays of per-channel-summed Huber."""
    if rendered.shape[0] < 1:
        raise ValueError("need at least one ray")
    return float(huber(rendered - targets, delta).sum(axis=1).mean())


def eikonal_loss(normals):
    """Mean squared deviation of normal norms from one."""
    if normals.shape[0] < 1:
        raise ValueError("need at least one normal")
    nn = np.linalg.norm(np.atleast_2d(normals), axis=1)
    return float(((nn - 1.0) ** 2).mean())


def level_schedule(step, config):
    """Coarse-to-fine cutoff: starts at level_init, +1 per increment window."""
    window = config.level_increment_fraction * config.total_steps
    return int(min(config.num_levels, config.level_init + np.floor(step / window)))


def lr_factor(step, total_steps, final_fraction):
    t = np.clip(step / max(total_steps, 1), 0.0, 1.0)
    return final_fraction + (1.0 - final_fraction) * 0.5 * (1.0 + np.cos(np.pi * t))


def psnr(image_a, image_b):
    """Peak signal-to-noise ratio in dB for [0,1] images, capped at 100."""
    a, b = np.asarray(image_a), np.asarray(image_b)
    if a.shape != b.shape:
        raise ValueError("psnr: shape mismatch")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return 100.0
    return float(10.0 * np.log10(1.0 / mse))


def masked_psnr(image_a, image_b, mask):
    sel = np.asarray(mask) > 0.5
    if not np.any(sel):
        return 100.0
    return psnr(np.asarray(image_a)[sel], np.asarray(image_b)[sel])


def adam_update(state, param, grad, lr, config, name="param", m=None, v=None):
    """One bias-corrected Adam step, in place on ``param``.

    ``m``/``v`` default to the state's buffers; callers updating only a
    leading slice of a block (masked hash levels) pass matching views.
    """
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError(f"divergence: non-finite gradient for {name}")
    state.t += 1
    _kernels.adam_step(
        param.reshape(-1),
        np.ascontiguousarray(grad, dtype=param.dtype).reshape(-1),
        (state.m if m is None else m).reshape(-1),
        (state.v if v is None else v).reshape(-1),
        state.t,
        lr,
        config.adam_beta1,
        config.adam_beta2,
        config.adam_eps,
    )
    return param


class TrainState:
    """Everything a run mutates: parameters, moments, occupancy, rng, step."""

    def __init__(self, params, occ, config, rng, step=0):
        self.params = params
        self.occ = occ
        self.config = config
        self.rng = rng
        self.step = step
        self.adam = {}
        self.adam["tables"] = AdamState.like(params.grid.tables)
        for i, h in enumerate(params.sdf_net.layers):
            self.adam[f"sdf_{i}"] = AdamState.like(h)
        for i, h in enumerate(params.color_net.layers):
            self.adam[f"color_{i}"] = AdamState.like(h)
        self.adam["sharpness_log"] = AdamState.like(params.sharpness_log)

    @classmethod
    def create(cls, config, aabb=((-1, -1, -1), (1, 1, 1))):
        rng = np.random.default_rng(config.seed)
        fcfg = fieldmod.FieldConfig(
            num_levels=config.num_levels,
            min_resolution=config.min_resolution,
            max_resolution=config.max_resolution,
            features_per_level=config.features_per_level,
            table_size=config.table_size,
            hidden_width=config.hidden_width,
            aabb=aabb,
            dtype=np.dtype(config.dtype).type,
        )
        params = fieldmod.SdfFieldParams.create(fcfg, rng, sharpness=config.init_sharpness)
        fieldmod.sal_geometry_init(params, config.init_radius, rng)
        occ = renderer.OccupancyGrid(
            resolution=config.occupancy_resolution,
            aabb=aabb,
            threshold=config.occupancy_threshold,
        )
        return cls(params, occ, config, rng)


def compute_cotangents(state, batch, rendered, records):
    """Loss value + per-sample cotangents for one rendered batch."""
    cfg = state.config
    m = batch.count
    residual = rendered - batch.target_colors
    c_loss = color_loss(rendered, batch.target_colors, cfg.huber_delta)
    dl_dray = huber_grad(residual, cfg.huber_delta) / m

    dl_dcolors, dl_dsdf, dl_dslog = renderer.backward_cotangents(records, dl_dray)

    cache = records.cache
    nsamp = records.sample_count
    if nsamp > 0:
        norms = np.linalg.norm(cache.normals, axis=1)
        e_loss = float(((norms - 1.0) ** 2).mean())
        dl_dn = (
            cfg.eikonal_weight
            * (2.0 * (norms - 1.0) / np.maximum(norms, 1e-12))[:, None]
            * cache.normals
            / nsamp
        )
    else:
        e_loss = 0.0
        dl_dn = None
    total = c_loss + cfg.eikonal_weight * e_loss
    return c_loss, e_loss, total, dl_dcolors, dl_dsdf, dl_dslog, dl_dn


def apply_gradients(state, grads, dl_dslog, lr_scale=1.0, max_active_level=None):
    """Adam over every parameter group; masked table levels are skipped
    (their gradients are structurally zero, so their moments stay zero)."""
    cfg = state.config
    lr_t = cfg.lr_tables * lr_scale
    lr_m = cfg.lr_mlp * lr_scale
    n_active = (
        state.params.grid.num_levels if max_active_level is None else int(max_active_level)
    )
    if n_active > 0:
        sl = slice(0, n_active)
        ad = state.adam["tables"]
        adam_update(
            ad,
            state.params.grid.tables[sl],
            grads.tables[sl],
            lr_t,
            cfg,
            name="tables",
            m=ad.m[sl],
            v=ad.v[sl],
        )
    for i, h in enumerate(state.params.sdf_net.layers):
        adam_update(state.adam[f"sdf_{i}"], h, grads.sdf_layers[i], lr_m, cfg, name=f"sdf_{i}")
    for i, h in enumerate(state.params.color_net.layers):
        adam_update(
            state.adam[f"color_{i}"], h, grads.color_layers[i], lr_m, cfg, name=f"color_{i}"
        )
    adam_update(
        state.adam["sharpness_log"],
        state.params.sharpness_log,
        np.array([dl_dslog]),
        lr_m,
        cfg,
        name="sharpness_log",
    )


def train_step(state, dataset, time_index=0):
    """One optimization step; returns a LossReport."""
    cfg = state.config
    level = level_schedule(state.step, cfg)
    if state.step % cfg.occupancy_update_every == 0:
        renderer.update_occupancy(state.occ, state.params, level)
    batch = scene_io.sample_ray_batch(
        dataset, time_index, cfg.batch_size, cfg.fg_fraction, state.rng
    )
    rendered, records = renderer.render_rays(batch, state.params, state.occ, level)
    c_loss, e_loss, total, dl_dc, dl_dd, dl_dslog, dl_dn = compute_cotangents(
        state, batch, rendered, records
    )
    if records.sample_count > 0:
        grads = fieldmod.field_backward(
            state.params, records.cache, dl_dc=dl_dc, dl_dd=dl_dd, dl_dn=dl_dn
        )
        scale = lr_factor(state.step, cfg.total_steps, cfg.lr_final_fraction)
        apply_gradients(state, grads, dl_dslog, lr_scale=scale, max_active_level=level)
    report = LossReport(
        step=state.step,
        color=c_loss,
        eikonal=e_loss,
        total=total,
        level=level,
        psnr=psnr(rendered, batch.target_colors),
        sample_count=records.sample_count,
    )
    state.step += 1
    return report


@dataclass
class TrainResult:
    state: TrainState
    reports: list
    checkpoint_path: Path | None = None
    wall_seconds: float = 0.0


def train_static(dataset, config, out_path=None, time_index=0, state=None, log_every=100):
    """Run the static training loop (optionally resuming ``state``).

    Writes the checkpoint to ``out_path`` when given, plus a ``.loss.csv``
    loss log next to it.  Returns a TrainResult.
    """
    if state is None:
        state = TrainState.create(config, aabb=dataset.scene_aabb)
    reports = []
    t0 = time.perf_counter()
    while state.step < config.total_steps:
        rep = train_step(state, dataset, time_index)
        if rep.step % log_every == 0 or rep.step == config.total_steps - 1:
            reports.append(rep)
    wall = time.perf_counter() - t0
    ckpt = None
    if out_path is not None:
        ckpt = Path(out_path)
        checkpoint.save_checkpoint(ckpt, state)
        csv = ckpt.with_suffix(ckpt.suffix + ".loss.csv")
        lines = ["step,color,eikonal,total,lambda,psnr"]
        for r in reports:
            lines.append(
                f"{r.step},{r.color:.6f},{r.eikonal:.6f},{r.total:.6f},{r.level},{r.psnr:.3f}"
            )
        csv.write_text("\n".join(lines) + "\n")
    return TrainResult(state, reports, ckpt, wall)


def render_frame(params, occ, frame, level=None, chunk=8192, point_transform=None,
                 dir_transform=None):
    """Render a full camera view; returns (image (H,W,3), depth (H,W))."""
    level = level if level is not None else params.grid.num_levels
    origins, dirs = scene_io.generate_rays_grid(frame)
    n = origins.shape[0]
    img = np.zeros((n, 3))
    depth = np.zeros(n)
    for s in range(0, n, chunk):
        sl = slice(s, min(s + chunk, n))
        batch = scene_io.RayBatch(
            origins[sl], dirs[sl], np.zeros((sl.stop - sl.start, 3)),
            np.ones(sl.stop - sl.start, bool),
        )
        cols, rec = renderer.render_rays(
            batch, params, occ, level,
            point_transform=point_transform, dir_transform=dir_transform,
        )
        img[sl] = cols
        depth[sl] = renderer.expected_depth(rec)
    return img.reshape(frame.height, frame.width, 3), depth.reshape(frame.height, frame.width)


def evaluate_view(params, occ, frame, level=None, point_transform=None, dir_transform=None):
    """Masked and full-frame PSNR of a rendered view against its ground truth."""
    img, _ = render_frame(
        params, occ, frame, level, point_transform=point_transform, dir_transform=dir_transform
    )
    target = frame.image * frame.mask[:, :, None]
    return {
        "psnr_masked": masked_psnr(img, target, frame.mask),
        "psnr_full": psnr(img, target),
    }
