"""Dataset loading, camera rays, and the synthetic fixture generator.

Conventions (fixed here once, used everywhere):
* right-handed camera space, looking down +Z, image y down;
* pose is the 4x4 camera-to-world rigid transform;
* rays go through pixel centers (px + 0.5, py + 0.5);
* background supervision target is black (target = image * mask).

A dataset directory holds ``transforms.json`` plus PNG images whose alpha
channel, when present, is the foreground mask.  ``make_synthetic`` writes
such datasets for a few closed-form scenes (unions of Lambertian spheres,
optionally moving rigidly over frames) rendered by exact ray intersection,
with a ``ground_truth.json`` sidecar describing the scene SDF and per-frame
motion for evaluation only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from PIL import Image

POSE_ORTHO_TOL = 1e-4


@dataclass
class CameraFrame:
    """One calibrated view: pinhole intrinsics, pose, image, mask."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: np.ndarray  # 4x4 camera-to-world
    image: np.ndarray  # (H, W, 3) in [0,1]
    mask: np.ndarray  # (H, W) in {0,1}
    time_index: int = 0

    def validate(self):
        rot = self.pose[:3, :3]
        if (
            np.abs(rot @ rot.T - np.eye(3)).max() > POSE_ORTHO_TOL
            or abs(np.linalg.det(rot) - 1.0) > POSE_ORTHO_TOL
        ):
            raise ValueError("invalid pose")
        if self.image.shape[:2] != (self.height, self.width) or self.mask.shape != (
            self.height,
            self.width,
        ):
            raise ValueError("inconsistent frame")
        if self.image.min() < 0 or self.image.max() > 1:
            raise ValueError("inconsistent frame: pixel values outside [0,1]")


@dataclass
class MultiViewDataset:
    frames: list
    scene_aabb: tuple = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    num_time_steps: int = 1

    def frames_at(self, time_index):
        return [f for f in self.frames if f.time_index == time_index]

    def subset(self, keep):
        """New dataset with only the given frame list (shared arrays)."""
        return MultiViewDataset(list(keep), self.scene_aabb, self.num_time_steps)


@dataclass
class RayBatch:
    origins: np.ndarray  # (m, 3)
    directions: np.ndarray  # (m, 3) unit
    target_colors: np.ndarray  # (m, 3)
    foreground_flags: np.ndarray  # (m,) bool

    @property
    def count(self):
        return self.origins.shape[0]


def generate_ray(frame, px, py):
    """World-space ray through pixel (px, py); returns (origin, unit direction)."""
    if not (0 <= px < frame.width and 0 <= py < frame.height):
        raise ValueError("pixel out of range")
    d_cam = np.array(
        [(px + 0.5 - frame.cx) / frame.fx, (py + 0.5 - frame.cy) / frame.fy, 1.0]
    )
    d_world = frame.pose[:3, :3] @ d_cam
    d_world /= np.linalg.norm(d_world)
    return frame.pose[:3, 3].copy(), d_world


def generate_rays_grid(frame, pixels=None):
    """Vectorized rays for (N,2) pixel coordinates (defaults to every pixel)."""
    if pixels is None:
        ys, xs = np.mgrid[0 : frame.height, 0 : frame.width]
        pixels = np.stack([xs.ravel(), ys.ravel()], axis=1)
    px = pixels[:, 0].astype(np.float64)
    py = pixels[:, 1].astype(np.float64)
    d_cam = np.stack(
        [
            (px + 0.5 - frame.cx) / frame.fx,
            (py + 0.5 - frame.cy) / frame.fy,
            np.ones_like(px),
        ],
        axis=1,
    )
    d_world = d_cam @ frame.pose[:3, :3].T
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origins = np.broadcast_to(frame.pose[:3, 3], d_world.shape).copy()
    return origins, d_world


def project_point(frame, p_world):
    """Inverse of generate_ray's pinhole model: world point -> (px, py)."""
    rot = frame.pose[:3, :3]
    p_cam = rot.T @ (np.asarray(p_world) - frame.pose[:3, 3])
    return (
        p_cam[0] / p_cam[2] * frame.fx + frame.cx - 0.5,
        p_cam[1] / p_cam[2] * frame.fy + frame.cy - 0.5,
    )


def sample_ray_batch(dataset, time_index, count, fg_fraction, rng):
    """Draw a supervision batch: floor(fg_fraction*count) rays from foreground
    pixels, the rest from background, uniformly across the frames at
    ``time_index``.  Targets are image * mask (black background).
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    frames = dataset.frames_at(time_index)
    if not frames:
        raise ValueError("empty foreground: no frames at this time index")
    fg_pool, bg_pool = [], []
    for k, f in enumerate(frames):
        ys, xs = np.nonzero(f.mask > 0.5)
        fg_pool.append(np.stack([np.full_like(xs, k), xs, ys], axis=1))
        ys, xs = np.nonzero(f.mask <= 0.5)
        bg_pool.append(np.stack([np.full_like(xs, k), xs, ys], axis=1))
    fg_pool = np.concatenate(fg_pool, axis=0)
    bg_pool = np.concatenate(bg_pool, axis=0)
    if fg_pool.shape[0] == 0:
        raise ValueError("empty foreground")
    n_fg = int(np.floor(fg_fraction * count))
    n_bg = count - n_fg
    picks_fg = fg_pool[rng.integers(0, fg_pool.shape[0], size=n_fg)]
    if n_bg > 0 and bg_pool.shape[0] == 0:
        picks_bg = fg_pool[rng.integers(0, fg_pool.shape[0], size=n_bg)]
        flags = np.concatenate([np.ones(n_fg, bool), np.ones(n_bg, bool)])
    else:
        picks_bg = bg_pool[rng.integers(0, bg_pool.shape[0], size=n_bg)]
        flags = np.concatenate([np.ones(n_fg, bool), np.zeros(n_bg, bool)])
    picks = np.concatenate([picks_fg, picks_bg], axis=0)

    origins = np.empty((count, 3))
    dirs = np.empty((count, 3))
    targets = np.empty((count, 3))
    for k, f in enumerate(frames):
        sel = picks[:, 0] == k
        if not np.any(sel):
            continue
        o, d = generate_rays_grid(f, picks[sel, 1:3])
        origins[sel] = o
        dirs[sel] = d
        xs, ys = picks[sel, 1], picks[sel, 2]
        targets[sel] = f.image[ys, xs] * f.mask[ys, xs, None]
    return RayBatch(origins, dirs, targets, flags)


# -- dataset files ----------------------------------------------------------


def load_dataset(path):
    """Load a dataset directory (see module docstring for the layout)."""
    path = Path(path)
    manifest = path / "transforms.json"
    if not manifest.is_file():
        raise FileNotFoundError("dataset not found")
    meta = json.loads(manifest.read_text())
    frames = []
    num_t = 1
    for entry in meta["frames"]:
        img_path = path / entry["file_path"]
        arr = np.asarray(Image.open(img_path)).astype(np.float64) / 255.0
        if arr.ndim == 2:
            arr = np.repeat(arr[:, :, None], 3, axis=2)
        if arr.shape[2] == 4:
            rgb, mask = arr[:, :, :3], (arr[:, :, 3] > 0.5).astype(np.float64)
        else:
            rgb, mask = arr[:, :, :3], np.ones(arr.shape[:2])
        t = int(entry.get("time_index", 0))
        num_t = max(num_t, t + 1)
        frame = CameraFrame(
            fx=float(meta["fl_x"]),
            fy=float(meta["fl_y"]),
            cx=float(meta["cx"]),
            cy=float(meta["cy"]),
            width=int(meta["w"]),
            height=int(meta["h"]),
            pose=np.asarray(entry["transform_matrix"], dtype=np.float64).reshape(4, 4),
            image=rgb,
            mask=mask,
            time_index=t,
        )
        frame.validate()
        frames.append(frame)
    aabb = tuple(map(tuple, meta.get("scene_aabb", [[-1, -1, -1], [1, 1, 1]])))
    return MultiViewDataset(frames, aabb, num_t)


# -- synthetic scenes -------------------------------------------------------

# Each preset is a union of Lambertian spheres plus a rigid motion over time;
# the light direction is fixed in object space so appearance is consistent in
# the canonical frame.
_LIGHT = np.array([0.35, 0.45, 0.82])
_LIGHT = _LIGHT / np.linalg.norm(_LIGHT)
_AMBIENT = 0.3


def _rot_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def preset_scene(name, num_frames):
    """(spheres, per-frame motion) for a preset.

    spheres: list of (center, radius, albedo) in the canonical frame.
    motion: list over frames of (R, T) mapping canonical -> frame coords,
    x_frame = R @ x_canonical + T.
    """
    if name == "sphere":
        spheres = [(np.zeros(3), 0.5, np.array([0.85, 0.35, 0.25]))]
        motion = [(np.eye(3), np.zeros(3))] * num_frames
    elif name == "two-spheres":
        spheres = [
            (np.array([0.32, 0.0, 0.0]), 0.30, np.array([0.85, 0.35, 0.25])),
            (np.array([-0.30, 0.05, 0.10]), 0.25, np.array([0.25, 0.45, 0.85])),
        ]
        motion = [(np.eye(3), np.zeros(3))] * num_frames
    elif name == "translating-sphere":
        spheres = [(np.zeros(3), 0.25, np.array([0.85, 0.35, 0.25]))]
        motion = [(np.eye(3), np.array([0.05 * t, 0.0, 0.0])) for t in range(num_frames)]
    elif name == "rotating-blob":
        spheres = [
            (np.array([0.25, 0.0, 0.0]), 0.28, np.array([0.85, 0.35, 0.25])),
            (np.array([-0.18, 0.12, 0.14]), 0.20, np.array([0.25, 0.45, 0.85])),
        ]
        motion = [(_rot_z(np.deg2rad(6.0) * t), np.zeros(3)) for t in range(num_frames)]
    else:
        raise ValueError("unknown preset")
    return spheres, motion


def scene_sdf(spheres, points):
    """Exact union-of-spheres SDF at (N,3) canonical points."""
    d = np.full(points.shape[0], np.inf)
    for center, radius, _ in spheres:
        d = np.minimum(d, np.linalg.norm(points - center, axis=1) - radius)
    return d


def _trace_spheres(origins, dirs, spheres, rot, trans):
    """Exact first-hit of rays against the rigidly moved union of spheres.

    Returns (t, hit, colors): hit t in world units (inf when missing), and
    Lambertian colors shaded in object space.
    """
    n = origins.shape[0]
    best_t = np.full(n, np.inf)
    best_sphere = np.full(n, -1)
    for si, (center, radius, _) in enumerate(spheres):
        c_world = rot @ center + trans
        oc = origins - c_world
        b = np.einsum("ij,ij->i", oc, dirs)
        disc = b * b - (np.einsum("ij,ij->i", oc, oc) - radius * radius)
        ok = disc >= 0
        t = np.where(ok, -b - np.sqrt(np.maximum(disc, 0.0)), np.inf)
        t = np.where(t > 1e-6, t, np.inf)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_sphere = np.where(closer, si, best_sphere)
    hit = np.isfinite(best_t)
    colors = np.zeros((n, 3))
    for si, (center, radius, albedo) in enumerate(spheres):
        sel = hit & (best_sphere == si)
        if not np.any(sel):
            continue
        p = origins[sel] + best_t[sel, None] * dirs[sel]
        n_world = (p - (rot @ center + trans)) / radius
        n_obj = n_world @ rot  # rot^T @ n, object-space normal
        lam = np.maximum(n_obj @ _LIGHT, 0.0)
        colors[sel] = albedo[None, :] * (_AMBIENT + (1 - _AMBIENT) * lam)[:, None]
    return best_t, hit, np.clip(colors, 0.0, 1.0)


def _orbit_pose(azimuth, elevation, distance):
    eye = distance * np.array(
        [np.cos(azimuth) * np.cos(elevation), np.sin(azimuth) * np.cos(elevation), np.sin(elevation)]
    )
    fwd = -eye / np.linalg.norm(eye)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-6:
        right = np.array([1.0, 0.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = right, down, fwd, eye
    return pose


def make_synthetic(preset, out_dir, views=16, frames=1, seed=0, image_size=128):
    """Write a synthetic multi-view dataset rendered by exact ray tracing.

    Cameras orbit the origin at alternating elevations; images are RGBA PNG
    with alpha = hit mask.  Ground-truth SDF parameters and per-frame rigid
    motion go to ``ground_truth.json`` (evaluation only, never training
    input).  Returns the loaded dataset.
    """
    spheres, motion = preset_scene(preset, frames)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    size = int(image_size)
    focal = size * 1.4
    cx = cy = size / 2.0
    meta = {
        "fl_x": focal,
        "fl_y": focal,
        "cx": cx,
        "cy": cy,
        "w": size,
        "h": size,
        "scene_aabb": [[-1, -1, -1], [1, 1, 1]],
        "frames": [],
    }
    rng = np.random.default_rng(seed)
    elevations = np.deg2rad(np.where(np.arange(views) % 2 == 0, 18.0, -12.0))
    azimuths = 2 * np.pi * np.arange(views) / views + rng.uniform(0, 2 * np.pi / views)
    for t in range(frames):
        rot, trans = motion[t]
        for v in range(views):
            pose = _orbit_pose(azimuths[v], elevations[v], distance=2.6)
            frame = CameraFrame(focal, focal, cx, cy, size, size, pose,
                                np.zeros((size, size, 3)), np.zeros((size, size)), t)
            origins, dirs = generate_rays_grid(frame)
            _, hit, colors = _trace_spheres(origins, dirs, spheres, rot, trans)
            rgb = (colors.reshape(size, size, 3) * 255).round().astype(np.uint8)
            alpha = (hit.reshape(size, size) * 255).astype(np.uint8)
            name = f"images/t{t:03d}_v{v:03d}.png"
            Image.fromarray(np.dstack([rgb, alpha])).save(out / name)
            meta["frames"].append(
                {
                    "file_path": name,
                    "transform_matrix": pose.tolist(),
                    "time_index": t,
                }
            )
    (out / "transforms.json").write_text(json.dumps(meta, indent=1))
    gt = {
        "preset": preset,
        "spheres": [
            {"center": c.tolist(), "radius": float(r), "albedo": a.tolist()}
            for c, r, a in spheres
        ],
        "frames": [
            {"time_index": t, "rotation": motion[t][0].tolist(), "translation": motion[t][1].tolist()}
            for t in range(frames)
        ],
    }
    (out / "ground_truth.json").write_text(json.dumps(gt, indent=1))
    return load_dataset(out)
