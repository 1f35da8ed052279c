"""Synthetic driving-like data for tests and the bundled mini-sequence.

Flow is the linearised rigid motion field of a static scene (a ground plane
flanked by two walls), so for a fixed scene the 3D flow is an affine function
of the relative pose. The scene is left-right symmetric, which keeps mirror
augmentation exact.
"""

from __future__ import annotations

import os

import numpy as np

from . import formats
from .geometry import CameraIntrinsics, RelativePose, accumulate_trajectory

CAMERA_HEIGHT = 1.65
WALL_OFFSET = 6.0
FAR_DEPTH = 60.0


def default_intrinsics(width: int, height: int) -> CameraIntrinsics:
    f = 0.6 * width
    return CameraIntrinsics(f, f, (width - 1) / 2.0, (height - 1) / 2.0)


def scene_depth(intr: CameraIntrinsics, width: int, height: int) -> np.ndarray:
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    x = (u - intr.cx) / intr.fx
    y = (v - intr.cy) / intr.fy
    depth = np.full((height, width), FAR_DEPTH)
    with np.errstate(divide="ignore"):
        ground = np.where(y > 0, CAMERA_HEIGHT / y, np.inf)
        walls = np.where(x != 0, WALL_OFFSET / np.abs(x), np.inf)
    return np.minimum(depth, np.minimum(ground, walls))


def motion_field(intr: CameraIntrinsics, depth: np.ndarray, pose: RelativePose):
    """2D flow (pixels) and inverse-depth change for a small camera motion."""
    h, w = depth.shape
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    x = (u - intr.cx) / intr.fx
    y = (v - intr.cy) / intr.fy
    tx, ty, tz = pose.translation
    e_z, e_y, e_x = pose.euler
    inv = 1.0 / depth
    dx = (-tx + x * tz) * inv + x * y * e_x - (1 + x * x) * e_y + y * e_z
    dy = (-ty + y * tz) * inv + (1 + y * y) * e_x - x * y * e_y - x * e_z
    dinv = (tz + depth * (e_x * y - e_y * x)) * inv * inv
    flow = np.stack([intr.fx * dx, intr.fy * dy], axis=-1)
    return flow, dinv


def random_pose(rng: np.random.Generator) -> RelativePose:
    t = np.array([rng.normal(0, 0.1), rng.normal(0, 0.03), rng.uniform(0.3, 1.5)])
    e = np.array([rng.normal(0, 0.005), rng.normal(0, 0.02), rng.normal(0, 0.005)])
    return RelativePose(t, e)


def flow3d_sample(intr, depth, pose: RelativePose, rng, noise: float = 0.05) -> np.ndarray:
    flow, dinv = motion_field(intr, depth, pose)
    raster = np.concatenate([flow, dinv[..., None]], axis=-1)
    scale = np.array([noise, noise, noise * 0.05])
    return (raster + rng.normal(size=raster.shape) * scale).astype(np.float32)


def make_dataset(n: int, width: int = 16, height: int = 8, seed: int = 0, noise: float = 0.05):
    """``n`` pairs of (3D-flow raster, relative pose) at network resolution."""
    rng = np.random.default_rng(seed)
    intr = default_intrinsics(width, height)
    depth = scene_depth(intr, width, height)
    out = []
    for _ in range(n):
        pose = random_pose(rng)
        out.append((flow3d_sample(intr, depth, pose, rng, noise), pose))
    return out


def write_sequence(root, seq: str = "00", frames: int = 10, width: int = 64, height: int = 32,
                   seed: int = 0, noise: float = 0.05, with_rgb: bool = True) -> str:
    """Write a sequence in the on-disk layout the pipeline reads.

    Layout under ``root/seq``: ``calib.txt``, ``poses.txt``,
    ``flow/%06d.flo`` (frame k -> k+1), ``depth/%06d.pfm`` and optionally
    ``rgb/%06d.ppm``. Returns the sequence directory.
    """
    rng = np.random.default_rng(seed)
    intr = default_intrinsics(width, height)
    depth = scene_depth(intr, width, height)
    seq_dir = os.path.join(root, seq)
    for sub in ("flow", "depth") + (("rgb",) if with_rgb else ()):
        os.makedirs(os.path.join(seq_dir, sub), exist_ok=True)
    formats.save_intrinsics(os.path.join(seq_dir, "calib.txt"), intr)
    rels = [random_pose(rng) for _ in range(frames - 1)]
    formats.save_poses(os.path.join(seq_dir, "poses.txt"), accumulate_trajectory(rels))
    shade = np.clip(255 * (1 - depth / FAR_DEPTH), 0, 255).astype(np.uint8)
    for k in range(frames):
        d = depth * (1 + rng.normal(0, 0.01, depth.shape))
        formats.write_pfm(os.path.join(seq_dir, "depth", f"{k:06d}.pfm"), d.astype(np.float32))
        if with_rgb:
            rgb = np.stack([shade, np.full_like(shade, 100 + 10 * k), 255 - shade], axis=-1)
            formats.write_ppm(os.path.join(seq_dir, "rgb", f"{k:06d}.ppm"), rgb)
        if k < frames - 1:
            flow, _ = motion_field(intr, depth, rels[k])
            flow = flow + rng.normal(0, noise, flow.shape)
            formats.write_flo(os.path.join(seq_dir, "flow", f"{k:06d}.flo"), flow.astype(np.float32))
    return seq_dir
