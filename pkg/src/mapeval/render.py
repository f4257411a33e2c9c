"""Predict depth images from a surfel map by point splatting with a z-buffer.

Each surfel is transformed into the camera frame, culled (behind camera,
outside the depth range, optionally back-facing), projected, and splatted as
a filled disk of pixel radius max(min_splat_px, fx * radius / z).  Every
covered pixel keeps the minimum center depth.  Splat depth is constant across
the disk.

`render_depth_oracle` is a deliberately naive reference: per pixel it scans
every surfel with no rasterization shortcuts, so the fast path can be checked
against it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .fusion import SurfelMap
from .geometry import DepthImage, Intrinsics, Pose, _quat_to_matrix


@dataclass(frozen=True)
class RenderConfig:
    min_splat_px: float = 1.0
    backface_culling: bool = True

    def __post_init__(self):
        if self.min_splat_px < 0:
            raise ValueError("min_splat_px must be >= 0")


@njit(cache=True)
def _splat_min(zbuf, us, vs, zs, rs):
    h, w = zbuf.shape
    for i in range(us.shape[0]):
        u = us[i]
        v = vs[i]
        z = zs[i]
        r = rs[i]
        x0 = int(np.ceil(u - r))
        x1 = int(np.floor(u + r))
        y0 = int(np.ceil(v - r))
        y1 = int(np.floor(v + r))
        if x0 < 0:
            x0 = 0
        if y0 < 0:
            y0 = 0
        if x1 > w - 1:
            x1 = w - 1
        if y1 > h - 1:
            y1 = h - 1
        rr = r * r
        for y in range(y0, y1 + 1):
            dy = y - v
            dy2 = dy * dy
            for x in range(x0, x1 + 1):
                dx = x - u
                if dx * dx + dy2 <= rr and z < zbuf[y, x]:
                    zbuf[y, x] = z
    return zbuf


def _camera_frame_splats(m: SurfelMap, pose: Pose, k: Intrinsics,
                         cfg: RenderConfig):
    """Project surfels; returns (u, v, z, r_px) for the surviving ones."""
    r = pose.rotation_matrix
    p_cam = (m.positions - pose.t) @ r
    z = p_cam[:, 2]
    keep = (z > 0) & (z >= k.depth_min) & (z <= k.depth_max)
    if cfg.backface_culling:
        n_cam = m.normals @ r
        keep &= np.sum(n_cam * p_cam, axis=1) < 0
    p_cam = p_cam[keep]
    z = z[keep]
    u = k.cx + k.fx * (p_cam[:, 0] / z)
    v = k.cy + k.fy * (p_cam[:, 1] / z)
    r_px = np.maximum(cfg.min_splat_px, k.fx * m.radii[keep] / z)
    # Drop splats whose disks cannot reach any pixel center.
    inside = (u + r_px >= 0) & (u - r_px <= k.width - 1) \
        & (v + r_px >= 0) & (v - r_px <= k.height - 1)
    return u[inside], v[inside], z[inside], r_px[inside]


def render_depth(m: SurfelMap, pose: Pose, k: Intrinsics,
                 cfg: RenderConfig = RenderConfig()) -> DepthImage:
    """Render the predicted depth image seen from `pose`."""
    zbuf = np.full((k.height, k.width), np.inf)
    if len(m):
        u, v, z, r_px = _camera_frame_splats(m, pose, k, cfg)
        _splat_min(zbuf, u, v, z, r_px)
    zbuf[~np.isfinite(zbuf)] = np.nan
    return DepthImage(zbuf)


def render_depth_oracle(m: SurfelMap, pose: Pose, k: Intrinsics,
                        cfg: RenderConfig = RenderConfig()) -> DepthImage:
    """Brute-force reference renderer; per pixel scans all surfels."""
    out = np.full((k.height, k.width), np.nan)
    if not len(m):
        return DepthImage(out)

    rot = _quat_to_matrix(pose.q)
    cam = np.empty_like(m.positions)
    for i in range(len(m)):
        cam[i] = rot.T @ (m.positions[i] - pose.t)
    z = cam[:, 2]
    keep = (z > 0) & (z >= k.depth_min) & (z <= k.depth_max)
    if cfg.backface_culling:
        for i in range(len(m)):
            if keep[i] and np.dot(rot.T @ m.normals[i], cam[i]) >= 0:
                keep[i] = False
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k.cx + k.fx * (cam[:, 0] / z)
        v = k.cy + k.fy * (cam[:, 1] / z)
        r_px = np.maximum(cfg.min_splat_px, k.fx * m.radii / z)
    rr = r_px * r_px

    for py in range(k.height):
        for px in range(k.width):
            covered = keep & ((u - px) ** 2 + (v - py) ** 2 <= rr)
            if np.any(covered):
                out[py, px] = np.min(z[covered])
    return DepthImage(out)
