"""Build a dense surfel map from depth frames and an estimated trajectory.

Surfels are oriented disks.  Frames are back-projected pixel by pixel and
accumulated into a voxel hash: surfels falling into the same voxel cell are
merged by a confidence-weighted running mean of position and normal, with the
maximum radius and summed confidence.  The result is deterministic for a
given frame order.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .dataset import FrameSet, ParseError, fmt9
from .geometry import DepthImage, Intrinsics, Pose

# Voxel indices are packed into one int64 with 21 bits per axis.
_KEY_BITS = 21
_KEY_OFFSET = 1 << (_KEY_BITS - 1)


@dataclass(frozen=True)
class FusionConfig:
    """voxel_size = 0 disables voxel merging (every surfel is kept)."""

    voxel_size: float = 0.01
    normal_window: int = 1
    pixel_stride: int = 1

    def __post_init__(self):
        if self.voxel_size < 0:
            raise ValueError("voxel_size must be >= 0")
        if self.normal_window < 1:
            raise ValueError("normal_window must be >= 1")
        if self.pixel_stride < 1:
            raise ValueError("pixel_stride must be >= 1")


class Surfel(NamedTuple):
    position: np.ndarray
    normal: np.ndarray
    radius: float
    confidence: float


class SurfelBatch(NamedTuple):
    """Column-wise stack of surfels: positions (n,3), normals (n,3), ..."""

    positions: np.ndarray
    normals: np.ndarray
    radii: np.ndarray
    confidences: np.ndarray

    def __len__(self):
        return self.positions.shape[0]


class SurfelMap:
    """Dense model: at most one surfel per occupied voxel cell."""

    def __init__(self, positions, normals, radii, confidences, voxel_size):
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        self.normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
        self.radii = np.asarray(radii, dtype=np.float64).reshape(-1)
        self.confidences = np.asarray(confidences, dtype=np.float64).reshape(-1)
        self.voxel_size = float(voxel_size)
        n = len(self.radii)
        if not (len(self.positions) == len(self.normals) == len(self.confidences) == n):
            raise ValueError("surfel field arrays have mismatched lengths")
        if n:
            norms = np.linalg.norm(self.normals, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise ValueError("surfel normals must be unit length")
            if np.any(self.radii <= 0):
                raise ValueError("surfel radii must be positive")
            if np.any(self.confidences < 1):
                raise ValueError("surfel confidences must be >= 1")

    def __len__(self):
        return len(self.radii)

    def surfel(self, i: int) -> Surfel:
        return Surfel(self.positions[i], self.normals[i],
                      float(self.radii[i]), float(self.confidences[i]))

    @classmethod
    def empty(cls, voxel_size: float = 0.0):
        return cls(np.empty((0, 3)), np.empty((0, 3)), np.empty(0), np.empty(0),
                   voxel_size)

    def transformed(self, g: Pose) -> "SurfelMap":
        """Map rigidly moved by g (positions and normals)."""
        r = g.rotation_matrix
        return SurfelMap(self.positions @ r.T + g.t, self.normals @ r.T,
                         self.radii, self.confidences, self.voxel_size)


def backproject_frame(depth: DepthImage, pose: Pose, k: Intrinsics,
                      cfg: FusionConfig = FusionConfig()) -> SurfelBatch:
    """One world-frame surfel per valid (strided) pixel.

    Normals come from central differences of neighboring back-projections and
    face the observing camera; pixels without valid neighbors fall back to the
    negated viewing ray.  Radius is the pixel footprint at the sample's depth:
    z / fx * sqrt(2) * stride.
    """
    h, w = depth.height, depth.width
    if (w, h) != (k.width, k.height):
        raise ValueError("depth image size does not match intrinsics")
    d = depth.samples
    us = np.arange(w, dtype=np.float64)
    vs = np.arange(h, dtype=np.float64)
    # Full-resolution camera-frame points, NaN where depth is invalid.
    px = (us[None, :] - k.cx) * d / k.fx
    py = (vs[:, None] - k.cy) * d / k.fy
    pts = np.stack([px, py, d], axis=-1)

    nw = cfg.normal_window
    diff_u = np.full((h, w, 3), np.nan)
    diff_v = np.full((h, w, 3), np.nan)
    diff_u[:, nw:w - nw] = pts[:, 2 * nw:] - pts[:, :w - 2 * nw]
    diff_v[nw:h - nw, :] = pts[2 * nw:, :] - pts[:h - 2 * nw, :]
    normals = np.cross(diff_u, diff_v)
    nrm = np.linalg.norm(normals, axis=-1)
    good = np.isfinite(nrm) & (nrm > 0)
    normals[good] /= nrm[good][..., None]
    # Fallback: point the normal back along the viewing ray.
    ray = pts / np.linalg.norm(pts, axis=-1, keepdims=True)
    normals[~good] = -ray[~good]
    # Normals face the camera: flip where they point away from it.
    away = np.sum(normals * pts, axis=-1) > 0
    normals[away] = -normals[away]

    stride = cfg.pixel_stride
    sel = np.zeros((h, w), dtype=bool)
    sel[::stride, ::stride] = True
    sel &= depth.valid_mask
    cam_pts = pts[sel]
    cam_nrm = normals[sel]

    r = pose.rotation_matrix
    positions = cam_pts @ r.T + pose.t
    world_nrm = cam_nrm @ r.T
    radii = d[sel] / k.fx * np.sqrt(2.0) * stride
    confidences = np.ones(len(radii))
    return SurfelBatch(positions, world_nrm, radii, confidences)


def _voxel_keys(positions, voxel_size):
    idx = np.floor(positions / voxel_size).astype(np.int64)
    if np.any(np.abs(idx) >= _KEY_OFFSET):
        raise ValueError("surfel position too far from origin for voxel hashing")
    packed = ((idx[:, 0] + _KEY_OFFSET) << (2 * _KEY_BITS)) \
        | ((idx[:, 1] + _KEY_OFFSET) << _KEY_BITS) \
        | (idx[:, 2] + _KEY_OFFSET)
    return packed


def fuse_sequence(frames: FrameSet, cfg: FusionConfig = FusionConfig()) -> SurfelMap:
    """Fuse all frames of a FrameSet into a voxel-deduplicated surfel map."""
    batches = []
    for i in range(len(frames)):
        batch = backproject_frame(frames.load(i), frames.frames[i].pose,
                                  frames.intrinsics, cfg)
        if len(batch):
            batches.append(batch)
    if not batches:
        warnings.warn("fusing an empty frame set: map is empty")
        return SurfelMap.empty(cfg.voxel_size)

    positions = np.concatenate([b.positions for b in batches])
    normals = np.concatenate([b.normals for b in batches])
    radii = np.concatenate([b.radii for b in batches])
    confidences = np.concatenate([b.confidences for b in batches])

    if cfg.voxel_size == 0:
        return SurfelMap(positions, normals, radii, confidences, 0.0)

    keys = _voxel_keys(positions, cfg.voxel_size)
    uniq, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    n = len(uniq)
    pos_sum = np.zeros((n, 3))
    nrm_sum = np.zeros((n, 3))
    conf_sum = np.zeros(n)
    rad_max = np.zeros(n)
    cw = confidences[:, None]
    np.add.at(pos_sum, inverse, cw * positions)
    np.add.at(nrm_sum, inverse, cw * normals)
    np.add.at(conf_sum, inverse, confidences)
    np.maximum.at(rad_max, inverse, radii)

    merged_pos = pos_sum / conf_sum[:, None]
    nrm_len = np.linalg.norm(nrm_sum, axis=1)
    degenerate = nrm_len < 1e-12
    merged_nrm = np.where(degenerate[:, None], normals[first],
                          nrm_sum / np.where(degenerate, 1.0, nrm_len)[:, None])
    return SurfelMap(merged_pos, merged_nrm, rad_max, conf_sum, cfg.voxel_size)


# ---------------------------------------------------------------------------
# Map export/import: "x y z nx ny nz radius confidence" lines


def serialize_map(m: SurfelMap) -> str:
    lines = [f"# voxel_size {fmt9(m.voxel_size)}"]
    for i in range(len(m)):
        row = np.concatenate([m.positions[i], m.normals[i],
                              [m.radii[i], m.confidences[i]]])
        lines.append(" ".join(fmt9(v) for v in row))
    return "\n".join(lines) + "\n"


def parse_map(text: str) -> SurfelMap:
    voxel_size = 0.0
    rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            fields = line[1:].split()
            if len(fields) == 2 and fields[0] == "voxel_size":
                voxel_size = float(fields[1])
            continue
        fields = line.split()
        if len(fields) != 8:
            raise ParseError(f"line {lineno}: expected 8 fields, got {len(fields)}")
        try:
            rows.append([float(f) for f in fields])
        except ValueError:
            raise ParseError(f"line {lineno}: non-numeric field") from None
    if not rows:
        return SurfelMap.empty(voxel_size)
    a = np.array(rows)
    # Renormalize: the 9-digit text form may be off unit length in the last digit.
    normals = a[:, 3:6]
    normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    return SurfelMap(a[:, 0:3], normals, a[:, 6], a[:, 7], voxel_size)


def load_map(path) -> SurfelMap:
    try:
        return parse_map(Path(path).read_text())
    except ParseError as e:
        raise ParseError(f"{path}: {e}") from None


def save_map(m: SurfelMap, path):
    Path(path).write_text(serialize_map(m))
