"""Deterministic synthetic scenes: analytic geometry, exact raycast depth,
perturbed trajectories, and labeled loop candidates.

A fixture descriptor is a plain-text file, one record per line:

    intrinsics fx fy cx cy width height depth_min depth_max
    box xmin ymin zmin xmax ymax zmax
    sphere cx cy cz radius
    plane px py pz nx ny nz
    circle n radius height [cx cy dt pitch]
    pose t tx ty tz qx qy qz qw

Exactly one trajectory source is required: either one `circle` line or a
block of `pose` lines.  Boxes double as room shells: rays starting inside a
box hit its interior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import (ParseError, Trajectory, save_depth, save_intrinsics,
                      save_trajectory)
from .geometry import DepthImage, Intrinsics, Pose, se3_exp
from .loop_eval import LoopCandidate

_RAY_EPS = 1e-9


@dataclass(frozen=True)
class Plane:
    """Infinite plane through `point` with unit `normal`."""

    point: tuple
    normal: tuple

    def ray_depths(self, origin, dirs):
        n = np.asarray(self.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        denom = dirs @ n
        num = np.dot(np.asarray(self.point, dtype=np.float64) - origin, n)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num / denom
        t = np.where(np.isfinite(t) & (t > _RAY_EPS), t, np.inf)
        return t


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float

    def ray_depths(self, origin, dirs):
        oc = origin - np.asarray(self.center, dtype=np.float64)
        a = np.sum(dirs * dirs, axis=1)
        b = 2.0 * (dirs @ oc)
        c = float(oc @ oc) - self.radius ** 2
        disc = b * b - 4.0 * a * c
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t1 = (-b - sq) / (2.0 * a)
        t2 = (-b + sq) / (2.0 * a)
        t = np.where(t1 > _RAY_EPS, t1, t2)
        return np.where(hit & (t > _RAY_EPS), t, np.inf)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box; rays from inside hit the interior (room shell)."""

    min_corner: tuple
    max_corner: tuple

    def ray_depths(self, origin, dirs):
        bmin = np.asarray(self.min_corner, dtype=np.float64)
        bmax = np.asarray(self.max_corner, dtype=np.float64)
        # Avoid 0/0 on axis-parallel rays; sign-preserving epsilon.
        d = np.where(dirs == 0.0, 1e-300, dirs)
        t1 = (bmin - origin) / d
        t2 = (bmax - origin) / d
        tmin = np.max(np.minimum(t1, t2), axis=1)
        tmax = np.min(np.maximum(t1, t2), axis=1)
        hit = (tmax >= np.maximum(tmin, _RAY_EPS))
        t = np.where(tmin > _RAY_EPS, tmin, tmax)
        return np.where(hit, t, np.inf)


class AnalyticScene:
    def __init__(self, primitives):
        self.primitives = list(primitives)
        if not self.primitives:
            raise ValueError("scene needs at least one primitive")

    def ray_depths(self, origin, dirs):
        t = np.full(len(dirs), np.inf)
        for prim in self.primitives:
            t = np.minimum(t, prim.ray_depths(origin, dirs))
        return t


def raycast_depth(scene: AnalyticScene, pose: Pose, k: Intrinsics) -> DepthImage:
    """Exact nearest-intersection depth per pixel; misses are invalid.

    Ray directions carry camera z = 1, so the ray parameter is directly the
    camera-frame depth.
    """
    us = np.arange(k.width, dtype=np.float64)
    vs = np.arange(k.height, dtype=np.float64)
    uu, vv = np.meshgrid(us, vs)
    dirs_cam = np.stack([(uu - k.cx) / k.fx, (vv - k.cy) / k.fy,
                         np.ones_like(uu)], axis=-1).reshape(-1, 3)
    dirs_world = dirs_cam @ pose.rotation_matrix.T
    depth = scene.ray_depths(pose.t, dirs_world)
    depth = np.where((depth >= k.depth_min) & (depth <= k.depth_max),
                     depth, np.nan)
    return DepthImage(depth.reshape(k.height, k.width))


# ---------------------------------------------------------------------------
# Trajectories


def look_at_pose(position, forward, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose with +z along `forward` and image y pointing down."""
    f = np.asarray(forward, dtype=np.float64)
    f = f / np.linalg.norm(f)
    w = np.asarray(up, dtype=np.float64)
    x = np.cross(f, w)
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        raise ValueError("forward direction parallel to up vector")
    x = x / nx
    y = np.cross(f, x)
    rot = np.column_stack([x, y, f])
    return Pose.from_matrix(rot, position)


def circle_trajectory(n: int, radius: float, height: float,
                      center=(0.0, 0.0), dt: float = 0.1,
                      pitch: float = 0.0, t0: float = 0.0) -> Trajectory:
    """n outward-looking poses evenly spaced on a horizontal circle."""
    if n < 1:
        raise ValueError("need at least one pose")
    timestamps = t0 + dt * np.arange(n)
    poses = []
    for i in range(n):
        a = 2.0 * math.pi * i / n
        pos = np.array([center[0] + radius * math.cos(a),
                        center[1] + radius * math.sin(a), height])
        fwd = np.array([math.cos(pitch) * math.cos(a),
                        math.cos(pitch) * math.sin(a), -math.sin(pitch)])
        poses.append(look_at_pose(pos, fwd))
    return Trajectory(timestamps, poses)


@dataclass(frozen=True)
class PerturbSpec:
    """Seeded right-multiplied SE(3) noise, optionally with cumulative drift."""

    rot_std: float = 0.0
    trans_std: float = 0.0
    rot_drift: float = 0.0
    trans_drift: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if min(self.rot_std, self.trans_std, self.rot_drift, self.trans_drift) < 0:
            raise ValueError("noise magnitudes must be >= 0")


def perturb_trajectory(traj: Trajectory, spec: PerturbSpec) -> Trajectory:
    """Apply per-pose noise pose_k * exp(xi_k); xi_k gains k * drift."""
    rng = np.random.default_rng(spec.seed)
    drift_dir_rot = rng.standard_normal(3)
    drift_dir_rot /= np.linalg.norm(drift_dir_rot)
    drift_dir_trans = rng.standard_normal(3)
    drift_dir_trans /= np.linalg.norm(drift_dir_trans)
    poses = []
    for idx, pose in enumerate(traj.poses):
        xi = np.concatenate([rng.normal(0.0, spec.rot_std, 3),
                             rng.normal(0.0, spec.trans_std, 3)])
        xi[:3] += idx * spec.rot_drift * drift_dir_rot
        xi[3:] += idx * spec.trans_drift * drift_dir_trans
        poses.append(pose.compose(se3_exp(xi)))
    return Trajectory(traj.timestamps, poses)


def make_loop_candidates(traj: Trajectory, n_true: int, n_false: int,
                         trans_corruption: float = 0.5,
                         rot_corruption: float = 0.5,
                         seed: int = 0, min_gap: int | None = None):
    """Labeled candidates: exact relative poses, or poses corrupted by at
    least the stated translation/rotation magnitudes."""
    if rot_corruption >= math.pi - 1e-2:
        raise ValueError("rotation corruption must stay below pi")
    n = len(traj)
    if min_gap is None:
        min_gap = max(2, n // 4)
    pairs = [(i, j) for i in range(n) for j in range(i + min_gap, n)]
    if len(pairs) < n_true + n_false:
        raise ValueError(
            f"trajectory too short: {len(pairs)} candidate pairs available, "
            f"{n_true + n_false} requested")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(pairs), size=n_true + n_false, replace=False)

    candidates = []
    for idx, pick in enumerate(chosen):
        i, j = pairs[int(pick)]
        relative = traj.poses[i].inverse().compose(traj.poses[j])
        if idx < n_true:
            candidates.append(LoopCandidate(i, j, relative, True))
        else:
            axis = rng.standard_normal(3)
            axis /= np.linalg.norm(axis)
            angle = rot_corruption * (1.0 + rng.uniform())
            angle = min(angle, math.pi - 1e-2)
            tdir = rng.standard_normal(3)
            tdir /= np.linalg.norm(tdir)
            mag = trans_corruption * (1.0 + rng.uniform())
            bad = Pose(np.concatenate([axis * math.sin(angle / 2.0),
                                       [math.cos(angle / 2.0)]]), tdir * mag)
            candidates.append(LoopCandidate(i, j, relative.compose(bad), False))
    order = rng.permutation(len(candidates))
    return [candidates[int(i)] for i in order]


# ---------------------------------------------------------------------------
# Default fixture and descriptor files


def default_fixture():
    """Desk-scale room with a sphere and a box, circled by 60 cameras."""
    scene = AnalyticScene([
        Box((-2.0, -1.5, 0.0), (2.0, 1.5, 2.5)),
        Sphere((1.2, 0.7, 1.1), 0.35),
        Box((-1.6, -1.1, 0.0), (-0.9, -0.4, 0.9)),
    ])
    traj = circle_trajectory(n=60, radius=0.8, height=1.3)
    k = Intrinsics(fx=120.0, fy=120.0, cx=80.0, cy=60.0, width=160, height=120)
    return scene, traj, k


DEFAULT_DESCRIPTOR = """\
# default synthetic fixture: box room, one sphere, one box, circular path
intrinsics 120 120 80 60 160 120 0.3 8
box -2 -1.5 0 2 1.5 2.5
sphere 1.2 0.7 1.1 0.35
box -1.6 -1.1 0 -0.9 -0.4 0.9
circle 60 0.8 1.3
"""


def parse_fixture(text: str):
    """Parse a descriptor into (scene, trajectory, intrinsics)."""
    primitives = []
    circle = None
    pose_lines = []
    k = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        kind, args = fields[0].lower(), fields[1:]
        try:
            vals = [float(a) for a in args]
        except ValueError:
            raise ParseError(f"line {lineno}: non-numeric field") from None
        if kind == "intrinsics":
            if len(vals) != 8:
                raise ParseError(f"line {lineno}: intrinsics expects 8 values")
            k = Intrinsics(fx=vals[0], fy=vals[1], cx=vals[2], cy=vals[3],
                           width=int(vals[4]), height=int(vals[5]),
                           depth_min=vals[6], depth_max=vals[7])
        elif kind == "box":
            if len(vals) != 6:
                raise ParseError(f"line {lineno}: box expects 6 values")
            primitives.append(Box(tuple(vals[:3]), tuple(vals[3:])))
        elif kind == "sphere":
            if len(vals) != 4:
                raise ParseError(f"line {lineno}: sphere expects 4 values")
            primitives.append(Sphere(tuple(vals[:3]), vals[3]))
        elif kind == "plane":
            if len(vals) != 6:
                raise ParseError(f"line {lineno}: plane expects 6 values")
            primitives.append(Plane(tuple(vals[:3]), tuple(vals[3:])))
        elif kind == "circle":
            if len(vals) not in (3, 5, 6, 7):
                raise ParseError(f"line {lineno}: circle expects 3 to 7 values")
            circle = vals
        elif kind == "pose":
            if len(vals) != 8:
                raise ParseError(f"line {lineno}: pose expects 8 values")
            pose_lines.append(vals)
        else:
            raise ParseError(f"line {lineno}: unknown record {fields[0]!r}")

    if k is None:
        raise ParseError("descriptor has no intrinsics line")
    if not primitives:
        raise ParseError("descriptor has no primitives")
    if (circle is None) == (not pose_lines):
        raise ParseError("descriptor needs exactly one trajectory source "
                         "(circle or pose lines)")
    if circle is not None:
        n, radius, height = int(circle[0]), circle[1], circle[2]
        cx = circle[3] if len(circle) > 3 else 0.0
        cy = circle[4] if len(circle) > 4 else 0.0
        dt = circle[5] if len(circle) > 5 else 0.1
        pitch = circle[6] if len(circle) > 6 else 0.0
        traj = circle_trajectory(n, radius, height, (cx, cy), dt, pitch)
    else:
        timestamps = [v[0] for v in pose_lines]
        poses = [Pose(v[4:8], v[1:4]) for v in pose_lines]
        traj = Trajectory(timestamps, poses)
    return AnalyticScene(primitives), traj, k


def load_fixture(path):
    try:
        return parse_fixture(Path(path).read_text())
    except ParseError as e:
        raise ParseError(f"{path}: {e}") from None


def write_dataset(scene: AnalyticScene, traj: Trajectory, k: Intrinsics,
                  out_dir, depth_scale: float = 5000.0):
    """Materialize a sequence directory: depth PNGs, index, GT, intrinsics."""
    out = Path(out_dir)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    index_lines = []
    for i, (t, pose) in enumerate(traj):
        img = raycast_depth(scene, pose, k)
        rel = f"depth/{i:06d}.png"
        save_depth(img, out / rel, depth_scale)
        index_lines.append(f"{t:.6f} {rel}")
    (out / "depth.txt").write_text("\n".join(index_lines) + "\n")
    save_trajectory(traj, out / "groundtruth.txt")
    save_intrinsics(k, out / "intrinsics.json")
    return out
