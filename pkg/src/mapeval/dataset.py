"""TUM-style sequence I/O: trajectories, depth PNGs, timestamp association,
and report serialization.

File formats:
    trajectory   lines "timestamp tx ty tz qx qy qz qw", '#' comments
    depth index  lines "timestamp path", '#' comments
    depth image  16-bit grayscale PNG, value = meters * depth_scale, 0 = missing
    intrinsics   JSON object with fx fy cx cy width height depth_min depth_max
    reports      CSV (optional '# key=value' lines, header, rows) or JSON
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import DepthImage, Intrinsics, Pose

DEFAULT_MAX_DIFF = 0.02
DEFAULT_DEPTH_SCALE = 5000.0


class ParseError(ValueError):
    """Malformed text input; message includes the offending line number."""


class FormatError(ValueError):
    """Binary input does not match the expected encoding."""


def fmt9(x) -> str:
    """Serialize a number with 9 significant digits."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".9g")


def round9(x) -> float:
    """Round a float to the value its 9-significant-digit form re-parses to."""
    return float(format(float(x), ".9g"))


# ---------------------------------------------------------------------------
# Trajectories


class Trajectory:
    """Time-stamped camera poses with strictly increasing timestamps."""

    def __init__(self, timestamps, poses):
        ts = np.asarray(timestamps, dtype=np.float64)
        poses = list(poses)
        if ts.ndim != 1 or len(ts) != len(poses):
            raise ValueError("timestamps and poses must have equal length")
        if len(ts) > 1 and not np.all(np.diff(ts) > 0):
            raise ValueError("timestamps must be strictly increasing")
        self.timestamps = ts
        self.poses = poses

    def __len__(self):
        return len(self.poses)

    def __getitem__(self, i):
        return self.timestamps[i], self.poses[i]

    def positions(self):
        """(n, 3) array of pose translations."""
        return np.array([p.t for p in self.poses]).reshape(-1, 3)


def parse_trajectory(text: str) -> Trajectory:
    timestamps = []
    poses = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 8:
            raise ParseError(f"line {lineno}: expected 8 fields, got {len(fields)}")
        try:
            values = [float(f) for f in fields]
        except ValueError:
            raise ParseError(f"line {lineno}: non-numeric field") from None
        t = values[0]
        if timestamps and t <= timestamps[-1]:
            raise ParseError(f"line {lineno}: non-increasing timestamp {t!r}")
        try:
            pose = Pose(values[4:8], values[1:4])
        except ValueError as e:
            raise ParseError(f"line {lineno}: {e}") from None
        timestamps.append(t)
        poses.append(pose)
    return Trajectory(timestamps, poses)


def serialize_trajectory(traj: Trajectory) -> str:
    """Inverse of parse_trajectory; emits the canonical qw >= 0 quaternion."""
    lines = []
    for t, pose in traj:
        q = -pose.q if pose.q[3] < 0 else pose.q
        parts = [t, pose.t[0], pose.t[1], pose.t[2], q[0], q[1], q[2], q[3]]
        lines.append(" ".join(fmt9(v) for v in parts))
    return "\n".join(lines) + ("\n" if lines else "")


def load_trajectory(path) -> Trajectory:
    try:
        return parse_trajectory(Path(path).read_text())
    except ParseError as e:
        raise ParseError(f"{path}: {e}") from None


def save_trajectory(traj: Trajectory, path):
    Path(path).write_text(serialize_trajectory(traj))


# ---------------------------------------------------------------------------
# Timestamp association


def associate(a, b, max_diff: float = DEFAULT_MAX_DIFF):
    """Greedy mutual-nearest matching of two ascending timestamp lists.

    Repeatedly takes the globally closest unmatched pair with |dt| <= max_diff;
    each element is matched at most once.  Returns index pairs sorted by the
    first list's timestamps.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    for name, arr in (("a", a), ("b", b)):
        if len(arr) > 1 and np.any(np.diff(arr) < 0):
            raise ValueError(f"timestamp list {name} is not sorted ascending")
    candidates = []
    for i, t in enumerate(a):
        lo = int(np.searchsorted(b, t - max_diff, side="left"))
        hi = int(np.searchsorted(b, t + max_diff, side="right"))
        for j in range(lo, hi):
            candidates.append((abs(t - b[j]), i, j))
    candidates.sort()
    used_a = set()
    used_b = set()
    pairs = []
    for _, i, j in candidates:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    pairs.sort()
    return pairs


def parse_depth_index(text: str):
    """Parse "timestamp path" lines; returns (timestamps, paths)."""
    timestamps = []
    paths = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 2:
            raise ParseError(f"line {lineno}: expected 2 fields, got {len(fields)}")
        try:
            timestamps.append(float(fields[0]))
        except ValueError:
            raise ParseError(f"line {lineno}: non-numeric timestamp") from None
        paths.append(fields[1])
    return timestamps, paths


# ---------------------------------------------------------------------------
# Depth images


def load_depth(path, depth_scale: float, k: Intrinsics) -> DepthImage:
    """Load a 16-bit depth PNG; 0 and out-of-range readings become invalid."""
    img = Image.open(path)
    if img.mode not in ("I;16", "I;16B", "I"):
        raise FormatError(f"{path}: expected 16-bit grayscale PNG, got mode {img.mode}")
    raw = np.asarray(img, dtype=np.float64)
    if raw.shape != (k.height, k.width):
        raise FormatError(
            f"{path}: size {raw.shape[1]}x{raw.shape[0]} does not match "
            f"intrinsics {k.width}x{k.height}")
    meters = raw / float(depth_scale)
    meters[raw == 0] = np.nan
    meters[(meters < k.depth_min) | (meters > k.depth_max)] = np.nan
    return DepthImage(meters)


def save_depth(img: DepthImage, path, depth_scale: float = DEFAULT_DEPTH_SCALE):
    raw = img.samples * float(depth_scale)
    raw = np.where(np.isfinite(raw), np.round(raw), 0.0)
    raw = np.clip(raw, 0, 65535).astype(np.uint16)
    Image.fromarray(raw).save(path, format="PNG")


def load_intrinsics(path) -> Intrinsics:
    data = json.loads(Path(path).read_text())
    try:
        return Intrinsics(
            fx=float(data["fx"]), fy=float(data["fy"]),
            cx=float(data["cx"]), cy=float(data["cy"]),
            width=int(data["width"]), height=int(data["height"]),
            depth_min=float(data.get("depth_min", 0.3)),
            depth_max=float(data.get("depth_max", 8.0)))
    except KeyError as e:
        raise FormatError(f"{path}: missing intrinsics key {e}") from None


def save_intrinsics(k: Intrinsics, path):
    data = {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy,
            "width": k.width, "height": k.height,
            "depth_min": k.depth_min, "depth_max": k.depth_max}
    Path(path).write_text(json.dumps(data, indent=2) + "\n")


# ---------------------------------------------------------------------------
# Frame sets


@dataclass
class Frame:
    """One depth observation with its associated camera pose."""

    timestamp: float
    pose: Pose
    depth: DepthImage | None = None
    path: str | None = None


@dataclass
class FrameSet:
    """Ordered depth frames, each with exactly one associated pose."""

    frames: list[Frame]
    intrinsics: Intrinsics
    depth_scale: float = DEFAULT_DEPTH_SCALE

    def __len__(self):
        return len(self.frames)

    def load(self, i: int) -> DepthImage:
        f = self.frames[i]
        if f.depth is not None:
            return f.depth
        if f.path is None:
            raise ValueError(f"frame {i} has neither loaded depth nor a path")
        return load_depth(f.path, self.depth_scale, self.intrinsics)

    def with_poses(self, poses) -> "FrameSet":
        if len(poses) != len(self.frames):
            raise ValueError("pose count does not match frame count")
        frames = [Frame(f.timestamp, p, f.depth, f.path)
                  for f, p in zip(self.frames, poses)]
        return FrameSet(frames, self.intrinsics, self.depth_scale)

    @classmethod
    def from_sequence_dir(cls, seq_dir, trajectory: Trajectory,
                          max_diff: float = DEFAULT_MAX_DIFF,
                          depth_scale: float = DEFAULT_DEPTH_SCALE):
        """Pair the sequence's depth index with trajectory poses by timestamp.

        Expects <seq_dir>/intrinsics.json and <seq_dir>/depth.txt with paths
        relative to seq_dir.  Unmatched frames are dropped.
        """
        seq_dir = Path(seq_dir)
        k = load_intrinsics(seq_dir / "intrinsics.json")
        depth_ts, depth_paths = parse_depth_index((seq_dir / "depth.txt").read_text())
        pairs = associate(depth_ts, trajectory.timestamps, max_diff)
        frames = [Frame(depth_ts[i], trajectory.poses[j],
                        path=str(seq_dir / depth_paths[i]))
                  for i, j in pairs]
        return cls(frames, k, depth_scale)


# ---------------------------------------------------------------------------
# Reports

# A report is any object with csv_header() / csv_rows() / to_dict(); an
# optional `config` dict is echoed into the output for provenance.


def _json_round(obj):
    if isinstance(obj, float):
        if not math.isfinite(obj):
            raise ValueError("reports must not contain non-finite numbers")
        return round9(obj)
    if isinstance(obj, dict):
        return {k: _json_round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_round(v) for v in obj]
    return obj


def report_to_csv(report) -> str:
    lines = []
    config = getattr(report, "config", None)
    if config:
        for key, value in config.items():
            v = fmt9(value) if isinstance(value, (int, float)) else str(value)
            lines.append(f"# {key}={v}")
    lines.append(",".join(report.csv_header()))
    for row in report.csv_rows():
        lines.append(",".join(fmt9(v) if isinstance(v, (int, float, np.floating, np.integer))
                              else str(v) for v in row))
    return "\n".join(lines) + "\n"


def report_to_json(report) -> str:
    data = report.to_dict()
    config = getattr(report, "config", None)
    if config:
        data = {"config": config, **data}
    return json.dumps(_json_round(data), indent=2) + "\n"


def write_report(report, fmt: str, sink):
    """Serialize a report as 'csv' or 'json' to a path or a writable file."""
    if fmt == "csv":
        text = report_to_csv(report)
    elif fmt == "json":
        text = report_to_json(report)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    if hasattr(sink, "write"):
        sink.write(text)
    else:
        Path(sink).write_text(text)


def parse_report_csv(text: str):
    """Parse a report CSV back into (meta, header, rows) for round-tripping."""
    meta = {}
    header = None
    rows = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if "=" in body:
                key, value = body.split("=", 1)
                meta[key.strip()] = value.strip()
            continue
        cells = line.split(",")
        if header is None:
            header = cells
            continue
        parsed = []
        for c in cells:
            try:
                parsed.append(float(c))
            except ValueError:
                parsed.append(c)
        rows.append(parsed)
    return meta, header or [], rows


@dataclass
class TableReport:
    """Generic tabular report (ranked lists, PR curves, per-frame dumps)."""

    header: list[str]
    rows: list[list]
    config: dict | None = field(default=None)

    def csv_header(self):
        return self.header

    def csv_rows(self):
        return self.rows

    def to_dict(self):
        return {"rows": [dict(zip(self.header, row)) for row in self.rows]}
