"""Map and trajectory quality metrics.

The ground-truth-free score is the sum of squared differences between
observed depth images and depths re-rendered from the model at the same
poses (lower is better), reported per frame and in total together with the
fraction of observed pixels the model actually predicts.  Two such scores on
the same observations compare via a Gaussian log-likelihood ratio.

Ground-truth baselines: absolute trajectory error (ATE) after rigid
alignment, relative pose error (RPE) over a fixed frame gap, and surface
mean distance (SMD) between point sets.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .dataset import FrameSet, TableReport, Trajectory, associate
from .fusion import SurfelMap
from .geometry import Pose
from .parallel import run_jobs
from .render import RenderConfig, render_depth


@dataclass(frozen=True)
class NoiseModel:
    """Gaussian depth-reading noise; sigma in meters."""

    sigma: float = 1.0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")


class FrameScore(NamedTuple):
    timestamp: float
    sum_sq: float
    n_valid: int
    coverage: float


@dataclass
class DmpReport:
    """Squared-residual total in m^2 with per-frame breakdown and coverage."""

    sum_sq: float
    n_valid: int
    mean_sq: float
    coverage: float
    per_frame: list[FrameScore]
    config: dict | None = field(default=None, compare=False)

    def csv_header(self):
        return ["sum_sq", "n_valid", "mean_sq", "coverage", "n_frames"]

    def csv_rows(self):
        return [[self.sum_sq, self.n_valid, self.mean_sq, self.coverage,
                 len(self.per_frame)]]

    def to_dict(self):
        return {
            "sum_sq": self.sum_sq,
            "n_valid": self.n_valid,
            "mean_sq": self.mean_sq,
            "coverage": self.coverage,
            "per_frame": [
                {"timestamp": f.timestamp, "sum_sq": f.sum_sq,
                 "n_valid": f.n_valid, "coverage": f.coverage}
                for f in self.per_frame],
        }

    def per_frame_report(self) -> TableReport:
        rows = [[f.timestamp, f.sum_sq, f.n_valid, f.coverage]
                for f in self.per_frame]
        return TableReport(["timestamp", "sum_sq", "n_valid", "coverage"], rows)


def _score_frame(state, i):
    m, frames, cfg = state
    frame = frames.frames[i]
    obs = frames.load(i).samples
    pred = render_depth(m, frame.pose, frames.intrinsics, cfg).samples
    obs_valid = np.isfinite(obs)
    both = obs_valid & np.isfinite(pred)
    diff = obs[both] - pred[both]
    return (frame.timestamp, float(np.sum(diff * diff)),
            int(np.count_nonzero(both)), int(np.count_nonzero(obs_valid)))


def dmp(m: SurfelMap, frames: FrameSet, cfg: RenderConfig = RenderConfig(),
        frame_stride: int = 1, threads: int = 1) -> DmpReport:
    """Score a model against every stride-th observed frame.

    Residuals are accumulated only where both the observation and the
    prediction are valid; `coverage` reports the fraction of observed-valid
    pixels with a valid prediction so silently skipped regions stay visible.
    """
    if frame_stride < 1:
        raise ValueError("frame_stride must be >= 1")
    indices = list(range(0, len(frames), frame_stride))
    results = run_jobs(_score_frame, (m, frames, cfg), indices, threads)

    per_frame = []
    total_sq = 0.0
    total_n = 0
    total_obs = 0
    for timestamp, frame_sq, n_both, n_obs in results:
        cov = n_both / n_obs if n_obs else 0.0
        per_frame.append(FrameScore(timestamp, frame_sq, n_both, cov))
        total_sq += frame_sq
        total_n += n_both
        total_obs += n_obs
    if total_n == 0:
        raise ValueError("no overlap between model and observations")
    return DmpReport(sum_sq=total_sq, n_valid=total_n,
                     mean_sq=total_sq / total_n,
                     coverage=total_n / total_obs, per_frame=per_frame)


def llr(r1: DmpReport, r2: DmpReport, noise: NoiseModel = NoiseModel()) -> float:
    """Log-likelihood ratio of model 1 vs model 2; positive favors model 1.

    Both reports must come from the same observation set (same frames, same
    stride).
    """
    t1 = [f.timestamp for f in r1.per_frame]
    t2 = [f.timestamp for f in r2.per_frame]
    if t1 != t2:
        raise ValueError("DMP reports cover different observation sets")
    if abs(r1.coverage - r2.coverage) > 0.05:
        warnings.warn(
            "compared DMP reports differ in coverage by more than 5 "
            f"percentage points ({r1.coverage:.3f} vs {r2.coverage:.3f}); "
            "the comparison may be unreliable without overlapping scans")
    return (r2.sum_sq - r1.sum_sq) / (2.0 * noise.sigma ** 2)


# ---------------------------------------------------------------------------
# Ground-truth baselines


@dataclass
class TrajectoryError:
    rmse: float
    mean: float
    median: float
    max: float
    residuals: np.ndarray
    config: dict | None = field(default=None, compare=False)

    def csv_header(self):
        return ["rmse", "mean", "median", "max", "n"]

    def csv_rows(self):
        return [[self.rmse, self.mean, self.median, self.max,
                 len(self.residuals)]]

    def to_dict(self):
        return {"rmse": self.rmse, "mean": self.mean, "median": self.median,
                "max": self.max, "residuals": [float(r) for r in self.residuals]}


def _error_stats(residuals) -> TrajectoryError:
    r = np.asarray(residuals, dtype=np.float64)
    return TrajectoryError(rmse=float(np.sqrt(np.mean(r * r))),
                           mean=float(np.mean(r)),
                           median=float(np.median(r)),
                           max=float(np.max(r)),
                           residuals=r)


def umeyama_align(source, target) -> Pose:
    """Least-squares rigid transform g minimizing sum ||g(s_i) - t_i||^2.

    No scale estimation.  Raises ValueError for degenerate (coincident or
    collinear) source configurations, where the rotation is not unique.
    """
    s = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    t = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if s.shape != t.shape:
        raise ValueError("source and target must have equal shapes")
    n = len(s)
    if n < 3:
        raise ValueError("need at least 3 correspondences")
    s_mean = s.mean(axis=0)
    t_mean = t.mean(axis=0)
    s_c = s - s_mean
    t_c = t - t_mean
    sv = np.linalg.svd(s_c, compute_uv=False)
    if sv[0] < 1e-12 or sv[1] <= 1e-9 * sv[0]:
        raise ValueError("degenerate point configuration (coincident or collinear)")
    cov = t_c.T @ s_c / n
    u, _, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(u) * np.linalg.det(vt))
    rot = u @ np.diag([1.0, 1.0, d]) @ vt
    return Pose.from_matrix(rot, t_mean - rot @ s_mean)


def ate(est: Trajectory, gt: Trajectory, max_diff: float = 0.02) -> TrajectoryError:
    """Absolute trajectory error: position residuals after rigid alignment."""
    pairs = associate(est.timestamps, gt.timestamps, max_diff)
    if len(pairs) < 3:
        raise ValueError(f"too few trajectory associations ({len(pairs)} < 3)")
    est_p = np.array([est.poses[i].t for i, _ in pairs])
    gt_p = np.array([gt.poses[j].t for _, j in pairs])
    g = umeyama_align(est_p, gt_p)
    residuals = np.linalg.norm(g.transform(est_p) - gt_p, axis=1)
    return _error_stats(residuals)


def rpe(est: Trajectory, gt: Trajectory, delta: int = 1,
        max_diff: float = 0.02, delta_time: float | None = None) -> TrajectoryError:
    """Relative pose error of frame-gap (or time-gap) motions."""
    pairs = associate(est.timestamps, gt.timestamps, max_diff)
    est_poses = [est.poses[i] for i, _ in pairs]
    gt_poses = [gt.poses[j] for _, j in pairs]
    times = [est.timestamps[i] for i, _ in pairs]
    n = len(pairs)

    index_pairs = []
    if delta_time is not None:
        if delta_time <= 0:
            raise ValueError("delta_time must be positive")
        j = 0
        for i in range(n):
            if j <= i:
                j = i + 1
            while j < n and times[j] < times[i] + delta_time:
                j += 1
            if j < n:
                index_pairs.append((i, j))
    else:
        if delta < 1:
            raise ValueError("delta must be >= 1")
        index_pairs = [(i, i + delta) for i in range(n - delta)]
    if not index_pairs:
        raise ValueError("too few associated pairs for the requested delta")

    residuals = []
    for i, j in index_pairs:
        rel_est = est_poses[i].inverse().compose(est_poses[j])
        rel_gt = gt_poses[i].inverse().compose(gt_poses[j])
        err = rel_gt.inverse().compose(rel_est)
        residuals.append(np.linalg.norm(err.t))
    return _error_stats(residuals)


def smd(reconstructed, reference):
    """Mean and median nearest-neighbor distance to the reference points."""
    rec = np.asarray(reconstructed, dtype=np.float64).reshape(-1, 3)
    ref = np.asarray(reference, dtype=np.float64).reshape(-1, 3)
    if len(rec) == 0 or len(ref) == 0:
        raise ValueError("point sets must be non-empty")
    dists, _ = cKDTree(ref).query(rec, k=1)
    return float(np.mean(dists)), float(np.median(dists))
