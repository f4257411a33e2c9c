"""Rank loop-closure candidates by the map score they lead to.

Each candidate is evaluated in isolation: a pose graph built from sequential
odometry plus that single loop edge is optimized, a map is re-fused from the
optimized poses, and the map is scored against the observations under the
same poses.  Candidates are then sorted ascending (lower is better) and, when
truth labels are available, summarized as a precision-recall curve.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

from .dataset import FrameSet, ParseError, TableReport, fmt9
from .fusion import FusionConfig, fuse_sequence
from .geometry import Pose
from .metrics import dmp
from .parallel import run_jobs
from .pose_graph import PoseGraph, PoseGraphEdge, optimize
from .render import RenderConfig


@dataclass(frozen=True)
class LoopCandidate:
    """Putative loop edge between frames i and j with a measured relative pose."""

    i: int
    j: int
    relative: Pose
    label: bool | None = None

    def __post_init__(self):
        if self.i == self.j:
            raise ValueError("loop candidate endpoints must differ")
        if self.i < 0 or self.j < 0:
            raise ValueError("loop candidate indices must be non-negative")


@dataclass(frozen=True)
class RankedLoop:
    candidate: LoopCandidate
    dmp_value: float
    rank: int
    error: str | None = None


class PrPoint(NamedTuple):
    k: int
    precision: float
    recall: float


def build_loop_graph(poses, candidate: LoopCandidate) -> PoseGraph:
    """Sequential odometry edges from the trajectory plus the one loop edge."""
    n = len(poses)
    if candidate.i >= n or candidate.j >= n:
        raise ValueError("loop candidate references a frame beyond the trajectory")
    edges = [PoseGraphEdge(k, k + 1, poses[k].inverse().compose(poses[k + 1]))
             for k in range(n - 1)]
    edges.append(PoseGraphEdge(candidate.i, candidate.j, candidate.relative))
    return PoseGraph(poses, edges, fixed=(0,))


def evaluate_loop(candidate: LoopCandidate, frames: FrameSet,
                  fusion_cfg: FusionConfig = FusionConfig(),
                  render_cfg: RenderConfig = RenderConfig(),
                  frame_stride: int = 1) -> float:
    """Optimize with the single loop, re-fuse, and score; lower is better."""
    base_poses = [f.pose for f in frames.frames]
    graph = build_loop_graph(base_poses, candidate)
    result = optimize(graph)
    adjusted = frames.with_poses(result.poses)
    model = fuse_sequence(adjusted, fusion_cfg)
    report = dmp(model, adjusted, render_cfg, frame_stride=frame_stride)
    return report.sum_sq


def _evaluate_job(state, candidate):
    frames, fusion_cfg, render_cfg, frame_stride = state
    try:
        return evaluate_loop(candidate, frames, fusion_cfg, render_cfg,
                             frame_stride), None
    except Exception as e:  # noqa: BLE001 - failed candidates rank last
        return float("inf"), f"{type(e).__name__}: {e}"


def rank_loops(candidates, frames: FrameSet,
               fusion_cfg: FusionConfig = FusionConfig(),
               render_cfg: RenderConfig = RenderConfig(),
               frame_stride: int = 1, threads: int = 1) -> list[RankedLoop]:
    """Evaluate every candidate and sort ascending by score (stable ties).

    Candidates whose evaluation fails are flagged and ranked last.
    """
    candidates = list(candidates)
    if not candidates:
        raise ValueError("no loop candidates to rank")
    state = (frames, fusion_cfg, render_cfg, frame_stride)
    results = run_jobs(_evaluate_job, state, candidates, threads)
    order = sorted(range(len(candidates)), key=lambda idx: results[idx][0])
    return [RankedLoop(candidates[idx], results[idx][0], rank, results[idx][1])
            for rank, idx in enumerate(order, start=1)]


def pr_curve(ranked) -> list[PrPoint]:
    """Precision/recall when accepting the top-k candidates, k = 1..N."""
    ranked = sorted(ranked, key=lambda r: r.rank)
    labels = [r.candidate.label for r in ranked]
    if any(lbl is None for lbl in labels):
        raise ValueError("all candidates need truth labels for a PR curve")
    total_true = sum(1 for lbl in labels if lbl)
    if total_true == 0:
        raise ValueError("PR curve undefined: no true loop candidates")
    points = []
    tp = 0
    for k, lbl in enumerate(labels, start=1):
        if lbl:
            tp += 1
        points.append(PrPoint(k, tp / k, tp / total_true))
    return points


def average_precision(points) -> float:
    """Mean of precision at the ranks where recall increases."""
    hits = []
    prev_recall = 0.0
    for p in points:
        if p.recall > prev_recall:
            hits.append(p.precision)
            prev_recall = p.recall
    return sum(hits) / len(hits)


# ---------------------------------------------------------------------------
# File formats


def parse_candidates(text: str) -> list[LoopCandidate]:
    """Lines "i j tx ty tz qx qy qz qw [label]" with label in {1, 0}."""
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) not in (9, 10):
            raise ParseError(
                f"line {lineno}: expected 9 or 10 fields, got {len(fields)}")
        try:
            i, j = int(fields[0]), int(fields[1])
            vals = [float(f) for f in fields[2:9]]
            label = None
            if len(fields) == 10:
                if fields[9] not in ("0", "1"):
                    raise ParseError(f"line {lineno}: label must be 0 or 1")
                label = fields[9] == "1"
            out.append(LoopCandidate(i, j, Pose(vals[3:7], vals[0:3]), label))
        except ParseError:
            raise
        except ValueError as e:
            raise ParseError(f"line {lineno}: {e}") from None
    return out


def serialize_candidates(candidates) -> str:
    lines = []
    for c in candidates:
        q = -c.relative.q if c.relative.q[3] < 0 else c.relative.q
        vals = [c.relative.t[0], c.relative.t[1], c.relative.t[2],
                q[0], q[1], q[2], q[3]]
        line = f"{c.i} {c.j} " + " ".join(fmt9(v) for v in vals)
        if c.label is not None:
            line += f" {1 if c.label else 0}"
        lines.append(line)
    return "\n".join(lines) + ("\n" if lines else "")


def parse_covisibility(text: str):
    """Lines "i j": unordered frame pairs connected by co-visibility."""
    pairs = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 2:
            raise ParseError(f"line {lineno}: expected 2 fields, got {len(fields)}")
        try:
            i, j = int(fields[0]), int(fields[1])
        except ValueError:
            raise ParseError(f"line {lineno}: non-integer index") from None
        pairs.add(frozenset((i, j)))
    return pairs


def filter_covisible(candidates, covisible_pairs):
    """Drop candidates already connected in the co-visibility graph."""
    return [c for c in candidates
            if frozenset((c.i, c.j)) not in covisible_pairs]


def ranked_report(ranked, config=None) -> TableReport:
    rows = []
    for r in ranked:
        label = "" if r.candidate.label is None else (1 if r.candidate.label else 0)
        rows.append([r.rank, r.candidate.i, r.candidate.j, r.dmp_value,
                     label, r.error or ""])
    return TableReport(["rank", "i", "j", "dmp_value", "label", "error"],
                       rows, config)


def pr_report(points, config=None) -> TableReport:
    return TableReport(["k", "precision", "recall"],
                       [[p.k, p.precision, p.recall] for p in points], config)


def load_candidates(path) -> list[LoopCandidate]:
    try:
        return parse_candidates(Path(path).read_text())
    except ParseError as e:
        raise ParseError(f"{path}: {e}") from None


def load_covisibility(path):
    try:
        return parse_covisibility(Path(path).read_text())
    except ParseError as e:
        raise ParseError(f"{path}: {e}") from None
