"""Minimal dense SE(3) pose-graph optimizer (Levenberg-Marquardt).

Nodes are absolute poses, edges are relative-pose measurements with 6x6
information matrices.  Residuals use right-multiplied se(3) increments:

    r = log( Z_ij^-1 * X_i^-1 * X_j )

with the package's twist ordering (rotation first).  Jacobians are analytic,
built from the closed-form inverse of the SE(3) right Jacobian; they are
checked against central finite differences in the test suite.

Graphs here are small (sequential odometry plus a single loop), so the
normal equations are solved densely via Cholesky.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .dataset import ParseError, fmt9
from .geometry import (Pose, se3_exp, se3_log, skew, so3_left_jacobian_inv)

_LM_LAMBDA_INIT = 1e-6
_LM_LAMBDA_MIN = 1e-12
_LM_LAMBDA_REJECT_MAX = 1e12
_LM_LAMBDA_PSD_MAX = 1e32


def _barfoot_q(rho, phi):
    """Translation-rotation coupling block of the left SE(3) Jacobian."""
    ph = skew(phi)
    rh = skew(rho)
    theta2 = float(np.dot(phi, phi))
    if theta2 < 1e-8:
        c1 = 1.0 / 6.0 - theta2 / 120.0
        c2 = 1.0 / 24.0 - theta2 / 720.0
        c3 = 1.0 / 120.0 - theta2 / 2520.0
    else:
        theta = np.sqrt(theta2)
        s, c = np.sin(theta), np.cos(theta)
        c1 = (theta - s) / (theta2 * theta)
        c2 = (theta2 + 2.0 * c - 2.0) / (2.0 * theta2 * theta2)
        c3 = (2.0 * theta - 3.0 * s + theta * c) / (2.0 * theta2 * theta2 * theta)
    ph_rh = ph @ rh
    rh_ph = rh @ ph
    ph_rh_ph = ph_rh @ ph
    return (0.5 * rh
            + c1 * (ph_rh + rh_ph + ph_rh_ph)
            + c2 * (ph @ ph_rh + rh_ph @ ph - 3.0 * ph_rh_ph)
            + c3 * (ph_rh_ph @ ph + ph @ ph_rh_ph))


def se3_right_jacobian_inv(tau):
    """Inverse right Jacobian of SE(3) at twist tau = (w, v), 6x6."""
    tau = np.asarray(tau, dtype=np.float64).reshape(6)
    w, v = tau[:3], tau[3:]
    # Right quantities are left quantities at the negated argument.
    jr_inv = so3_left_jacobian_inv(-w)
    q_r = _barfoot_q(-v, -w)
    out = np.zeros((6, 6))
    out[:3, :3] = jr_inv
    out[3:, 3:] = jr_inv
    out[3:, :3] = -jr_inv @ q_r @ jr_inv
    return out


def se3_left_jacobian_inv(tau):
    tau = np.asarray(tau, dtype=np.float64).reshape(6)
    return se3_right_jacobian_inv(-tau)


def adjoint(p: Pose):
    """Adjoint of a pose on twists (w, v): maps right increments to left."""
    r = p.rotation_matrix
    out = np.zeros((6, 6))
    out[:3, :3] = r
    out[3:, 3:] = r
    out[3:, :3] = skew(p.t) @ r
    return out


@dataclass
class PoseGraphEdge:
    i: int
    j: int
    measurement: Pose
    information: np.ndarray = field(default_factory=lambda: np.eye(6))


class PoseGraph:
    """Graph of absolute poses with relative-pose measurement edges."""

    def __init__(self, nodes, edges, fixed=(0,)):
        self.nodes = list(nodes)
        self.edges = list(edges)
        self.fixed = frozenset(int(i) for i in fixed)
        n = len(self.nodes)
        if not self.fixed:
            raise ValueError("pose graph needs at least one fixed node")
        if any(i < 0 or i >= n for i in self.fixed):
            raise ValueError("fixed node index out of range")
        for e in self.edges:
            if not (0 <= e.i < n and 0 <= e.j < n):
                raise ValueError(f"edge ({e.i}, {e.j}) references a missing node")
            info = np.asarray(e.information, dtype=np.float64)
            if info.shape != (6, 6):
                raise ValueError("information matrix must be 6x6")
            if not np.allclose(info, info.T, atol=1e-9):
                raise ValueError("information matrix must be symmetric")
            try:
                np.linalg.cholesky(info)
            except np.linalg.LinAlgError:
                raise ValueError("information matrix must be positive definite") from None


def _residual(pose_i: Pose, pose_j: Pose, measurement: Pose):
    return se3_log(measurement.inverse().compose(pose_i.inverse()).compose(pose_j))


def edge_residual(graph: PoseGraph, edge: PoseGraphEdge):
    """r = log(Z_ij^-1 * X_i^-1 * X_j); zero for a consistent edge."""
    return _residual(graph.nodes[edge.i], graph.nodes[edge.j], edge.measurement)


def edge_jacobians(graph: PoseGraph, edge: PoseGraphEdge):
    """d(residual)/d(right increment) for node i and node j, each 6x6."""
    r = edge_residual(graph, edge)
    j_j = se3_right_jacobian_inv(r)
    j_i = -se3_left_jacobian_inv(r) @ adjoint(edge.measurement.inverse())
    return j_i, j_j


@dataclass
class OptimizeResult:
    poses: list
    initial_chi2: float
    final_chi2: float
    iterations: int
    converged: bool


def _chi2(poses, edges):
    total = 0.0
    for e in edges:
        r = _residual(poses[e.i], poses[e.j], e.measurement)
        total += float(r @ e.information @ r)
    return total


def optimize(graph: PoseGraph, max_iters: int = 100, tol: float = 1e-8) -> OptimizeResult:
    """Levenberg-Marquardt over se(3) increments of the non-fixed nodes.

    Damping doubles on rejected steps and halves on accepted ones; chi^2 is
    non-increasing across accepted steps.  Stops when the update norm falls
    below tol, on a non-improving damped step, or after max_iters.
    """
    poses = list(graph.nodes)
    free = [i for i in range(len(poses)) if i not in graph.fixed]
    slot = {node: 6 * s for s, node in enumerate(free)}
    dim = 6 * len(free)
    chi2 = _chi2(poses, graph.edges)
    initial_chi2 = chi2
    if dim == 0 or not graph.edges:
        return OptimizeResult(poses, initial_chi2, chi2, 0, True)

    lam = _LM_LAMBDA_INIT
    iterations = 0
    converged = False
    for _ in range(max_iters):
        iterations += 1
        h = np.zeros((dim, dim))
        b = np.zeros(dim)
        for e in graph.edges:
            r = _residual(poses[e.i], poses[e.j], e.measurement)
            j_i, j_j = None, None
            if e.i in slot or e.j in slot:
                ri = se3_right_jacobian_inv(r)
                j_j = ri
                j_i = -se3_left_jacobian_inv(r) @ adjoint(e.measurement.inverse())
            omega = e.information
            if e.i in slot:
                si = slot[e.i]
                h[si:si + 6, si:si + 6] += j_i.T @ omega @ j_i
                b[si:si + 6] += j_i.T @ omega @ r
            if e.j in slot:
                sj = slot[e.j]
                h[sj:sj + 6, sj:sj + 6] += j_j.T @ omega @ j_j
                b[sj:sj + 6] += j_j.T @ omega @ r
            if e.i in slot and e.j in slot:
                blk = j_i.T @ omega @ j_j
                h[slot[e.i]:slot[e.i] + 6, slot[e.j]:slot[e.j] + 6] += blk
                h[slot[e.j]:slot[e.j] + 6, slot[e.i]:slot[e.i] + 6] += blk.T

        accepted = False
        while True:
            try:
                factor = cho_factor(h + lam * np.eye(dim))
            except np.linalg.LinAlgError:
                lam *= 2.0
                if lam > _LM_LAMBDA_PSD_MAX:
                    raise RuntimeError(
                        "pose graph normal equations are not positive definite")
                continue
            delta = cho_solve(factor, -b)
            candidate = list(poses)
            for node, s in slot.items():
                candidate[node] = poses[node].compose(se3_exp(delta[s:s + 6]))
            candidate_chi2 = _chi2(candidate, graph.edges)
            if candidate_chi2 <= chi2:
                accepted = True
                break
            lam *= 2.0
            if lam > _LM_LAMBDA_REJECT_MAX:
                break

        if not accepted:
            # Damping escalation cannot improve: treat as a local optimum.
            converged = True
            break
        poses = candidate
        chi2 = candidate_chi2
        lam = max(lam * 0.5, _LM_LAMBDA_MIN)
        if float(np.linalg.norm(delta)) < tol:
            converged = True
            break

    return OptimizeResult(poses, initial_chi2, chi2, iterations, converged)


# ---------------------------------------------------------------------------
# Graph text format: VERTEX / EDGE lines


def _upper_triangular(info):
    return [info[r, c] for r in range(6) for c in range(r, 6)]


def _from_upper_triangular(values):
    info = np.zeros((6, 6))
    it = iter(values)
    for r in range(6):
        for c in range(r, 6):
            v = next(it)
            info[r, c] = v
            info[c, r] = v
    return info


def serialize_graph(graph: PoseGraph) -> str:
    lines = []
    for i, p in enumerate(graph.nodes):
        q = -p.q if p.q[3] < 0 else p.q
        vals = [p.t[0], p.t[1], p.t[2], q[0], q[1], q[2], q[3]]
        lines.append(f"VERTEX {i} " + " ".join(fmt9(v) for v in vals))
    for e in graph.edges:
        p = e.measurement
        q = -p.q if p.q[3] < 0 else p.q
        vals = [p.t[0], p.t[1], p.t[2], q[0], q[1], q[2], q[3]]
        line = f"EDGE {e.i} {e.j} " + " ".join(fmt9(v) for v in vals)
        if not np.array_equal(e.information, np.eye(6)):
            line += " " + " ".join(fmt9(v) for v in _upper_triangular(e.information))
        lines.append(line)
    return "\n".join(lines) + ("\n" if lines else "")


def parse_graph(text: str, fixed=None) -> PoseGraph:
    """Parse VERTEX/EDGE lines; by default the lowest vertex index is fixed."""
    vertices = {}
    edges = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        kind = fields[0].upper()
        try:
            if kind == "VERTEX":
                if len(fields) != 9:
                    raise ParseError(
                        f"line {lineno}: VERTEX expects 9 fields, got {len(fields)}")
                idx = int(fields[1])
                vals = [float(f) for f in fields[2:]]
                if idx in vertices:
                    raise ParseError(f"line {lineno}: duplicate vertex {idx}")
                vertices[idx] = Pose(vals[3:7], vals[0:3])
            elif kind == "EDGE":
                if len(fields) not in (10, 31):
                    raise ParseError(
                        f"line {lineno}: EDGE expects 10 or 31 fields, got {len(fields)}")
                i, j = int(fields[1]), int(fields[2])
                vals = [float(f) for f in fields[3:10]]
                info = np.eye(6)
                if len(fields) == 31:
                    info = _from_upper_triangular([float(f) for f in fields[10:]])
                edges.append(PoseGraphEdge(i, j, Pose(vals[3:7], vals[0:3]), info))
            else:
                raise ParseError(f"line {lineno}: unknown record {fields[0]!r}")
        except (ValueError, StopIteration) as e:
            if isinstance(e, ParseError):
                raise
            raise ParseError(f"line {lineno}: {e}") from None
    if not vertices:
        raise ParseError("graph has no vertices")
    indices = sorted(vertices)
    if indices != list(range(len(indices))):
        raise ParseError("vertex indices must be contiguous from 0")
    nodes = [vertices[i] for i in indices]
    if fixed is None:
        fixed = (indices[0],)
    return PoseGraph(nodes, edges, fixed)
