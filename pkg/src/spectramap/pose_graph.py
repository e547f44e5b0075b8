"""Pose-graph and trajectory containers, text file I/O, keyframing, perturbation, ATE.

File formats (one record per line, ``#`` starts a comment):
    graph:      VERTEX_SE3:QUAT id x y z qx qy qz qw
                EDGE_SE3:QUAT from to x y z qx qy qz qw  i11 .. i66 (21 upper-
                triangular information entries, row-major)
    trajectory: timestamp x y z qx qy qz qw

The writer additionally emits structured comments (``# NODE_META ...`` before a
vertex, ``# EDGE_KIND ...`` before an edge) so robot/submap ids, stamps, and
edge kinds survive a save/load round trip; any other reader sees plain
comments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    GraphFormatError,
    GraphValidationError,
    InsufficientDataError,
    ParameterError,
)
from .se3 import (
    Pose,
    Twist,
    compose_arrays,
    exp_map,
    relative,
    relative_arrays,
    rotation_geodesic,
    stack_poses,
)

ODOMETRY = "odometry"
LOOP_CLOSURE = "loop_closure"
CORRECTION = "correction"
EDGE_KINDS = (ODOMETRY, LOOP_CLOSURE, CORRECTION)

DEFAULT_ODOMETRY_INFORMATION = np.diag([100.0, 100.0, 100.0, 400.0, 400.0, 400.0])


# ---------------------------------------------------------------------------
# containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PoseNode:
    node_id: int
    robot_id: int
    submap_id: int
    pose: Pose
    stamp: float


@dataclass(frozen=True)
class PoseEdge:
    from_id: int
    to_id: int
    kind: str
    measurement: Pose
    information: np.ndarray = field(default_factory=lambda: DEFAULT_ODOMETRY_INFORMATION.copy())

    def __post_init__(self):
        if self.from_id == self.to_id:
            raise GraphValidationError(f"edge endpoints coincide: {self.from_id}")
        if self.kind not in EDGE_KINDS:
            raise GraphValidationError(f"unknown edge kind {self.kind!r}")
        info = np.asarray(self.information, dtype=float).reshape(6, 6)
        if np.max(np.abs(info - info.T)) > 1e-9:
            raise GraphValidationError("information matrix is not symmetric")
        if np.min(np.linalg.eigvalsh(info)) <= 0.0:
            raise GraphValidationError("information matrix is not positive definite")
        object.__setattr__(self, "information", info)


@dataclass
class PoseGraph:
    nodes: list[PoseNode] = field(default_factory=list)
    edges: list[PoseEdge] = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        ids = [n.node_id for n in self.nodes]
        if len(ids) != len(set(ids)):
            raise GraphValidationError("duplicate node ids")
        known = set(ids)
        for e in self.edges:
            for endpoint in (e.from_id, e.to_id):
                if endpoint not in known:
                    raise GraphValidationError(f"edge references unknown node id {endpoint}")
        # odometry edges must form one simple chain per robot, time-ordered
        by_id = {n.node_id: n for n in self.nodes}
        chains: dict[int, list[PoseEdge]] = {}
        for e in self.edges:
            if e.kind == ODOMETRY:
                r_from = by_id[e.from_id].robot_id
                r_to = by_id[e.to_id].robot_id
                if r_from != r_to:
                    raise GraphValidationError(
                        f"odometry edge spans robots {r_from} and {r_to}"
                    )
                chains.setdefault(r_from, []).append(e)
        for robot_id, robot_edges in chains.items():
            outgoing = {e.from_id for e in robot_edges}
            incoming = {e.to_id for e in robot_edges}
            if len(outgoing) != len(robot_edges) or len(incoming) != len(robot_edges):
                raise GraphValidationError(
                    f"odometry edges of robot {robot_id} do not form a simple chain"
                )
            for e in robot_edges:
                if by_id[e.to_id].stamp < by_id[e.from_id].stamp:
                    raise GraphValidationError(
                        f"odometry edge {e.from_id}->{e.to_id} goes backward in time"
                    )

    def node(self, node_id: int) -> PoseNode:
        for n in self.nodes:
            if n.node_id == node_id:
                return n
        raise KeyError(node_id)


@dataclass
class Trajectory:
    """Time-ordered pose samples of one robot; stamps strictly increasing."""

    stamps: np.ndarray
    poses: list[Pose]

    def __post_init__(self):
        self.stamps = np.asarray(self.stamps, dtype=float).reshape(-1)
        if len(self.stamps) != len(self.poses):
            raise GraphValidationError("stamp/pose count mismatch")
        if len(self.stamps) > 1 and np.any(np.diff(self.stamps) <= 0.0):
            raise GraphValidationError("trajectory timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.poses)

    @classmethod
    def from_samples(cls, samples) -> "Trajectory":
        stamps = [t for t, _ in samples]
        poses = [p.with_stamp(t) for t, p in samples]
        return cls(np.asarray(stamps, dtype=float), poses)

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)

    def relative_motions(self) -> list[Pose]:
        return [relative(self.poses[i - 1], self.poses[i]) for i in range(1, len(self.poses))]

    def motion_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Relative motions as (N-1,4) quaternion and (N-1,3) translation arrays."""
        q, t = stack_poses(self.poses)
        return relative_arrays(q[:-1], t[:-1], q[1:], t[1:])


# ---------------------------------------------------------------------------
# text I/O
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


_UPPER_TRI = [(i, j) for i in range(6) for j in range(i, 6)]


def save_g2o(graph: PoseGraph, path) -> None:
    lines = []
    for n in sorted(graph.nodes, key=lambda n: n.node_id):
        lines.append(f"# NODE_META {n.robot_id} {n.submap_id} {_fmt(n.stamp)}")
        t = n.pose.translation
        q = n.pose.rotation
        lines.append(
            "VERTEX_SE3:QUAT "
            + " ".join([str(n.node_id)] + [_fmt(v) for v in (*t, *q)])
        )
    for e in graph.edges:
        lines.append(f"# EDGE_KIND {e.kind}")
        t = e.measurement.translation
        q = e.measurement.rotation
        upper = [e.information[i, j] for i, j in _UPPER_TRI]
        lines.append(
            "EDGE_SE3:QUAT "
            + " ".join([str(e.from_id), str(e.to_id)]
                       + [_fmt(v) for v in (*t, *q)]
                       + [_fmt(v) for v in upper])
        )
    with open(path, "w") as f:
        f.write("\n".join(lines) + ("\n" if lines else ""))


def load_g2o(path) -> PoseGraph:
    nodes: list[PoseNode] = []
    edges: list[tuple] = []
    pending_meta = None
    pending_kind = None
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line:
                continue
            tokens = line.split()
            if tokens[0] == "#":
                if len(tokens) >= 4 and tokens[1] == "NODE_META":
                    try:
                        pending_meta = (int(tokens[2]), int(tokens[3]), float(tokens[4]))
                    except (ValueError, IndexError):
                        raise GraphFormatError(f"line {lineno}: malformed NODE_META comment")
                elif len(tokens) >= 3 and tokens[1] == "EDGE_KIND":
                    pending_kind = tokens[2]
                continue
            if tokens[0] == "VERTEX_SE3:QUAT":
                if len(tokens) != 9:
                    raise GraphFormatError(f"line {lineno}: vertex needs id + 7 values")
                try:
                    node_id = int(tokens[1])
                    vals = [float(v) for v in tokens[2:]]
                except ValueError:
                    raise GraphFormatError(f"line {lineno}: non-numeric vertex field")
                robot_id, submap_id, stamp = pending_meta if pending_meta else (0, 0, 0.0)
                pending_meta = None
                pose = Pose(np.array(vals[3:7]), np.array(vals[0:3]), stamp)
                nodes.append(PoseNode(node_id, robot_id, submap_id, pose, stamp))
            elif tokens[0] == "EDGE_SE3:QUAT":
                if len(tokens) != 31:
                    raise GraphFormatError(
                        f"line {lineno}: edge needs 2 ids + 7 values + 21 information entries"
                    )
                try:
                    from_id, to_id = int(tokens[1]), int(tokens[2])
                    vals = [float(v) for v in tokens[3:]]
                except ValueError:
                    raise GraphFormatError(f"line {lineno}: non-numeric edge field")
                kind = pending_kind if pending_kind in EDGE_KINDS else ODOMETRY
                pending_kind = None
                measurement = Pose(np.array(vals[3:7]), np.array(vals[0:3]))
                info = np.zeros((6, 6))
                for (i, j), v in zip(_UPPER_TRI, vals[7:]):
                    info[i, j] = v
                    info[j, i] = v
                edges.append((lineno, from_id, to_id, kind, measurement, info))
            else:
                raise GraphFormatError(f"line {lineno}: unknown record {tokens[0]!r}")
    known = {n.node_id for n in nodes}
    built: list[PoseEdge] = []
    for lineno, from_id, to_id, kind, measurement, info in edges:
        for endpoint in (from_id, to_id):
            if endpoint not in known:
                raise GraphValidationError(
                    f"line {lineno}: edge references unknown vertex id {endpoint}"
                )
        built.append(PoseEdge(from_id, to_id, kind, measurement, info))
    return PoseGraph(nodes, built)


def save_tum(trajectory: Trajectory, path) -> None:
    with open(path, "w") as f:
        for t, p in zip(trajectory.stamps, trajectory.poses):
            vals = [t, *p.translation, *p.rotation]
            f.write(" ".join(_fmt(v) for v in vals) + "\n")


def load_tum(path) -> Trajectory:
    stamps: list[float] = []
    poses: list[Pose] = []
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            if len(tokens) != 8:
                raise GraphFormatError(f"line {lineno}: expected 8 fields, got {len(tokens)}")
            try:
                vals = [float(v) for v in tokens]
            except ValueError:
                raise GraphFormatError(f"line {lineno}: non-numeric field")
            if stamps and vals[0] <= stamps[-1]:
                raise GraphValidationError(
                    f"line {lineno}: timestamp {vals[0]} is not increasing"
                )
            stamps.append(vals[0])
            poses.append(Pose(np.array(vals[4:8]), np.array(vals[1:4]), vals[0]))
    return Trajectory(np.asarray(stamps, dtype=float), poses)


# ---------------------------------------------------------------------------
# keyframing
# ---------------------------------------------------------------------------

def keyframe_indices(poses, min_dist: float, min_rot: float) -> list[int]:
    """Indices kept by the distance-or-rotation keyframing rule (first always kept).

    A non-positive threshold disables that criterion; at least one must be
    positive.
    """
    if min_dist <= 0.0 and min_rot <= 0.0:
        raise ParameterError("at least one of min_dist, min_rot must be positive")
    if len(poses) == 0:
        return []
    kept = [0]
    last = poses[0]
    for i in range(1, len(poses)):
        p = poses[i]
        trans = float(np.linalg.norm(p.translation - last.translation))
        rot = rotation_geodesic(last, p)
        if (min_dist > 0.0 and trans >= min_dist) or (min_rot > 0.0 and rot >= min_rot):
            kept.append(i)
            last = p
    return kept


def keyframe_select(trajectory: Trajectory, min_dist: float, min_rot: float) -> Trajectory:
    idx = keyframe_indices(trajectory.poses, min_dist, min_rot)
    return Trajectory(trajectory.stamps[idx], [trajectory.poses[i] for i in idx])


# ---------------------------------------------------------------------------
# synthetic failure injection
# ---------------------------------------------------------------------------

def integrate_motion_arrays(
    start: Pose, rel_q: np.ndarray, rel_t: np.ndarray, stamps: np.ndarray
) -> Trajectory:
    """Chain relative motions from a start pose into a Trajectory."""
    n = rel_q.shape[0] + 1
    q = np.empty((n, 4))
    t = np.empty((n, 3))
    q[0] = start.rotation
    t[0] = start.translation
    for i in range(1, n):
        qq, tt = compose_arrays(q[i - 1], t[i - 1], rel_q[i - 1], rel_t[i - 1])
        q[i] = qq
        t[i] = tt
    poses = [Pose(q[i], t[i], float(stamps[i])) for i in range(n)]
    return Trajectory(np.asarray(stamps, dtype=float).copy(), poses)


def inject_drift(trajectory: Trajectory, start_t: float, end_t: float, bias: Twist) -> Trajectory:
    """Right-compose every relative motion with stamp in (start_t, end_t] by exp(bias).

    The accumulated error persists after the window (the trajectory is
    re-integrated from the perturbed motions).
    """
    if start_t >= end_t:
        raise ParameterError("drift window must satisfy start_t < end_t")
    if len(trajectory) < 2:
        return trajectory
    step = exp_map(bias)
    rel_q, rel_t = trajectory.motion_arrays()
    window = (trajectory.stamps[1:] > start_t) & (trajectory.stamps[1:] <= end_t)
    if np.any(window):
        wq, wt = compose_arrays(
            rel_q[window], rel_t[window],
            np.broadcast_to(step.rotation, (int(window.sum()), 4)),
            np.broadcast_to(step.translation, (int(window.sum()), 3)),
        )
        rel_q = rel_q.copy()
        rel_t = rel_t.copy()
        rel_q[window] = wq
        rel_t[window] = wt
    return integrate_motion_arrays(trajectory.poses[0], rel_q, rel_t, trajectory.stamps)


def inject_degeneracy(
    trajectory: Trajectory, start_t: float, end_t: float, axis: np.ndarray, beta: float
) -> Trajectory:
    """Scale the axis-component of in-window relative translations by beta.

    beta = 0 reproduces a fully under-observed direction (the estimate is
    stuck along the axis); rotations are untouched.
    """
    if not 0.0 <= beta < 1.0:
        raise ParameterError("beta must lie in [0, 1)")
    if start_t >= end_t:
        raise ParameterError("degeneracy window must satisfy start_t < end_t")
    axis = np.asarray(axis, dtype=float).reshape(3)
    norm = float(np.linalg.norm(axis))
    if abs(norm - 1.0) > 1e-6:
        raise ParameterError("axis must be a unit vector")
    if len(trajectory) < 2:
        return trajectory
    rel_q, rel_t = trajectory.motion_arrays()
    window = (trajectory.stamps[1:] > start_t) & (trajectory.stamps[1:] <= end_t)
    rel_t = rel_t.copy()
    along = rel_t[window] @ axis
    rel_t[window] = rel_t[window] + (beta - 1.0) * along[:, None] * axis[None, :]
    return integrate_motion_arrays(trajectory.poses[0], rel_q, rel_t, trajectory.stamps)


# ---------------------------------------------------------------------------
# trajectory error
# ---------------------------------------------------------------------------

def associate_stamps(stamps_a: np.ndarray, stamps_b: np.ndarray, tolerance: float) -> list[tuple[int, int]]:
    """Greedy one-to-one nearest-timestamp association within a tolerance.

    Candidates are the flanking samples of each a-stamp in b (sufficient
    whenever the tolerance is below the sample period); accepted in order of
    increasing time difference, ties broken by index.
    """
    stamps_a = np.asarray(stamps_a, dtype=float)
    stamps_b = np.asarray(stamps_b, dtype=float)
    candidates = []
    for i, t in enumerate(stamps_a):
        j = int(np.searchsorted(stamps_b, t))
        for jj in (j - 1, j):
            if 0 <= jj < len(stamps_b):
                dt = abs(stamps_b[jj] - t)
                if dt <= tolerance:
                    candidates.append((dt, i, jj))
    candidates.sort()
    used_a: set[int] = set()
    used_b: set[int] = set()
    pairs = []
    for _, i, j in candidates:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    pairs.sort()
    return pairs


def rigid_align(source: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form rigid (R, t), no scale, minimizing ||R s + t - target||^2."""
    source = np.asarray(source, dtype=float)
    target = np.asarray(target, dtype=float)
    mu_s = source.mean(axis=0)
    mu_t = target.mean(axis=0)
    W = (target - mu_t).T @ (source - mu_s)
    U, _, Vt = np.linalg.svd(W)
    S = np.eye(3)
    if np.linalg.det(U @ Vt) < 0.0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    t = mu_t - R @ mu_s
    return R, t


def ate_rmse(
    estimate: Trajectory,
    ground_truth: Trajectory,
    align: bool = False,
    tolerance: float = 0.05,
) -> float:
    """Root-mean-square absolute position error over associated samples."""
    pairs = associate_stamps(estimate.stamps, ground_truth.stamps, tolerance)
    if not pairs:
        raise InsufficientDataError("no associated trajectory samples")
    est = estimate.positions()[[i for i, _ in pairs]]
    gt = ground_truth.positions()[[j for _, j in pairs]]
    if align:
        if len(pairs) < 3:
            raise InsufficientDataError("alignment needs at least 3 associated pairs")
        R, t = rigid_align(est, gt)
        est = est @ R.T + t
    err = est - gt
    return float(np.sqrt(np.mean(np.sum(err * err, axis=1))))
