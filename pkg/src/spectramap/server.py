"""Centralized mapping server: submap ingestion, synthetic loop closures,
global optimization, graph construction/reduction, and broadcasting.

Loop-closure detection is replaced by a ground-truth oracle (pairs of nodes
that were truly close at sufficiently different times), which keeps the whole
pipeline deterministic under a fixed seed. Broadcast messages carry poses
only, never factors.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.spatial

from .errors import DuplicateSubmapError, GraphValidationError, SolverError
from .optimizer import OptimizationProblem, SolveReport, solve
from .pose_graph import (
    DEFAULT_ODOMETRY_INFORMATION,
    LOOP_CLOSURE,
    ODOMETRY,
    PoseEdge,
    PoseNode,
    keyframe_indices,
)
from .se3 import MetricWeights, Pose, Twist, exp_map, relative, sigma_for_boundary_weight
from .spectral import build_graph, kron_reduce, reduced_node_count

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# data types
# ---------------------------------------------------------------------------

@dataclass
class Submap:
    robot_id: int
    submap_id: int
    nodes: list[PoseNode]

    def __post_init__(self):
        if not self.nodes:
            raise GraphValidationError("submap must contain at least one node")
        stamps = [n.stamp for n in self.nodes]
        if any(b <= a for a, b in zip(stamps[:-1], stamps[1:])):
            raise GraphValidationError("submap node stamps must increase")

    @property
    def entry_stamp(self) -> float:
        return self.nodes[0].stamp

    @property
    def exit_stamp(self) -> float:
        return self.nodes[-1].stamp


@dataclass
class GlobalGraphMessage:
    version: int
    nodes: list[PoseNode]

    @property
    def node_count(self) -> int:
        return len(self.nodes)


def save_message(message: GlobalGraphMessage, path) -> None:
    """JSON-lines form: a header line, then one record per node."""
    with open(path, "w") as f:
        f.write(json.dumps({"version": message.version, "node_count": message.node_count}) + "\n")
        for n in message.nodes:
            t = n.pose.translation
            q = n.pose.rotation
            f.write(json.dumps({
                "id": n.node_id, "robot": n.robot_id, "submap": n.submap_id,
                "t": n.stamp,
                "x": t[0], "y": t[1], "z": t[2],
                "qx": q[0], "qy": q[1], "qz": q[2], "qw": q[3],
            }) + "\n")


def load_message(path) -> GlobalGraphMessage:
    with open(path) as f:
        header = json.loads(f.readline())
        nodes = []
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            pose = Pose(
                np.array([rec["qx"], rec["qy"], rec["qz"], rec["qw"]]),
                np.array([rec["x"], rec["y"], rec["z"]]),
                rec["t"],
            )
            nodes.append(PoseNode(rec["id"], rec["robot"], rec["submap"], pose, rec["t"]))
    if len(nodes) != header["node_count"]:
        raise GraphValidationError(
            f"header announces {header['node_count']} nodes, file has {len(nodes)}"
        )
    return GlobalGraphMessage(header["version"], nodes)


class MessageBus:
    """Latest-wins per-robot mailboxes for broadcast messages."""

    def __init__(self):
        self._latest: GlobalGraphMessage | None = None

    def broadcast(self, message: GlobalGraphMessage) -> None:
        self._latest = message

    def latest(self) -> GlobalGraphMessage | None:
        return self._latest


# ---------------------------------------------------------------------------
# server configuration and state
# ---------------------------------------------------------------------------

@dataclass
class ServerConfig:
    radius: float = 7.0
    sigma: float | None = None
    translation_weight: float = 1.0
    rotation_weight: float = 1.0
    keyframe_min_dist: float = 0.5
    keyframe_min_rot: float = 0.2618       # 15 degrees
    closure_radius: float = 2.0
    closure_noise_trans: float = 0.0
    closure_noise_rot: float = 0.0
    dwell_gap: float = 10.0
    reduction_threshold: int = 500
    reduction_fraction: float = 0.0
    max_iters: int = 50
    lambda_init: float = 1e-4

    def weights(self) -> MetricWeights:
        return MetricWeights(self.translation_weight, self.rotation_weight)

    def resolved_sigma(self) -> float:
        if self.sigma is not None:
            return self.sigma
        return sigma_for_boundary_weight(self.radius)


@dataclass
class ServerState:
    config: ServerConfig = field(default_factory=ServerConfig)
    seed: int = 0
    problem: OptimizationProblem = field(default_factory=OptimizationProblem)
    node_meta: dict[int, PoseNode] = field(default_factory=dict)
    ingested: set[tuple[int, int]] = field(default_factory=set)
    last_node_of_robot: dict[int, int] = field(default_factory=dict)
    closed_node_pairs: set[tuple[int, int]] = field(default_factory=set)
    version: int = 0
    last_message: GlobalGraphMessage | None = None
    last_report: SolveReport | None = None
    solve_failed: bool = False

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def ingest_submap(state: ServerState, submap: Submap) -> ServerState:
    """Append one robot submap with odometry factors; anchor a robot's first node."""
    key = (submap.robot_id, submap.submap_id)
    if key in state.ingested:
        raise DuplicateSubmapError(f"submap {key} was already ingested")
    state.ingested.add(key)

    prev_id = state.last_node_of_robot.get(submap.robot_id)
    for n in submap.nodes:
        state.problem.add_variable(n.node_id, n.pose, anchored=prev_id is None)
        state.node_meta[n.node_id] = n
        if prev_id is not None:
            measurement = relative(state.node_meta[prev_id].pose, n.pose)
            state.problem.add_factor(
                PoseEdge(prev_id, n.node_id, ODOMETRY, measurement,
                         DEFAULT_ODOMETRY_INFORMATION)
            )
        prev_id = n.node_id
    state.last_node_of_robot[submap.robot_id] = prev_id
    return state


def detect_loop_closures(
    state: ServerState,
    ground_truth: dict[int, Pose],
    radius_lc: float,
    noise_trans: float = 0.0,
    noise_rot: float = 0.0,
) -> list[PoseEdge]:
    """Oracle closures: node pairs truly close in space but far apart in time.

    Each call (one server cycle) emits at most one closure per
    (submap, submap) pair: the spatially closest candidate whose node pair is
    not already connected. Measurements are the true relative pose perturbed
    by seeded twist noise.
    """
    node_ids = sorted(i for i in state.node_meta if i in ground_truth)
    if len(node_ids) < 2:
        return []
    positions = np.array([ground_truth[i].translation for i in node_ids])
    tree = scipy.spatial.cKDTree(positions)
    raw_pairs = sorted(tree.query_pairs(radius_lc))
    best: dict[tuple, tuple] = {}
    for a, b in raw_pairs:
        ia, ib = node_ids[a], node_ids[b]
        if (ia, ib) in state.closed_node_pairs:
            continue
        na, nb = state.node_meta[ia], state.node_meta[ib]
        if abs(na.stamp - nb.stamp) <= state.config.dwell_gap:
            continue
        sa = (na.robot_id, na.submap_id)
        sb = (nb.robot_id, nb.submap_id)
        if sa == sb:
            continue
        key = (sa, sb) if sa < sb else (sb, sa)
        dist = float(np.linalg.norm(positions[a] - positions[b]))
        if key not in best or (dist, ia, ib) < best[key][:3]:
            best[key] = (dist, ia, ib)
    edges = []
    for key in sorted(best):
        _, ia, ib = best[key]
        state.closed_node_pairs.add((ia, ib))
        true_rel = relative(ground_truth[ia], ground_truth[ib])
        noise = Twist(
            state.rng.normal(0.0, noise_trans, 3) if noise_trans > 0 else np.zeros(3),
            state.rng.normal(0.0, noise_rot, 3) if noise_rot > 0 else np.zeros(3),
        )
        measurement = true_rel.compose(exp_map(noise))
        edges.append(PoseEdge(ia, ib, LOOP_CLOSURE, measurement, DEFAULT_ODOMETRY_INFORMATION))
    return edges


def _representative_nodes(state: ServerState, variables: dict[int, Pose]) -> list[PoseNode]:
    """Keyframed optimized nodes per robot, merged in (robot, stamp) order."""
    cfg = state.config
    by_robot: dict[int, list[PoseNode]] = {}
    for node_id in sorted(state.node_meta):
        meta = state.node_meta[node_id]
        pose = variables[node_id].with_stamp(meta.stamp)
        by_robot.setdefault(meta.robot_id, []).append(
            PoseNode(node_id, meta.robot_id, meta.submap_id, pose, meta.stamp)
        )
    reps: list[PoseNode] = []
    for robot_id in sorted(by_robot):
        nodes = sorted(by_robot[robot_id], key=lambda n: n.stamp)
        idx = keyframe_indices([n.pose for n in nodes], cfg.keyframe_min_dist, cfg.keyframe_min_rot)
        reps.extend(nodes[i] for i in idx)
    return reps


def _rebalance_anchors(problem: OptimizationProblem) -> None:
    """Keep exactly one anchor (lowest anchored id) per connected component.

    Loop closures merge the per-robot components; the extra gauge anchors
    must be released or the merged component would be over-constrained.
    """
    new_anchors: set[int] = set()
    for comp in problem.components():
        anchored = sorted(comp & problem.anchors)
        new_anchors.add(anchored[0] if anchored else min(comp))
    problem.anchors = new_anchors


def server_cycle(
    state: ServerState,
    new_submaps: list[Submap],
    ground_truth: dict[int, Pose],
) -> tuple[ServerState, GlobalGraphMessage]:
    """One full server iteration: ingest, close loops, optimize, build, reduce, broadcast.

    On solver failure the previous message is re-broadcast unchanged and the
    failure is flagged on the state.
    """
    cfg = state.config
    for sm in new_submaps:
        ingest_submap(state, sm)
    closures = detect_loop_closures(
        state, ground_truth, cfg.closure_radius, cfg.closure_noise_trans, cfg.closure_noise_rot
    )
    for e in closures:
        state.problem.add_factor(e)
    if state.problem.variables:
        _rebalance_anchors(state.problem)

    try:
        variables, report = solve(
            state.problem, max_iters=cfg.max_iters, lambda_init=cfg.lambda_init
        )
        state.problem.variables = variables
        state.last_report = report
        state.solve_failed = False
    except SolverError as exc:
        log.warning("server solve failed: %s; re-broadcasting version %d", exc, state.version)
        state.solve_failed = True
        if state.last_message is not None:
            return state, state.last_message
        raise

    reps = _representative_nodes(state, state.problem.variables)
    if cfg.reduction_fraction > 0.0 and len(reps) > cfg.reduction_threshold and len(reps) > 2:
        keep = reduced_node_count(len(reps), cfg.reduction_fraction)
        graph = build_graph(reps, cfg.radius, cfg.resolved_sigma(), cfg.weights())
        reduced = kron_reduce(graph, keep)
        reps = sorted(reduced.nodes, key=lambda n: (n.robot_id, n.stamp, n.node_id))

    state.version += 1
    message = GlobalGraphMessage(state.version, reps)
    state.last_message = message
    return state, message
