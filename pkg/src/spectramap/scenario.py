"""Scenario configuration, deterministic mission simulation, and reporting.

A scenario runs a fixed 10 Hz clock: robots integrate noisy odometry along
scripted ground-truth paths (optionally corrupted by drift or degeneracy
windows), cut keyframed submaps for the mapping server, and periodically run
the spectral comparison against the latest broadcast graph, batching the
resulting corrections into their onboard optimization. Everything is seeded;
the same seed reproduces the report byte for byte.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import tomli

from .consistency import ConsistencyConfig, ConsistencyEngine
from .errors import ConfigError, SolverError
from .optimizer import OptimizationProblem, apply_batch
from .pose_graph import (
    DEFAULT_ODOMETRY_INFORMATION,
    ODOMETRY,
    PoseEdge,
    PoseNode,
    Trajectory,
    ate_rmse,
    inject_degeneracy,
    inject_drift,
    integrate_motion_arrays,
    keyframe_indices,
    load_tum,
    save_tum,
)
from .se3 import Pose, Twist, compose_arrays, exp_map, exp_map_batch, relative
from .server import GlobalGraphMessage, MessageBus, ServerConfig, ServerState, Submap, server_cycle


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class PathConfig:
    kind: str = "circle"            # circle | lawnmower | corridor | file
    speed: float = 0.8              # m/s
    turn_rate: float = 1.2          # rad/s for in-place turns
    radius: float = 18.0            # circle radius
    phase: float = 0.0              # circle start angle
    center: tuple[float, float] = (0.0, 0.0)
    length: float = 40.0            # corridor length
    rows: int = 4                   # lawnmower rows
    row_length: float = 30.0
    row_spacing: float = 5.0
    file: str = ""                  # TUM file for kind == "file"


@dataclass
class DriftConfig:
    robot: int
    start: float
    end: float
    bias_rho: tuple[float, float, float] = (0.0, 0.0, 0.0)
    bias_phi: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass
class DegeneracyConfig:
    robot: int
    start: float
    end: float
    axis: tuple[float, float, float] = (1.0, 0.0, 0.0)
    beta: float = 0.0


@dataclass
class ScenarioConfig:
    seed: int
    robots: int = 2
    duration: float = 600.0
    tick_hz: float = 10.0
    keyframe_min_dist: float = 1.0
    keyframe_min_rot: float = 0.2618
    keyframe_max_gap: float = 0.0   # <= 0 disables; else force a node every max_gap s
    odom_trans_std: float = 0.005
    odom_rot_std: float = 0.001
    paths: list[PathConfig] = field(default_factory=list)
    drifts: list[DriftConfig] = field(default_factory=list)
    degeneracies: list[DegeneracyConfig] = field(default_factory=list)
    submap_period: float = 30.0
    server_period: float = 20.0
    comparison_period: float = 20.0
    consistency: ConsistencyConfig = field(default_factory=ConsistencyConfig)
    server: ServerConfig = field(default_factory=ServerConfig)

    def validate(self) -> None:
        if self.seed is None:
            raise ConfigError("mission.seed is required")
        if self.robots < 1:
            raise ConfigError("mission.robots must be at least 1")
        for name in ("duration", "tick_hz", "submap_period", "server_period", "comparison_period"):
            if getattr(self, name) <= 0.0:
                raise ConfigError(f"mission.{name} must be positive")
        if len(self.paths) != self.robots:
            raise ConfigError(
                f"need one [[path]] per robot: {self.robots} robots, {len(self.paths)} paths"
            )
        for i, p in enumerate(self.paths):
            if p.kind not in ("circle", "lawnmower", "corridor", "file"):
                raise ConfigError(f"path[{i}].kind {p.kind!r} unknown")
            if p.kind == "file" and not p.file:
                raise ConfigError(f"path[{i}].file is required for kind = 'file'")
        for i, d in enumerate(self.drifts):
            if not 0 <= d.robot < self.robots:
                raise ConfigError(f"drift[{i}].robot out of range")
            if d.start >= d.end:
                raise ConfigError(f"drift[{i}] window must satisfy start < end")
        for i, d in enumerate(self.degeneracies):
            if not 0 <= d.robot < self.robots:
                raise ConfigError(f"degeneracy[{i}].robot out of range")
            if not 0.0 <= d.beta < 1.0:
                raise ConfigError(f"degeneracy[{i}].beta must lie in [0, 1)")

    def to_dict(self) -> dict:
        def clean(value):
            if isinstance(value, dict):
                return {k: clean(v) for k, v in value.items()}
            if isinstance(value, (list, tuple)):
                return [clean(v) for v in value]
            if isinstance(value, (np.floating, np.integer)):
                return value.item()
            return value

        return clean(dataclasses.asdict(self))


def _section(data: dict, name: str) -> dict:
    value = data.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(f"section [{name}] must be a table")
    return value


def _apply(obj, section: dict, prefix: str, renames: dict[str, str] | None = None):
    renames = renames or {}
    valid = {f.name for f in dataclasses.fields(obj)}
    for key, value in section.items():
        attr = renames.get(key, key)
        if attr not in valid:
            raise ConfigError(f"unknown key {prefix}.{key}")
        if isinstance(value, list):
            value = tuple(value)
        setattr(obj, attr, value)
    return obj


def load_config(path) -> ScenarioConfig:
    with open(path, "rb") as f:
        data = tomli.load(f)
    mission = _section(data, "mission")
    if "seed" not in mission:
        raise ConfigError("mission.seed is required")
    cfg = ScenarioConfig(seed=int(mission["seed"]))
    _apply(cfg, {k: v for k, v in mission.items() if k != "seed"}, "mission")
    noise = _section(data, "noise")
    _apply(cfg, {f"odom_{k}": v for k, v in noise.items()}, "noise")

    graph = _section(data, "graph")
    for key in ("radius", "sigma", "translation_weight", "rotation_weight"):
        if key in graph:
            setattr(cfg.consistency, key, graph[key])
            setattr(cfg.server, key, graph[key])
    if "num_scales" in graph:
        cfg.consistency.num_scales = int(graph["num_scales"])

    cons = _section(data, "consistency")
    if "period" in cons:
        cfg.comparison_period = float(cons.pop("period"))
    _apply(cfg.consistency, cons, "consistency",
           renames={"information_scale": "correction_information_scale"})

    server = _section(data, "server")
    if "submap_period" in server:
        cfg.submap_period = float(server.pop("submap_period"))
    if "cycle_period" in server:
        cfg.server_period = float(server.pop("cycle_period"))
    _apply(cfg.server, server, "server")

    optimizer = _section(data, "optimizer")
    for key in ("max_iters", "lambda_init"):
        if key in optimizer:
            setattr(cfg.server, key, optimizer[key])

    cfg.paths = [
        _apply(PathConfig(), p, f"path[{i}]") for i, p in enumerate(data.get("path", []))
    ]
    cfg.drifts = [
        _apply(DriftConfig(robot=0, start=0.0, end=1.0), d, f"drift[{i}]")
        for i, d in enumerate(data.get("drift", []))
    ]
    cfg.degeneracies = [
        _apply(DegeneracyConfig(robot=0, start=0.0, end=1.0), d, f"degeneracy[{i}]")
        for i, d in enumerate(data.get("degeneracy", []))
    ]
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# ground-truth path generators
# ---------------------------------------------------------------------------

def _wrap_angle(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def circle_path(cfg: PathConfig, duration: float, tick_hz: float) -> Trajectory:
    n = int(round(duration * tick_hz)) + 1
    stamps = np.arange(n) / tick_hz
    omega = cfg.speed / cfg.radius
    theta = cfg.phase + omega * stamps
    cx, cy = cfg.center
    poses = [
        Pose.from_yaw(
            th + 0.5 * math.pi,
            (cx + cfg.radius * math.cos(th), cy + cfg.radius * math.sin(th), 0.0),
            stamp=t,
        )
        for th, t in zip(theta, stamps)
    ]
    return Trajectory(stamps, poses)


def waypoint_path(
    waypoints: list[tuple[float, float]],
    duration: float,
    tick_hz: float,
    speed: float,
    turn_rate: float,
) -> Trajectory:
    """Unicycle walking a cyclic waypoint list: turn in place, then drive."""
    dt = 1.0 / tick_hz
    n = int(round(duration * tick_hz)) + 1
    x, y = waypoints[0]
    target_idx = 1
    tx, ty = waypoints[target_idx]
    yaw = math.atan2(ty - y, tx - x)
    stamps = np.arange(n) / tick_hz
    poses = [Pose.from_yaw(yaw, (x, y, 0.0), 0.0)]
    for k in range(1, n):
        remaining = speed * dt
        for _ in range(4):  # a tick can finish a segment and start the next
            dx, dy = tx - x, ty - y
            dist = math.hypot(dx, dy)
            if dist < 1e-9:
                target_idx = (target_idx + 1) % len(waypoints)
                tx, ty = waypoints[target_idx]
                continue
            desired = math.atan2(dy, dx)
            dyaw = _wrap_angle(desired - yaw)
            if abs(dyaw) > 1e-9:
                step = max(-turn_rate * dt, min(turn_rate * dt, dyaw))
                yaw = _wrap_angle(yaw + step)
                break  # turning consumes the tick
            advance = min(remaining, dist)
            x += advance * math.cos(yaw)
            y += advance * math.sin(yaw)
            remaining -= advance
            if remaining <= 1e-12:
                break
        poses.append(Pose.from_yaw(yaw, (x, y, 0.0), stamps[k]))
    return Trajectory(stamps, poses)


def corridor_path(cfg: PathConfig, duration: float, tick_hz: float) -> Trajectory:
    waypoints = [cfg.center, (cfg.center[0] + cfg.length, cfg.center[1])]
    return waypoint_path(waypoints, duration, tick_hz, cfg.speed, cfg.turn_rate)


def lawnmower_path(cfg: PathConfig, duration: float, tick_hz: float) -> Trajectory:
    cx, cy = cfg.center
    waypoints = []
    for row in range(cfg.rows):
        y = cy + row * cfg.row_spacing
        if row % 2 == 0:
            waypoints += [(cx, y), (cx + cfg.row_length, y)]
        else:
            waypoints += [(cx + cfg.row_length, y), (cx, y)]
    return waypoint_path(waypoints, duration, tick_hz, cfg.speed, cfg.turn_rate)


def make_path(cfg: PathConfig, duration: float, tick_hz: float) -> Trajectory:
    if cfg.kind == "circle":
        return circle_path(cfg, duration, tick_hz)
    if cfg.kind == "corridor":
        return corridor_path(cfg, duration, tick_hz)
    if cfg.kind == "lawnmower":
        return lawnmower_path(cfg, duration, tick_hz)
    if cfg.kind == "file":
        return load_tum(cfg.file)
    raise ConfigError(f"unknown path kind {cfg.kind!r}")


# ---------------------------------------------------------------------------
# odometry synthesis
# ---------------------------------------------------------------------------

def integrate_noisy_odometry(
    ground_truth: Trajectory, rng: np.random.Generator, trans_std: float, rot_std: float
) -> Trajectory:
    """Integrate the true relative motions with additive twist noise per tick."""
    rel_q, rel_t = ground_truth.motion_arrays()
    if trans_std > 0.0 or rot_std > 0.0:
        n = rel_q.shape[0]
        xi = np.concatenate(
            [rng.normal(0.0, trans_std, (n, 3)), rng.normal(0.0, rot_std, (n, 3))], axis=1
        )
        nq, nt = exp_map_batch(xi)
        rel_q, rel_t = compose_arrays(rel_q, rel_t, nq, nt)
    return integrate_motion_arrays(
        ground_truth.poses[0], rel_q, rel_t, ground_truth.stamps
    )


def _supplement_time_gaps(stamps: np.ndarray, ticks: list[int], max_gap: float) -> list[int]:
    """Insert extra keyframe ticks so consecutive keyframes are at most max_gap apart.

    Keeps a stalled estimator (e.g. a fully degenerate axis) producing nodes,
    which is what lets the comparison localize the failure while it happens.
    """
    if max_gap <= 0.0 or not ticks:
        return list(ticks)
    dt = float(stamps[1] - stamps[0]) if len(stamps) > 1 else 1.0
    step = max(1, int(round(max_gap / dt)))
    keyframes = set(ticks)
    out = [ticks[0]]
    for t in range(ticks[0] + 1, len(stamps)):
        if t in keyframes or t - out[-1] >= step:
            out.append(t)
    return out


# ---------------------------------------------------------------------------
# simulation loop
# ---------------------------------------------------------------------------

@dataclass
class RobotRun:
    robot_id: int
    keyframe_ticks: list[int]
    node_ids: list[int]
    ground_truth: Trajectory
    onboard: Trajectory
    problem: OptimizationProblem
    engine: ConsistencyEngine
    submap_of: dict[int, int] = field(default_factory=dict)

    def current_nodes(self, now: float) -> list[PoseNode]:
        """Keyframes known at time `now`, at their current optimized estimates."""
        out = []
        for tick, node_id in zip(self.keyframe_ticks, self.node_ids):
            stamp = float(self.onboard.stamps[tick])
            if stamp > now:
                break
            pose = self.problem.variables[node_id].with_stamp(stamp)
            out.append(PoseNode(node_id, self.robot_id, self.submap_of[node_id], pose, stamp))
        return out

    def keyframe_stamps(self) -> np.ndarray:
        return self.onboard.stamps[self.keyframe_ticks]


@dataclass
class RunReport:
    config: dict
    robots: dict[str, dict]
    totals: dict
    broadcasts: list[dict]
    constraints: list[dict]
    events: list[dict]
    trajectories: dict[str, dict[str, Trajectory]]

    def summary_dict(self) -> dict:
        return {
            "config": self.config,
            "robots": self.robots,
            "totals": self.totals,
            "broadcasts": self.broadcasts,
        }


def run_scenario(config: ScenarioConfig) -> RunReport:
    config.validate()
    seed_seq = np.random.SeedSequence(config.seed)
    children = seed_seq.spawn(config.robots + 1)
    robot_rngs = [np.random.default_rng(s) for s in children[:-1]]

    # precompute per-robot trajectories (ground truth, then corrupted odometry)
    robots: list[RobotRun] = []
    ground_truth_by_node: dict[int, Pose] = {}
    next_node_id = 0
    for r in range(config.robots):
        gt = make_path(config.paths[r], config.duration, config.tick_hz)
        onboard = integrate_noisy_odometry(
            gt, robot_rngs[r], config.odom_trans_std, config.odom_rot_std
        )
        for d in config.drifts:
            if d.robot == r:
                bias = Twist(np.asarray(d.bias_rho, float), np.asarray(d.bias_phi, float))
                onboard = inject_drift(onboard, d.start, d.end, bias)
        for d in config.degeneracies:
            if d.robot == r:
                onboard = inject_degeneracy(
                    onboard, d.start, d.end, np.asarray(d.axis, float), d.beta
                )
        ticks = keyframe_indices(
            onboard.poses, config.keyframe_min_dist, config.keyframe_min_rot
        )
        ticks = _supplement_time_gaps(onboard.stamps, ticks, config.keyframe_max_gap)
        node_ids = list(range(next_node_id, next_node_id + len(ticks)))
        next_node_id += len(ticks)

        problem = OptimizationProblem()
        submap_of: dict[int, int] = {}
        prev = None
        for tick, node_id in zip(ticks, node_ids):
            stamp = float(onboard.stamps[tick])
            pose = onboard.poses[tick]
            problem.add_variable(node_id, pose, anchored=prev is None)
            submap_of[node_id] = int(stamp // config.submap_period)
            ground_truth_by_node[node_id] = gt.poses[tick]
            if prev is not None:
                problem.add_factor(
                    PoseEdge(prev, node_id, ODOMETRY,
                             relative(problem.variables[prev], pose),
                             DEFAULT_ODOMETRY_INFORMATION)
                )
            prev = node_id
        robots.append(RobotRun(
            robot_id=r,
            keyframe_ticks=ticks,
            node_ids=node_ids,
            ground_truth=gt,
            onboard=onboard,
            problem=problem,
            engine=ConsistencyEngine(r, dataclasses.replace(config.consistency)),
            submap_of=submap_of,
        ))

    server_state = ServerState(config=dataclasses.replace(config.server), seed=children[-1])
    bus = MessageBus()

    events: list[dict] = []
    broadcasts: list[dict] = []
    constraints: list[dict] = []
    census_totals = {"adjacent": 0, "n_hop": 0, "submap": 0}
    sent_submaps: dict[int, int] = {r.robot_id: 0 for r in robots}  # next submap id to send

    def collect_submaps(now: float) -> list[Submap]:
        # a submap covers [sid*P, (sid+1)*P) and ships once its window has passed
        out = []
        for run in robots:
            while (sent_submaps[run.robot_id] + 1) * config.submap_period <= now + 1e-9:
                sid = sent_submaps[run.robot_id]
                nodes = [
                    PoseNode(node_id, run.robot_id, sid,
                             run.onboard.poses[tick], float(run.onboard.stamps[tick]))
                    for tick, node_id in zip(run.keyframe_ticks, run.node_ids)
                    if run.submap_of[node_id] == sid
                ]
                sent_submaps[run.robot_id] += 1
                if nodes:
                    out.append(Submap(run.robot_id, sid, nodes))
        return out

    # event timeline: server cycles and comparison cycles on the shared clock
    server_times = {
        round(k * config.server_period, 9)
        for k in range(1, int(config.duration / config.server_period + 1e-9) + 1)
    }
    comparison_times = {
        round(k * config.comparison_period, 9)
        for k in range(1, int(config.duration / config.comparison_period + 1e-9) + 1)
    }
    comparison_count = 0
    for now in sorted(server_times | comparison_times):
        if now in server_times:
            submaps = collect_submaps(now)
            _, message = server_cycle(server_state, submaps, ground_truth_by_node)
            bus.broadcast(message)
            broadcasts.append({"t": now, "version": message.version, "node_count": message.node_count})
            if server_state.last_report is not None:
                events.append({"event": "server_solve", "t": now,
                               **server_state.last_report.to_dict()})
        if now in comparison_times:
            message = bus.latest()
            if message is None:
                continue
            comparison_count += 1
            for run in robots:
                onboard_nodes = run.current_nodes(now)
                edges = run.engine.run_comparison_cycle(message, onboard_nodes, now=now)
                stats = run.engine.last_stats
                events.append({
                    "event": "comparison", "t": now, "robot": run.robot_id,
                    "cycle": stats.cycle, "version": stats.version,
                    "synchronized": stats.synchronized, "census": stats.census,
                    "added": stats.added, "updated": stats.updated,
                    "skipped": stats.skipped, "scores": stats.scores,
                })
                if stats.skipped is None:
                    ledger = run.engine.ledger
                    emitted = list(stats.census.items())
                    for kind, count in emitted:
                        census_totals[kind] += count
                    for key, entry in sorted(ledger.entries.items()):
                        if entry.applied_at == now:
                            c = entry.candidate
                            constraints.append({
                                "cycle": stats.cycle, "t": now, "robot": run.robot_id,
                                "kind": c.kind, "node": c.node_id,
                                "scale_band": c.scale_band, "score": c.score,
                                "from": c.from_id, "to": c.to_id,
                            })
                if edges:
                    try:
                        run.problem, report = apply_batch(run.problem, edges)
                    except SolverError as exc:
                        events.append({"event": "onboard_solve_failed", "t": now,
                                       "robot": run.robot_id, "error": str(exc)})
                        continue
                    if report is not None:
                        events.append({"event": "onboard_solve", "t": now,
                                       "robot": run.robot_id, **report.to_dict()})

    # final evaluation
    robots_out: dict[str, dict] = {}
    trajectories: dict[str, dict[str, Trajectory]] = {}
    final_message = bus.latest()
    for run in robots:
        stamps = run.keyframe_stamps()
        gt_traj = Trajectory(stamps, [run.ground_truth.poses[t] for t in run.keyframe_ticks])
        onboard_traj = Trajectory(stamps, [run.onboard.poses[t] for t in run.keyframe_ticks])
        corrected_traj = Trajectory(
            stamps,
            [run.problem.variables[nid].with_stamp(s)
             for nid, s in zip(run.node_ids, stamps)],
        )
        entry = {
            "onboard_rmse": ate_rmse(onboard_traj, gt_traj, align=False),
            "corrected_rmse": ate_rmse(corrected_traj, gt_traj, align=False),
            "keyframes": len(run.node_ids),
            "constraints_applied": len(run.engine.ledger),
        }
        if len(run.node_ids) >= 3:
            entry["onboard_rmse_aligned"] = ate_rmse(onboard_traj, gt_traj, align=True)
            entry["corrected_rmse_aligned"] = ate_rmse(corrected_traj, gt_traj, align=True)
        if final_message is not None:
            server_nodes = sorted(
                (n for n in final_message.nodes if n.robot_id == run.robot_id),
                key=lambda n: n.stamp,
            )
            if len(server_nodes) >= 2:
                server_traj = Trajectory(
                    np.array([n.stamp for n in server_nodes]),
                    [n.pose for n in server_nodes],
                )
                entry["server_rmse"] = ate_rmse(server_traj, gt_traj, align=False)
            else:
                entry["server_rmse"] = None
        else:
            entry["server_rmse"] = None
        robots_out[str(run.robot_id)] = entry
        trajectories[str(run.robot_id)] = {
            "ground_truth": gt_traj,
            "onboard": onboard_traj,
            "corrected": corrected_traj,
        }

    totals = {
        "constraints": len(constraints),
        "census": census_totals,
        "comparison_cycles": comparison_count,
        "broadcast_count": len(broadcasts),
    }
    return RunReport(
        config=config.to_dict(),
        robots=robots_out,
        totals=totals,
        broadcasts=broadcasts,
        constraints=constraints,
        events=events,
        trajectories=trajectories,
    )


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------

def emit_report(report: RunReport, out_dir) -> None:
    """Write report.json, events.jsonl, CSVs, and per-robot TUM trajectories.

    Overwrites deterministically: the same report yields the same bytes.
    """
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w") as f:
        json.dump(report.summary_dict(), f, sort_keys=True, indent=1)
        f.write("\n")
    with open(os.path.join(out_dir, "events.jsonl"), "w") as f:
        for e in report.events:
            f.write(json.dumps(e, sort_keys=True) + "\n")
    with open(os.path.join(out_dir, "constraints.csv"), "w") as f:
        f.write("cycle,robot,kind,node,scale_band,score\n")
        for c in report.constraints:
            f.write(f"{c['cycle']},{c['robot']},{c['kind']},{c['node']},"
                    f"{c['scale_band']},{c['score']!r}\n")
    with open(os.path.join(out_dir, "broadcast_sizes.csv"), "w") as f:
        f.write("t,version,node_count\n")
        for b in report.broadcasts:
            f.write(f"{b['t']!r},{b['version']},{b['node_count']}\n")
    for robot_id, trajs in report.trajectories.items():
        for name, traj in trajs.items():
            save_tum(traj, os.path.join(out_dir, f"{name}_robot{robot_id}.tum"))


def eval_trajectories(est_path, gt_path, align: bool = False, tolerance: float = 0.05) -> float:
    """ATE RMSE between two TUM trajectory files."""
    est = load_tum(est_path)
    gt = load_tum(gt_path)
    return ate_rmse(est, gt, align=align, tolerance=tolerance)
