"""Robot-side consistency engine.

Synchronizes the broadcast global graph with the onboard estimate, compares
both as signals on the (synchronized) global graph through a Meyer wavelet
bank, ranks the per-node per-scale coefficient distances, and turns the top
entries into relative SE(3) correction constraints. A ledger keeps the
history of applied constraints so re-detections only update when the
measurement moved.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .pose_graph import (
    CORRECTION,
    DEFAULT_ODOMETRY_INFORMATION,
    PoseEdge,
    PoseNode,
    associate_stamps,
)
from .se3 import (
    MetricWeights,
    Pose,
    relative,
    relative_arrays,
    rotation_geodesic,
    se3_distances,
    sigma_for_boundary_weight,
    stack_poses,
)
from .spectral import (
    build_graph,
    decompose,
    laplacian,
    make_meyer_bank,
    wavelet_coefficients,
    WaveletCoefficients,
)

log = logging.getLogger(__name__)

ADJACENT = "adjacent"
N_HOP = "n_hop"
SUBMAP = "submap"

_ZERO_SCORE = 1e-12


# ---------------------------------------------------------------------------
# synchronization and signals
# ---------------------------------------------------------------------------

@dataclass
class SyncMap:
    """One-to-one (server_node_id, onboard_node_id) pairs, sync order = time order."""

    pairs: list[tuple[int, int]]
    tolerance: float

    def __len__(self) -> int:
        return len(self.pairs)


def synchronize(
    server_nodes: list[PoseNode], onboard_nodes: list[PoseNode], tolerance: float
) -> SyncMap:
    """Greedy nearest-timestamp one-to-one matching; unmatched nodes are dropped."""
    server_stamps = np.array([n.stamp for n in server_nodes])
    onboard_stamps = np.array([n.stamp for n in onboard_nodes])
    if np.any(np.diff(server_stamps) < 0.0) or np.any(np.diff(onboard_stamps) < 0.0):
        raise ParameterError("node lists must be timestamp-sorted")
    idx_pairs = associate_stamps(server_stamps, onboard_stamps, tolerance)
    pairs = [(server_nodes[i].node_id, onboard_nodes[j].node_id) for i, j in idx_pairs]
    return SyncMap(pairs, tolerance)


@dataclass
class GraphSignal:
    """Non-negative scalar per node: pose distance from the map origin."""

    values: np.ndarray
    origin_node_id: int


def build_signal(
    nodes: list[PoseNode],
    origin: Pose | None = None,
    weights: MetricWeights = MetricWeights(),
) -> GraphSignal:
    """Distance-from-origin signal; defaults to the first node as origin.

    Because the pose distance is left-invariant, the signal only depends on
    the map expressed in its own frame, never on the world frame.
    """
    if not nodes:
        raise ParameterError("cannot build a signal over zero nodes")
    if origin is None:
        origin = nodes[0].pose
        origin_id = nodes[0].node_id
    else:
        origin_id = -1
        for n in nodes:
            if n.pose.is_close(origin, tol=1e-12):
                origin_id = n.node_id
                break
    values = se3_distances([origin] * len(nodes), [n.pose for n in nodes], weights)
    values[np.abs(values) < 1e-15] = 0.0
    return GraphSignal(values, origin_id)


# ---------------------------------------------------------------------------
# scale-wise distances
# ---------------------------------------------------------------------------

@dataclass
class ScaleDistances:
    """N x (J+1) per-node, per-band coefficient distances (sync order rows)."""

    values: np.ndarray


def scale_distances(
    w_server: WaveletCoefficients, w_onboard: WaveletCoefficients, sync: SyncMap
) -> ScaleDistances:
    if w_server.values.shape != w_onboard.values.shape:
        raise ParameterError(
            f"coefficient shapes differ: {w_server.values.shape} vs {w_onboard.values.shape}"
        )
    if w_server.values.shape[0] != len(sync):
        raise ParameterError("coefficient rows must match the synchronized node count")
    return ScaleDistances(np.abs(w_server.values - w_onboard.values))


def accumulate_bands(distances: ScaleDistances) -> np.ndarray:
    """Sum of the per-band distances per node (optional multi-scale combination)."""
    return distances.values.sum(axis=1)


# ---------------------------------------------------------------------------
# band partition and constraint selection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BandPartition:
    """Maps wavelet-band columns to correction kinds.

    Column 0 is the scaling band; wavelet columns ascend from finest (1) to
    coarsest (J). The finest third is classified adjacent, the middle third
    n-hop, and the coarsest third plus the scaling band submap.
    """

    adjacent: tuple[int, ...]
    n_hop: tuple[int, ...]
    submap: tuple[int, ...]

    @classmethod
    def thirds(cls, num_scales: int) -> "BandPartition":
        if num_scales < 1:
            raise ParameterError("need at least one wavelet scale")
        fine = num_scales // 3 + (1 if num_scales % 3 >= 1 else 0)
        mid = num_scales // 3 + (1 if num_scales % 3 >= 2 else 0)
        cols = list(range(1, num_scales + 1))
        return cls(
            adjacent=tuple(cols[:fine]),
            n_hop=tuple(cols[fine:fine + mid]),
            submap=(0,) + tuple(cols[fine + mid:]),
        )

    def kind_of(self, band: int) -> str:
        if band in self.adjacent:
            return ADJACENT
        if band in self.n_hop:
            return N_HOP
        if band in self.submap:
            return SUBMAP
        raise ParameterError(f"band {band} is outside the partition")

    def fineness(self, band: int) -> int:
        """Tie-break rank: smaller is finer; scaling band is coarsest."""
        count = len(self.adjacent) + len(self.n_hop) + len(self.submap)
        return band if band >= 1 else count


@dataclass(frozen=True)
class ConstraintCandidate:
    kind: str
    from_id: int
    to_id: int
    measurement: Pose
    score: float
    scale_band: int
    node_id: int  # the onboard node whose coefficients triggered the candidate


def _submap_representatives(nodes: list[PoseNode]) -> dict[int, int]:
    """Submap id -> sync index of its first (earliest) node."""
    reps: dict[int, int] = {}
    for i, n in enumerate(nodes):
        if n.submap_id not in reps:
            reps[n.submap_id] = i
    return reps


def select_constraints(
    distances: ScaleDistances,
    k: int,
    partition: BandPartition,
    server_nodes: list[PoseNode],
    onboard_nodes: list[PoseNode],
    n_hop: int = 3,
    exclude_pairs: set[tuple[int, int]] | None = None,
) -> list[ConstraintCandidate]:
    """Top-k scale-distance entries turned into typed relative constraints.

    Entries are ranked by distance (ties: lower node id, then finer band) and
    deduplicated to one band per node. Classification follows the band
    partition; measurements always come from the server-side poses of the
    selected endpoint pair, expressed as from^-1 to. Endpoints are clamped at
    chain boundaries; a submap candidate degrades to n-hop when the graph
    holds a single submap. Pairs in ``exclude_pairs`` are skipped (the engine
    uses this to walk past constraints the ledger already holds).
    """
    if k < 1:
        raise ParameterError("k must be at least 1")
    if len(server_nodes) != len(onboard_nodes) or len(server_nodes) != distances.values.shape[0]:
        raise ParameterError("node lists must match the distance rows")
    d = distances.values
    n, bands = d.shape

    best_band = {}
    for i in range(n):
        candidates = [
            (-d[i, b], partition.fineness(b), b) for b in range(bands) if d[i, b] > _ZERO_SCORE
        ]
        if candidates:
            candidates.sort()
            best_band[i] = candidates[0][2]
    ranked = sorted(
        best_band.items(),
        key=lambda item: (-d[item[0], item[1]], onboard_nodes[item[0]].node_id,
                          partition.fineness(item[1])),
    )

    reps = _submap_representatives(onboard_nodes)
    last = n - 1
    picked: list[tuple[str, int, int, int, int]] = []  # kind, lo, hi, i, band
    seen_pairs: set[tuple[int, int]] = set(exclude_pairs or ())
    for i, band in ranked:
        if len(picked) >= k:
            break
        kind = partition.kind_of(band)
        if kind == SUBMAP and len(reps) < 2:
            kind = N_HOP
        if kind == ADJACENT:
            lo, hi = max(0, i - 1), min(last, i + 1)
        elif kind == N_HOP:
            lo, hi = max(0, i - n_hop), min(last, i + n_hop)
        else:
            own = onboard_nodes[i].submap_id
            own_rep = reps[own]
            own_pos = server_nodes[own_rep].pose.translation
            others = sorted(
                (s for s in reps if s != own),
                key=lambda s: (
                    float(np.linalg.norm(server_nodes[reps[s]].pose.translation - own_pos)),
                    s,
                ),
            )
            lo, hi = own_rep, reps[others[0]]
            if lo > hi:
                lo, hi = hi, lo
        if lo == hi:
            continue
        pair = (onboard_nodes[lo].node_id, onboard_nodes[hi].node_id)
        if pair in seen_pairs:
            continue
        seen_pairs.add(pair)
        picked.append((kind, lo, hi, i, band))
    if not picked:
        return []
    q_lo, t_lo = stack_poses([server_nodes[lo].pose for _, lo, _, _, _ in picked])
    q_hi, t_hi = stack_poses([server_nodes[hi].pose for _, _, hi, _, _ in picked])
    mq, mt = relative_arrays(q_lo, t_lo, q_hi, t_hi)
    return [
        ConstraintCandidate(
            kind=kind,
            from_id=onboard_nodes[lo].node_id,
            to_id=onboard_nodes[hi].node_id,
            measurement=Pose(mq[j], mt[j]),
            score=float(d[i, band]),
            scale_band=band,
            node_id=onboard_nodes[i].node_id,
        )
        for j, (kind, lo, hi, i, band) in enumerate(picked)
    ]


# ---------------------------------------------------------------------------
# ledger
# ---------------------------------------------------------------------------

@dataclass
class LedgerEntry:
    candidate: ConstraintCandidate
    applied_at: float


@dataclass
class ConstraintLedger:
    """History of applied constraints, at most one active per ordered pair."""

    entries: dict[tuple[int, int], LedgerEntry] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)


def ledger_apply(
    ledger: ConstraintLedger,
    candidates: list[ConstraintCandidate],
    trans_tol: float,
    rot_tol: float,
    applied_at: float = 0.0,
) -> tuple[list[ConstraintCandidate], list[ConstraintCandidate]]:
    """Split candidates into new constraints and measurable updates.

    A candidate whose pair is already in the ledger is re-emitted only when
    its measurement moved more than trans_tol or rot_tol; otherwise it is
    dropped. The ledger is updated in place with everything emitted.
    """
    to_add: list[ConstraintCandidate] = []
    to_update: list[ConstraintCandidate] = []
    for cand in candidates:
        key = (cand.from_id, cand.to_id)
        entry = ledger.entries.get(key)
        if entry is None:
            to_add.append(cand)
            ledger.entries[key] = LedgerEntry(cand, applied_at)
            continue
        delta = relative(entry.candidate.measurement, cand.measurement)
        moved_trans = float(np.linalg.norm(delta.translation)) > trans_tol
        moved_rot = delta.rotation_angle() > rot_tol
        if moved_trans or moved_rot:
            to_update.append(cand)
            ledger.entries[key] = LedgerEntry(cand, applied_at)
    return to_add, to_update


# ---------------------------------------------------------------------------
# full comparison cycle
# ---------------------------------------------------------------------------

@dataclass
class ConsistencyConfig:
    radius: float = 7.0
    sigma: float | None = None            # default: weight 0.1 at the radius
    translation_weight: float = 1.0
    rotation_weight: float = 1.0
    num_scales: int = 9
    top_k: int = 15
    n_hop: int = 3
    sync_tolerance: float = 0.05
    trans_tol: float = 0.1
    rot_tol: float = 0.05
    correction_information_scale: float = 0.5
    accumulate_scales: bool = False       # rank on the per-node band sum instead

    def weights(self) -> MetricWeights:
        return MetricWeights(self.translation_weight, self.rotation_weight)

    def resolved_sigma(self) -> float:
        if self.sigma is not None:
            return self.sigma
        return sigma_for_boundary_weight(self.radius)


@dataclass
class CycleStats:
    cycle: int
    robot_id: int
    version: int
    synchronized: int
    census: dict[str, int]
    added: int
    updated: int
    scores: list[float]
    skipped: str | None = None


class ConsistencyEngine:
    """Per-robot stateful wrapper: ledger, last processed version, cycle log."""

    def __init__(self, robot_id: int, config: ConsistencyConfig | None = None):
        self.robot_id = robot_id
        self.config = config or ConsistencyConfig()
        self.ledger = ConstraintLedger()
        self.last_version = -1
        self.cycle_count = 0
        self.last_stats: CycleStats | None = None

    def _stats(self, version: int, synchronized: int, emitted, added, updated, skipped=None):
        census = {ADJACENT: 0, N_HOP: 0, SUBMAP: 0}
        for c in emitted:
            census[c.kind] += 1
        self.last_stats = CycleStats(
            cycle=self.cycle_count,
            robot_id=self.robot_id,
            version=version,
            synchronized=synchronized,
            census=census,
            added=added,
            updated=updated,
            scores=[round(c.score, 12) for c in emitted],
            skipped=skipped,
        )

    def run_comparison_cycle(
        self, message, onboard_nodes: list[PoseNode], now: float = 0.0
    ) -> list[PoseEdge]:
        """One spectral comparison against a broadcast global graph.

        Returns the correction edges to batch into the onboard graph; an
        empty list when the message is stale, the overlap is empty, or the
        maps agree.
        """
        cfg = self.config
        if message.version <= self.last_version:
            self._stats(message.version, 0, [], 0, 0, skipped="stale message")
            return []
        self.last_version = message.version
        self.cycle_count += 1

        server_all = [n for n in message.nodes if n.robot_id == self.robot_id]
        sync = synchronize(server_all, onboard_nodes, cfg.sync_tolerance)
        if len(sync) < 2:
            self._stats(message.version, len(sync), [], 0, 0, skipped="empty sync overlap")
            return []
        server_by_id = {n.node_id: n for n in server_all}
        onboard_by_id = {n.node_id: n for n in onboard_nodes}
        server_sel = [server_by_id[s] for s, _ in sync.pairs]
        onboard_sel = [onboard_by_id[o] for _, o in sync.pairs]

        weights = cfg.weights()
        try:
            graph = build_graph(server_sel, cfg.radius, cfg.resolved_sigma(), weights)
            decomp = decompose(laplacian(graph))
        except Exception as exc:
            log.warning("robot %d: skipping cycle, %s", self.robot_id, exc)
            self._stats(message.version, len(sync), [], 0, 0, skipped=str(exc))
            return []
        if decomp.lambda_max <= 0.0:
            self._stats(message.version, len(sync), [], 0, 0, skipped="flat spectrum")
            return []
        bank = make_meyer_bank(decomp.lambda_max, cfg.num_scales)
        f = build_signal(server_sel, weights=weights)
        h = build_signal(onboard_sel, weights=weights)
        w_server = wavelet_coefficients(decomp, bank, f.values)
        w_onboard = wavelet_coefficients(decomp, bank, h.values)
        d = scale_distances(w_server, w_onboard, sync)
        if cfg.accumulate_scales:
            # rank nodes on the band sum, classify by each node's strongest band
            summed = accumulate_bands(d)
            peaked = np.zeros_like(d.values)
            arg = np.argmax(d.values, axis=1)
            peaked[np.arange(len(arg)), arg] = summed
            d = ScaleDistances(peaked)
        partition = BandPartition.thirds(cfg.num_scales)
        # emit up to top_k constraints the onboard graph does not already
        # hold: rank once, then walk down past pairs the ledger drops
        ranking = select_constraints(
            d, len(server_sel), partition, server_sel, onboard_sel, n_hop=cfg.n_hop
        )
        emitted: list[ConstraintCandidate] = []
        added = updated = 0
        for cand in ranking:
            if len(emitted) >= cfg.top_k:
                break
            to_add, to_update = ledger_apply(
                self.ledger, [cand], cfg.trans_tol, cfg.rot_tol, applied_at=now
            )
            emitted.extend(to_add + to_update)
            added += len(to_add)
            updated += len(to_update)
        self._stats(message.version, len(sync), emitted, added, updated)
        info = cfg.correction_information_scale * DEFAULT_ODOMETRY_INFORMATION
        return [
            PoseEdge(c.from_id, c.to_id, CORRECTION, c.measurement, info) for c in emitted
        ]
