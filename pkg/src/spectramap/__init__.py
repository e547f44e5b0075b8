"""Multi-robot pose-graph consistency via spectral graph wavelets.

Detects structural discrepancies between an onboard pose graph and a
centrally optimized multi-robot graph, emits multi-scale relative SE(3)
correction constraints, and ships a deterministic mission simulator to
exercise the whole loop.
"""

from .se3 import (
    MetricWeights,
    Pose,
    Twist,
    exp_map,
    log_map,
    rotation_distance,
    rotation_geodesic,
    se3_distance,
    sq_exp_weight,
)
from .pose_graph import (
    PoseEdge,
    PoseGraph,
    PoseNode,
    Trajectory,
    ate_rmse,
    inject_degeneracy,
    inject_drift,
    keyframe_select,
    load_g2o,
    load_tum,
    save_g2o,
    save_tum,
)
from .spectral import (
    FilterBank,
    LaplacianDecomposition,
    WaveletCoefficients,
    WeightedGraph,
    build_graph,
    decompose,
    gft,
    igft,
    kron_reduce,
    laplacian,
    make_meyer_bank,
    wavelet_coefficients,
)
from .consistency import (
    BandPartition,
    ConsistencyConfig,
    ConsistencyEngine,
    ConstraintCandidate,
    ConstraintLedger,
    ScaleDistances,
    SyncMap,
    build_signal,
    ledger_apply,
    scale_distances,
    select_constraints,
    synchronize,
)
from .optimizer import OptimizationProblem, SolveReport, apply_batch, residual, solve
from .server import (
    GlobalGraphMessage,
    MessageBus,
    ServerConfig,
    ServerState,
    Submap,
    detect_loop_closures,
    ingest_submap,
    server_cycle,
)
from .scenario import RunReport, ScenarioConfig, emit_report, eval_trajectories, load_config, run_scenario

__version__ = "0.1.0"
