"""Graph-signal processing on pose graphs.

Builds a weighted proximity graph from poses, decomposes its Laplacian,
provides the graph Fourier transform, a Meyer wavelet filter bank, localized
wavelet coefficients, and Kron (Schur-complement) node reduction.

Everything is dense; graphs are expected at the few-hundred to ~2000 node
scale that keyframing and reduction produce.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DegenerateGraphError, NumericalError, ParameterError, ReductionError
from .pose_graph import PoseNode
from .se3 import MetricWeights, sq_exp_weight, se3_distances


# ---------------------------------------------------------------------------
# graph construction
# ---------------------------------------------------------------------------

@dataclass
class WeightedGraph:
    """Symmetric non-negative adjacency plus the per-vertex pose payload."""

    adjacency: np.ndarray
    nodes: list[PoseNode]

    def __post_init__(self):
        A = np.asarray(self.adjacency, dtype=float)
        n = len(self.nodes)
        if A.shape != (n, n):
            raise ParameterError(f"adjacency shape {A.shape} does not match {n} nodes")
        if np.max(np.abs(A - A.T)) > 1e-12:
            raise ParameterError("adjacency must be symmetric")
        if np.any(np.diag(A) != 0.0):
            raise ParameterError("adjacency diagonal must be zero")
        if np.any(A < 0.0):
            raise ParameterError("adjacency weights must be non-negative")
        self.adjacency = A

    @property
    def node_count(self) -> int:
        return len(self.nodes)

    def stamps(self) -> np.ndarray:
        return np.array([n.stamp for n in self.nodes])

    def node_ids(self) -> np.ndarray:
        return np.array([n.node_id for n in self.nodes], dtype=int)


def build_graph(
    nodes: list[PoseNode],
    radius: float,
    sigma: float,
    weights: MetricWeights = MetricWeights(),
) -> WeightedGraph:
    """Radius-search proximity graph with squared-exponential pose-distance weights.

    Nodes within ``radius`` (Euclidean positions) are connected with weight
    exp(-Delta/(2 sigma^2)) where Delta is the weighted SE(3) distance.
    Consecutive nodes of the same robot are always connected so the graph
    stays in one piece regardless of the radius.
    """
    if radius <= 0.0:
        raise ParameterError("radius must be positive")
    n = len(nodes)
    if n < 2:
        raise DegenerateGraphError(f"need at least 2 nodes, got {n}")
    positions = np.array([nd.pose.translation for nd in nodes])
    diff = positions[:, None, :] - positions[None, :, :]
    within = np.sqrt(np.sum(diff * diff, axis=2)) <= radius
    ii, jj = np.where(np.triu(within, k=1))
    # odometry neighbors: consecutive (by stamp) nodes of one robot
    order = sorted(range(n), key=lambda i: (nodes[i].robot_id, nodes[i].stamp, nodes[i].node_id))
    chain = []
    for a, b in zip(order[:-1], order[1:]):
        if nodes[a].robot_id == nodes[b].robot_id:
            chain.append((min(a, b), max(a, b)))
    pair_set = set(zip(ii.tolist(), jj.tolist())) | set(chain)
    pairs = sorted(pair_set)
    A = np.zeros((n, n))
    if pairs:
        pi = [p[0] for p in pairs]
        pj = [p[1] for p in pairs]
        deltas = se3_distances([nodes[i].pose for i in pi], [nodes[j].pose for j in pj], weights)
        w = sq_exp_weight(deltas, sigma)
        A[pi, pj] = w
        A[pj, pi] = w
    return WeightedGraph(A, list(nodes))


def laplacian(graph: WeightedGraph) -> np.ndarray:
    """Combinatorial Laplacian L = D - A."""
    A = graph.adjacency
    return np.diag(A.sum(axis=1)) - A


# ---------------------------------------------------------------------------
# eigendecomposition and Fourier transform
# ---------------------------------------------------------------------------

@dataclass
class LaplacianDecomposition:
    eigenvalues: np.ndarray   # ascending
    eigenvectors: np.ndarray  # orthonormal columns

    @property
    def lambda_max(self) -> float:
        return float(self.eigenvalues[-1])


def decompose(L: np.ndarray) -> LaplacianDecomposition:
    L = np.asarray(L, dtype=float)
    try:
        lam, U = np.linalg.eigh(L)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigendecomposition failed: {exc}") from exc
    if not np.all(np.isfinite(lam)):
        raise NumericalError("eigendecomposition produced non-finite eigenvalues")
    return LaplacianDecomposition(lam, U)


def gft(decomp: LaplacianDecomposition, signal: np.ndarray) -> np.ndarray:
    signal = np.asarray(signal, dtype=float)
    n = decomp.eigenvectors.shape[0]
    if signal.shape != (n,):
        raise ParameterError(f"signal shape {signal.shape} does not match graph size {n}")
    return decomp.eigenvectors.T @ signal


def igft(decomp: LaplacianDecomposition, spectrum: np.ndarray) -> np.ndarray:
    spectrum = np.asarray(spectrum, dtype=float)
    n = decomp.eigenvectors.shape[0]
    if spectrum.shape != (n,):
        raise ParameterError(f"spectrum shape {spectrum.shape} does not match graph size {n}")
    return decomp.eigenvectors @ spectrum


# ---------------------------------------------------------------------------
# Meyer filter bank
# ---------------------------------------------------------------------------

def _meyer_transition(x: np.ndarray) -> np.ndarray:
    return x ** 4 * (35.0 - 84.0 * x + 70.0 * x ** 2 - 20.0 * x ** 3)


_L1 = 2.0 / 3.0
_L2 = 4.0 / 3.0
_L3 = 8.0 / 3.0


def meyer_scaling(x) -> np.ndarray:
    """Low-pass window: 1 on [0, 2/3), cosine roll-off to 0 at 4/3."""
    x = np.abs(np.asarray(x, dtype=float))
    out = np.zeros_like(x)
    out[x < _L1] = 1.0
    band = (x >= _L1) & (x < _L2)
    out[band] = np.cos(0.5 * math.pi * _meyer_transition(x[band] / _L1 - 1.0))
    return out


def meyer_wavelet(x) -> np.ndarray:
    """Band-pass window supported on [2/3, 8/3], peaking at 4/3."""
    x = np.abs(np.asarray(x, dtype=float))
    out = np.zeros_like(x)
    rise = (x >= _L1) & (x < _L2)
    fall = (x >= _L2) & (x < _L3)
    out[rise] = np.sin(0.5 * math.pi * _meyer_transition(x[rise] / _L1 - 1.0))
    out[fall] = np.cos(0.5 * math.pi * _meyer_transition(x[fall] / _L2 - 1.0))
    return out


@dataclass
class FilterBank:
    """Scaling window plus dyadic Meyer band-passes on [0, lambda_max].

    ``scales`` ascend; the first (smallest) scale is the finest band, peaking
    at lambda_max. Band index 0 is the scaling band, bands 1..J follow the
    scale order (1 = finest, J = coarsest).
    """

    scales: np.ndarray
    lambda_max: float

    @property
    def num_scales(self) -> int:
        return len(self.scales)

    @property
    def num_bands(self) -> int:
        return len(self.scales) + 1

    def evaluate(self, lam) -> np.ndarray:
        """(num_bands, len(lam)) responses; row 0 is the scaling window."""
        lam = np.atleast_1d(np.asarray(lam, dtype=float))
        rows = [meyer_scaling(self.scales[-1] * lam)]
        for s in self.scales:
            rows.append(meyer_wavelet(s * lam))
        return np.vstack(rows)

    def frame_bounds(self, grid_size: int = 1000) -> tuple[float, float]:
        grid = np.linspace(0.0, self.lambda_max, grid_size)
        g = self.evaluate(grid)
        frame = np.sum(g * g, axis=0)
        return float(frame.min()), float(frame.max())


def make_meyer_bank(lambda_max: float, num_scales: int = 9) -> FilterBank:
    """Dyadic Meyer bank: finest band peaks at lambda_max, each next an octave down."""
    if lambda_max <= 0.0:
        raise ParameterError("lambda_max must be positive")
    if not 1 <= num_scales <= 9:
        raise ParameterError("num_scales must lie in [1, 9]")
    base = _L2 / lambda_max
    scales = base * np.power(2.0, np.arange(num_scales))
    return FilterBank(scales, lambda_max)


# ---------------------------------------------------------------------------
# wavelet coefficients
# ---------------------------------------------------------------------------

@dataclass
class WaveletCoefficients:
    """N x (J+1) matrix; column 0 is the scaling band, then fine-to-coarse bands."""

    values: np.ndarray

    @property
    def num_bands(self) -> int:
        return self.values.shape[1]


def wavelet_coefficients(
    decomp: LaplacianDecomposition, bank: FilterBank, signal: np.ndarray
) -> WaveletCoefficients:
    """Project a node signal onto every localized wavelet.

    The per-node Dirac formulation collapses to one filtered inverse transform
    per band: column b of the result is U g_b(Lambda) U^T f, whose n-th entry
    is the inner product of the wavelet centered at n with f.
    """
    signal = np.asarray(signal, dtype=float)
    n = decomp.eigenvectors.shape[0]
    if signal.shape != (n,):
        raise ParameterError(f"signal shape {signal.shape} does not match graph size {n}")
    responses = bank.evaluate(decomp.eigenvalues)          # (bands, N)
    spectrum = decomp.eigenvectors.T @ signal              # (N,)
    filtered = responses * spectrum[None, :]               # (bands, N)
    values = decomp.eigenvectors @ filtered.T              # (N, bands)
    if not np.all(np.isfinite(values)):
        raise NumericalError("wavelet coefficients are not finite")
    return WaveletCoefficients(values)


def wavelet_atom(
    decomp: LaplacianDecomposition, bank: FilterBank, band: int, node: int
) -> np.ndarray:
    """The localized wavelet for one (band, node): U g_b(Lambda) U^T delta_node."""
    responses = bank.evaluate(decomp.eigenvalues)[band]
    delta = np.zeros(decomp.eigenvectors.shape[0])
    delta[node] = 1.0
    return decomp.eigenvectors @ (responses * (decomp.eigenvectors.T @ delta))


# ---------------------------------------------------------------------------
# Kron reduction
# ---------------------------------------------------------------------------

def reduced_node_count(node_count: int, fraction: float) -> int:
    """Nodes kept when removing the given fraction (floor, at least 2)."""
    if not 0.0 <= fraction < 1.0:
        raise ParameterError("reduction fraction must lie in [0, 1)")
    return max(2, int(math.floor(node_count * (1.0 - fraction))))


def select_nodes_to_keep(graph: WeightedGraph, keep_count: int) -> list[int]:
    """Rank nodes by spectral energy in the dominant eigenvectors.

    Energy of node n is the squared mass of its coordinates across the
    ``keep_count`` largest-eigenvalue eigenvectors (rounded so exact ties are
    reproducible); ties fall to the older stamp, then the smaller node id.
    Returned indices are sorted.
    """
    n = graph.node_count
    decomp = decompose(laplacian(graph))
    top = decomp.eigenvectors[:, n - keep_count:]
    energy = np.round(np.sum(top * top, axis=1), 9)
    stamps = graph.stamps()
    ids = graph.node_ids()
    order = sorted(range(n), key=lambda i: (-energy[i], stamps[i], ids[i]))
    return sorted(order[:keep_count])


def kron_reduce_keeping(graph: WeightedGraph, keep: list[int]) -> WeightedGraph:
    """Schur-complement reduction onto an explicit set of node indices.

    The reduced Laplacian is L_kk - L_kr L_rr^{-1} L_rk, which preserves
    effective resistances between all kept pairs. Raises ReductionError when
    the removed block is singular (an entire component was marked for
    removal).
    """
    n = graph.node_count
    keep = sorted(set(keep))
    if any(i < 0 or i >= n for i in keep):
        raise ParameterError("keep indices out of range")
    remove = sorted(set(range(n)) - set(keep))
    if not remove:
        return WeightedGraph(graph.adjacency.copy(), list(graph.nodes))
    L = laplacian(graph)
    L_kk = L[np.ix_(keep, keep)]
    L_kr = L[np.ix_(keep, remove)]
    L_rr = L[np.ix_(remove, remove)]
    try:
        cho = scipy.linalg.cho_factor(L_rr)
        S = L_kk - L_kr @ scipy.linalg.cho_solve(cho, L_kr.T)
    except scipy.linalg.LinAlgError as exc:
        raise ReductionError(f"removed block is singular: {exc}") from exc
    S = 0.5 * (S + S.T)
    A = -S
    np.fill_diagonal(A, 0.0)
    A[np.abs(A) < 1e-12] = 0.0   # floating noise only; exact weights are >= 0
    A = np.maximum(A, 0.0)
    return WeightedGraph(A, [graph.nodes[i] for i in keep])


def kron_reduce(graph: WeightedGraph, keep_count: int) -> WeightedGraph:
    """Eliminate all but the ``keep_count`` highest-energy nodes."""
    n = graph.node_count
    if not 2 <= keep_count <= n:
        raise ParameterError(f"keep_count must lie in [2, {n}]")
    if keep_count == n:
        return WeightedGraph(graph.adjacency.copy(), list(graph.nodes))
    return kron_reduce_keeping(graph, select_nodes_to_keep(graph, keep_count))


# ---------------------------------------------------------------------------
# debug dumps
# ---------------------------------------------------------------------------

def save_matrix_csv(path, matrix: np.ndarray, header: list[str] | None = None) -> None:
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    with open(path, "w") as f:
        if header is None:
            header = [f"c{i}" for i in range(matrix.shape[1])]
        f.write(",".join(header) + "\n")
        for row in matrix:
            f.write(",".join(repr(float(v)) for v in row) + "\n")
