"""Batch Levenberg-Marquardt pose-graph optimization.

Relative-pose factors with 6x6 information matrices; state perturbations are
right-multiplied local twists, so the residual of an edge (from -> to) with
measurement m is

    r = log(m^-1 (x_from^-1 x_to))

with analytic Jacobians built from the inverse right Jacobian of SE(3) and the
adjoint. One anchored node per connected component fixes the gauge.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

log = logging.getLogger(__name__)

from .errors import ParameterError, SolverError
from .pose_graph import PoseEdge, CORRECTION
from .se3 import (
    Pose,
    Twist,
    exp_map,
    exp_map_batch,
    log_map,
    log_map_batch,
    quat_conjugate,
    quat_multiply,
    quat_rotate,
    quat_to_matrix_batch,
    relative,
    skew,
    skew_batch,
    so3_left_jacobian_inv,
    _left_jacobian_inv_batch,
)

_SMALL_ANGLE = 1e-6


# ---------------------------------------------------------------------------
# SE(3) Jacobian blocks
# ---------------------------------------------------------------------------

def adjoint(pose: Pose) -> np.ndarray:
    """6x6 adjoint [[R, p^ R], [0, R]] in (rho, phi) twist order."""
    R = pose.rotation_matrix()
    Ad = np.zeros((6, 6))
    Ad[:3, :3] = R
    Ad[:3, 3:] = skew(pose.translation) @ R
    Ad[3:, 3:] = R
    return Ad


def _q_matrix(rho: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Coupling block of the SE(3) left Jacobian (Barfoot-style closed form)."""
    rx = skew(rho)
    px = skew(phi)
    theta = float(np.linalg.norm(phi))
    pxrx = px @ rx
    rxpx = rx @ px
    pxrxpx = pxrx @ px
    if theta < _SMALL_ANGLE:
        c1 = 1.0 / 6.0
        c2 = 1.0 / 24.0
        c3 = 1.0 / 120.0
    else:
        t2 = theta * theta
        t4 = t2 * t2
        s, c = math.sin(theta), math.cos(theta)
        c1 = (theta - s) / (t2 * theta)
        c2 = (1.0 - 0.5 * t2 - c) / t4
        c3 = 0.5 * (c2 - 3.0 * (theta - s - t2 * theta / 6.0) / (t4 * theta))
    return (
        0.5 * rx
        + c1 * (pxrx + rxpx + pxrxpx)
        - c2 * (px @ pxrx + rxpx @ px - 3.0 * pxrxpx)
        - c3 * (pxrxpx @ px + px @ pxrxpx)
    )


def se3_left_jacobian_inv(xi: Twist) -> np.ndarray:
    """Inverse left Jacobian of SE(3) at the twist xi, (rho, phi) order."""
    Jinv = so3_left_jacobian_inv(xi.phi)
    Q = _q_matrix(xi.rho, xi.phi)
    out = np.zeros((6, 6))
    out[:3, :3] = Jinv
    out[3:, 3:] = Jinv
    out[:3, 3:] = -Jinv @ Q @ Jinv
    return out


def se3_right_jacobian_inv(xi: Twist) -> np.ndarray:
    return se3_left_jacobian_inv(Twist(-xi.rho, -xi.phi))


# ---------------------------------------------------------------------------
# factors
# ---------------------------------------------------------------------------

def residual(factor: PoseEdge, x_from: Pose, x_to: Pose) -> np.ndarray:
    """6-vector error; zero iff x_from^-1 x_to equals the measurement."""
    err = factor.measurement.inverse().compose(relative(x_from, x_to))
    return log_map(err).as_vector()


def residual_jacobians(
    factor: PoseEdge, x_from: Pose, x_to: Pose
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(r, J_from, J_to) for right-multiplied twist perturbations of the states."""
    rel = relative(x_from, x_to)
    err = factor.measurement.inverse().compose(rel)
    r = log_map(err)
    Jr_inv = se3_right_jacobian_inv(r)
    J_to = Jr_inv
    J_from = -Jr_inv @ adjoint(rel.inverse())
    return r.as_vector(), J_from, J_to


# ---------------------------------------------------------------------------
# problem and solver
# ---------------------------------------------------------------------------

@dataclass
class OptimizationProblem:
    variables: dict[int, Pose] = field(default_factory=dict)
    factors: list[PoseEdge] = field(default_factory=list)
    anchors: set[int] = field(default_factory=set)

    def add_variable(self, node_id: int, pose: Pose, anchored: bool = False) -> None:
        self.variables[node_id] = pose
        if anchored:
            self.anchors.add(node_id)

    def add_factor(self, edge: PoseEdge) -> None:
        for endpoint in (edge.from_id, edge.to_id):
            if endpoint not in self.variables:
                raise ParameterError(f"factor references unknown variable {endpoint}")
        self.factors.append(edge)

    def components(self) -> list[set[int]]:
        parent = {v: v for v in self.variables}

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for e in self.factors:
            ra, rb = find(e.from_id), find(e.to_id)
            if ra != rb:
                parent[ra] = rb
        groups: dict[int, set[int]] = {}
        for v in self.variables:
            groups.setdefault(find(v), set()).add(v)
        return list(groups.values())

    def validate_gauge(self) -> None:
        for comp in self.components():
            anchored = comp & self.anchors
            if len(anchored) != 1:
                raise SolverError(
                    f"component with nodes {sorted(comp)[:5]}... has {len(anchored)} anchors"
                )


@dataclass
class SolveReport:
    iterations: int
    initial_cost: float
    final_cost: float
    converged: bool
    chi2_by_kind: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "converged": self.converged,
            "chi2_by_kind": dict(sorted(self.chi2_by_kind.items())),
        }


def _total_cost(problem: OptimizationProblem, variables: dict[int, Pose]) -> tuple[float, dict[str, float]]:
    cost = 0.0
    by_kind: dict[str, float] = {}
    for e in problem.factors:
        r = residual(e, variables[e.from_id], variables[e.to_id])
        chi2 = float(r @ e.information @ r)
        cost += chi2
        by_kind[e.kind] = by_kind.get(e.kind, 0.0) + chi2
    return cost, by_kind


def _q_matrix_batch(rho: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """(F,3,3) coupling blocks; vectorized twin of _q_matrix."""
    rx = skew_batch(rho)
    px = skew_batch(phi)
    theta = np.linalg.norm(phi, axis=1)
    mm = np.matmul
    pxrx = mm(px, rx)
    rxpx = mm(rx, px)
    pxrxpx = mm(pxrx, px)
    small = theta < _SMALL_ANGLE
    c1 = np.empty_like(theta)
    c2 = np.empty_like(theta)
    c3 = np.empty_like(theta)
    c1[small], c2[small], c3[small] = 1.0 / 6.0, 1.0 / 24.0, 1.0 / 120.0
    ts = theta[~small]
    t2 = ts * ts
    t4 = t2 * t2
    s, c = np.sin(ts), np.cos(ts)
    c1[~small] = (ts - s) / (t2 * ts)
    c2[~small] = (1.0 - 0.5 * t2 - c) / t4
    c3[~small] = 0.5 * (c2[~small] - 3.0 * (ts - s - t2 * ts / 6.0) / (t4 * ts))
    return (
        0.5 * rx
        + c1[:, None, None] * (pxrx + rxpx + pxrxpx)
        - c2[:, None, None] * (mm(px, pxrx) + mm(rxpx, px) - 3.0 * pxrxpx)
        - c3[:, None, None] * (mm(pxrxpx, px) + mm(px, pxrxpx))
    )


def _jr_inv_batch(xi: np.ndarray) -> np.ndarray:
    """(F,6,6) inverse right Jacobians at twists (F,6)."""
    rho, phi = -xi[:, :3], -xi[:, 3:]
    Jinv = _left_jacobian_inv_batch(phi)
    Q = _q_matrix_batch(rho, phi)
    out = np.zeros((xi.shape[0], 6, 6))
    out[:, :3, :3] = Jinv
    out[:, 3:, 3:] = Jinv
    out[:, :3, 3:] = -np.matmul(Jinv, np.matmul(Q, Jinv))
    return out


def _adjoint_batch(q: np.ndarray, t: np.ndarray) -> np.ndarray:
    """(F,6,6) adjoints of (quaternion, translation) transforms."""
    R = quat_to_matrix_batch(q)
    out = np.zeros((q.shape[0], 6, 6))
    out[:, :3, :3] = R
    out[:, :3, 3:] = np.matmul(skew_batch(t), R)
    out[:, 3:, 3:] = R
    return out


class _Linearizer:
    """Vectorized residual/Jacobian evaluation over all factors.

    Variable states live in flat (N,4) quaternion and (N,3) translation
    arrays; the sparse normal-equation pattern is precomputed once.
    """

    def __init__(self, problem: OptimizationProblem, var_order: list[int], free_index: dict[int, int]):
        pos = {v: i for i, v in enumerate(var_order)}
        self.from_pos = np.array([pos[e.from_id] for e in problem.factors], dtype=int)
        self.to_pos = np.array([pos[e.to_id] for e in problem.factors], dtype=int)
        meas_q = np.array([e.measurement.rotation for e in problem.factors])
        meas_t = np.array([e.measurement.translation for e in problem.factors])
        self.miq = quat_conjugate(meas_q)
        self.mit = -quat_rotate(self.miq, meas_t)
        self.info = np.array([e.information for e in problem.factors])
        self.kinds = [e.kind for e in problem.factors]
        self.free_from = np.array(
            [free_index.get(e.from_id, -1) for e in problem.factors], dtype=int
        )
        self.free_to = np.array(
            [free_index.get(e.to_id, -1) for e in problem.factors], dtype=int
        )
        # COO index pattern for the four 6x6 blocks of each factor
        u = np.arange(6)
        self._rows = {}
        self._cols = {}
        for a_name, a_idx in (("f", self.free_from), ("t", self.free_to)):
            for b_name, b_idx in (("f", self.free_from), ("t", self.free_to)):
                mask = (a_idx >= 0) & (b_idx >= 0)
                r0 = 6 * a_idx[mask]
                c0 = 6 * b_idx[mask]
                shape = (len(r0), 6, 6)
                self._rows[a_name + b_name] = np.broadcast_to(
                    r0[:, None, None] + u[None, :, None], shape
                ).ravel()
                self._cols[a_name + b_name] = np.broadcast_to(
                    c0[:, None, None] + u[None, None, :], shape
                ).ravel()
                setattr(self, "_mask_" + a_name + b_name, mask)

    def residuals(self, q: np.ndarray, t: np.ndarray):
        qf, tf = q[self.from_pos], t[self.from_pos]
        qt, tt = q[self.to_pos], t[self.to_pos]
        qf_inv = quat_conjugate(qf)
        rel_q = quat_multiply(qf_inv, qt)
        rel_q /= np.linalg.norm(rel_q, axis=1, keepdims=True)
        rel_t = quat_rotate(qf_inv, tt - tf)
        err_q = quat_multiply(self.miq, rel_q)
        err_q /= np.linalg.norm(err_q, axis=1, keepdims=True)
        err_t = self.mit + quat_rotate(self.miq, rel_t)
        r = log_map_batch(err_q, err_t)
        return r, rel_q, rel_t

    def cost(self, q: np.ndarray, t: np.ndarray) -> tuple[float, dict[str, float]]:
        r, _, _ = self.residuals(q, t)
        chi2 = np.einsum("fi,fij,fj->f", r, self.info, r)
        by_kind: dict[str, float] = {}
        for kind, value in zip(self.kinds, chi2):
            by_kind[kind] = by_kind.get(kind, 0.0) + float(value)
        return float(chi2.sum()), by_kind

    def normal_equations(self, q: np.ndarray, t: np.ndarray, n_free: int):
        r, rel_q, rel_t = self.residuals(q, t)
        jr_inv = _jr_inv_batch(r)
        rel_q_inv = quat_conjugate(rel_q)
        rel_t_inv = -quat_rotate(rel_q_inv, rel_t)
        J_to = jr_inv
        J_from = -np.matmul(jr_inv, _adjoint_batch(rel_q_inv, rel_t_inv))
        Wr = np.einsum("fij,fj->fi", self.info, r)
        b = np.zeros(6 * n_free)
        blocks = {"f": J_from, "t": J_to}
        # gradient
        for name, J, idx in (("f", J_from, self.free_from), ("t", J_to, self.free_to)):
            mask = idx >= 0
            contrib = np.einsum("fji,fj->fi", J[mask], Wr[mask])
            np.add.at(b.reshape(n_free, 6), idx[mask], contrib)
        # Hessian blocks
        data_parts, row_parts, col_parts = [], [], []
        WJ = {name: np.einsum("fij,fjk->fik", self.info, J) for name, J in blocks.items()}
        for a_name, Ja in blocks.items():
            for b_name in blocks:
                mask = getattr(self, "_mask_" + a_name + b_name)
                H_blk = np.einsum("fji,fjk->fik", Ja[mask], WJ[b_name][mask])
                data_parts.append(H_blk.ravel())
                row_parts.append(self._rows[a_name + b_name])
                col_parts.append(self._cols[a_name + b_name])
        H = scipy.sparse.coo_matrix(
            (np.concatenate(data_parts), (np.concatenate(row_parts), np.concatenate(col_parts))),
            shape=(6 * n_free, 6 * n_free),
        ).tocsc()
        chi2 = np.einsum("fi,fij,fj->f", r, self.info, r)
        by_kind: dict[str, float] = {}
        for kind, value in zip(self.kinds, chi2):
            by_kind[kind] = by_kind.get(kind, 0.0) + float(value)
        return H, b, float(chi2.sum()), by_kind


def solve(
    problem: OptimizationProblem,
    max_iters: int = 50,
    lambda_init: float = 1e-4,
    rel_tol: float = 1e-9,
    abs_tol: float = 1e-20,
) -> tuple[dict[int, Pose], SolveReport]:
    """Levenberg-Marquardt over the free variables; anchors stay fixed.

    Damping multiplies the normal-equation diagonal: x10 on a rejected step,
    /10 on an accepted one. Terminates when an accepted step's cost decrease
    falls below rel_tol (relatively) or the cost below abs_tol, or at
    max_iters. Raises SolverError if the damped system stays singular through
    escalation.
    """
    problem.validate_gauge()
    variables = dict(problem.variables)
    var_order = sorted(variables)
    free_ids = [v for v in var_order if v not in problem.anchors]
    free_index = {v: i for i, v in enumerate(free_ids)}
    n_free = len(free_ids)
    if n_free == 0 or not problem.factors:
        cost, by_kind = _total_cost(problem, variables)
        return variables, SolveReport(0, cost, cost, True, by_kind)

    lin = _Linearizer(problem, var_order, free_index)
    q = np.array([variables[v].rotation for v in var_order])
    t = np.array([variables[v].translation for v in var_order])
    pos = {v: i for i, v in enumerate(var_order)}
    free_rows = np.array([pos[v] for v in free_ids], dtype=int)

    cost, by_kind = lin.cost(q, t)
    initial_cost = cost
    lam = lambda_init
    iterations = 0
    converged = False
    for _ in range(max_iters):
        iterations += 1
        H, b, cost, by_kind = lin.normal_equations(q, t, n_free)
        if cost < abs_tol:
            converged = True
            break
        diag = np.maximum(H.diagonal(), 1e-12)

        accepted = False
        for _attempt in range(12):
            damped = H + scipy.sparse.diags(lam * diag)
            try:
                delta = scipy.sparse.linalg.spsolve(damped, -b)
            except Exception:
                delta = None
            if delta is None or not np.all(np.isfinite(delta)):
                lam *= 10.0
                continue
            dq, dt = exp_map_batch(delta.reshape(n_free, 6))
            q_trial = q.copy()
            t_trial = t.copy()
            q_free = q[free_rows]
            q_trial[free_rows] = quat_multiply(q_free, dq)
            q_trial[free_rows] /= np.linalg.norm(q_trial[free_rows], axis=1, keepdims=True)
            t_trial[free_rows] = t[free_rows] + quat_rotate(q_free, dt)
            trial_cost, _ = lin.cost(q_trial, t_trial)
            if trial_cost <= cost:
                rel_change = (cost - trial_cost) / max(cost, 1e-300)
                q, t = q_trial, t_trial
                lam = max(lam / 10.0, 1e-12)
                accepted = True
                if rel_change < rel_tol or trial_cost < abs_tol:
                    converged = True
                break
            lam *= 10.0
        if not accepted:
            if lam > 1e12:
                raise SolverError("normal equations remained singular under damping escalation")
            converged = True  # no downhill step within the trust region
            break
        if converged:
            break

    cost, by_kind = lin.cost(q, t)
    out = dict(variables)
    for i, v in enumerate(var_order):
        out[v] = Pose(q[i], t[i], variables[v].stamp)
    return out, SolveReport(iterations, initial_cost, cost, converged, by_kind)


def apply_batch(
    problem: OptimizationProblem,
    edges: list[PoseEdge],
    max_iters: int = 50,
    lambda_init: float = 1e-4,
) -> tuple[OptimizationProblem, SolveReport | None]:
    """Append (or replace) a correction batch, then run exactly one solve.

    Edges with unknown endpoints are logged and skipped; the rest of the
    batch proceeds. A correction edge replaces an existing correction on the
    same ordered pair. An empty accepted batch triggers no solve.
    """
    accepted = []
    for e in edges:
        if e.from_id not in problem.variables or e.to_id not in problem.variables:
            log.warning("dropping edge %d->%d: unknown endpoint", e.from_id, e.to_id)
            continue
        accepted.append(e)
    if not accepted:
        return problem, None
    existing = {
        (e.from_id, e.to_id): i
        for i, e in enumerate(problem.factors)
        if e.kind == CORRECTION
    }
    for e in accepted:
        if e.kind == CORRECTION and (e.from_id, e.to_id) in existing:
            problem.factors[existing[(e.from_id, e.to_id)]] = e
        else:
            problem.factors.append(e)
            if e.kind == CORRECTION:
                existing[(e.from_id, e.to_id)] = len(problem.factors) - 1
    variables, report = solve(problem, max_iters=max_iters, lambda_init=lambda_init)
    problem.variables = variables
    return problem, report
