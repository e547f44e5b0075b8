"""Command-line interface.

Subcommands:
    run <config.toml> [--out DIR]         run a scenario and write the report set
    eval <est.tum> <gt.tum> [--align]     ATE RMSE between two trajectories
    reduce <graph.g2o> --keep N           Kron-reduce a pose graph, dump the edges
    spectrum <graph.g2o>                  dump eigenvalues and wavelet coefficients

Exits 0 on success; on a handled error prints one diagnostic line to stderr
and exits 1.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .consistency import build_signal
from .errors import SpectramapError
from .pose_graph import load_g2o
from .scenario import emit_report, eval_trajectories, load_config, run_scenario
from .se3 import sigma_for_boundary_weight
from .spectral import (
    build_graph,
    decompose,
    kron_reduce,
    laplacian,
    make_meyer_bank,
    save_matrix_csv,
    wavelet_coefficients,
)


def _graph_nodes(path):
    graph = load_g2o(path)
    return sorted(graph.nodes, key=lambda n: (n.robot_id, n.stamp, n.node_id))


def _cmd_run(args) -> int:
    config = load_config(args.config)
    report = run_scenario(config)
    emit_report(report, args.out)
    for robot_id in sorted(report.robots):
        entry = report.robots[robot_id]
        server = entry.get("server_rmse")
        server_txt = f"{server:.3f}" if isinstance(server, float) else "n/a"
        print(
            f"robot {robot_id}: onboard {entry['onboard_rmse']:.3f} m"
            f" -> corrected {entry['corrected_rmse']:.3f} m"
            f" (server {server_txt} m, {entry['constraints_applied']} constraints)"
        )
    print(f"report written to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    rmse = eval_trajectories(args.estimate, args.ground_truth, align=args.align)
    print(f"ATE RMSE: {rmse:.6f} m")
    return 0


def _cmd_reduce(args) -> int:
    nodes = _graph_nodes(args.graph)
    sigma = args.sigma if args.sigma is not None else sigma_for_boundary_weight(args.radius)
    graph = build_graph(nodes, args.radius, sigma)
    reduced = kron_reduce(graph, args.keep)
    out = args.out or (os.path.splitext(args.graph)[0] + "_reduced.csv")
    ids = reduced.node_ids()
    with open(out, "w") as f:
        f.write("from_id,to_id,weight\n")
        n = reduced.node_count
        for i in range(n):
            for j in range(i + 1, n):
                w = reduced.adjacency[i, j]
                if w > 0.0:
                    f.write(f"{ids[i]},{ids[j]},{w!r}\n")
    print(f"kept {reduced.node_count} of {graph.node_count} nodes; edges in {out}")
    return 0


def _cmd_spectrum(args) -> int:
    nodes = _graph_nodes(args.graph)
    sigma = args.sigma if args.sigma is not None else sigma_for_boundary_weight(args.radius)
    graph = build_graph(nodes, args.radius, sigma)
    L = laplacian(graph)
    decomp = decompose(L)
    bank = make_meyer_bank(max(decomp.lambda_max, 1e-12), args.scales)
    signal = build_signal(graph.nodes)
    coeffs = wavelet_coefficients(decomp, bank, signal.values)
    out_dir = args.out_dir or os.path.dirname(os.path.abspath(args.graph))
    stem = os.path.splitext(os.path.basename(args.graph))[0]
    eig_path = os.path.join(out_dir, f"{stem}_eigenvalues.csv")
    coeff_path = os.path.join(out_dir, f"{stem}_coefficients.csv")
    save_matrix_csv(eig_path, decomp.eigenvalues.reshape(1, -1),
                    [f"lambda{i}" for i in range(len(decomp.eigenvalues))])
    bands = ["scaling"] + [f"band{j}" for j in range(1, bank.num_bands)]
    save_matrix_csv(coeff_path, coeffs.values, bands)
    if args.full:
        save_matrix_csv(os.path.join(out_dir, f"{stem}_laplacian.csv"), L)
        save_matrix_csv(os.path.join(out_dir, f"{stem}_eigenvectors.csv"), decomp.eigenvectors)
    print(f"wrote {eig_path} and {coeff_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spectramap",
        description="Spectral pose-graph consistency: simulate, evaluate, reduce, inspect.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scenario from a TOML config")
    p_run.add_argument("config")
    p_run.add_argument("--out", default="out", help="report directory (default: out)")
    p_run.set_defaults(func=_cmd_run)

    p_eval = sub.add_parser("eval", help="ATE RMSE between two TUM trajectories")
    p_eval.add_argument("estimate")
    p_eval.add_argument("ground_truth")
    p_eval.add_argument("--align", action="store_true", help="rigidly align first")
    p_eval.set_defaults(func=_cmd_eval)

    p_red = sub.add_parser("reduce", help="Kron-reduce a pose graph")
    p_red.add_argument("graph")
    p_red.add_argument("--keep", type=int, required=True, help="nodes to keep")
    p_red.add_argument("--radius", type=float, default=7.0)
    p_red.add_argument("--sigma", type=float, default=None)
    p_red.add_argument("--out", default=None, help="output CSV (default: <graph>_reduced.csv)")
    p_red.set_defaults(func=_cmd_reduce)

    p_spec = sub.add_parser("spectrum", help="dump eigenvalues and wavelet coefficients")
    p_spec.add_argument("graph")
    p_spec.add_argument("--radius", type=float, default=7.0)
    p_spec.add_argument("--sigma", type=float, default=None)
    p_spec.add_argument("--scales", type=int, default=9)
    p_spec.add_argument("--out-dir", default=None)
    p_spec.add_argument("--full", action="store_true",
                        help="also dump the Laplacian and eigenvectors")
    p_spec.set_defaults(func=_cmd_spectrum)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SpectramapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
