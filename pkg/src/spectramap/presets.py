"""Canned scenario configurations for the standard experiments.

These are the programmatic twins of the TOML files under configs/; the
experiment scripts and the verification suite build on them.
"""

from __future__ import annotations

import math

from .scenario import DegeneracyConfig, DriftConfig, PathConfig, ScenarioConfig


def drift_scenario(seed: int, reduction_fraction: float = 0.0) -> ScenarioConfig:
    """Two robots sharing a circular track; robot 1 picks up translational
    drift for one minute mid-mission."""
    cfg = ScenarioConfig(seed=seed)
    cfg.robots = 2
    cfg.duration = 600.0
    cfg.keyframe_min_dist = 1.5
    cfg.odom_trans_std = 0.004
    cfg.odom_rot_std = 0.0002
    cfg.paths = [
        PathConfig(kind="circle", speed=0.7, radius=16.0, phase=0.0),
        PathConfig(kind="circle", speed=0.7, radius=16.0, phase=math.pi),
    ]
    cfg.drifts = [
        DriftConfig(robot=1, start=120.0, end=180.0, bias_rho=(0.0, 0.005, 0.0)),
    ]
    cfg.server.closure_radius = 2.5
    cfg.server.reduction_fraction = reduction_fraction
    cfg.server.reduction_threshold = 0 if reduction_fraction > 0.0 else 500
    return cfg


def degeneracy_scenario(seed: int) -> ScenarioConfig:
    """One corridor robot whose translation along the corridor axis collapses
    (beta = 0) on the first return leg."""
    cfg = ScenarioConfig(seed=seed)
    cfg.robots = 1
    cfg.duration = 360.0
    cfg.keyframe_min_dist = 1.5
    cfg.keyframe_max_gap = 5.0
    cfg.odom_trans_std = 0.003
    cfg.odom_rot_std = 0.0003
    cfg.paths = [
        PathConfig(kind="corridor", speed=0.8, length=60.0),
    ]
    cfg.degeneracies = [
        DegeneracyConfig(robot=0, start=90.0, end=150.0, axis=(1.0, 0.0, 0.0), beta=0.0),
    ]
    cfg.server.closure_radius = 2.0
    return cfg


def nominal_scenario(seed: int) -> ScenarioConfig:
    """Short clean two-robot run; used for smoke and determinism checks."""
    cfg = ScenarioConfig(seed=seed)
    cfg.robots = 2
    cfg.duration = 150.0
    cfg.keyframe_min_dist = 1.5
    cfg.paths = [
        PathConfig(kind="circle", speed=0.7, radius=10.0, phase=0.0),
        PathConfig(kind="circle", speed=0.7, radius=10.0, phase=math.pi),
    ]
    cfg.server.closure_radius = 2.5
    return cfg
