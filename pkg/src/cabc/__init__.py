"""Constraint-aware behavior cloning on a self-contained Frenet-frame racing simulator."""

__version__ = "0.1.0"

from .core import (
    Action,
    LabeledPool,
    Observation,
    Outcome,
    Sample,
    TerminationReason,
    Trajectory,
    VehicleState,
    load_dataset,
    partition_trajectories,
    save_dataset,
)
from .track import TrackSpec, curvature_at, default_tracks, frenet_to_cartesian, get_track
from .sim import SimConfig, StepResult, in_constraints, in_target, observe, rollout, step

__all__ = [
    "Action", "LabeledPool", "Observation", "Outcome", "Sample",
    "TerminationReason", "Trajectory", "VehicleState",
    "load_dataset", "partition_trajectories", "save_dataset",
    "TrackSpec", "curvature_at", "default_tracks", "frenet_to_cartesian", "get_track",
    "SimConfig", "StepResult", "in_constraints", "in_target", "observe", "rollout", "step",
]
