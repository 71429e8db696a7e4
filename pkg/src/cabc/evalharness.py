"""Closed-loop evaluation: chained lap attempts, lap statistics, early stopping.

Evaluation always starts from the standard start state and chains lap
iterations, carrying the terminal state of each completed lap into the next
attempt.  Observation noise stays on (the policy must cope with it at test
time); no actuation noise is injected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import List

import numpy as np

from .core import Outcome, TerminationReason
from .sim import SimConfig, default_start_state, rollout
from .track import TrackSpec


class EvalTermination(Enum):
    FIFTY_LAPS = "fifty_laps"
    CONSTRAINT_VIOLATION = "constraint_violation"
    TIMEOUT = "timeout"


@dataclass(frozen=True)
class EvalResult:
    laps_completed: int
    lap_times: tuple
    terminated_by: EvalTermination
    lap_mean: float
    lap_std: float
    lap_min: float
    lap_max: float

    def __post_init__(self):
        if len(self.lap_times) != self.laps_completed:
            raise ValueError("lap_times length must equal laps_completed")


def _result(lap_times: List[float], terminated_by: EvalTermination) -> EvalResult:
    if lap_times:
        arr = np.asarray(lap_times)
        stats = (float(arr.mean()), float(arr.std()), float(arr.min()), float(arr.max()))
    else:
        stats = (0.0, 0.0, 0.0, 0.0)
    return EvalResult(laps_completed=len(lap_times), lap_times=tuple(lap_times),
                      terminated_by=terminated_by, lap_mean=stats[0],
                      lap_std=stats[1], lap_min=stats[2], lap_max=stats[3])


def evaluate(policy, cfg: SimConfig, track: TrackSpec, seed: int,
             laps: int = 50) -> EvalResult:
    """Drive up to ``laps`` consecutive laps; stop at the first failure.

    Lap time is the step count times ``dt``.  Each lap attempt re-anchors its
    progress target at the actual terminal state of the previous lap, so a
    policy in a periodic steady state produces identical lap times.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    x = default_start_state(v_long=1.0, s=0.0)
    lap_times: List[float] = []
    for _ in range(laps):
        traj = rollout(cfg, track, policy, x, cfg.max_steps, rng)
        if traj.outcome is not Outcome.SUCCESS:
            if traj.termination_reason is TerminationReason.TIMEOUT:
                return _result(lap_times, EvalTermination.TIMEOUT)
            return _result(lap_times, EvalTermination.CONSTRAINT_VIOLATION)
        lap_times.append(len(traj) * cfg.dt)
        x = traj.samples[-1].x_next
    return _result(lap_times, EvalTermination.FIFTY_LAPS)


@dataclass(frozen=True)
class EarlyStopState:
    """Stop once evaluation hits the full lap count for the second time."""

    count: int = 0
    triggered: bool = False

    def __post_init__(self):
        if self.triggered != (self.count >= 2):
            raise ValueError("triggered flag inconsistent with count")


def early_stop_update(state: EarlyStopState, result: EvalResult,
                      full_laps: int = 50) -> EarlyStopState:
    count = state.count + (1 if result.laps_completed >= full_laps else 0)
    return EarlyStopState(count=count, triggered=count >= 2)
