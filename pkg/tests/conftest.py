import itertools
import math

import numpy as np
import pytest

from cabc.core import Action, Observation, Outcome, Sample, TerminationReason, Trajectory, VehicleState
from cabc.sim import SimConfig
from cabc.track import TrackSpec, get_track


@pytest.fixture(scope="session")
def circle():
    return get_track("circle")


@pytest.fixture(scope="session")
def lshaped():
    return get_track("lshaped")


@pytest.fixture(scope="session")
def gp():
    return get_track("gp")


@pytest.fixture(scope="session")
def stadium():
    # 12 m straights joined by half circles: closed, with a long straight at s=0
    r = 1.5
    return TrackSpec(
        segments=((12.0, 0.0), (math.pi * r, 1.0 / r), (12.0, 0.0), (math.pi * r, 1.0 / r)),
        half_width=0.6, name="stadium")


@pytest.fixture(scope="session")
def noiseless_sim():
    return SimConfig(noise_sigma_v=0.0, noise_sigma_kappa=0.0)


def make_state(v=1.0, s=0.0, xt=0.0, ep=0.0, vt=0.0, om=0.0) -> VehicleState:
    return VehicleState(v_long=v, v_tran=vt, omega_psi=om, s=s, x_tran=xt, e_psi=ep)


def make_trajectory(n: int, outcome: Outcome, k_preview: int = 2,
                    start: float = 0.0) -> Trajectory:
    """Synthetic chained trajectory for dataset-level tests."""
    samples = []
    x = make_state(v=1.0, s=start)
    for k in range(n):
        x_next = make_state(v=1.0, s=x.s + 0.1)
        y = Observation(x.v_long, x.v_tran, x.omega_psi, (0.5,) * k_preview)
        samples.append(Sample(x=x, y=y, u_expert=Action(0.2, 0.0),
                              u_applied=Action(0.25, -0.1), x_next=x_next))
        x = x_next
    reason = (TerminationReason.REACHED_TARGET if outcome is Outcome.SUCCESS
              else TerminationReason.CONSTRAINT_VIOLATION)
    return Trajectory(samples=samples, outcome=outcome, termination_reason=reason)


def lp_hull_oracle(x: np.ndarray, points: np.ndarray, tol: float = 1e-7) -> bool:
    """Exhaustive simplex-basis enumeration: is x a convex combination of points?

    Checks every vertex subset of size up to dim + 1 (affine Caratheodory
    bound) by solving the affine system directly.
    """
    P = np.asarray(points, dtype=float)
    x = np.asarray(x, dtype=float)
    n, d = P.shape
    for k in range(1, min(n, d + 1) + 1):
        for subset in itertools.combinations(range(n), k):
            A = np.vstack([P[list(subset)].T, np.ones(k)])
            b = np.concatenate([x, [1.0]])
            w, *_ = np.linalg.lstsq(A, b, rcond=None)
            if w.min() < -1e-9:
                continue
            w = np.clip(w, 0.0, None)
            total = w.sum()
            if total <= 0.0:
                continue
            w = w / total
            if np.abs(w @ P[list(subset)] - x).max() <= tol:
                return True
    return False
