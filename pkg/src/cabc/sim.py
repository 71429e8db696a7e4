"""Discrete-time vehicle plant on a track, and the closed-loop rollout engine.

The plant is a mass-normalized dynamic bicycle with linear tires, integrated
by forward Euler in Frenet coordinates.  Learners must treat it as a black
box: nothing here is differentiated analytically by the training code.

Sign conventions: positive steering produces positive yaw rate and growing
``x_tran`` (left of centerline).  Throttle is symmetric: negative ``u_a``
brakes (and reverses thrust), but ``v_long`` is clamped to ``[0, v_max]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from .core import (
    Action,
    Observation,
    Outcome,
    Sample,
    TerminationReason,
    Trajectory,
    VehicleState,
)
from .track import TrackSpec, curvature_at


class SimSingularityError(RuntimeError):
    """State left the valid Frenet chart (|1 - x_tran * kappa| ~ 0)."""


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.1            # integration step, s
    v_max: float = 5.0         # longitudinal speed ceiling, m/s

    # longitudinal: v' = drive_gain*u_a - drag_lin*v - drag_quad*v^2 + w*v_tran
    drive_gain: float = 3.0    # m/s^2 at full throttle
    drag_lin: float = 0.01     # 1/s
    drag_quad: float = 0.002   # 1/m

    # lateral/yaw: linear tires, mass- and inertia-normalized
    stiff_front: float = 9.0   # m/s^2 per rad of front slip
    stiff_rear: float = 11.0
    l_front: float = 0.15      # axle distances from CG, m
    l_rear: float = 0.15
    yaw_radius_sq: float = 0.0225   # I_z / m, m^2
    steer_max: float = 0.45    # rad at |u_steer| = 1
    v_slip_floor: float = 1.2  # slip-angle denominator guard, m/s

    # constraint set: |x_tran| <= half_width - margin, |e_psi| <= e_psi_max
    half_width_margin: float = 0.1
    e_psi_max: float = math.pi / 2

    # output map: velocities plus K curvature samples ahead, Gaussian noise
    noise_sigma_v: float = 0.02
    noise_sigma_kappa: float = 0.01
    preview_distances: Tuple[float, ...] = tuple(float(i) for i in range(1, 11))

    seed: int = 0
    max_steps: int = 600       # per lap attempt
    lap_target: int = 1        # laps of progress required to reach the target set

    def __post_init__(self):
        if self.dt <= 0 or self.v_max <= 0:
            raise ValueError("dt and v_max must be positive")
        for name in ("drag_lin", "drag_quad", "stiff_front", "stiff_rear"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        object.__setattr__(self, "preview_distances",
                           tuple(float(d) for d in self.preview_distances))


@dataclass(frozen=True)
class StepResult:
    x_next: VehicleState
    in_constraints: bool
    in_target: bool


def _derivatives(cfg: SimConfig, kappa: float, x: VehicleState, u: Action):
    delta = u.u_steer * cfg.steer_max
    v_eff = max(x.v_long, cfg.v_slip_floor)
    alpha_f = math.atan2(x.v_tran + cfg.l_front * x.omega_psi, v_eff) - delta
    alpha_r = math.atan2(x.v_tran - cfg.l_rear * x.omega_psi, v_eff)
    a_yf = -cfg.stiff_front * alpha_f
    a_yr = -cfg.stiff_rear * alpha_r
    cos_d = math.cos(delta)

    denom = 1.0 - x.x_tran * kappa
    if abs(denom) < 1e-6:
        raise SimSingularityError(f"Frenet singularity at s={x.s!r}, x_tran={x.x_tran!r}")
    s_dot = (x.v_long * math.cos(x.e_psi) - x.v_tran * math.sin(x.e_psi)) / denom

    dv_long = (cfg.drive_gain * u.u_a - cfg.drag_lin * x.v_long
               - cfg.drag_quad * x.v_long * x.v_long + x.omega_psi * x.v_tran)
    dv_tran = a_yf * cos_d + a_yr - x.omega_psi * x.v_long
    domega = (cfg.l_front * a_yf * cos_d - cfg.l_rear * a_yr) / cfg.yaw_radius_sq
    dx_tran = x.v_long * math.sin(x.e_psi) + x.v_tran * math.cos(x.e_psi)
    de_psi = x.omega_psi - kappa * s_dot
    return dv_long, dv_tran, domega, s_dot, dx_tran, de_psi


def step(cfg: SimConfig, track: TrackSpec, x: VehicleState, u: Action) -> VehicleState:
    """One forward-Euler step of the plant.  Deterministic."""
    kappa = curvature_at(track, x.s)
    dv_long, dv_tran, domega, s_dot, dx_tran, de_psi = _derivatives(cfg, kappa, x, u)
    dt = cfg.dt
    v_long = min(max(x.v_long + dt * dv_long, 0.0), cfg.v_max)
    return VehicleState(
        v_long=v_long,
        v_tran=x.v_tran + dt * dv_tran,
        omega_psi=x.omega_psi + dt * domega,
        s=x.s + dt * s_dot,
        x_tran=x.x_tran + dt * dx_tran,
        e_psi=x.e_psi + dt * de_psi,
    )


def lane_preview(track: TrackSpec, x: VehicleState, distances) -> list:
    """Vehicle-frame lateral offsets of the lane center at arc ranges ahead.

    This is the information a forward lane camera provides: for each lookahead
    arc distance the lateral coordinate (left positive) of the centerline
    point, expressed in the vehicle's own frame.  It blends lateral deviation,
    heading error, and upcoming curvature, with no absolute localization.
    """
    order = sorted(range(len(distances)), key=lambda i: distances[i])
    out = [0.0] * len(distances)
    # centerline pose ahead of the vehicle, in the tangent frame at arc s;
    # walk segments by index so float rounding cannot stall the cursor
    px, py, psi = 0.0, 0.0, 0.0
    arc = 0.0
    s_w = x.s % track.lap_length
    seg = track._segment_index(s_w)
    n_seg = len(track.segments)
    remaining = track._starts[seg + 1] - s_w
    sin_e, cos_e = math.sin(x.e_psi), math.cos(x.e_psi)

    def advance(length: float, kappa: float):
        nonlocal px, py, psi
        if abs(kappa) < 1e-12:
            px += length * math.cos(psi)
            py += length * math.sin(psi)
        else:
            p1 = psi + kappa * length
            px += (math.sin(p1) - math.sin(psi)) / kappa
            py -= (math.cos(p1) - math.cos(psi)) / kappa
            psi = p1

    for i in order:
        d = float(distances[i])
        while arc + remaining < d:
            advance(remaining, track.segments[seg][1])
            arc += remaining
            seg = (seg + 1) % n_seg
            remaining = track.segments[seg][0]
        partial = d - arc
        advance(partial, track.segments[seg][1])
        remaining -= partial
        arc = d
        rel_x, rel_y = px, py - x.x_tran
        out[i] = -sin_e * rel_x + cos_e * rel_y
    return out


def observe(cfg: SimConfig, track: TrackSpec, x: VehicleState,
            rng: Optional[np.random.Generator] = None) -> Observation:
    """Output map: body velocities and a lane-center preview, noise-corrupted."""
    preview = lane_preview(track, x, cfg.preview_distances)
    v = [x.v_long, x.v_tran, x.omega_psi]
    if rng is not None and cfg.noise_sigma_v > 0.0:
        n = rng.normal(0.0, cfg.noise_sigma_v, size=3)
        v = [a + b for a, b in zip(v, n)]
    if rng is not None and cfg.noise_sigma_kappa > 0.0 and preview:
        n = rng.normal(0.0, cfg.noise_sigma_kappa, size=len(preview))
        preview = [a + b for a, b in zip(preview, n)]
    return Observation(v[0], v[1], v[2], tuple(preview))


def in_constraints(cfg: SimConfig, track: TrackSpec, x: VehicleState) -> bool:
    lat_bound = track.half_width - cfg.half_width_margin
    return (abs(x.x_tran) <= lat_bound
            and 0.0 <= x.v_long <= cfg.v_max
            and abs(x.e_psi) <= cfg.e_psi_max)


def in_target(cfg: SimConfig, track: TrackSpec, x: VehicleState, s_start: float) -> bool:
    """Target set: required lap progress made while still inside the constraints."""
    return (x.s >= s_start + cfg.lap_target * track.lap_length
            and in_constraints(cfg, track, x))


def stage_cost(cfg: SimConfig, track: TrackSpec, x: VehicleState, u: Action,
               s_start: float) -> float:
    """Unit cost per step until the target set is reached; zero afterwards."""
    return 0.0 if in_target(cfg, track, x, s_start) else 1.0


def step_result(cfg: SimConfig, track: TrackSpec, x: VehicleState, u: Action,
                s_start: float) -> StepResult:
    x_next = step(cfg, track, x, u)
    return StepResult(
        x_next=x_next,
        in_constraints=in_constraints(cfg, track, x_next),
        in_target=in_target(cfg, track, x_next, s_start),
    )


# Policies are callables (observation, full_state) -> Action.  Full-state
# experts ignore the observation; output-feedback policies ignore the state.
Policy = Callable[[Observation, VehicleState], Action]


def default_start_state(v_long: float = 1.0, s: float = 0.0) -> VehicleState:
    return VehicleState(v_long=v_long, v_tran=0.0, omega_psi=0.0, s=s,
                        x_tran=0.0, e_psi=0.0)


def rollout(cfg: SimConfig, track: TrackSpec, policy: Policy, x0: VehicleState,
            max_steps: int, rng: np.random.Generator,
            relabel: Optional[Callable[[VehicleState], Action]] = None) -> Trajectory:
    """Run the closed loop until target, constraint violation, or timeout.

    Actions are clamped to the input box before stepping.  ``relabel``
    optionally supplies the expert action recorded with every sample; without
    it the applied action doubles as the expert action.
    """
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    samples = []
    x = x0
    s_start = x0.s
    outcome, reason = Outcome.FAILURE, TerminationReason.TIMEOUT
    for _ in range(max_steps):
        y = observe(cfg, track, x, rng)
        u_raw = policy(y, x)
        u = Action.clamped(u_raw.u_a, u_raw.u_steer)
        try:
            x_next = step(cfg, track, x, u)
        except SimSingularityError:
            outcome, reason = Outcome.FAILURE, TerminationReason.SINGULARITY
            break
        u_expert = relabel(x) if relabel is not None else u
        samples.append(Sample(x=x, y=y, u_expert=u_expert, u_applied=u, x_next=x_next))
        x = x_next
        if not in_constraints(cfg, track, x):
            outcome, reason = Outcome.FAILURE, TerminationReason.CONSTRAINT_VIOLATION
            break
        if in_target(cfg, track, x, s_start):
            outcome, reason = Outcome.SUCCESS, TerminationReason.REACHED_TARGET
            break
    return Trajectory(samples=samples, outcome=outcome, termination_reason=reason)


def episode_rng(seed: int, episode_index: int) -> np.random.Generator:
    """Independent, reproducible stream for one episode."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(
        entropy=seed, spawn_key=(episode_index,))))
