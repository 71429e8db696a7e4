"""Full-state expert policies and a grid-search predictive safety filter.

Both experts are privileged: they read the true vehicle state.  The PID
expert is deliberately conservative; the racing expert trades margin for lap
time and is *not* guaranteed safe, which is what makes its noisy rollouts
produce genuine failures for the labeling pipeline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np

from .core import Action, Observation, VehicleState
from .sim import SimConfig, SimSingularityError, step
from .track import TrackSpec, curvature_at


@dataclass(frozen=True)
class PidGains:
    kp_v: float = 1.2
    ki_v: float = 0.6
    kp_lat: float = 0.7    # rad of steering per m of lateral error
    kd_lat: float = 1.1    # rad per rad of heading error


def _steer_feedforward(cfg: SimConfig, kappa: float, v: float) -> float:
    """Kinematic steering for path curvature plus the linear-tire understeer term."""
    wheelbase = cfg.l_front + cfg.l_rear
    a_lat = v * v * kappa
    return math.atan(wheelbase * kappa) + 0.5 * a_lat * (1.0 / cfg.stiff_front
                                                         - 1.0 / cfg.stiff_rear)


def _drag_throttle(cfg: SimConfig, v: float) -> float:
    return (cfg.drag_lin * v + cfg.drag_quad * v * v) / cfg.drive_gain


class PidCenterline:
    """Centerline-tracking expert: PI speed control, PD lateral control.

    The speed loop carries an integrator, so use one instance per rollout.
    """

    def __init__(self, cfg: SimConfig, track: TrackSpec, v_ref: float = 1.0,
                 gains: PidGains = PidGains()):
        self.cfg = cfg
        self.track = track
        self.v_ref = v_ref
        self.gains = gains
        self._integral = 0.0

    def __call__(self, y: Optional[Observation], x: VehicleState) -> Action:
        cfg, g = self.cfg, self.gains
        err_v = self.v_ref - x.v_long
        self._integral = min(max(self._integral + err_v * cfg.dt, -1.0), 1.0)
        u_a = _drag_throttle(cfg, self.v_ref) + g.kp_v * err_v + g.ki_v * self._integral

        kappa = curvature_at(self.track, x.s)
        delta = (_steer_feedforward(cfg, kappa, x.v_long)
                 - g.kp_lat * x.x_tran - g.kd_lat * x.e_psi)
        return Action.clamped(u_a, delta / cfg.steer_max)


def pid_centerline(x: VehicleState, v_ref: float, gains: PidGains,
                   cfg: SimConfig, track: TrackSpec,
                   integral: float = 0.0) -> Action:
    """Single-shot PID action with an explicit integrator value (stateless form)."""
    ctl = PidCenterline(cfg, track, v_ref=v_ref, gains=gains)
    ctl._integral = integral
    return ctl(None, x)


@dataclass(frozen=True)
class RaceParams:
    a_lat_max: float = 2.8       # lateral-acceleration budget, m/s^2
    lookahead: float = 2.8       # arc window scanned for the worst curvature, m
    kappa_floor: float = 0.12    # caps straight-line target speed
    offset_max: float = 0.40     # largest lateral offset of the racing line, m
    offset_gain: float = 0.5     # m of offset per 1/m of upcoming curvature
    offset_lead: float = 1.2     # how far ahead the offset reference looks, m
    pursuit_dist: float = 1.0    # pure-pursuit target distance, m
    kp_v: float = 2.0
    ki_v: float = 0.4


class RacingExpert:
    """Curvature-aware speed profile plus pure-pursuit on an offset racing line.

    Runs near the handling limit on purpose: the speed profile has no margin
    for disturbance, so actuation noise produces real constraint violations.
    """

    def __init__(self, cfg: SimConfig, track: TrackSpec, params: RaceParams = RaceParams()):
        self.cfg = cfg
        self.track = track
        self.params = params
        self._integral = 0.0

    def target_speed(self, s: float) -> float:
        p = self.params
        worst = p.kappa_floor
        d = 0.0
        while d <= p.lookahead:
            worst = max(worst, abs(curvature_at(self.track, s + d)))
            d += 0.25
        return min(self.cfg.v_max, math.sqrt(p.a_lat_max / worst))

    def offset_ref(self, s: float) -> float:
        p = self.params
        raw = curvature_at(self.track, s + p.offset_lead) * p.offset_gain
        return -min(max(raw, -p.offset_max), p.offset_max)

    def __call__(self, y: Optional[Observation], x: VehicleState) -> Action:
        cfg, p = self.cfg, self.params
        v_t = self.target_speed(x.s)
        err_v = v_t - x.v_long
        self._integral = min(max(self._integral + err_v * cfg.dt, -1.0), 1.0)
        u_a = _drag_throttle(cfg, v_t) + p.kp_v * err_v + p.ki_v * self._integral

        s_t = x.s + p.pursuit_dist
        dy = self.offset_ref(s_t) - x.x_tran
        alpha = math.atan2(dy, p.pursuit_dist) - x.e_psi
        l_d = math.hypot(p.pursuit_dist, dy)
        kappa_cmd = 2.0 * math.sin(alpha) / l_d + curvature_at(self.track, x.s)
        delta = _steer_feedforward(cfg, kappa_cmd, x.v_long)
        return Action.clamped(u_a, delta / cfg.steer_max)


def racing_expert(x: VehicleState, track: TrackSpec, params: RaceParams,
                  cfg: SimConfig) -> Action:
    """Single-shot racing action with a fresh integrator (stateless form)."""
    return RacingExpert(cfg, track, params)(None, x)


class FilterDecision(NamedTuple):
    action: Action
    feasible: bool


def predictive_filter_oracle(x: VehicleState, u_hat: Action,
                             safe_test: Callable[[VehicleState], object],
                             cfg: SimConfig, track: TrackSpec,
                             n_candidates: int = 21) -> FilterDecision:
    """Minimum-intervention one-step filter by exhaustive grid search.

    Evaluates ``u_hat`` plus an ``n_candidates**2`` action grid, keeping the
    candidate closest to ``u_hat`` whose successor state passes ``safe_test``.
    ``safe_test`` may return a bool or a signed score (safe iff >= 0).  When
    nothing passes, the highest-scoring candidate is returned with
    ``feasible=False``; with boolean tests all scores tie at 0, so the
    fallback degrades to the candidate nearest ``u_hat``.
    """
    grid = np.linspace(-1.0, 1.0, n_candidates)
    candidates = [u_hat] + [Action(a, s) for a in grid for s in grid]
    best = None           # (dist2, action) among safe candidates
    best_any = None       # (-score, dist2, action) among all candidates
    for u in candidates:
        try:
            x_next = step(cfg, track, x, u)
        except SimSingularityError:
            continue
        verdict = safe_test(x_next)
        if isinstance(verdict, (bool, np.bool_)):
            safe, score = bool(verdict), 1.0 if verdict else 0.0
        else:
            score = float(verdict)
            safe = score >= 0.0
        d2 = (u.u_a - u_hat.u_a) ** 2 + (u.u_steer - u_hat.u_steer) ** 2
        if safe and (best is None or d2 < best[0]):
            best = (d2, u)
        key = (-score, d2)
        if best_any is None or key < best_any[:2]:
            best_any = (key[0], key[1], u)
    if best is not None:
        return FilterDecision(action=best[1], feasible=True)
    if best_any is None:
        return FilterDecision(action=u_hat, feasible=False)
    return FilterDecision(action=best_any[2], feasible=False)
