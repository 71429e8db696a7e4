import math

import numpy as np
import pytest

from cabc.core import Action, Outcome
from cabc.experts import (
    FilterDecision,
    PidCenterline,
    PidGains,
    RaceParams,
    RacingExpert,
    predictive_filter_oracle,
    racing_expert,
    pid_centerline,
)
from cabc.sim import SimConfig, default_start_state, episode_rng, rollout, step
from cabc.track import default_tracks

from conftest import make_state


class NoisyPolicy:
    def __init__(self, inner, sigma, rng):
        self.inner, self.sigma, self.rng = inner, sigma, rng

    def __call__(self, y, x):
        u = self.inner(y, x)
        n = self.rng.normal(0.0, self.sigma, size=2)
        return Action.clamped(u.u_a + n[0], u.u_steer + n[1])


class TestPid:
    def test_equilibrium_tracking(self, stadium, noiseless_sim):
        cfg = noiseless_sim
        pid = PidCenterline(cfg, stadium, v_ref=1.0)
        u = pid(None, make_state(v=1.0, s=1.0))
        assert u.u_steer == 0.0
        drag_comp = (cfg.drag_lin * 1.0 + cfg.drag_quad * 1.0) / cfg.drive_gain
        assert u.u_a == pytest.approx(drag_comp, abs=1e-12)

    def test_steers_back_toward_centerline(self, stadium, noiseless_sim):
        pid = PidCenterline(noiseless_sim, stadium, v_ref=1.0)
        u = pid(None, make_state(v=1.0, s=1.0, xt=0.2))
        assert u.u_steer < 0.0

    @pytest.mark.parametrize("track_name", ["circle", "lshaped", "gp"])
    def test_one_meter_per_second_success_every_track(self, track_name, noiseless_sim):
        track = {t.name: t for t in default_tracks()}[track_name]
        pid = PidCenterline(noiseless_sim, track, v_ref=1.0)
        traj = rollout(noiseless_sim, track, pid, default_start_state(1.0),
                       max_steps=int(track.lap_length / noiseless_sim.dt * 2.5),
                       rng=episode_rng(0, 0))
        assert traj.outcome is Outcome.SUCCESS
        assert max(abs(s.x.x_tran) for s in traj.samples) < 0.3 * track.half_width

    def test_stateless_form_matches_fresh_controller(self, gp, noiseless_sim):
        x = make_state(v=0.8, s=3.0, xt=0.1, ep=-0.05)
        a = pid_centerline(x, 1.0, PidGains(), noiseless_sim, gp)
        b = PidCenterline(noiseless_sim, gp, v_ref=1.0)(None, x)
        assert a == b


class TestRacing:
    def test_straight_target_speed_formula(self, stadium, noiseless_sim):
        race = RacingExpert(noiseless_sim, stadium)
        p = race.params
        # mid-straight, corner beyond the lookahead window
        v_t = race.target_speed(2.0)
        expected = min(noiseless_sim.v_max, math.sqrt(p.a_lat_max / p.kappa_floor))
        assert v_t == pytest.approx(expected)

    def test_corner_speed_uses_worst_preview_curvature(self, gp, noiseless_sim):
        race = RacingExpert(noiseless_sim, gp)
        p = race.params
        kappa_max = gp.max_abs_curvature()
        v_corner = race.target_speed(2.0)  # tight chicane starts at ~2.26 m
        assert v_corner == pytest.approx(math.sqrt(p.a_lat_max / kappa_max), rel=1e-9)

    @pytest.mark.parametrize("track_name", ["circle", "lshaped", "gp"])
    def test_strictly_faster_than_pid(self, track_name, noiseless_sim):
        track = {t.name: t for t in default_tracks()}[track_name]
        max_steps = int(track.lap_length / noiseless_sim.dt * 3)
        pid_traj = rollout(noiseless_sim, track, PidCenterline(noiseless_sim, track, 1.0),
                           default_start_state(1.0), max_steps, episode_rng(0, 0))
        race_traj = rollout(noiseless_sim, track, RacingExpert(noiseless_sim, track),
                            default_start_state(1.0), max_steps, episode_rng(0, 0))
        assert pid_traj.outcome is Outcome.SUCCESS
        assert race_traj.outcome is Outcome.SUCCESS
        assert len(race_traj) < len(pid_traj)

    def test_gp_lap_time_ratio(self, gp, noiseless_sim):
        max_steps = int(gp.lap_length / noiseless_sim.dt * 3)
        pid_traj = rollout(noiseless_sim, gp, PidCenterline(noiseless_sim, gp, 1.0),
                           default_start_state(1.0), max_steps, episode_rng(0, 0))
        race_traj = rollout(noiseless_sim, gp, RacingExpert(noiseless_sim, gp),
                            default_start_state(1.0), max_steps, episode_rng(0, 0))
        assert len(race_traj) < 0.6 * len(pid_traj)

    def test_actuation_noise_produces_failures(self, gp, noiseless_sim):
        failures = 0
        for seed in range(20):
            rng = episode_rng(100 + seed, 0)
            noisy = NoisyPolicy(RacingExpert(noiseless_sim, gp), 0.2, rng)
            traj = rollout(noiseless_sim, gp, noisy, default_start_state(1.0), 2000, rng)
            failures += traj.outcome is not Outcome.SUCCESS
        assert failures >= 1

    def test_stateless_form(self, gp, noiseless_sim):
        x = make_state(v=2.0, s=5.0, xt=-0.1)
        assert racing_expert(x, gp, RaceParams(), noiseless_sim) == \
            RacingExpert(noiseless_sim, gp)(None, x)


class TestPredictiveFilterOracle:
    def test_trivially_safe_returns_proposal(self, gp, noiseless_sim):
        u_hat = Action(0.37, -0.21)
        out = predictive_filter_oracle(make_state(v=1.0, s=1.0), u_hat,
                                       lambda x: True, noiseless_sim, gp)
        assert out == FilterDecision(u_hat, True)

    def test_infeasible_flag(self, gp, noiseless_sim):
        out = predictive_filter_oracle(make_state(v=1.0, s=1.0), Action(0.0, 0.0),
                                       lambda x: False, noiseless_sim, gp)
        assert not out.feasible

    def test_matches_exhaustive_search(self, gp, noiseless_sim):
        """Speed-limit safe test versus an independent scan of the same grid."""
        x = make_state(v=2.0, s=1.0)
        u_hat = Action(1.0, 0.0)
        v_star = 2.05
        safe = lambda xn: xn.v_long <= v_star

        n = 21
        out = predictive_filter_oracle(x, u_hat, safe, noiseless_sim, gp, n_candidates=n)
        grid = np.linspace(-1.0, 1.0, n)
        best, best_d = None, np.inf
        for ua in [u_hat.u_a] + list(grid):
            for us in [u_hat.u_steer] + list(grid):
                cand = Action(float(ua), float(us))
                if not safe(step(noiseless_sim, gp, x, cand)):
                    continue
                d = (cand.u_a - u_hat.u_a) ** 2 + (cand.u_steer - u_hat.u_steer) ** 2
                if d < best_d - 1e-15:
                    best, best_d = cand, d
        assert out.feasible
        d_out = (out.action.u_a - u_hat.u_a) ** 2 + (out.action.u_steer - u_hat.u_steer) ** 2
        assert d_out == pytest.approx(best_d, abs=1e-12)
        assert safe(step(noiseless_sim, gp, x, out.action))
        assert out.action.u_a < u_hat.u_a  # throttle was reduced

    def test_idempotent_on_safe_proposals(self, gp, noiseless_sim):
        rng = np.random.default_rng(8)
        checked = 0
        for _ in range(20):
            x = make_state(v=rng.uniform(0.5, 2.5), s=rng.uniform(0, 30),
                           xt=rng.uniform(-0.3, 0.3))
            u_hat = Action(rng.uniform(-1, 1), rng.uniform(-1, 1))
            safe = lambda xn: abs(xn.x_tran) <= 0.4
            if safe(step(noiseless_sim, gp, x, u_hat)):
                out = predictive_filter_oracle(x, u_hat, safe, noiseless_sim, gp)
                assert out == FilterDecision(u_hat, True)
                checked += 1
        assert checked > 5

    def test_output_always_in_input_box(self, gp, noiseless_sim):
        rng = np.random.default_rng(9)
        for _ in range(10):
            x = make_state(v=rng.uniform(0.5, 2.0), s=rng.uniform(0, 30))
            u_hat = Action(rng.uniform(-1, 1), rng.uniform(-1, 1))
            out = predictive_filter_oracle(
                x, u_hat, lambda xn: xn.v_long <= 1.0, noiseless_sim, gp)
            assert -1.0 <= out.action.u_a <= 1.0
            assert -1.0 <= out.action.u_steer <= 1.0

    def test_scored_safe_test_fallback(self, gp, noiseless_sim):
        # signed score: infeasible everywhere, fallback maximizes the score
        x = make_state(v=1.0, s=1.0)
        score = lambda xn: -1.0 - abs(xn.v_long - 0.9)
        out = predictive_filter_oracle(x, Action(0.0, 0.0), score, noiseless_sim, gp,
                                       n_candidates=5)
        assert not out.feasible