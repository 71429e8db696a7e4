import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar

from cabc.track import (
    TrackSpec,
    curvature_at,
    default_tracks,
    frenet_to_cartesian,
    get_track,
    load_track,
    resolve_track,
    save_track,
)


def two_half_circles():
    # closed in heading only; fine for curvature lookups
    return TrackSpec(segments=((math.pi * 1.0, 1.0), (math.pi * 2.0, 0.5)),
                     half_width=0.5, name="two")


class TestSpecValidation:
    def test_rejects_open_track(self):
        with pytest.raises(ValueError):
            TrackSpec(segments=((1.0, 0.5),), half_width=0.5)

    def test_rejects_nonpositive_length(self):
        with pytest.raises(ValueError):
            TrackSpec(segments=((0.0, 1.0), (2 * math.pi, 1.0)), half_width=0.5)

    def test_rejects_nonpositive_half_width(self):
        with pytest.raises(ValueError):
            TrackSpec(segments=((2 * math.pi, 1.0),), half_width=0.0)

    def test_heading_closure_of_defaults(self):
        for track in default_tracks():
            turn = sum(l * k for l, k in track.segments)
            assert abs(abs(turn) - 2 * math.pi) < 1e-9


class TestCurvature:
    def test_circle_constant(self, circle):
        radius = 1.0 / circle.segments[0][1]
        for s in (0.0, 1.0, circle.lap_length / 3, circle.lap_length - 1e-9):
            assert curvature_at(circle, s) == pytest.approx(1.0 / radius)

    def test_segment_boundary(self):
        track = two_half_circles()
        first_len = track.segments[0][0]
        assert curvature_at(track, first_len - 1e-9) == 1.0
        assert curvature_at(track, first_len + 1e-9) == 0.5

    def test_wrap_identity(self):
        track = two_half_circles()
        assert curvature_at(track, track.lap_length + 0.5) == curvature_at(track, 0.5)

    @given(st.floats(-100.0, 100.0))
    @settings(max_examples=50, deadline=None)
    def test_periodicity(self, s):
        # float modulo jitters by an ulp, so stay clear of segment boundaries
        track = get_track("gp")
        s_w = s % track.lap_length
        starts = [0.0]
        for length, _ in track.segments:
            starts.append(starts[-1] + length)
        assume(all(abs(s_w - b) > 1e-9 for b in starts))
        assert curvature_at(track, s) == curvature_at(track, s + track.lap_length)


class TestFrenetToCartesian:
    def test_circle_anchor(self, circle):
        x, y, psi = frenet_to_cartesian(circle, 0.0, 0.0)
        assert (x, y, psi) == (0.0, 0.0, 0.0)

    def test_circle_quarter_lap(self, circle):
        radius = 1.0 / circle.segments[0][1]
        x, y, psi = frenet_to_cartesian(circle, circle.lap_length / 4, 0.0)
        # quarter turn about the center at (0, R)
        assert x == pytest.approx(radius, abs=1e-9)
        assert y == pytest.approx(radius, abs=1e-9)
        assert psi == pytest.approx(math.pi / 2, abs=1e-12)

    def test_lateral_offset_direction(self, circle):
        x, y, _ = frenet_to_cartesian(circle, 0.0, 0.25)
        assert (x, y) == pytest.approx((0.0, 0.25))  # left of +X travel

    def test_position_closure_of_defaults(self):
        # independent re-integration of every segment, in order
        for track in default_tracks():
            x, y, psi = 0.0, 0.0, 0.0
            for length, kappa in track.segments:
                if abs(kappa) < 1e-12:
                    x += length * math.cos(psi)
                    y += length * math.sin(psi)
                else:
                    p1 = psi + kappa * length
                    x += (math.sin(p1) - math.sin(psi)) / kappa
                    y -= (math.cos(p1) - math.cos(psi)) / kappa
                    psi = p1
            assert math.hypot(x, y) < 1e-6, track.name
            assert abs(abs(psi) - 2 * math.pi) < 1e-9, track.name

    @pytest.mark.parametrize("name", ["circle", "lshaped", "gp"])
    def test_projection_round_trip(self, name):
        """Invert the map with an independent nearest-point projection."""
        track = get_track(name)
        rng = np.random.default_rng(12)

        def centerline_dist(s, px, py):
            cx, cy, _ = frenet_to_cartesian(track, s, 0.0)
            return math.hypot(cx - px, cy - py)

        for _ in range(10):
            s_true = rng.uniform(0.0, track.lap_length)
            xt_true = rng.uniform(-0.45, 0.45)
            px, py, _ = frenet_to_cartesian(track, s_true, xt_true)
            # coarse scan, then local refinement around the best arc length
            grid = np.linspace(0.0, track.lap_length, 2000, endpoint=False)
            dists = [centerline_dist(s, px, py) for s in grid]
            s0 = grid[int(np.argmin(dists))]
            span = track.lap_length / 2000 * 2
            res = minimize_scalar(lambda s: centerline_dist(s, px, py),
                                  bounds=(s0 - span, s0 + span), method="bounded",
                                  options={"xatol": 1e-10})
            s_est = res.x % track.lap_length
            cx, cy, cpsi = frenet_to_cartesian(track, s_est, 0.0)
            xt_est = -(px - cx) * math.sin(cpsi) + (py - cy) * math.cos(cpsi)
            ds = min(abs(s_est - s_true),
                     track.lap_length - abs(s_est - s_true))
            assert ds < 1e-6
            assert abs(xt_est - xt_true) < 1e-6


class TestDefaults:
    def test_names_and_shapes(self):
        tracks = {t.name: t for t in default_tracks()}
        assert set(tracks) == {"circle", "lshaped", "gp"}
        assert len(tracks["circle"].segments) == 1
        assert len(tracks["gp"].segments) >= 8

    def test_gp_has_tight_corner(self, gp):
        threshold = 1.0 / (3.0 * gp.half_width * 4.0)
        assert gp.max_abs_curvature() >= threshold

    def test_gp_alternating_curvature_signs(self, gp):
        signs = [np.sign(k) for _, k in gp.segments if k != 0.0]
        assert any(a != b for a, b in zip(signs, signs[1:]))

    def test_minimum_radius_exceeds_half_width(self):
        # keeps the Frenet chart regular everywhere inside the track
        for track in default_tracks():
            assert 1.0 / track.max_abs_curvature() > track.half_width


class TestFiles:
    def test_round_trip(self, tmp_path, gp):
        path = tmp_path / "gp.track"
        save_track(gp, path)
        loaded = load_track(path)
        assert loaded.segments == gp.segments
        assert loaded.half_width == gp.half_width

    def test_missing_halfwidth(self, tmp_path):
        path = tmp_path / "bad.track"
        path.write_text("1.0 0.5\n")
        with pytest.raises(ValueError):
            load_track(path)

    def test_resolve_by_name_and_path(self, tmp_path, circle):
        assert resolve_track("circle").name == "circle"
        path = tmp_path / "custom.track"
        save_track(circle, path)
        assert resolve_track(str(path)).segments == circle.segments
        with pytest.raises(KeyError):
            resolve_track("nope")
