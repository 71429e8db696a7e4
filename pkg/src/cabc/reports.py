"""Result emission: per-epoch CSVs and hand-written SVG charts.

Charts are plain polyline SVGs with no plotting dependency, enough to read
laps-per-epoch, loss curves, lap-time statistics, and rollout geometry at a
glance.  All output is deterministic byte-for-byte for a given run.
"""

from __future__ import annotations

import csv
import json
import math
import os
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .sim import SimConfig
from .track import TrackSpec, frenet_to_cartesian
from .trainer import EpochReport, MlpPolicy


def write_reports_csv(reports: Sequence[EpochReport], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EpochReport.FIELDS)
        for r in reports:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in r.row()])


def read_reports_csv(path) -> List[Dict[str, float]]:
    rows: List[Dict[str, float]] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for record in csv.DictReader(fh):
            row = {}
            for key, value in record.items():
                if key in ("epoch", "new_successes", "new_failures", "n_plus",
                           "n_query", "n_minus", "eval_laps"):
                    row[key] = int(value)
                elif key == "clf_degenerate":
                    row[key] = value == "True"
                else:
                    row[key] = float(value)
            rows.append(row)
    return rows


# --- minimal SVG emission ---------------------------------------------------------

_W, _H = 720, 420
_ML, _MR, _MT, _MB = 64, 20, 34, 46
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b")


def _ticks(lo: float, hi: float, n: int = 5) -> List[float]:
    if hi <= lo:
        hi = lo + 1.0
    step = (hi - lo) / n
    mag = 10.0 ** math.floor(math.log10(step))
    for mult in (1.0, 2.0, 2.5, 5.0, 10.0):
        if mag * mult >= step:
            step = mag * mult
            break
    start = math.ceil(lo / step) * step
    out = []
    t = start
    while t <= hi + 1e-12:
        out.append(round(t, 10))
        t += step
    return out


class SvgChart:
    """A single x/y chart with polyline series, bands, and point markers."""

    def __init__(self, title: str, xlabel: str, ylabel: str):
        self.title, self.xlabel, self.ylabel = title, xlabel, ylabel
        self.series: List[dict] = []
        self.markers: List[Tuple[float, float, str]] = []
        self.hlines: List[Tuple[float, str, str]] = []

    def add_series(self, xs, ys, label: str, color: Optional[str] = None,
                   dash: Optional[str] = None, band: Optional[Tuple] = None):
        self.series.append({"x": list(map(float, xs)), "y": list(map(float, ys)),
                            "label": label,
                            "color": color or _COLORS[len(self.series) % len(_COLORS)],
                            "dash": dash, "band": band})

    def add_marker(self, x: float, y: float, text: str):
        self.markers.append((float(x), float(y), text))

    def add_hline(self, y: float, label: str, color: str = "#555555"):
        self.hlines.append((float(y), label, color))

    def _bounds(self):
        xs = [v for s in self.series for v in s["x"]] or [0.0, 1.0]
        ys = [v for s in self.series for v in s["y"]] or [0.0, 1.0]
        for s in self.series:
            if s["band"]:
                lo, hi = s["band"]
                ys.extend(map(float, lo))
                ys.extend(map(float, hi))
        ys.extend(y for y, _, _ in self.hlines)
        x_lo, x_hi = min(xs), max(xs)
        y_lo, y_hi = min(ys), max(ys)
        if x_hi == x_lo:
            x_hi = x_lo + 1.0
        if y_hi == y_lo:
            y_hi = y_lo + 1.0
        pad = 0.05 * (y_hi - y_lo)
        return x_lo, x_hi, y_lo - pad, y_hi + pad

    def render(self) -> str:
        x_lo, x_hi, y_lo, y_hi = self._bounds()

        def px(x: float) -> float:
            return _ML + (x - x_lo) / (x_hi - x_lo) * (_W - _ML - _MR)

        def py(y: float) -> float:
            return _H - _MB - (y - y_lo) / (y_hi - y_lo) * (_H - _MT - _MB)

        parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
            f'viewBox="0 0 {_W} {_H}">',
            f'<rect width="{_W}" height="{_H}" fill="white"/>',
            f'<text x="{_W / 2:.1f}" y="20" text-anchor="middle" font-size="14" '
            f'font-family="sans-serif">{self.title}</text>',
        ]
        axis = (f'M {_ML} {_MT} L {_ML} {_H - _MB} L {_W - _MR} {_H - _MB}')
        parts.append(f'<path d="{axis}" stroke="black" fill="none"/>')
        for t in _ticks(x_lo, x_hi):
            parts.append(f'<line x1="{px(t):.1f}" y1="{_H - _MB}" x2="{px(t):.1f}" '
                         f'y2="{_H - _MB + 4}" stroke="black"/>')
            parts.append(f'<text x="{px(t):.1f}" y="{_H - _MB + 17}" text-anchor="middle" '
                         f'font-size="10" font-family="sans-serif">{t:g}</text>')
        for t in _ticks(y_lo, y_hi):
            parts.append(f'<line x1="{_ML - 4}" y1="{py(t):.1f}" x2="{_ML}" '
                         f'y2="{py(t):.1f}" stroke="black"/>')
            parts.append(f'<text x="{_ML - 7}" y="{py(t) + 3:.1f}" text-anchor="end" '
                         f'font-size="10" font-family="sans-serif">{t:g}</text>')
        parts.append(f'<text x="{(_ML + _W - _MR) / 2:.1f}" y="{_H - 8}" text-anchor="middle" '
                     f'font-size="12" font-family="sans-serif">{self.xlabel}</text>')
        parts.append(f'<text x="16" y="{(_MT + _H - _MB) / 2:.1f}" text-anchor="middle" '
                     f'font-size="12" font-family="sans-serif" '
                     f'transform="rotate(-90 16 {(_MT + _H - _MB) / 2:.1f})">{self.ylabel}</text>')
        for y, label, color in self.hlines:
            parts.append(f'<line x1="{_ML}" y1="{py(y):.1f}" x2="{_W - _MR}" '
                         f'y2="{py(y):.1f}" stroke="{color}" stroke-dasharray="6 4"/>')
            parts.append(f'<text x="{_W - _MR - 4}" y="{py(y) - 4:.1f}" text-anchor="end" '
                         f'font-size="10" font-family="sans-serif" fill="{color}">{label}</text>')
        for s in self.series:
            if s["band"]:
                lo, hi = s["band"]
                fwd = " ".join(f"{px(x):.1f},{py(h):.1f}" for x, h in zip(s["x"], hi))
                back = " ".join(f"{px(x):.1f},{py(l):.1f}"
                                for x, l in zip(reversed(s["x"]), reversed(list(lo))))
                parts.append(f'<polygon points="{fwd} {back}" fill="{s["color"]}" '
                             f'opacity="0.15" stroke="none"/>')
            pts = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(s["x"], s["y"]))
            dash = f' stroke-dasharray="{s["dash"]}"' if s["dash"] else ""
            parts.append(f'<polyline points="{pts}" fill="none" stroke="{s["color"]}" '
                         f'stroke-width="1.5"{dash}/>')
        for i, s in enumerate(self.series):
            y0 = _MT + 14 * i
            parts.append(f'<line x1="{_W - _MR - 110}" y1="{y0}" x2="{_W - _MR - 88}" '
                         f'y2="{y0}" stroke="{s["color"]}" stroke-width="2"/>')
            parts.append(f'<text x="{_W - _MR - 84}" y="{y0 + 4}" font-size="10" '
                         f'font-family="sans-serif">{s["label"]}</text>')
        for x, y, text in self.markers:
            parts.append(f'<text x="{px(x):.1f}" y="{py(y) + 5:.1f}" text-anchor="middle" '
                         f'font-size="16" font-family="sans-serif">{text}</text>')
        parts.append("</svg>")
        return "\n".join(parts)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.render())


def svg_xy_figure(polylines: Sequence[dict], title: str, width: int = 560,
                  height: int = 560, points: Sequence[dict] = (),
                  segments: Sequence[dict] = ()) -> str:
    """Equal-aspect world-coordinate figure.

    ``polylines`` and ``points`` are ``{x, y, color, dash/r}`` dicts;
    ``segments`` are ``{segs: [((x0,y0),(x1,y1)), ...], color, dash}``.
    """
    xs = [v for p in polylines for v in p["x"]] + [v for p in points for v in p["x"]]
    ys = [v for p in polylines for v in p["y"]] + [v for p in points for v in p["y"]]
    for s in segments:
        for (x0, y0), (x1, y1) in s["segs"]:
            xs.extend((x0, x1))
            ys.extend((y0, y1))
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    span = max(x_hi - x_lo, y_hi - y_lo, 1e-9)
    margin = 30
    scale = (min(width, height) - 2 * margin) / span
    cx, cy = 0.5 * (x_lo + x_hi), 0.5 * (y_lo + y_hi)

    def px(x):
        return width / 2 + (x - cx) * scale

    def py(y):
        return height / 2 - (y - cy) * scale

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="18" text-anchor="middle" font-size="13" '
        f'font-family="sans-serif">{title}</text>',
    ]
    for p in points:
        r = p.get("r", 1.2)
        color = p.get("color", "black")
        for x, y in zip(p["x"], p["y"]):
            parts.append(f'<circle cx="{px(x):.1f}" cy="{py(y):.1f}" r="{r}" '
                         f'fill="{color}" stroke="none"/>')
    for s in segments:
        dash = f' stroke-dasharray="{s["dash"]}"' if s.get("dash") else ""
        for (x0, y0), (x1, y1) in s["segs"]:
            parts.append(f'<line x1="{px(x0):.1f}" y1="{py(y0):.1f}" x2="{px(x1):.1f}" '
                         f'y2="{py(y1):.1f}" stroke="{s.get("color", "black")}" '
                         f'stroke-width="1.2"{dash}/>')
    for p in polylines:
        pts = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(p["x"], p["y"]))
        dash = f' stroke-dasharray="{p["dash"]}"' if p.get("dash") else ""
        parts.append(f'<polyline points="{pts}" fill="none" '
                     f'stroke="{p.get("color", "black")}" stroke-width="1.3"{dash}/>')
    parts.append("</svg>")
    return "\n".join(parts)


def contour_segments(xs: np.ndarray, ys: np.ndarray, field: np.ndarray,
                     level: float) -> List[Tuple[Tuple[float, float], Tuple[float, float]]]:
    """Level-crossing segments of a scalar grid (simple marching squares)."""
    segs = []
    F = np.asarray(field) - level
    for i in range(len(ys) - 1):
        for j in range(len(xs) - 1):
            corners = [F[i, j], F[i, j + 1], F[i + 1, j + 1], F[i + 1, j]]
            pts = []
            edges = (
                ((xs[j], ys[i]), (xs[j + 1], ys[i]), corners[0], corners[1]),
                ((xs[j + 1], ys[i]), (xs[j + 1], ys[i + 1]), corners[1], corners[2]),
                ((xs[j + 1], ys[i + 1]), (xs[j], ys[i + 1]), corners[2], corners[3]),
                ((xs[j], ys[i + 1]), (xs[j], ys[i]), corners[3], corners[0]),
            )
            for (x0, y0), (x1, y1), f0, f1 in edges:
                if (f0 < 0) != (f1 < 0):
                    t = f0 / (f0 - f1)
                    pts.append((x0 + t * (x1 - x0), y0 + t * (y1 - y0)))
            for k in range(0, len(pts) - 1, 2):
                segs.append((pts[k], pts[k + 1]))
    return segs


def track_polylines(track: TrackSpec, ds: float = 0.05) -> List[dict]:
    n = max(2, int(math.ceil(track.lap_length / ds)))
    svals = [i * track.lap_length / n for i in range(n + 1)]
    center = [frenet_to_cartesian(track, s, 0.0)[:2] for s in svals]
    left = [frenet_to_cartesian(track, s, track.half_width)[:2] for s in svals]
    right = [frenet_to_cartesian(track, s, -track.half_width)[:2] for s in svals]
    out = []
    for pts, dash in ((center, "4 4"), (left, None), (right, None)):
        out.append({"x": [p[0] for p in pts], "y": [p[1] for p in pts],
                    "color": "#888888", "dash": dash})
    return out


# --- run-directory reports ----------------------------------------------------------

def _early_stop_epoch(rows: List[dict], full_laps: int) -> Optional[int]:
    count = 0
    for row in rows:
        if row["eval_laps"] >= full_laps:
            count += 1
            if count == 2:
                return row["epoch"]
    return None


def _require(paths: Sequence[str]) -> None:
    missing = [p for p in paths if not os.path.exists(p)]
    if missing:
        raise FileNotFoundError("missing run files: " + ", ".join(missing))


def emit_reports(run_dir, out_dir, baseline_dir=None) -> List[str]:
    """Produce comparison charts and CSV extracts from one or two run dirs."""
    reports_path = os.path.join(run_dir, "reports.csv")
    meta_path = os.path.join(run_dir, "meta.json")
    _require([reports_path, meta_path])
    os.makedirs(out_dir, exist_ok=True)
    rows = read_reports_csv(reports_path)
    with open(meta_path, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    base_rows = None
    if baseline_dir is not None:
        base_reports = os.path.join(baseline_dir, "reports.csv")
        _require([base_reports])
        base_rows = read_reports_csv(base_reports)
    written: List[str] = []

    def _csv(name: str, header: List[str], data_rows: List[list]) -> None:
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(data_rows)
        written.append(path)

    full_laps = int(meta.get("eval_laps", 50))
    epochs = [r["epoch"] for r in rows]

    # laps per epoch
    laps_rows = [[r["epoch"], r["eval_laps"]] for r in rows]
    _csv("laps_vs_epoch.csv", ["epoch", "laps"], laps_rows)
    chart = SvgChart("Consecutive laps completed per evaluation", "epoch", "laps")
    chart.add_series(epochs, [r["eval_laps"] for r in rows], meta.get("method", "run"))
    if base_rows:
        chart.add_series([r["epoch"] for r in base_rows],
                         [r["eval_laps"] for r in base_rows], "baseline", dash="5 3")
    es = _early_stop_epoch(rows, full_laps)
    if es is not None:
        chart.add_marker(es, full_laps, "x")
    path = os.path.join(out_dir, "laps_vs_epoch.svg")
    chart.save(path)
    written.append(path)

    # imitation loss
    _csv("imitation_loss.csv", ["epoch", "clone_loss"],
         [[r["epoch"], repr(r["clone_loss"])] for r in rows])
    chart = SvgChart("Imitation loss per epoch", "epoch", "clone loss")
    chart.add_series(epochs, [r["clone_loss"] for r in rows], meta.get("method", "run"))
    if base_rows:
        chart.add_series([r["epoch"] for r in base_rows],
                         [r["clone_loss"] for r in base_rows], "baseline", dash="5 3")
    if es is not None:
        chart.add_marker(es, rows[es]["clone_loss"] if es < len(rows) else 0.0, "x")
    path = os.path.join(out_dir, "imitation_loss.svg")
    chart.save(path)
    written.append(path)

    # lap-time statistics (only epochs that completed the full lap count)
    done = [r for r in rows if r["eval_laps"] >= full_laps]
    _csv("laptime_stats.csv", ["epoch", "lap_mean", "lap_std"],
         [[r["epoch"], repr(r["eval_lap_mean"]), repr(r["eval_lap_std"])] for r in done])
    chart = SvgChart("Lap time (mean +- std) at full-distance evaluations",
                     "epoch", "lap time [s]")
    if done:
        mean = [r["eval_lap_mean"] for r in done]
        std = [r["eval_lap_std"] for r in done]
        chart.add_series([r["epoch"] for r in done], mean, meta.get("method", "run"),
                         band=([m - s for m, s in zip(mean, std)],
                               [m + s for m, s in zip(mean, std)]))
    if base_rows:
        base_done = [r for r in base_rows if r["eval_laps"] >= full_laps]
        if base_done:
            chart.add_series([r["epoch"] for r in base_done],
                             [r["eval_lap_mean"] for r in base_done], "baseline", dash="5 3")
    if "expert_lap_mean" in meta:
        chart.add_hline(meta["expert_lap_mean"], "expert")
    path = os.path.join(out_dir, "laptime_stats.svg")
    chart.save(path)
    written.append(path)
    return written


def rollout_figure(policy_params_path, sim_cfg: SimConfig, track: TrackSpec,
                   mode: str, seed: int, out_path, laps: int = 3) -> str:
    """Roll the saved policy and draw its path over the track outline."""
    from . import nn
    policy = MlpPolicy(nn.load_weights(policy_params_path), mode, track)
    return policy_rollout_figure(policy, sim_cfg, track, seed, out_path, laps)


def policy_rollout_figure(policy, sim_cfg: SimConfig, track: TrackSpec, seed: int,
                          out_path, laps: int = 3) -> str:
    from .sim import default_start_state, rollout
    rng = np.random.Generator(np.random.PCG64(seed))
    polys = track_polylines(track)
    x = default_start_state(v_long=1.0, s=0.0)
    xs: List[float] = []
    ys: List[float] = []
    for _ in range(laps):
        traj = rollout(sim_cfg, track, policy, x, sim_cfg.max_steps, rng)
        for smp in traj.samples:
            gx, gy, _ = frenet_to_cartesian(track, smp.x.s, smp.x.x_tran, smp.x.e_psi)
            xs.append(gx)
            ys.append(gy)
        if traj.outcome.value != "success":
            break
        x = traj.samples[-1].x_next
    polys.append({"x": xs, "y": ys, "color": "#d62728"})
    svg = svg_xy_figure(polys, f"rollout on {track.name}")
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(svg)
    return out_path
