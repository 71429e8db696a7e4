"""Command-line entry points: train, eval, report, sim, labeldemo."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import nn
from .autolabel import (
    SyntheticSet,
    classifier_grid,
    label_synthetic,
    train_synthetic_classifier,
)
from .config import (
    expert_params_from,
    parse_config_file,
    sim_config_from,
    snapshot_config,
    train_config_from,
)
from .core import DatasetWriter, save_dataset
from .critic import save_critic
from .evalharness import evaluate
from .reports import (
    contour_segments,
    emit_reports,
    policy_rollout_figure,
    svg_xy_figure,
    write_reports_csv,
)
from .sim import SimConfig
from .track import resolve_track
from .trainer import (
    MlpPolicy,
    NonFiniteLossError,
    TrainConfig,
    make_expert_factory,
    train,
)

EXIT_NONFINITE = 2


def max_workers(requested: int = 0) -> int:
    """Parallelism cap from the CABC_THREADS environment variable."""
    cap = int(os.environ.get("CABC_THREADS", "1") or "1")
    if requested <= 0:
        return max(1, cap)
    return max(1, min(requested, cap))


def _load_configs(args) -> tuple:
    values = parse_config_file(args.config) if args.config else {}
    sim = sim_config_from(values)
    if args.seed is not None:
        values["seed"] = str(args.seed)
        sim = sim_config_from({"seed": str(args.seed)}, base=sim)
    cfg = train_config_from(values, sim)
    return cfg, values


def _cmd_train(args) -> int:
    cfg, values = _load_configs(args)
    from dataclasses import replace
    cfg = replace(cfg, method=args.method,
                  observation_mode="output" if args.obs == "output" else "full_state")
    track = resolve_track(args.track)
    v_ref, pid_gains, race_params = expert_params_from(values)
    factory = make_expert_factory(args.expert, cfg.sim, track, v_ref=v_ref,
                                  pid_gains=pid_gains, race_params=race_params)

    out = args.out
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(snapshot_config(cfg, values))

    expert_eval = evaluate(factory(), cfg.sim, track, seed=cfg.seed, laps=cfg.eval_laps)
    meta = {
        "track": args.track,
        "expert": args.expert,
        "method": cfg.method,
        "observation_mode": cfg.observation_mode,
        "eval_laps": cfg.eval_laps,
        "expert_lap_mean": expert_eval.lap_mean,
        "expert_lap_std": expert_eval.lap_std,
        "expert_laps": expert_eval.laps_completed,
    }

    reports = []
    ckpt_dir = os.path.join(out, "checkpoints")
    writer = DatasetWriter(os.path.join(out, "trajectories.jsonl.gz"))

    def on_epoch(report, policy_params):
        reports.append(report)
        write_reports_csv(reports, os.path.join(out, "reports.csv"))
        if args.checkpoint_every and report.epoch % args.checkpoint_every == 0:
            d = os.path.join(ckpt_dir, f"epoch_{report.epoch:04d}")
            os.makedirs(d, exist_ok=True)
            nn.save_weights(policy_params, os.path.join(d, "policy.json"))

    try:
        result = train(cfg, track, factory, epoch_callback=on_epoch,
                       traj_callback=lambda epoch, trajs: [writer.write(t) for t in trajs])
    except NonFiniteLossError as exc:
        writer.close()
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    writer.close()

    nn.save_weights(result.policy, os.path.join(out, "policy.json"))
    if result.dyn is not None and result.clf is not None:
        save_critic(result.dyn, result.clf, os.path.join(out, "critic"))
    if result.pool.d_plus or result.pool.d_query:
        save_dataset(result.pool, os.path.join(out, "pool.jsonl.gz"))
    meta["early_stopped_at"] = result.early_stopped_at
    meta["completed_epochs"] = len(result.reports)
    with open(os.path.join(out, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1)
    best = max((r.eval_laps for r in result.reports), default=0)
    print(f"done: {len(result.reports)} epochs, best eval {best} laps, "
          f"early stop at {result.early_stopped_at}")
    return 0


def _cmd_eval(args) -> int:
    values = parse_config_file(args.config) if args.config else {}
    sim = sim_config_from(values)
    track = resolve_track(args.track)
    mode = "output" if args.obs == "output" else "full_state"
    policy = MlpPolicy(nn.load_weights(args.weights), mode, track)
    result = evaluate(policy, sim, track, seed=args.seed, laps=args.laps)
    print(json.dumps({
        "laps_completed": result.laps_completed,
        "terminated_by": result.terminated_by.value,
        "lap_mean": result.lap_mean,
        "lap_std": result.lap_std,
        "lap_min": result.lap_min,
        "lap_max": result.lap_max,
    }, indent=1))
    return 0


def _cmd_report(args) -> int:
    written = emit_reports(args.run, args.out, baseline_dir=args.baseline)
    run_policy = os.path.join(args.run, "policy.json")
    cfg_path = os.path.join(args.run, "config.txt")
    meta_path = os.path.join(args.run, "meta.json")
    if os.path.exists(run_policy) and os.path.exists(cfg_path) and os.path.exists(meta_path):
        with open(meta_path, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        values = parse_config_file(cfg_path)
        sim = sim_config_from(values)
        track = resolve_track(meta["track"])
        from .reports import rollout_figure
        path = os.path.join(args.out, "trajectory_xy.svg")
        rollout_figure(run_policy, sim, track, meta.get("observation_mode", "output"),
                       seed=int(values.get("seed", "0")), out_path=path)
        written.append(path)
    for path in written:
        print(path)
    return 0


def _cmd_sim(args) -> int:
    values = parse_config_file(args.config) if args.config else {}
    sim = sim_config_from(values)
    track = resolve_track(args.track)
    v_ref, pid_gains, race_params = expert_params_from(values)
    factory = make_expert_factory(args.expert, sim, track, v_ref=v_ref,
                                  pid_gains=pid_gains, race_params=race_params)
    result = evaluate(factory(), sim, track, seed=args.seed, laps=args.laps)
    print(json.dumps({
        "laps_completed": result.laps_completed,
        "terminated_by": result.terminated_by.value,
        "lap_mean": result.lap_mean,
        "lap_std": result.lap_std,
    }, indent=1))
    if args.render:
        policy_rollout_figure(factory(), sim, track, seed=args.seed,
                              out_path=args.render, laps=min(3, args.laps))
        print(args.render)
    return 0


_SYNTH = {
    "disk": SyntheticSet.disk,
    "crescent": SyntheticSet.crescent,
    "sector": SyntheticSet.sector,
}


def _cmd_labeldemo(args) -> int:
    synth = _SYNTH[args.set]()
    rhos = [float(tok) for tok in args.rho.split(",") if tok]
    os.makedirs(args.out, exist_ok=True)
    workers = max_workers()
    for rho in rhos:
        rng = np.random.default_rng(args.seed)
        plus, query, removed = label_synthetic(synth, args.n, args.n, rho, rng,
                                               workers=workers)
        sdf_plus = synth.signed_distance(plus)
        sdf_query = synth.signed_distance(query)
        tag = f"rho{rho:g}".replace(".", "p")

        points_path = os.path.join(args.out, f"points_{tag}.csv")
        with open(points_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "y", "true_sdf", "label", "removed"])
            for p, s in zip(plus, sdf_plus):
                writer.writerow([repr(p[0]), repr(p[1]), repr(float(s)), 1, 0])
            for p, s, rm in zip(query, sdf_query, removed):
                label = -1 if rm else 0
                writer.writerow([repr(p[0]), repr(p[1]), repr(float(s)), label, int(rm)])

        minus = query[~removed]
        params = train_synthetic_classifier(plus, minus, seed=args.seed)
        xs, ys, probs = classifier_grid(params, bounds=(-5.0, 5.0), n=args.grid)
        grid_path = os.path.join(args.out, f"decision_grid_{tag}.csv")
        with open(grid_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "y", "p_safe"])
            for i in range(len(ys)):
                for j in range(len(xs)):
                    writer.writerow([repr(float(xs[j])), repr(float(ys[i])),
                                     repr(float(probs[i, j]))])

        # true boundary (dotted) and classifier decision boundary overlay
        gx, gy = np.meshgrid(xs, ys)
        sdf_grid = synth.signed_distance(
            np.column_stack([gx.ravel(), gy.ravel()])).reshape(len(ys), len(xs))
        svg = svg_xy_figure(
            [],
            title=f"{args.set}, rho = {rho:g}: removed points in red",
            points=[
                {"x": plus[:, 0], "y": plus[:, 1], "color": "#bbbbbb", "r": 1.0},
                {"x": minus[:, 0], "y": minus[:, 1], "color": "#7f7fff", "r": 1.0},
                {"x": query[removed][:, 0], "y": query[removed][:, 1],
                 "color": "#d62728", "r": 1.8},
            ],
            segments=[
                {"segs": contour_segments(xs, ys, sdf_grid, 0.0), "color": "black",
                 "dash": "2 3"},
                {"segs": contour_segments(xs, ys, probs, 0.5), "color": "#1f77b4"},
            ],
        )
        svg_path = os.path.join(args.out, f"overlay_{tag}.svg")
        with open(svg_path, "w", encoding="utf-8") as fh:
            fh.write(svg)
        n_inc = int((sdf_query[removed] < 0).sum())
        print(f"rho={rho:g}: removed {int(removed.sum())} of {len(query)} "
              f"({n_inc} outside the true set); wrote {points_path}, {grid_path}, {svg_path} "
              f"[workers={workers}]")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cabc",
        description="Constraint-aware behavior cloning on a built-in racing simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a training method and write a run directory")
    p.add_argument("--method", choices=("bc", "ca"), required=True)
    p.add_argument("--track", default="gp", help="built-in track name or track file")
    p.add_argument("--expert", choices=("pid", "racing"), default="racing")
    p.add_argument("--obs", choices=("full", "output"), default="output")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint-every", type=int, default=1,
                   help="policy checkpoint cadence in epochs (0 disables)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate saved policy weights")
    p.add_argument("--weights", required=True)
    p.add_argument("--track", default="gp")
    p.add_argument("--obs", choices=("full", "output"), default="output")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--laps", type=int, default=50)
    p.add_argument("--config", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("report", help="emit charts from run directories")
    p.add_argument("--run", required=True)
    p.add_argument("--baseline", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("sim", help="run an expert and optionally render its path")
    p.add_argument("--expert", choices=("pid", "racing"), default="racing")
    p.add_argument("--track", default="gp")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--laps", type=int, default=3)
    p.add_argument("--render", default=None, help="output SVG path")
    p.add_argument("--config", default=None)
    p.set_defaults(func=_cmd_sim)

    p = sub.add_parser("labeldemo", help="synthetic-set auto-labeling benchmark")
    p.add_argument("--set", choices=tuple(_SYNTH), default="crescent")
    p.add_argument("--rho", default="1.0,0.5,0.25", help="comma-separated radii")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--grid", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_labeldemo)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
