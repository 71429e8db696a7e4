"""Plain-text ``key = value`` configuration files.

One flat namespace covers simulator, trainer, and expert settings so a run
can be reproduced from its snapshot alone.  Unknown keys are rejected:
silent typos in experiment configs are worse than a hard error.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Dict, Optional, Tuple

from .experts import PidGains, RaceParams
from .sim import SimConfig
from .trainer import TrainConfig

_SIM_KEYS = {
    "dt": float,
    "v_max": float,
    "drive_gain": float,
    "drag_lin": float,
    "drag_quad": float,
    "stiff_front": float,
    "stiff_rear": float,
    "l_front": float,
    "l_rear": float,
    "yaw_radius_sq": float,
    "steer_max": float,
    "v_slip_floor": float,
    "half_width_margin": float,
    "e_psi_max": float,
    "noise_sigma_v": float,
    "noise_sigma_kappa": float,
    "preview_k": int,
    "preview_spacing": float,
    "seed": int,
    "max_steps": int,
    "lap_target": int,
}

_TRAIN_KEYS = {
    "epochs": int,
    "alpha": float,
    "rho": float,
    "lambda": float,
    "k_f": int,
    "k_p": int,
    "episodes_per_epoch": int,
    "actuation_noise_sigma": float,
    "hull_tol": float,
    "neighbor_cap": int,
    "batch_size": int,
    "lr_policy": float,
    "lr_dyn": float,
    "lr_clf": float,
    "grad_steps_policy": int,
    "grad_steps_dyn": int,
    "grad_steps_clf": int,
    "method": str,
    "observation_mode": str,
    "hidden": str,
    "eval_laps": int,
    "early_stop": int,
}

_EXPERT_KEYS = {
    "v_ref": float,
    "pid_kp_v": float,
    "pid_ki_v": float,
    "pid_kp_lat": float,
    "pid_kd_lat": float,
    "race_alat_max": float,
    "race_lookahead": float,
    "race_kappa_floor": float,
    "race_offset_max": float,
    "race_offset_gain": float,
    "race_offset_lead": float,
    "race_pursuit_dist": float,
    "race_kp_v": float,
    "race_ki_v": float,
}

KNOWN_KEYS = {**_SIM_KEYS, **_TRAIN_KEYS, **_EXPERT_KEYS}


def parse_config_file(path) -> Dict[str, str]:
    values: Dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}: line {line_no}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in KNOWN_KEYS:
                raise ValueError(f"{path}: line {line_no}: unknown key {key!r}")
            values[key] = value
    return values


def _typed(values: Dict[str, str], table: Dict[str, type]) -> Dict[str, object]:
    return {k: table[k](v) for k, v in values.items() if k in table}


def sim_config_from(values: Dict[str, str], base: Optional[SimConfig] = None) -> SimConfig:
    base = base or SimConfig()
    typed = _typed(values, _SIM_KEYS)
    if "preview_k" in typed or "preview_spacing" in typed:
        k = typed.pop("preview_k", len(base.preview_distances))
        spacing = typed.pop("preview_spacing", 1.0)
        typed["preview_distances"] = tuple(spacing * (i + 1) for i in range(k))
    return replace(base, **typed)


def train_config_from(values: Dict[str, str], sim: SimConfig,
                      base: Optional[TrainConfig] = None) -> TrainConfig:
    base = base or TrainConfig()
    typed = _typed(values, _TRAIN_KEYS)
    if "lambda" in typed:
        typed["lam"] = typed.pop("lambda")
    if "hidden" in typed:
        typed["hidden"] = tuple(int(t) for t in typed["hidden"].split(",") if t)
    if "early_stop" in typed:
        typed["early_stop"] = bool(typed["early_stop"])
    if "seed" in values:
        typed["seed"] = int(values["seed"])
    return replace(base, sim=sim, **typed)


def expert_params_from(values: Dict[str, str]) -> Tuple[float, PidGains, RaceParams]:
    typed = _typed(values, _EXPERT_KEYS)
    v_ref = typed.pop("v_ref", 1.0)
    gains = PidGains(
        kp_v=typed.get("pid_kp_v", PidGains.kp_v),
        ki_v=typed.get("pid_ki_v", PidGains.ki_v),
        kp_lat=typed.get("pid_kp_lat", PidGains.kp_lat),
        kd_lat=typed.get("pid_kd_lat", PidGains.kd_lat),
    )
    race = RaceParams(
        a_lat_max=typed.get("race_alat_max", RaceParams.a_lat_max),
        lookahead=typed.get("race_lookahead", RaceParams.lookahead),
        kappa_floor=typed.get("race_kappa_floor", RaceParams.kappa_floor),
        offset_max=typed.get("race_offset_max", RaceParams.offset_max),
        offset_gain=typed.get("race_offset_gain", RaceParams.offset_gain),
        offset_lead=typed.get("race_offset_lead", RaceParams.offset_lead),
        pursuit_dist=typed.get("race_pursuit_dist", RaceParams.pursuit_dist),
        kp_v=typed.get("race_kp_v", RaceParams.kp_v),
        ki_v=typed.get("race_ki_v", RaceParams.ki_v),
    )
    return v_ref, gains, race


def snapshot_config(cfg: TrainConfig, values: Dict[str, str]) -> str:
    """Render a full, reloadable snapshot of the effective configuration."""
    sim = cfg.sim
    spacing = (sim.preview_distances[0] if sim.preview_distances else 1.0)
    lines = [
        f"dt = {sim.dt!r}",
        f"v_max = {sim.v_max!r}",
        f"drive_gain = {sim.drive_gain!r}",
        f"drag_lin = {sim.drag_lin!r}",
        f"drag_quad = {sim.drag_quad!r}",
        f"stiff_front = {sim.stiff_front!r}",
        f"stiff_rear = {sim.stiff_rear!r}",
        f"l_front = {sim.l_front!r}",
        f"l_rear = {sim.l_rear!r}",
        f"yaw_radius_sq = {sim.yaw_radius_sq!r}",
        f"steer_max = {sim.steer_max!r}",
        f"v_slip_floor = {sim.v_slip_floor!r}",
        f"half_width_margin = {sim.half_width_margin!r}",
        f"e_psi_max = {sim.e_psi_max!r}",
        f"noise_sigma_v = {sim.noise_sigma_v!r}",
        f"noise_sigma_kappa = {sim.noise_sigma_kappa!r}",
        f"preview_k = {len(sim.preview_distances)}",
        f"preview_spacing = {spacing!r}",
        f"max_steps = {sim.max_steps}",
        f"lap_target = {sim.lap_target}",
        f"epochs = {cfg.epochs}",
        f"alpha = {cfg.alpha!r}",
        f"rho = {cfg.rho!r}",
        f"lambda = {cfg.lam!r}",
        f"k_f = {cfg.k_f}",
        f"k_p = {cfg.k_p}",
        f"episodes_per_epoch = {cfg.episodes_per_epoch}",
        f"actuation_noise_sigma = {cfg.actuation_noise_sigma!r}",
        f"hull_tol = {cfg.hull_tol!r}",
        f"neighbor_cap = {cfg.neighbor_cap}",
        f"batch_size = {cfg.batch_size}",
        f"lr_policy = {cfg.lr_policy!r}",
        f"lr_dyn = {cfg.lr_dyn!r}",
        f"lr_clf = {cfg.lr_clf!r}",
        f"grad_steps_policy = {cfg.grad_steps_policy}",
        f"grad_steps_dyn = {cfg.grad_steps_dyn}",
        f"grad_steps_clf = {cfg.grad_steps_clf}",
        f"seed = {cfg.seed}",
        f"method = {cfg.method}",
        f"observation_mode = {cfg.observation_mode}",
        "hidden = " + ",".join(str(h) for h in cfg.hidden),
        f"eval_laps = {cfg.eval_laps}",
        f"early_stop = {1 if cfg.early_stop else 0}",
    ]
    for key in sorted(_EXPERT_KEYS):
        if key in values:
            lines.append(f"{key} = {values[key]}")
    return "\n".join(lines) + "\n"
