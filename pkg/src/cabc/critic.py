"""Learned safety critic: dynamics surrogate, safety classifier, soft filter.

The critic pair approximates the plant's one-step map and the likelihood
that a state can still be driven to the target set.  During policy training
both networks stay frozen; gradient reaches the policy action purely through
their input-gradients, so the safety penalty shapes actions without ever
updating the critic weights.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from . import nn
from .autolabel import NormStats, embed_states
from .core import Action, VehicleState
from .sim import SimConfig


class DegenerateLabelsError(ValueError):
    """Classifier training needs both label classes present."""


def embed_array(states_raw: np.ndarray, lap_length: float) -> np.ndarray:
    """Vectorized state embedding for raw (B, 6) state arrays."""
    arr = np.atleast_2d(np.asarray(states_raw, dtype=float))
    ang = 2.0 * math.pi * arr[:, 3] / lap_length
    return np.column_stack([arr[:, 0], arr[:, 1], arr[:, 2],
                            np.cos(ang), np.sin(ang), arr[:, 4], arr[:, 5]])


def _embed_jacobian_chain(grad_embed: np.ndarray, states_raw: np.ndarray,
                          norm: NormStats) -> np.ndarray:
    """Pull a gradient w.r.t. the normalized embedding back to the raw state.

    The embedding is identity on five dimensions and maps ``s`` onto the unit
    circle, so the only nontrivial rows are the cos/sin pair.
    """
    arr = np.atleast_2d(np.asarray(states_raw, dtype=float))
    g_e = grad_embed / norm.std  # undo standardization
    ang = 2.0 * math.pi * arr[:, 3] / norm.lap_length
    scale = 2.0 * math.pi / norm.lap_length
    g_x = np.empty((len(arr), 6))
    g_x[:, 0:3] = g_e[:, 0:3]
    g_x[:, 3] = scale * (-np.sin(ang) * g_e[:, 3] + np.cos(ang) * g_e[:, 4])
    g_x[:, 4] = g_e[:, 5]
    g_x[:, 5] = g_e[:, 6]
    return g_x


def delta_scale_from(cfg: SimConfig) -> np.ndarray:
    """Per-dimension scale of one-step state changes, derived from the config.

    Matches the typical per-step delta magnitude of on-track driving so the
    delta-space MSE weights all state dimensions comparably.
    """
    a_lat = 0.125 * (cfg.stiff_front + cfg.stiff_rear)
    return cfg.dt * np.array([
        cfg.drive_gain,                           # v_long: full-throttle accel
        a_lat,                                    # v_tran: tire-force scale
        a_lat * cfg.l_front / cfg.yaw_radius_sq,  # omega: yaw-moment scale
        cfg.v_max / 3.0,                          # s: cruise progress rate
        cfg.v_max / 12.0,                         # x_tran: lateral drift rate
        1.2,                                      # e_psi: heading slew rate
    ])


@dataclass(frozen=True)
class DynModel:
    """One-step dynamics surrogate predicting a scaled state delta."""

    params: nn.MlpParams          # (7 embedded + 2 action) -> 6
    norm: NormStats
    delta_scale: np.ndarray

    def inputs(self, states_raw: np.ndarray, actions: np.ndarray) -> np.ndarray:
        emb = self.norm.normalize(embed_array(states_raw, self.norm.lap_length))
        return np.column_stack([emb, np.atleast_2d(actions)])

    def predict(self, states_raw: np.ndarray, actions: np.ndarray) -> np.ndarray:
        out = nn.forward(self.params, self.inputs(states_raw, actions))
        return np.atleast_2d(states_raw) + np.atleast_2d(out) * self.delta_scale


@dataclass(frozen=True)
class SafetyClf:
    """Safety-likelihood classifier on the normalized embedded state."""

    params: nn.MlpParams          # 7 -> 1, sigmoid head
    norm: NormStats
    lam: float = 1.0

    def prob(self, states_raw: np.ndarray) -> np.ndarray:
        emb = self.norm.normalize(embed_array(states_raw, self.norm.lap_length))
        return nn.forward(self.params, emb)[..., 0]


def init_dyn_model(norm: NormStats, cfg: SimConfig, hidden: Sequence[int] = (128, 128, 128),
                   seed: int = 0) -> DynModel:
    params = nn.init_mlp((9, *hidden, 6), head="identity", seed=seed)
    return DynModel(params=params, norm=norm, delta_scale=delta_scale_from(cfg))


def init_safety_clf(norm: NormStats, lam: float, hidden: Sequence[int] = (128, 128, 128),
                    seed: int = 1) -> SafetyClf:
    params = nn.init_mlp((7, *hidden, 1), head="sigmoid", seed=seed)
    return SafetyClf(params=params, norm=norm, lam=lam)


def dyn_loss_and_grad(model: DynModel, states_raw: np.ndarray, actions: np.ndarray,
                      next_states_raw: np.ndarray):
    """Mean squared error of the scaled one-step delta, with exact gradients."""
    states_raw = np.atleast_2d(states_raw)
    if len(states_raw) == 0:
        raise ValueError("empty dynamics batch")
    z = model.inputs(states_raw, actions)
    pred = nn.forward(model.params, z)
    target = (np.atleast_2d(next_states_raw) - states_raw) / model.delta_scale
    diff = pred - target
    loss = float((diff * diff).mean())
    upstream = 2.0 * diff / diff.size
    grads, _ = nn.backward(model.params, z, upstream)
    return loss, grads


def clf_loss_and_grad(clf: SafetyClf, states_raw: np.ndarray, labels: np.ndarray):
    """Class-balanced binary cross-entropy with exact gradients.

    Weights are inverse class frequencies scaled so they sum to the batch
    size; with both classes present the degenerate collapse toward the
    majority class is removed.  Raises when only one class is in the batch.
    """
    states_raw = np.atleast_2d(states_raw)
    labels = np.asarray(labels, dtype=float).reshape(-1)
    if len(states_raw) == 0:
        raise ValueError("empty classifier batch")
    n_pos = float((labels == 1.0).sum())
    n_neg = float((labels == 0.0).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabelsError(
            f"need both classes, got {int(n_pos)} positive / {int(n_neg)} negative")
    B = len(labels)
    weights = np.where(labels == 1.0, B / (2.0 * n_pos), B / (2.0 * n_neg))
    emb = clf.norm.normalize(embed_array(states_raw, clf.norm.lap_length))
    p = nn.forward(clf.params, emb)[:, 0]
    loss = float(-(weights * (labels * np.log(p) + (1 - labels) * np.log(1 - p))).mean())
    dp = weights * (-(labels / p) + (1 - labels) / (1 - p)) / B
    grads, _ = nn.backward(clf.params, emb, dp[:, None])
    return loss, grads


def safety_penalty_and_input_grad(clf: SafetyClf, dyn: DynModel,
                                  states_raw: np.ndarray, actions: np.ndarray):
    """Penalty ``-lam * log p(next state safe)`` and its gradient w.r.t. the action.

    Both networks are frozen here by construction: only input-gradients are
    evaluated, so no parameter of either network can change.
    """
    states_raw = np.atleast_2d(np.asarray(states_raw, dtype=float))
    actions = np.atleast_2d(np.asarray(actions, dtype=float))
    B = len(states_raw)
    if clf.lam == 0.0:
        return np.zeros(B), np.zeros((B, 2))
    z = dyn.inputs(states_raw, actions)
    dnorm = nn.forward(dyn.params, z)
    x_next = states_raw + dnorm * dyn.delta_scale
    emb_next = clf.norm.normalize(embed_array(x_next, clf.norm.lap_length))
    p = nn.forward(clf.params, emb_next)[:, 0]
    penalty = -clf.lam * np.log(p)

    dp = (-clf.lam / p)[:, None]
    _, g_emb = nn.backward(clf.params, emb_next, dp)
    g_xnext = _embed_jacobian_chain(g_emb, x_next, clf.norm)
    g_dnorm = g_xnext * dyn.delta_scale
    _, g_z = nn.backward(dyn.params, z, g_dnorm)
    return penalty, g_z[:, 7:9]


def soft_filter_pi_xi(clf: SafetyClf, dyn: DynModel, x: VehicleState, u_hat: Action,
                      steps: int = 50, step_size: float = 0.1) -> Action:
    """Soften the one-step filter: projected gradient descent on
    ``||u - u_hat||^2 - lam * log p(f_hat(x, u) safe)`` over the action box.

    Returns the best iterate found; with a zero penalty weight or a saturated
    classifier the gradient vanishes and the proposal passes through unchanged.
    """
    x_arr = np.array([x.as_tuple()])
    u_hat_arr = np.array(u_hat.as_tuple())
    u = u_hat_arr.copy()

    def objective(u_vec: np.ndarray):
        pen, g_u = safety_penalty_and_input_grad(clf, dyn, x_arr, u_vec[None, :])
        d = u_vec - u_hat_arr
        return float(d @ d + pen[0]), 2.0 * d + g_u[0]

    best_u = u.copy()
    best_j, grad = objective(u)
    for _ in range(steps):
        u = np.clip(u - step_size * grad, -1.0, 1.0)
        j, grad = objective(u)
        if j < best_j:
            best_j, best_u = j, u.copy()
    return Action(best_u[0], best_u[1])


# --- checkpointing -------------------------------------------------------------

def save_critic(dyn: DynModel, clf: SafetyClf, dirpath) -> None:
    os.makedirs(dirpath, exist_ok=True)
    nn.save_weights(dyn.params, os.path.join(dirpath, "dyn.json"))
    nn.save_weights(clf.params, os.path.join(dirpath, "clf.json"))
    with open(os.path.join(dirpath, "norm.json"), "w", encoding="utf-8") as fh:
        json.dump({"mean": dyn.norm.mean.tolist(), "std": dyn.norm.std.tolist(),
                   "lap_length": dyn.norm.lap_length}, fh)


def load_critic(dirpath, cfg: SimConfig, lam: float) -> Tuple[DynModel, SafetyClf]:
    with open(os.path.join(dirpath, "norm.json"), "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    norm = NormStats(mean=np.asarray(obj["mean"]), std=np.asarray(obj["std"]),
                     lap_length=float(obj["lap_length"]))
    dyn = DynModel(params=nn.load_weights(os.path.join(dirpath, "dyn.json")),
                   norm=norm, delta_scale=delta_scale_from(cfg))
    clf = SafetyClf(params=nn.load_weights(os.path.join(dirpath, "clf.json")),
                    norm=norm, lam=lam)
    return dyn, clf
