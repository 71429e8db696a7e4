"""Training loops: iterative collection with expert mixing, safety
auto-labeling, and interleaved updates of policy, dynamics model, and
safety classifier.

Each epoch: roll out the mixed collection policy (expert with probability
``alpha**epoch``, learner otherwise, plus actuation noise), relabel every
visited state with the expert action, partition new trajectories into the
labeling pools, rebuild the negative set, then run minibatch updates.  The
policy trains every epoch on clone MSE plus the frozen-critic safety
penalty; the dynamics model and classifier train on their own cadences.

The baseline trainer is the same loop with labeling, critics, and the
safety term removed; with a zero safety weight the two code paths perform
bit-identical policy updates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import nn
from .autolabel import NormStats, embed_state, fit_norm, member_mask
from .core import (
    Action,
    LabeledPool,
    Observation,
    Outcome,
    Trajectory,
    VehicleState,
    partition_trajectories,
)
from .critic import (
    DynModel,
    SafetyClf,
    clf_loss_and_grad,
    dyn_loss_and_grad,
    init_dyn_model,
    init_safety_clf,
    safety_penalty_and_input_grad,
)
from .evalharness import EarlyStopState, EvalResult, early_stop_update, evaluate
from .experts import PidCenterline, PidGains, RaceParams, RacingExpert
from .sim import SimConfig, default_start_state, rollout
from .track import TrackSpec


class NonFiniteLossError(RuntimeError):
    """A training loss stopped being finite; the run is aborted."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50                     # M: training epochs
    alpha: float = 0.7                   # expert-mixing decay base
    rho: float = 1.0                     # auto-labeling ball radius (normalized)
    lam: float = 10.0                    # safety penalty weight
    k_f: int = 5                         # dynamics-model update cadence (epochs)
    k_p: int = 10                        # classifier update cadence (epochs)
    episodes_per_epoch: int = 2
    actuation_noise_sigma: float = 0.15  # collection-time action noise
    hull_tol: float = 0.05               # distance-to-hull rescue tolerance (normalized)
    neighbor_cap: int = 64               # nearest neighbors per hull test
    batch_size: int = 256
    lr_policy: float = 1e-3
    lr_dyn: float = 1e-3
    lr_clf: float = 1e-3
    grad_steps_policy: int = 200
    grad_steps_dyn: int = 200
    grad_steps_clf: int = 200
    seed: int = 0
    method: str = "ca"                   # "ca" | "bc"
    observation_mode: str = "output"     # "output" | "full_state"
    hidden: Tuple[int, ...] = (128, 128, 128)
    eval_laps: int = 50
    early_stop: bool = True
    sim: SimConfig = field(default_factory=SimConfig)

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must be in (0, 1]")
        if self.rho < 0 or self.lam < 0:
            raise ValueError("rho and lam must be non-negative")
        if self.k_f < 1 or self.k_p < 1:
            raise ValueError("k_f and k_p must be >= 1")
        if self.method not in ("ca", "bc"):
            raise ValueError("method must be 'ca' or 'bc'")
        if self.observation_mode not in ("output", "full_state"):
            raise ValueError("observation_mode must be 'output' or 'full_state'")


@dataclass(frozen=True)
class EpochReport:
    epoch: int
    clone_loss: float
    safety_loss: float
    dyn_loss: float
    clf_loss: float
    new_successes: int
    new_failures: int
    n_plus: int
    n_query: int
    n_minus: int
    eval_laps: int
    eval_lap_mean: float
    eval_lap_std: float
    clf_degenerate: bool = False

    FIELDS = ("epoch", "clone_loss", "safety_loss", "dyn_loss", "clf_loss",
              "new_successes", "new_failures", "n_plus", "n_query", "n_minus",
              "eval_laps", "eval_lap_mean", "eval_lap_std", "clf_degenerate")

    def row(self) -> list:
        return [getattr(self, name) for name in self.FIELDS]


# --- policy featurization -------------------------------------------------------

_VEL_SCALE = np.array([0.5, 2.0, 0.5])   # v_long, v_tran, omega


def policy_input_dim(mode: str, sim_cfg: SimConfig) -> int:
    if mode == "output":
        return 3 + len(sim_cfg.preview_distances)
    return 7


def features_from_obs(y: Observation) -> np.ndarray:
    return np.concatenate([
        _VEL_SCALE * np.array([y.v_long, y.v_tran, y.omega_psi]),
        np.asarray(y.preview),
    ])


def features_from_state(x: VehicleState, track: TrackSpec) -> np.ndarray:
    emb = embed_state(x, track.lap_length)
    emb[0:3] *= _VEL_SCALE
    emb[5] /= track.half_width
    emb[6] *= 2.0 / math.pi
    return emb


def features_from_obs_array(y_arr: np.ndarray) -> np.ndarray:
    out = np.array(y_arr, dtype=float)
    out[:, 0:3] *= _VEL_SCALE
    return out


def features_from_state_array(x_arr: np.ndarray, track: TrackSpec) -> np.ndarray:
    ang = 2.0 * math.pi * x_arr[:, 3] / track.lap_length
    return np.column_stack([
        x_arr[:, 0:3] * _VEL_SCALE,
        np.cos(ang), np.sin(ang),
        x_arr[:, 4] / track.half_width,
        x_arr[:, 5] * 2.0 / math.pi,
    ])


class MlpPolicy:
    """Policy-network wrapper usable as a rollout policy."""

    def __init__(self, params: nn.MlpParams, mode: str, track: TrackSpec):
        if params.head != "tanh":
            raise ValueError("policy network must use the bounded head")
        self.params = params
        self.mode = mode
        self.track = track

    def features(self, y: Observation, x: VehicleState) -> np.ndarray:
        if self.mode == "output":
            return features_from_obs(y)
        return features_from_state(x, self.track)

    def __call__(self, y: Observation, x: VehicleState) -> Action:
        out = nn.forward(self.params, self.features(y, x))
        return Action(float(out[0]), float(out[1]))


def init_policy(cfg: TrainConfig, track: TrackSpec) -> nn.MlpParams:
    sizes = (policy_input_dim(cfg.observation_mode, cfg.sim), *cfg.hidden, 2)
    return nn.init_mlp(sizes, head="tanh", seed=cfg.seed)


# --- collection ------------------------------------------------------------------

class MixedPolicy:
    """Per-step Bernoulli mixture of expert and learner, plus actuation noise.

    The expert is queried every step regardless of the coin so its action is
    available for relabeling; stochastic choices come from the policy's own
    stream, independent of the observation noise.
    """

    def __init__(self, pi_beta, pi_theta, beta_prob: float,
                 rng: np.random.Generator, sigma_u: float = 0.0):
        if not 0.0 <= beta_prob <= 1.0:
            raise ValueError("beta_prob must be in [0, 1]")
        self.pi_beta = pi_beta
        self.pi_theta = pi_theta
        self.beta_prob = beta_prob
        self.rng = rng
        self.sigma_u = sigma_u
        self.last_expert_action: Optional[Action] = None
        self.expert_steps = 0
        self.total_steps = 0

    def __call__(self, y: Observation, x: VehicleState) -> Action:
        u_exp = self.pi_beta(y, x)
        self.last_expert_action = u_exp
        take_expert = self.rng.random() < self.beta_prob
        self.total_steps += 1
        if take_expert:
            self.expert_steps += 1
            u = u_exp
        else:
            u = self.pi_theta(y, x)
        if self.sigma_u > 0.0:
            noise = self.rng.normal(0.0, self.sigma_u, size=2)
            u = Action.clamped(u.u_a + noise[0], u.u_steer + noise[1])
        return u


def mix_policy(pi_beta, pi_theta, beta_prob: float, rng: np.random.Generator,
               sigma_u: float = 0.0) -> MixedPolicy:
    return MixedPolicy(pi_beta, pi_theta, beta_prob, rng, sigma_u)


def make_expert_factory(name: str, sim_cfg: SimConfig, track: TrackSpec,
                        v_ref: float = 1.0,
                        pid_gains: PidGains = PidGains(),
                        race_params: RaceParams = RaceParams()) -> Callable[[], object]:
    if name == "pid":
        return lambda: PidCenterline(sim_cfg, track, v_ref=v_ref, gains=pid_gains)
    if name == "racing":
        return lambda: RacingExpert(sim_cfg, track, params=race_params)
    raise ValueError(f"unknown expert {name!r}; use 'pid' or 'racing'")


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(entropy=seed, spawn_key=tuple(key))))


def _collect_epoch(cfg: TrainConfig, track: TrackSpec, expert_factory,
                   policy_params: nn.MlpParams, epoch: int) -> List[Trajectory]:
    beta = cfg.alpha ** epoch
    trajs = []
    for i in range(cfg.episodes_per_epoch):
        rng_noise = _stream(cfg.seed, 1, epoch, i)
        rng_obs = _stream(cfg.seed, 2, epoch, i)
        s0 = rng_noise.uniform(0.0, track.lap_length)
        xt0 = rng_noise.uniform(-0.15, 0.15)
        x0 = VehicleState(v_long=1.0, v_tran=0.0, omega_psi=0.0,
                          s=s0, x_tran=xt0, e_psi=0.0)
        learner = MlpPolicy(policy_params, cfg.observation_mode, track)
        mixed = MixedPolicy(expert_factory(), learner, beta, rng_noise,
                            cfg.actuation_noise_sigma)
        traj = rollout(cfg.sim, track, mixed, x0, cfg.sim.max_steps, rng_obs,
                       relabel=lambda x: mixed.last_expert_action)
        trajs.append(traj)
    return trajs


# --- gradient computation ---------------------------------------------------------

def agent_loss_and_grad(policy: nn.MlpParams, feats: np.ndarray, u_expert: np.ndarray,
                        x_raw: Optional[np.ndarray], dyn: Optional[DynModel],
                        clf: Optional[SafetyClf]):
    """Joint policy objective: clone MSE plus the frozen-critic safety penalty.

    Returns ``(clone_loss, safety_loss, policy_grads)``.  The safety term is
    evaluated at the policy's own action, so its gradient flows back through
    the action head; the critic networks receive no parameter gradient.
    """
    pred = nn.forward(policy, feats)
    diff = pred - u_expert
    clone = float((diff * diff).sum(axis=1).mean())
    B = len(feats)
    upstream = 2.0 * diff / B
    safety = 0.0
    if clf is not None and dyn is not None and clf.lam > 0.0:
        penalty, g_u = safety_penalty_and_input_grad(clf, dyn, x_raw, pred)
        safety = float(penalty.mean())
        upstream = upstream + g_u / B
    grads, _ = nn.backward(policy, feats, upstream)
    return clone, safety, grads


@dataclass(frozen=True)
class GradientBundle:
    grad_theta: tuple
    grad_phi_f: Optional[tuple]
    grad_phi_p: Optional[tuple]
    clone_loss: float
    safety_loss: float
    dyn_loss: Optional[float]
    clf_loss: Optional[float]


def compute_gradients(batch: dict, pi_theta: nn.MlpParams, dyn: Optional[DynModel],
                      clf: Optional[SafetyClf], lam: float) -> GradientBundle:
    """One-batch gradients for all three networks, kept strictly disjoint.

    ``batch`` carries ``feats``/``u_expert``/``x_raw`` for the policy loss,
    ``u_applied``/``x_next`` for the dynamics loss, and ``labels`` for the
    classifier loss; the latter two are optional.  The policy loss touches
    only policy parameters: the critic pair enters it frozen.
    """
    clf_l = replace(clf, lam=lam) if clf is not None else None
    clone, safety, grad_theta = agent_loss_and_grad(
        pi_theta, batch["feats"], batch["u_expert"], batch.get("x_raw"), dyn, clf_l)
    grad_f, loss_f = None, None
    if dyn is not None and "u_applied" in batch:
        loss_f, grad_f = dyn_loss_and_grad(dyn, batch["x_raw"], batch["u_applied"],
                                           batch["x_next"])
    grad_p, loss_p = None, None
    if clf is not None and "labels" in batch:
        loss_p, grad_p = clf_loss_and_grad(clf, batch["x_raw"], batch["labels"])
    return GradientBundle(grad_theta=tuple(grad_theta), grad_phi_f=grad_f,
                          grad_phi_p=grad_p, clone_loss=clone, safety_loss=safety,
                          dyn_loss=loss_f, clf_loss=loss_p)


# --- the training loop -------------------------------------------------------------

@dataclass
class TrainResult:
    policy: nn.MlpParams
    reports: List[EpochReport]
    pool: LabeledPool
    dyn: Optional[DynModel] = None
    clf: Optional[SafetyClf] = None
    norm: Optional[NormStats] = None
    early_stopped_at: Optional[int] = None


class _SampleStore:
    """Aligned growing arrays of everything each recorded step provides."""

    def __init__(self):
        self._chunks = {k: [] for k in ("feats", "u_expert", "x_raw", "u_applied", "x_next")}
        self._arrays = None

    def add_trajectories(self, trajs: Sequence[Trajectory], mode: str, track: TrackSpec):
        for traj in trajs:
            if not traj.samples:
                continue
            x_raw = np.array([s.x.as_tuple() for s in traj.samples])
            if mode == "output":
                feats = features_from_obs_array(
                    np.array([s.y.as_tuple() for s in traj.samples]))
            else:
                feats = features_from_state_array(x_raw, track)
            self._chunks["feats"].append(feats)
            self._chunks["u_expert"].append(
                np.array([s.u_expert.as_tuple() for s in traj.samples]))
            self._chunks["x_raw"].append(x_raw)
            self._chunks["u_applied"].append(
                np.array([s.u_applied.as_tuple() for s in traj.samples]))
            self._chunks["x_next"].append(
                np.array([s.x_next.as_tuple() for s in traj.samples]))
        self._arrays = None

    def arrays(self) -> dict:
        if self._arrays is None:
            self._arrays = {k: (np.concatenate(v) if v else np.zeros((0, 2)))
                            for k, v in self._chunks.items()}
        return self._arrays

    def __len__(self) -> int:
        return sum(len(c) for c in self._chunks["feats"])


class _LabelState:
    """Membership cache for the undecided pool.

    With a fixed metric, hull membership only grows as the positive pool
    grows, so decided members need no retesting; a metric refit invalidates
    the cache and forces a full recompute.
    """

    def __init__(self):
        self.mask = np.zeros(0, dtype=bool)

    def relabel(self, pool: LabeledPool, norm: NormStats, rho: float,
                full: bool, tol: float, neighbor_cap: int) -> None:
        plus_norm = norm.normalize_states(pool.d_plus)
        query_norm = norm.normalize_states(pool.d_query)
        if full or len(self.mask) > len(pool.d_query):
            assume = None
        else:
            assume = np.concatenate(
                [self.mask, np.zeros(len(pool.d_query) - len(self.mask), dtype=bool)])
        self.mask = member_mask(plus_norm, query_norm, rho, tol=tol,
                                assume_member=assume, max_neighbors=neighbor_cap)
        pool.d_minus = [st for st, member in zip(pool.d_query, self.mask) if not member]


def _finite_or_raise(name: str, value: float, epoch: int) -> float:
    if not math.isfinite(value):
        raise NonFiniteLossError(f"{name} became non-finite at epoch {epoch}: {value!r}")
    return value


def train(cfg: TrainConfig, track: TrackSpec, expert_factory,
          epoch_callback: Optional[Callable[[EpochReport, nn.MlpParams], None]] = None,
          traj_callback: Optional[Callable[[int, List[Trajectory]], None]] = None
          ) -> TrainResult:
    """Run the configured method end to end; see :func:`train_ca` / :func:`train_bc`."""
    constraint_aware = cfg.method == "ca"
    policy = init_policy(cfg, track)
    opt_policy = nn.init_opt(policy, lr=cfg.lr_policy)
    store = _SampleStore()
    pool = LabeledPool()
    labels = _LabelState()
    norm: Optional[NormStats] = None
    dyn: Optional[DynModel] = None
    clf: Optional[SafetyClf] = None
    opt_dyn = opt_clf = None
    last_dyn_loss = 0.0
    last_clf_loss = 0.0
    reports: List[EpochReport] = []
    stop_state = EarlyStopState()
    early_stopped_at = None

    for epoch in range(cfg.epochs):
        trajs = _collect_epoch(cfg, track, expert_factory, policy, epoch)
        if traj_callback is not None:
            traj_callback(epoch, trajs)
        new_pool = partition_trajectories(trajs)
        pool.d_plus.extend(new_pool.d_plus)
        pool.d_query.extend(new_pool.d_query)
        store.add_trajectories(trajs, cfg.observation_mode, track)
        new_succ = sum(t.outcome is Outcome.SUCCESS for t in trajs)

        clf_degenerate = False
        if constraint_aware:
            update_dyn = epoch % cfg.k_f == 0
            update_clf = epoch % cfg.k_p == 0
            refit = (update_dyn or update_clf) and len(pool.d_plus) >= 2
            if refit:
                norm = fit_norm(pool.d_plus, track.lap_length)
            if norm is not None:
                labels.relabel(pool, norm, cfg.rho, full=refit,
                               tol=cfg.hull_tol, neighbor_cap=cfg.neighbor_cap)
            else:
                # no metric yet: nothing can be excluded from the negatives
                pool.d_minus = list(pool.d_query)

            if norm is not None and dyn is None:
                dyn = init_dyn_model(norm, cfg.sim, hidden=cfg.hidden, seed=cfg.seed + 1)
                clf = init_safety_clf(norm, cfg.lam, hidden=cfg.hidden, seed=cfg.seed + 2)
                opt_dyn = nn.init_opt(dyn.params, lr=cfg.lr_dyn)
                opt_clf = nn.init_opt(clf.params, lr=cfg.lr_clf)
            elif refit and dyn is not None:
                dyn = replace(dyn, norm=norm)
                clf = replace(clf, norm=norm)

            if update_dyn and dyn is not None and len(store) > 0:
                rng_b = _stream(cfg.seed, 4, epoch)
                arr = store.arrays()
                n = len(arr["x_raw"])
                for _ in range(cfg.grad_steps_dyn):
                    idx = rng_b.integers(0, n, size=min(cfg.batch_size, n))
                    loss_f, grads = dyn_loss_and_grad(
                        dyn, arr["x_raw"][idx], arr["u_applied"][idx], arr["x_next"][idx])
                    new_params, opt_dyn = nn.adam_step(dyn.params, grads, opt_dyn)
                    dyn = replace(dyn, params=new_params)
                last_dyn_loss = _finite_or_raise("dyn_loss", loss_f, epoch)

            if update_clf and clf is not None:
                if pool.d_plus and pool.d_minus:
                    rng_b = _stream(cfg.seed, 5, epoch)
                    plus_raw = np.array([st.as_tuple() for st in pool.d_plus])
                    minus_raw = np.array([st.as_tuple() for st in pool.d_minus])
                    half = cfg.batch_size // 2
                    for _ in range(cfg.grad_steps_clf):
                        ip = rng_b.integers(0, len(plus_raw), size=half)
                        im = rng_b.integers(0, len(minus_raw), size=half)
                        xb = np.vstack([plus_raw[ip], minus_raw[im]])
                        yb = np.concatenate([np.ones(half), np.zeros(half)])
                        loss_p, grads = clf_loss_and_grad(clf, xb, yb)
                        new_params, opt_clf = nn.adam_step(clf.params, grads, opt_clf)
                        clf = replace(clf, params=new_params)
                    last_clf_loss = _finite_or_raise("clf_loss", loss_p, epoch)
                else:
                    clf_degenerate = True

        # policy update (identical code path for both methods; the safety
        # branch is off exactly when the penalty weight is zero)
        rng_b = _stream(cfg.seed, 3, epoch)
        arr = store.arrays()
        n = len(arr["feats"])
        clone_sum = safety_sum = 0.0
        use_critic = constraint_aware and cfg.lam > 0.0 and dyn is not None and clf is not None
        for _ in range(cfg.grad_steps_policy):
            idx = rng_b.integers(0, n, size=min(cfg.batch_size, n))
            clone, safety, grads = agent_loss_and_grad(
                policy, arr["feats"][idx], arr["u_expert"][idx],
                arr["x_raw"][idx] if use_critic else None,
                dyn if use_critic else None, clf if use_critic else None)
            policy, opt_policy = nn.adam_step(policy, grads, opt_policy)
            clone_sum += clone
            safety_sum += safety
        clone_mean = _finite_or_raise(
            "clone_loss", clone_sum / cfg.grad_steps_policy, epoch)
        safety_mean = _finite_or_raise(
            "safety_loss", safety_sum / cfg.grad_steps_policy, epoch)

        eval_policy = MlpPolicy(policy, cfg.observation_mode, track)
        result = evaluate(eval_policy, cfg.sim, track,
                          seed=(cfg.seed * 1000003 + epoch) & 0x7FFFFFFF,
                          laps=cfg.eval_laps)
        report = EpochReport(
            epoch=epoch,
            clone_loss=clone_mean,
            safety_loss=safety_mean,
            dyn_loss=last_dyn_loss,
            clf_loss=last_clf_loss,
            new_successes=new_succ,
            new_failures=len(trajs) - new_succ,
            n_plus=len(pool.d_plus),
            n_query=len(pool.d_query),
            n_minus=len(pool.d_minus),
            eval_laps=result.laps_completed,
            eval_lap_mean=result.lap_mean,
            eval_lap_std=result.lap_std,
            clf_degenerate=clf_degenerate,
        )
        reports.append(report)
        if epoch_callback is not None:
            epoch_callback(report, policy)
        stop_state = early_stop_update(stop_state, result, full_laps=cfg.eval_laps)
        if cfg.early_stop and stop_state.triggered:
            early_stopped_at = epoch
            break

    return TrainResult(policy=policy, reports=reports, pool=pool, dyn=dyn, clf=clf,
                       norm=norm, early_stopped_at=early_stopped_at)


def train_ca(cfg: TrainConfig, track: TrackSpec, expert_factory, **kw) -> TrainResult:
    """Constraint-aware training: full loop with auto-labeling and critics."""
    return train(replace(cfg, method="ca"), track, expert_factory, **kw)


def train_bc(cfg: TrainConfig, track: TrackSpec, expert_factory, **kw) -> TrainResult:
    """Baseline cloning: the same loop minus labeling, critics, and safety term."""
    return train(replace(cfg, method="bc"), track, expert_factory, **kw)
