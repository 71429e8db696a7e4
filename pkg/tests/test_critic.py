import math
from dataclasses import replace

import numpy as np
import pytest

from cabc import nn
from cabc.autolabel import NormStats, fit_norm
from cabc.core import Action, VehicleState
from cabc.critic import (
    DegenerateLabelsError,
    DynModel,
    SafetyClf,
    clf_loss_and_grad,
    delta_scale_from,
    dyn_loss_and_grad,
    embed_array,
    init_dyn_model,
    init_safety_clf,
    load_critic,
    safety_penalty_and_input_grad,
    save_critic,
    soft_filter_pi_xi,
)
from cabc.experts import RacingExpert, predictive_filter_oracle
from cabc.sim import SimConfig, default_start_state, episode_rng, rollout, step

from conftest import make_state


@pytest.fixture(scope="module")
def norm7():
    return NormStats(mean=np.full(7, 0.1), std=np.full(7, 0.8), lap_length=12.0)


@pytest.fixture(scope="module")
def small_critic(norm7):
    cfg = SimConfig()
    dyn = init_dyn_model(norm7, cfg, hidden=(16, 16), seed=5)
    clf = init_safety_clf(norm7, lam=2.0, hidden=(12,), seed=6)
    return cfg, dyn, clf


def perturb_weight(params, layer, idx, dv):
    ws = []
    for i, (W, b) in enumerate(params.weights):
        if i == layer:
            W = W.copy()
            W[idx] += dv
        ws.append((W, b))
    return nn.MlpParams(sizes=params.sizes, weights=tuple(ws), head=params.head)


class TestDynLoss:
    def test_exact_linear_system_gives_zero_loss(self, norm7):
        cfg = SimConfig()
        rng = np.random.default_rng(0)
        W = rng.normal(size=(9, 6))
        b = rng.normal(size=6)
        params = nn.MlpParams(sizes=(9, 6), weights=((W, b),), head="identity")
        dyn = DynModel(params=params, norm=norm7, delta_scale=delta_scale_from(cfg))
        X = rng.normal(size=(8, 6))
        U = rng.uniform(-1, 1, size=(8, 2))
        XN = X + nn.forward(params, dyn.inputs(X, U)) * dyn.delta_scale
        loss, _ = dyn_loss_and_grad(dyn, X, U, XN)
        assert loss < 1e-28

    def test_gradients_match_finite_differences(self, small_critic):
        cfg, dyn, _ = small_critic
        rng = np.random.default_rng(1)
        X = rng.normal(size=(4, 6))
        U = rng.uniform(-1, 1, size=(4, 2))
        XN = X + 0.01 * rng.normal(size=(4, 6))
        _, grads = dyn_loss_and_grad(dyn, X, U, XN)
        h = 1e-6
        for (layer, idx) in [(0, (0, 0)), (0, (3, 5)), (1, (2, 1)), (2, (4, 3))]:
            dp = replace(dyn, params=perturb_weight(dyn.params, layer, idx, h))
            dm = replace(dyn, params=perturb_weight(dyn.params, layer, idx, -h))
            lp, _ = dyn_loss_and_grad(dp, X, U, XN)
            lm, _ = dyn_loss_and_grad(dm, X, U, XN)
            fd = (lp - lm) / (2 * h)
            analytic = grads[layer][0][idx]
            assert abs(fd - analytic) <= 1e-6 + 1e-4 * max(abs(fd), abs(analytic))

    def test_rejects_empty_batch(self, small_critic):
        cfg, dyn, _ = small_critic
        with pytest.raises(ValueError):
            dyn_loss_and_grad(dyn, np.zeros((0, 6)), np.zeros((0, 2)), np.zeros((0, 6)))

    def test_one_step_prediction_accuracy_after_training(self, gp):
        """Train on noisy racing transitions, measure held-out next-state error."""
        cfg = SimConfig(noise_sigma_v=0.0, noise_sigma_kappa=0.0)

        class Noisy:
            def __init__(self, inner, rng):
                self.inner, self.rng = inner, rng

            def __call__(self, y, x):
                u = self.inner(y, x)
                n = self.rng.normal(0.0, 0.2, size=2)
                return Action.clamped(u.u_a + n[0], u.u_steer + n[1])

        X, U, XN, states = [], [], [], []
        i = 0
        while sum(len(x) for x in X) < 10_000:
            rng = episode_rng(50 + i, 0)
            i += 1
            pol = Noisy(RacingExpert(cfg, gp), rng)
            s0 = float(rng.uniform(0, gp.lap_length))
            traj = rollout(cfg, gp, pol, default_start_state(1.0, s=s0), 600, rng)
            if not traj.samples:
                continue
            X.append(np.array([s.x.as_tuple() for s in traj.samples]))
            U.append(np.array([s.u_applied.as_tuple() for s in traj.samples]))
            XN.append(np.array([s.x_next.as_tuple() for s in traj.samples]))
            states.extend(s.x for s in traj.samples)
        X, U, XN = np.concatenate(X), np.concatenate(U), np.concatenate(XN)
        n_train = int(0.9 * len(X))
        norm = fit_norm(states[:n_train], gp.lap_length)
        dyn = init_dyn_model(norm, cfg, hidden=(128, 128, 128), seed=1)
        opt = nn.init_opt(dyn.params, lr=3e-3)
        rng = np.random.default_rng(0)
        # the heading dimension carries the track's piecewise-constant
        # curvature jumps and needs the longer low-rate phase to resolve
        for n_steps, lr in ((2000, 3e-3), (4000, 1e-3)):
            opt = replace(opt, lr=lr)
            for _ in range(n_steps):
                idx = rng.integers(0, n_train, size=512)
                _, grads = dyn_loss_and_grad(dyn, X[idx], U[idx], XN[idx])
                params, opt = nn.adam_step(dyn.params, grads, opt)
                dyn = replace(dyn, params=params)
        pred = dyn.predict(X[n_train:], U[n_train:])
        rmse = np.sqrt(((pred - XN[n_train:]) ** 2).mean(axis=0))
        ratio = rmse / X[n_train:].std(axis=0)
        assert np.all(ratio < 0.05), ratio


class TestClfLoss:
    def test_coin_flip_classifier_loss_is_ln2(self, norm7):
        zero = nn.MlpParams(sizes=(7, 1), weights=((np.zeros((7, 1)), np.zeros(1)),),
                            head="sigmoid")
        clf = SafetyClf(params=zero, norm=norm7, lam=1.0)
        X = np.random.default_rng(0).normal(size=(10, 6))
        labels = np.array([1, 0] * 5, dtype=float)
        loss, _ = clf_loss_and_grad(clf, X, labels)
        assert loss == pytest.approx(math.log(2.0), rel=1e-12)

    def test_degenerate_labels_reported(self, small_critic):
        _, _, clf = small_critic
        X = np.random.default_rng(0).normal(size=(4, 6))
        with pytest.raises(DegenerateLabelsError):
            clf_loss_and_grad(clf, X, np.ones(4))

    def test_gradients_match_finite_differences(self, small_critic):
        _, _, clf = small_critic
        rng = np.random.default_rng(2)
        X = rng.normal(size=(6, 6))
        labels = np.array([1, 1, 0, 1, 0, 0], dtype=float)
        _, grads = clf_loss_and_grad(clf, X, labels)
        h = 1e-6
        for (layer, idx) in [(0, (0, 0)), (0, (5, 3)), (1, (7, 0))]:
            cp = replace(clf, params=perturb_weight(clf.params, layer, idx, h))
            cm = replace(clf, params=perturb_weight(clf.params, layer, idx, -h))
            lp, _ = clf_loss_and_grad(cp, X, labels)
            lm, _ = clf_loss_and_grad(cm, X, labels)
            fd = (lp - lm) / (2 * h)
            analytic = grads[layer][0][idx]
            assert abs(fd - analytic) <= 1e-6 + 1e-4 * max(abs(fd), abs(analytic))

    def test_separable_data_reaches_high_accuracy(self, norm7):
        rng = np.random.default_rng(3)
        X = np.zeros((400, 6))
        X[:, 0] = rng.uniform(0.0, 2.0, size=400)
        labels = (X[:, 0] > 1.0).astype(float)
        clf = init_safety_clf(norm7, lam=1.0, hidden=(16,), seed=4)
        opt = nn.init_opt(clf.params, lr=1e-2)
        for _ in range(400):
            loss, grads = clf_loss_and_grad(clf, X, labels)
            params, opt = nn.adam_step(clf.params, grads, opt)
            clf = replace(clf, params=params)
        acc = ((clf.prob(X) > 0.5) == labels.astype(bool)).mean()
        assert acc >= 0.99


class TestSafetyPenalty:
    def test_action_gradient_matches_finite_differences(self, small_critic):
        _, dyn, clf = small_critic
        rng = np.random.default_rng(0)
        X = rng.normal(size=(3, 6))
        U = rng.uniform(-1, 1, size=(3, 2))
        pen, g_u = safety_penalty_and_input_grad(clf, dyn, X, U)
        h = 1e-6
        for b in range(3):
            for j in range(2):
                Up, Um = U.copy(), U.copy()
                Up[b, j] += h
                Um[b, j] -= h
                pp, _ = safety_penalty_and_input_grad(clf, dyn, X, Up)
                pm, _ = safety_penalty_and_input_grad(clf, dyn, X, Um)
                fd = (pp[b] - pm[b]) / (2 * h)
                assert abs(fd - g_u[b, j]) <= 1e-6 + 1e-4 * max(abs(fd), abs(g_u[b, j]))

    def test_zero_weight_is_exactly_zero(self, small_critic):
        _, dyn, clf = small_critic
        clf0 = replace(clf, lam=0.0)
        pen, g_u = safety_penalty_and_input_grad(clf0, dyn, np.zeros((2, 6)),
                                                 np.zeros((2, 2)))
        assert np.all(pen == 0.0) and np.all(g_u == 0.0)

    def test_saturated_safe_classifier_gives_zero_gradient(self, norm7):
        cfg = SimConfig()
        dyn = init_dyn_model(norm7, cfg, hidden=(8,), seed=0)
        sat = nn.MlpParams(sizes=(7, 1),
                           weights=((np.zeros((7, 1)), np.full(1, 100.0)),),
                           head="sigmoid")
        clf = SafetyClf(params=sat, norm=norm7, lam=5.0)
        pen, g_u = safety_penalty_and_input_grad(clf, dyn, np.zeros((2, 6)),
                                                 np.zeros((2, 2)))
        assert np.all(pen < 1e-12)
        assert np.all(g_u == 0.0)  # logit clamp zeroes the gradient

    def test_networks_stay_frozen(self, small_critic):
        _, dyn, clf = small_critic
        snap_dyn = [(W.copy(), b.copy()) for W, b in dyn.params.weights]
        snap_clf = [(W.copy(), b.copy()) for W, b in clf.params.weights]
        safety_penalty_and_input_grad(clf, dyn, np.ones((3, 6)), np.zeros((3, 2)))
        for (W, b), (W0, b0) in zip(dyn.params.weights, snap_dyn):
            assert np.all(W == W0) and np.all(b == b0)
        for (W, b), (W0, b0) in zip(clf.params.weights, snap_clf):
            assert np.all(W == W0) and np.all(b == b0)


def monotone_critic(norm7, slope=4.0):
    """Hand-built pair: predicted v_long rises with u_a, classifier dislikes speed.

    The composition makes p(safe) strictly decreasing in throttle, so the
    penalty must push the action toward braking.
    """
    cfg = SimConfig()
    W_dyn = np.zeros((9, 6))
    W_dyn[7, 0] = 1.0  # u_a raises the v_long delta; linear single layer
    dyn_params = nn.MlpParams(sizes=(9, 6), weights=((W_dyn, np.zeros(6)),),
                              head="identity")
    dyn = DynModel(params=dyn_params, norm=norm7, delta_scale=delta_scale_from(cfg))
    W_clf = np.zeros((7, 1))
    W_clf[0, 0] = -slope  # p(safe) falls as (normalized) v_long grows
    clf_params = nn.MlpParams(sizes=(7, 1), weights=((W_clf, np.ones(1)),),
                              head="sigmoid")
    clf = SafetyClf(params=clf_params, norm=norm7, lam=1.0)
    return cfg, dyn, clf


class TestSoftFilter:
    def test_zero_weight_passes_through(self, small_critic):
        _, dyn, clf = small_critic
        clf0 = replace(clf, lam=0.0)
        u_hat = Action(0.7, -0.3)
        out = soft_filter_pi_xi(clf0, dyn, make_state(v=1.0, s=2.0), u_hat)
        assert out == u_hat

    def test_saturated_safe_classifier_passes_through(self, norm7):
        cfg = SimConfig()
        dyn = init_dyn_model(norm7, cfg, hidden=(8,), seed=0)
        sat = nn.MlpParams(sizes=(7, 1),
                           weights=((np.zeros((7, 1)), np.full(1, 100.0)),),
                           head="sigmoid")
        clf = SafetyClf(params=sat, norm=norm7, lam=5.0)
        u_hat = Action(0.4, 0.2)
        out = soft_filter_pi_xi(clf, dyn, make_state(v=1.0), u_hat)
        assert abs(out.u_a - u_hat.u_a) < 1e-9
        assert abs(out.u_steer - u_hat.u_steer) < 1e-9

    def test_monotone_case_matches_grid_search(self, norm7):
        cfg, dyn, clf = monotone_critic(norm7)
        x = make_state(v=1.0, s=2.0)
        u_hat = Action(0.9, 0.0)
        out = soft_filter_pi_xi(clf, dyn, x, u_hat, steps=80, step_size=0.05)

        def objective(u_a):
            pen, _ = safety_penalty_and_input_grad(
                clf, dyn, np.array([x.as_tuple()]), np.array([[u_a, 0.0]]))
            return (u_a - u_hat.u_a) ** 2 + pen[0]

        grid = np.linspace(-1.0, 1.0, 10_000)
        best = min(objective(g) for g in grid)
        assert out.u_a < u_hat.u_a  # the filter backed off the throttle
        assert objective(out.u_a) <= best + 1e-3

    def test_output_stays_in_action_box(self, small_critic):
        _, dyn, clf = small_critic
        hot = replace(clf, lam=50.0)
        rng = np.random.default_rng(4)
        for _ in range(10):
            x = make_state(v=rng.uniform(0, 3), s=rng.uniform(0, 10),
                           xt=rng.normal(0, 0.2))
            u_hat = Action(rng.uniform(-1, 1), rng.uniform(-1, 1))
            out = soft_filter_pi_xi(hot, dyn, x, u_hat)
            assert -1.0 <= out.u_a <= 1.0 and -1.0 <= out.u_steer <= 1.0

    def test_hard_classifier_limit_agrees_with_filter_oracle(self, gp):
        """Near-indicator classifier: the soft filter enforces (approximately)
        the same speed gate the grid-search oracle enforces exactly."""
        cfg = SimConfig(noise_sigma_v=0.0, noise_sigma_kappa=0.0)
        v_star = 1.9
        x0 = make_state(v=1.85, s=1.0)
        u_hat = Action(1.0, 0.0)

        norm = NormStats(mean=np.zeros(7), std=np.ones(7), lap_length=gp.lap_length)
        # exact longitudinal surrogate on the straight: delta_v = dt*(gain*u - drag)
        W_dyn = np.zeros((9, 6))
        W_dyn[7, 0] = 1.0  # delta_scale[0] = dt * drive_gain
        drag = cfg.dt * (cfg.drag_lin * x0.v_long + cfg.drag_quad * x0.v_long ** 2)
        b_dyn = np.zeros(6)
        b_dyn[0] = -drag / (cfg.dt * cfg.drive_gain)
        dyn = DynModel(params=nn.MlpParams(sizes=(9, 6), weights=((W_dyn, b_dyn),),
                                           head="identity"),
                       norm=norm, delta_scale=delta_scale_from(cfg))
        pred_next = dyn.predict(np.array([x0.as_tuple()]), np.array([u_hat.as_tuple()]))
        true_next = step(cfg, gp, x0, u_hat)
        assert abs(pred_next[0, 0] - true_next.v_long) < 1e-3

        slope = 25.0
        W_clf = np.zeros((7, 1))
        W_clf[0, 0] = -slope
        clf = SafetyClf(params=nn.MlpParams(
            sizes=(7, 1), weights=((W_clf, np.array([slope * v_star])),),
            head="sigmoid"), norm=norm, lam=4.0)

        soft = soft_filter_pi_xi(clf, dyn, x0, u_hat, steps=400, step_size=0.01)
        oracle = predictive_filter_oracle(x0, u_hat, lambda xn: xn.v_long <= v_star,
                                          cfg, gp, n_candidates=41)
        assert oracle.feasible
        # both reduce throttle; the soft output lands on the conservative side
        # of the hard gate, in the oracle's neighborhood
        assert soft.u_a < u_hat.u_a and oracle.action.u_a < u_hat.u_a
        assert step(cfg, gp, x0, soft).v_long <= v_star + 0.01
        assert abs(soft.u_a - oracle.action.u_a) < 0.4

    def test_indicator_limit_grid_argmin_equals_oracle(self, gp, noiseless_sim):
        """With a hard indicator the softened objective reduces to the oracle's
        constrained argmin; check on a grid of states."""
        v_star = 1.6
        safe = lambda xn: xn.v_long <= v_star
        grid = np.linspace(-1.0, 1.0, 21)
        for v0 in (1.2, 1.5, 1.58):
            x = make_state(v=v0, s=1.0)
            u_hat = Action(0.8, 0.1)
            # same candidate set as the filter: the proposal plus the full grid
            candidates = [u_hat] + [Action(float(a), float(s))
                                    for a in grid for s in grid]
            best, best_d = None, np.inf
            for cand in candidates:
                if not safe(step(noiseless_sim, gp, x, cand)):
                    continue  # the indicator term is +inf here
                d = (cand.u_a - u_hat.u_a) ** 2 + (cand.u_steer - u_hat.u_steer) ** 2
                if d < best_d:
                    best, best_d = cand, d
            oracle = predictive_filter_oracle(x, u_hat, safe, noiseless_sim, gp,
                                              n_candidates=21)
            assert oracle.feasible
            assert oracle.action == best
            assert safe(step(noiseless_sim, gp, x, oracle.action))


class TestCheckpointIO:
    def test_round_trip(self, tmp_path, small_critic):
        cfg, dyn, clf = small_critic
        save_critic(dyn, clf, tmp_path / "critic")
        dyn2, clf2 = load_critic(tmp_path / "critic", cfg, lam=clf.lam)
        X = np.random.default_rng(1).normal(size=(3, 6))
        U = np.random.default_rng(2).uniform(-1, 1, (3, 2))
        assert np.allclose(dyn.predict(X, U), dyn2.predict(X, U), atol=0, rtol=0)
        assert np.allclose(clf.prob(X), clf2.prob(X), atol=0, rtol=0)
