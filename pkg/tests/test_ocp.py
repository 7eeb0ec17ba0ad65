import copy

import numpy as np
import pytest

from forcempc.contact import (
    HookModel,
    HybridModel,
    SurfaceGeometry,
    model_force,
)
from forcempc.dynamics import RobotGeometry, inverse_kinematics
from forcempc.gp import Dataset, KernelConfig, build_posterior, predict
from forcempc.ocp import (
    ConstraintSet,
    EmptyTightenedSetError,
    LinearPredictionModel,
    OcpConfig,
    PathFollowingMpc,
    TighteningPolicy,
    default_sigma_region,
    sigma_max_over_region,
    solve_sqp,
    stage_cost,
    tighten_output_box,
    transcribe,
)
from forcempc.pathref import PathDefinition

GEOM = RobotGeometry()
SURF = SurfaceGeometry()
PATH = PathDefinition()


def wide_constraints(**overrides):
    base = dict(
        q_min=np.full(3, -50.0), q_max=np.full(3, 50.0),
        qd_min=np.full(3, -50.0), qd_max=np.full(3, 50.0),
        u_min=np.full(3, -100.0), u_max=np.full(3, 100.0),
        z_min=np.array([-100.0, -100.0]), z_max=np.array([100.0, 100.0]),
        v_min=-100.0, v_max=100.0, force_box=(-100.0, 100.0))
    base.update(overrides)
    return ConstraintSet(**base)


def affine_path():
    # Zero-amplitude profile: the reference is affine in theta.
    return PathDefinition(params={"z_amp": 0.0, "f_amp": 0.0})


def lq_model(rng, n_inputs=4):
    A = 0.55 * np.eye(8) + 0.08 * rng.normal(size=(8, 8))
    A[6] = 0.0
    A[6, 6] = 1.0          # keep theta fixed so the path stays affine
    B = 0.25 * rng.normal(size=(8, n_inputs))
    B[6] = 0.0
    C = 0.5 * rng.normal(size=(3, 8))
    return LinearPredictionModel(A, B, C)


def small_cfg(n=4, **overrides):
    base = dict(horizon=n * 0.01, sampling_time=0.01, n_intervals=n,
                q_weights=np.array([4.0, 3.0, 2.0, 1.0]),
                r_weights=np.array([1.0, 1.0, 1.0, 1.0]))
    base.update(overrides)
    return OcpConfig(**base)


class TestTightening:
    def test_reference_backoff(self):
        assert tighten_output_box((0.0, 6.0), 0.7) == (0.7, 5.3)

    def test_zero_backoff_identity(self):
        assert tighten_output_box((0.0, 6.0), 0.0) == (0.0, 6.0)

    def test_empty_set_rejected(self):
        with pytest.raises(EmptyTightenedSetError):
            tighten_output_box((0.0, 6.0), 3.1)

    def test_monotone_nesting(self):
        small = tighten_output_box((0.0, 6.0), 0.5)
        big = tighten_output_box((0.0, 6.0), 1.5)
        assert small[0] <= big[0] and big[1] <= small[1]


class TestSigmaMax:
    def make_gp(self, n=12, seed=0):
        rng = np.random.default_rng(seed)
        X = rng.uniform(-1, 1, size=(n, 3))
        y = rng.normal(size=n)
        cfg = KernelConfig(signal_var=0.8, lengthscales=[0.4, 0.4, 0.4])
        return build_posterior(Dataset(X=X, y=y), cfg, 1e-4)

    def test_training_points_have_tiny_sigma(self):
        gp = self.make_gp()
        noise_free = build_posterior(Dataset(X=gp.X, y=np.zeros(12)),
                                     gp.config, 0.0)
        val = sigma_max_over_region(noise_free, gp.X)
        assert val <= 1e-4

    def test_matches_exhaustive_scan(self):
        gp = self.make_gp(seed=3)
        rng = np.random.default_rng(4)
        grid = rng.uniform(-2, 2, size=(300, 3))
        got = sigma_max_over_region(gp, grid)
        best = 0.0
        for row in grid:
            best = max(best, np.sqrt(predict(gp, row)[1]))
        assert got == pytest.approx(best, rel=1e-12)

    def test_far_region_approaches_prior_sigma(self):
        gp = self.make_gp(seed=5)
        grid = np.full((4, 3), 40.0)
        assert sigma_max_over_region(gp, grid) == pytest.approx(
            np.sqrt(0.8), abs=1e-6)

    def test_default_region_covers_training_box(self):
        gp = self.make_gp(seed=6)
        grid = default_sigma_region(gp, points_per_dim=4)
        assert grid.shape == (64, 3)
        assert np.all(grid.min(axis=0) <= gp.X.min(axis=0))
        assert np.all(grid.max(axis=0) >= gp.X.max(axis=0))


class TestStageCost:
    CFG = OcpConfig()

    def test_zero(self):
        assert stage_cost(np.zeros(3), 0.0, np.zeros(3), 0.0, self.CFG) == 0.0

    def test_position_weight(self):
        val = stage_cost(np.array([1e-3, 0, 0]), 0.0, np.zeros(3), 0.0,
                         self.CFG)
        assert val == pytest.approx(9.0, rel=1e-12)

    def test_matches_dense_quadratic_form(self):
        rng = np.random.default_rng(7)
        Q = np.diag(self.CFG.q_weights)
        R = np.diag(self.CFG.r_weights)
        for _ in range(10):
            e, th = rng.normal(size=3), rng.normal()
            u, v = rng.normal(size=3), rng.normal()
            lhs = stage_cost(e, th, u, v, self.CFG)
            ey = np.concatenate([e, [th]])
            w = np.concatenate([u, [v]])
            assert lhs == pytest.approx(ey @ Q @ ey + w @ R @ w, rel=1e-12)


class TestTranscription:
    def test_single_interval_frozen_plant_projects_input(self):
        # Identity plant, B = 0: only the input cost acts, so the solution
        # is the unconstrained minimizer (zero) projected onto the box.
        model = LinearPredictionModel(np.eye(8), np.zeros((8, 4)),
                                      np.zeros((3, 8)))
        cfg = small_cfg(n=1)
        cons = wide_constraints(u_min=np.ones(3), u_max=np.full(3, 2.0))
        s0 = np.zeros(8)
        s0[6] = -0.5
        nlp = transcribe(s0[:6], s0[6:], None, cfg, cons,
                         TighteningPolicy(mode="none"), affine_path(),
                         prediction_model=model)
        sol = solve_sqp(nlp)
        np.testing.assert_allclose(sol.u_traj[0], np.ones(3), atol=1e-6)
        assert sol.v_traj[0] == pytest.approx(0.0, abs=1e-6)

    def test_none_mode_equals_zero_backoff(self):
        rng = np.random.default_rng(8)
        model = lq_model(rng)
        cfg = small_cfg(n=3)
        cons = wide_constraints()
        s0 = rng.normal(size=8) * 0.1
        s0[6] = -0.5
        qps = []
        for policy in (TighteningPolicy(mode="none"),
                       TighteningPolicy(mode="fixed", backoff=0.0)):
            nlp = transcribe(s0[:6], s0[6:], None, cfg, cons, policy,
                             affine_path(), prediction_model=model)
            S, W = nlp.initial_trajectory()
            qps.append(nlp.assemble_qp(S, W, nlp.node_backoffs(S)))
        for a, b in zip(qps[0][:4], qps[1][:4]):
            np.testing.assert_array_equal(a, b)

    def test_solution_defects_below_tolerance(self):
        rng = np.random.default_rng(9)
        model = lq_model(rng)
        cfg = small_cfg(n=5)
        s0 = 0.1 * rng.normal(size=8)
        s0[6] = -0.5
        nlp = transcribe(s0[:6], s0[6:], None, cfg, wide_constraints(),
                         TighteningPolicy(), affine_path(),
                         prediction_model=model)
        sol = solve_sqp(nlp)
        assert sol.defect_inf < 1e-8

    def test_flags_initial_state_outside_box(self):
        cons = wide_constraints(q_min=np.full(3, -0.01),
                                q_max=np.full(3, 0.01))
        model = LinearPredictionModel(np.eye(8), np.zeros((8, 4)),
                                      np.zeros((3, 8)))
        s0 = np.zeros(8)
        s0[0] = 0.5
        s0[6] = -0.5
        nlp = transcribe(s0[:6], s0[6:], None, small_cfg(n=1), cons,
                         TighteningPolicy(), affine_path(),
                         prediction_model=model)
        assert "x0_outside_box" in nlp.events


def dense_kkt_oracle(model, path, cfg, s0):
    """Full-space equality-constrained least squares via one KKT solve."""
    N = cfg.n_intervals
    n_w, n_s = 4 * N, 8 * N
    n_var = n_w + n_s

    def w_idx(k):
        return slice(4 * k, 4 * k + 4)

    def s_idx(k):  # state s_k for k = 1..N
        return slice(n_w + 8 * (k - 1), n_w + 8 * k)

    sqrt_q = np.sqrt(cfg.sampling_time * cfg.q_weights)
    sqrt_r = np.sqrt(cfg.sampling_time * cfg.r_weights)
    sqrt_e = np.sqrt(cfg.terminal_weights)
    dref = path.derivative(-0.5)

    rows, consts = [], []
    # Tracking residuals at nodes 1..N-1 (node 0 is constant).
    for k in range(1, N):
        Tk = np.zeros((4, 8))
        Tk[:3] = -model.C
        Tk[:3, 6] += dref
        Tk[3, 6] = 1.0
        base = path.eval(0.0) - path.derivative(-0.5) * 0.0
        # r(theta) = eval(t0) + d * (theta - t0) with t0 = -0.5.
        r0 = path.eval(-0.5) + dref * 0.5 * 0  # evaluated at -0.5
        for i in range(4):
            row = np.zeros(n_var)
            row[s_idx(k)] = sqrt_q[i] * Tk[i]
            rows.append(row)
            const = sqrt_q[i] * (np.append(r0 - dref * (-0.5), 0.0)[i])
            consts.append(const)
    for k in range(N):
        for j in range(4):
            row = np.zeros(n_var)
            row[4 * k + j] = sqrt_r[j]
            rows.append(row)
            consts.append(0.0)
    for i in range(8):
        row = np.zeros(n_var)
        row[s_idx(N)][i] = sqrt_e[i]
        rows.append(row)
        consts.append(0.0)
    J = np.asarray(rows)
    c = np.asarray(consts)

    C_eq = np.zeros((8 * N, n_var))
    b_eq = np.zeros(8 * N)
    for k in range(N):
        r = slice(8 * k, 8 * k + 8)
        C_eq[r, w_idx(k)] = -model.B
        if k == 0:
            b_eq[r] = model.A @ s0
        else:
            C_eq[r, s_idx(k)] = -model.A
        C_eq[r, s_idx(k + 1)] = np.eye(8)
    KKT = np.block([[2 * J.T @ J, C_eq.T],
                    [C_eq, np.zeros((8 * N, 8 * N))]])
    rhs = np.concatenate([-2 * J.T @ c, b_eq])
    sol = np.linalg.solve(KKT, rhs)
    W = sol[:n_w].reshape(N, 4)
    S = sol[n_w:n_var].reshape(N, 8)
    return W, S


class TestSqp:
    def test_matches_dense_kkt_oracle(self):
        rng = np.random.default_rng(10)
        model = lq_model(rng)
        cfg = small_cfg(n=6)
        path = affine_path()
        s0 = 0.05 * rng.normal(size=8)
        s0[6] = -0.5
        nlp = transcribe(s0[:6], s0[6:], None, cfg, wide_constraints(),
                         TighteningPolicy(), path, prediction_model=model)
        sol = solve_sqp(nlp)
        W_star, S_star = dense_kkt_oracle(model, path, cfg, s0)
        np.testing.assert_allclose(sol.w_traj, W_star, atol=1e-6)
        np.testing.assert_allclose(sol.s_traj[1:], S_star, atol=1e-6)
        assert sol.feasible

    def test_zero_cost_returns_zero_inputs_in_one_iteration(self):
        rng = np.random.default_rng(11)
        model = lq_model(rng)
        cfg = small_cfg(n=4, q_weights=np.zeros(4),
                        terminal_weights=np.zeros(8))
        s0 = np.zeros(8)
        s0[6] = -0.5
        nlp = transcribe(s0[:6], s0[6:], None, cfg, wide_constraints(),
                         TighteningPolicy(), affine_path(),
                         prediction_model=model)
        sol = solve_sqp(nlp)
        np.testing.assert_allclose(sol.w_traj, 0.0, atol=1e-12)
        assert sol.iterations == 1

    def test_warm_start_at_optimum_converges_fast(self):
        rng = np.random.default_rng(12)
        model = lq_model(rng)
        cfg = small_cfg(n=5)
        s0 = 0.05 * rng.normal(size=8)
        s0[6] = -0.5
        nlp = transcribe(s0[:6], s0[6:], None, cfg, wide_constraints(),
                         TighteningPolicy(), affine_path(),
                         prediction_model=model)
        first = solve_sqp(nlp)
        again = solve_sqp(nlp, warm_start=(first.w_traj, first.s_traj))
        assert again.iterations <= 2
        np.testing.assert_allclose(again.w_traj, first.w_traj, atol=1e-8)


def surface_setup(stiffness=3000.0):
    f0 = PATH.eval(-1.0)[2]
    target = np.array([SURF.plane_offset - f0 / stiffness, 0.15, 0.68])
    q0 = inverse_kinematics(target, GEOM)
    x0 = np.concatenate([q0, np.zeros(3)])
    z0 = np.array([-1.0, 0.0])
    return HookModel(stiffness=stiffness), x0, z0


class TestRobotOcp:
    def test_gauss_newton_gradient_matches_rollout_fd(self):
        # Feasible interior point: progress state away from the clamp
        # boundaries of the path parametrization.
        model, x0, _ = surface_setup()
        z0 = np.array([-0.5, 0.1])
        cfg = OcpConfig(horizon=0.05, n_intervals=5)
        nlp = transcribe(x0, z0, model, cfg, ConstraintSet(),
                         TighteningPolicy(), PATH, geom=GEOM, surf=SURF)
        rng = np.random.default_rng(13)
        W = 0.1 * rng.normal(size=(5, 4))
        S = nlp.rollout(W)
        _, qv, _, _, meta = nlp.assemble_qp(S, W, np.zeros(5))
        grad = qv[:meta["n_w"]]

        def rolled_objective(w_flat):
            Wt = w_flat.reshape(5, 4)
            return nlp.objective(nlp.rollout(Wt), Wt)

        eps = 1e-6
        w_flat = W.ravel()
        for j in range(len(w_flat)):
            dp, dm = w_flat.copy(), w_flat.copy()
            dp[j] += eps
            dm[j] -= eps
            fd = (rolled_objective(dp) - rolled_objective(dm)) / (2 * eps)
            denom = max(abs(fd), 1e-4)
            assert abs(grad[j] - fd) / denom < 1e-4, f"component {j}"

    def test_joint_weight_scaling_leaves_inputs_unchanged(self):
        model, x0, z0 = surface_setup()
        sols = []
        for c in (1.0, 7.0):
            cfg = OcpConfig(horizon=0.05, n_intervals=5, kkt_tol=1e-8,
                            q_weights=c * np.array([9e6, 9e6, 6.0, 1e2]),
                            r_weights=c * np.array([6.0, 6.0, 6.0, 6.0]),
                            terminal_weights=c * np.array(
                                [0, 0, 0, 0, 0, 0, 1e2, 0.0]))
            nlp = transcribe(x0, z0, model, cfg, ConstraintSet(),
                             TighteningPolicy(), PATH, geom=GEOM, surf=SURF)
            sols.append(solve_sqp(nlp))
        np.testing.assert_allclose(sols[0].u_traj, sols[1].u_traj, atol=2e-5)

    def test_predicted_forces_respect_tightened_box_when_feasible(self):
        model, x0, z0 = surface_setup()
        cfg = OcpConfig(horizon=0.08, n_intervals=8)
        policy = TighteningPolicy(mode="fixed", backoff=0.7)
        nlp = transcribe(x0, z0, model, cfg, ConstraintSet(), policy, PATH,
                         geom=GEOM, surf=SURF)
        sol = solve_sqp(nlp)
        if sol.feasible:
            assert np.all(sol.y_traj[1:, 2] >= 0.7 - 1e-6)
            assert np.all(sol.y_traj[1:, 2] <= 5.3 + 1e-6)

    def test_pointwise_backoffs_use_node_sigma(self):
        rng = np.random.default_rng(14)
        _, x0, z0 = surface_setup()
        X = x0[:3] + 0.03 * rng.normal(size=(15, 3))
        gp = build_posterior(
            Dataset(X=X, y=0.2 * rng.normal(size=15)),
            KernelConfig(signal_var=0.3, lengthscales=[0.1, 0.1, 0.1]),
            1e-4)
        hybrid = HybridModel(hook=HookModel(stiffness=3000.0), gp=gp)
        policy = TighteningPolicy(mode="pointwise", multiplier=2.0)
        cfg = OcpConfig(horizon=0.05, n_intervals=5)
        nlp = transcribe(x0, z0, hybrid, cfg, ConstraintSet(), policy, PATH,
                         geom=GEOM, surf=SURF)
        S, _ = nlp.initial_trajectory()
        backoffs = nlp.node_backoffs(S)
        expected = 2.0 * np.sqrt(predict(gp, S[1:, :3])[1])
        np.testing.assert_allclose(backoffs, expected, rtol=1e-12)

    def test_worst_case_mode_precomputes_constant_backoff(self):
        rng = np.random.default_rng(15)
        _, x0, z0 = surface_setup()
        X = x0[:3] + 0.03 * rng.normal(size=(12, 3))
        gp = build_posterior(
            Dataset(X=X, y=0.1 * rng.normal(size=12)),
            KernelConfig(signal_var=0.2, lengthscales=[0.08, 0.08, 0.08]),
            1e-4)
        hybrid = HybridModel(hook=HookModel(stiffness=3000.0), gp=gp)
        policy = TighteningPolicy(mode="worst-case", multiplier=2.0,
                                  region_points_per_dim=4)
        cfg = OcpConfig(horizon=0.03, n_intervals=3)
        nlp = transcribe(x0, z0, hybrid, cfg, ConstraintSet(), policy, PATH,
                         geom=GEOM, surf=SURF)
        S, _ = nlp.initial_trajectory()
        b = nlp.node_backoffs(S)
        assert np.ptp(b) == 0.0
        grid = default_sigma_region(gp, 4, 1.0)
        assert b[0] == pytest.approx(2.0 * sigma_max_over_region(gp, grid),
                                     rel=1e-12)


class TestMpcContext:
    def test_deterministic_given_equal_context(self):
        model, x0, z0 = surface_setup()
        cfg = OcpConfig(horizon=0.05, n_intervals=5, sqp_max_iters=10)
        mpc = PathFollowingMpc(model, PATH, cfg, ConstraintSet(),
                               TighteningPolicy(), GEOM, SURF)
        mpc.step(x0, z0)  # populate the warm start
        twin_a = copy.deepcopy(mpc)
        twin_b = copy.deepcopy(mpc)
        ua, va, _ = twin_a.step(x0, z0)
        ub, vb, _ = twin_b.step(x0, z0)
        np.testing.assert_array_equal(ua, ub)
        assert va == vb

    def test_diagnostics_contract(self):
        model, x0, z0 = surface_setup()
        cfg = OcpConfig(horizon=0.05, n_intervals=5, sqp_max_iters=10)
        mpc = PathFollowingMpc(model, PATH, cfg, ConstraintSet(),
                               TighteningPolicy(), GEOM, SURF)
        _, _, diag = mpc.step(x0, z0)
        for key in ("solve_time", "iterations", "kkt_residual"):
            assert key in diag
        assert diag["solve_time"] > 0.0
