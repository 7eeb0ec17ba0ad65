import numpy as np
import pytest

from forcempc.gp import (
    Dataset,
    FitResult,
    GpTrainingError,
    KernelConfig,
    build_posterior,
    fit_hyperparams,
    kernel_eval,
    kernel_matrix,
    load_dataset_csv,
    load_posterior,
    log_marginal_likelihood,
    mean_gradient,
    predict,
    predict_mean,
    save_dataset_csv,
    save_posterior,
    subsample_by_distance,
)


def make_dataset(rng, n=20, d=3, cfg=None, noise=0.05):
    """Sample a dataset from a known SE-kernel GP."""
    cfg = cfg or KernelConfig(signal_var=1.5, lengthscales=np.full(d, 0.7))
    X = rng.uniform(-1.5, 1.5, size=(n, d))
    K = kernel_matrix(cfg, X) + 1e-10 * np.eye(n)
    f = rng.multivariate_normal(np.zeros(n), K)
    y = f + noise * rng.normal(size=n)
    return Dataset(X=X, y=y, noise_var=noise**2)


class TestKernel:
    def test_zero_distance_gives_signal_variance(self):
        cfg = KernelConfig(signal_var=2.3, lengthscales=[0.5, 0.8])
        x = np.array([0.1, -0.4])
        assert kernel_eval(cfg, x, x) == pytest.approx(2.3)

    def test_symmetry(self):
        rng = np.random.default_rng(0)
        cfg = KernelConfig(signal_var=1.1, lengthscales=[0.4, 1.2, 0.9])
        for _ in range(10):
            a, b = rng.normal(size=3), rng.normal(size=3)
            assert kernel_eval(cfg, a, b) == pytest.approx(
                kernel_eval(cfg, b, a), rel=1e-14)

    def test_unit_distance_value(self):
        cfg = KernelConfig(signal_var=1.0, lengthscales=[1.0])
        val = kernel_eval(cfg, np.array([0.0]), np.array([1.0]))
        assert val == pytest.approx(np.exp(-0.5), abs=1e-12)

    def test_bounded_by_signal_variance(self):
        rng = np.random.default_rng(1)
        cfg = KernelConfig(signal_var=0.9, lengthscales=[0.3, 0.3])
        for _ in range(20):
            v = kernel_eval(cfg, rng.normal(size=2), rng.normal(size=2))
            assert 0.0 < v <= 0.9 + 1e-15

    def test_rejects_nonpositive_hyperparameters(self):
        with pytest.raises(ValueError):
            KernelConfig(signal_var=-1.0, lengthscales=[1.0])
        with pytest.raises(ValueError):
            KernelConfig(signal_var=1.0, lengthscales=[0.0])


class TestLogMarginalLikelihood:
    def test_scalar_closed_form(self):
        # n=1, unit kernel, no noise: lml = -1/2 - log(2 pi)/2.
        data = Dataset(X=np.array([[0.0]]), y=np.array([1.0]))
        cfg = KernelConfig(signal_var=1.0, lengthscales=[1.0])
        lml = log_marginal_likelihood(data, cfg, 0.0)
        assert lml == pytest.approx(-0.5 - 0.5 * np.log(2 * np.pi),
                                    abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(42)
        for trial in range(3):
            data = make_dataset(rng, n=20, d=3)
            cfg = KernelConfig(signal_var=np.exp(rng.normal()),
                               lengthscales=np.exp(rng.normal(size=3) * 0.3))
            noise_var = float(np.exp(rng.normal() - 2.0))
            _, grad = log_marginal_likelihood(data, cfg, noise_var,
                                              with_gradient=True)
            theta = np.concatenate([[np.log(cfg.signal_var)],
                                    np.log(cfg.lengthscales),
                                    [np.log(noise_var)]])
            eps = 1e-6
            for j in range(len(theta)):
                tp, tm = theta.copy(), theta.copy()
                tp[j] += eps
                tm[j] -= eps

                def lml_at(t):
                    c = KernelConfig(signal_var=np.exp(t[0]),
                                     lengthscales=np.exp(t[1:4]))
                    return log_marginal_likelihood(data, c, np.exp(t[4]))

                fd = (lml_at(tp) - lml_at(tm)) / (2 * eps)
                assert grad[j] == pytest.approx(
                    fd, rel=1e-5, abs=1e-7), f"component {j}"

    def test_duplicate_point_regularized_by_noise(self):
        rng = np.random.default_rng(3)
        data = make_dataset(rng, n=10, d=2)
        dup = Dataset(X=np.vstack([data.X, data.X[:1]]),
                      y=np.concatenate([data.y, data.y[:1] + 1e-6]))
        cfg = KernelConfig(signal_var=1.0, lengthscales=[0.5, 0.5])
        vals = [log_marginal_likelihood(dup, cfg, s2)
                for s2 in (1e-2, 1e-2 + 1e-7)]
        assert np.isfinite(vals).all()
        assert abs(vals[0] - vals[1]) < 1e-2


class TestPosterior:
    def test_single_point_weight(self):
        data = Dataset(X=np.array([[0.0]]), y=np.array([1.0]))
        cfg = KernelConfig(signal_var=1.0, lengthscales=[1.0])
        gp = build_posterior(data, cfg, 0.0)
        np.testing.assert_allclose(gp.alpha, [1.0], atol=1e-12)

    def test_factor_recomposes_kernel(self):
        rng = np.random.default_rng(5)
        data = make_dataset(rng, n=25, d=3)
        cfg = KernelConfig(signal_var=1.5, lengthscales=[0.7, 0.7, 0.7])
        gp = build_posterior(data, cfg, data.noise_var)
        K = kernel_matrix(cfg, data.X)
        target = K + (data.noise_var + gp.jitter) * np.eye(25)
        rel = np.max(np.abs(gp.L @ gp.L.T - target)) / np.max(np.abs(target))
        assert rel < 1e-10

    def test_weights_match_dense_solve(self):
        rng = np.random.default_rng(6)
        data = make_dataset(rng, n=30, d=2)
        cfg = KernelConfig(signal_var=2.0, lengthscales=[0.6, 0.9])
        gp = build_posterior(data, cfg, data.noise_var)
        A = (kernel_matrix(cfg, data.X)
             + (data.noise_var + gp.jitter) * np.eye(30))
        residual = A @ gp.alpha - data.y
        assert np.max(np.abs(residual)) < 1e-9


class TestPredict:
    def test_interpolates_noise_free_data(self):
        rng = np.random.default_rng(7)
        data = make_dataset(rng, n=15, d=2, noise=0.0)
        cfg = KernelConfig(signal_var=1.5, lengthscales=[0.7, 0.7])
        gp = build_posterior(data, cfg, 0.0)
        for xi, yi in zip(data.X, data.y):
            mean, var = predict(gp, xi)
            assert mean == pytest.approx(yi, abs=1e-6)
            assert var <= 1e-6

    def test_single_point_closed_form(self):
        data = Dataset(X=np.array([[0.0]]), y=np.array([1.0]))
        cfg = KernelConfig(signal_var=1.0, lengthscales=[1.0])
        gp = build_posterior(data, cfg, 0.0)
        mean, var = predict(gp, np.array([1.0]))
        assert mean == pytest.approx(np.exp(-0.5), abs=1e-12)
        assert var == pytest.approx(1.0 - np.exp(-1.0), abs=1e-12)

    def test_far_field_reverts_to_prior(self):
        rng = np.random.default_rng(8)
        data = make_dataset(rng, n=12, d=2)
        cfg = KernelConfig(signal_var=1.3, lengthscales=[0.5, 0.5],
                           prior_mean=0.4)
        gp = build_posterior(Dataset(X=data.X, y=data.y), cfg, 1e-4)
        mean, var = predict(gp, np.array([50.0, -50.0]))
        assert mean == pytest.approx(0.4, abs=1e-6)
        assert var == pytest.approx(1.3, abs=1e-6)

    def test_variance_in_unit_interval_of_signal(self):
        rng = np.random.default_rng(9)
        data = make_dataset(rng, n=18, d=3)
        cfg = KernelConfig(signal_var=2.0, lengthscales=[0.4, 0.8, 0.6])
        gp = build_posterior(data, cfg, 1e-3)
        _, var = predict(gp, rng.uniform(-3, 3, size=(200, 3)))
        assert np.all(var >= 0.0) and np.all(var <= 2.0 + 1e-12)

    def test_extra_point_never_increases_variance(self):
        rng = np.random.default_rng(10)
        cfg = KernelConfig(signal_var=1.0, lengthscales=[0.6, 0.6])
        data = make_dataset(rng, n=14, d=2, cfg=cfg)
        grown = Dataset(X=np.vstack([data.X, rng.uniform(-1, 1, size=(1, 2))]),
                        y=np.concatenate([data.y, [0.3]]))
        gp_small = build_posterior(data, cfg, 1e-3)
        gp_big = build_posterior(grown, cfg, 1e-3)
        queries = rng.uniform(-2, 2, size=(50, 2))
        _, var_small = predict(gp_small, queries)
        _, var_big = predict(gp_big, queries)
        assert np.all(var_big <= var_small + 1e-9)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(11)
        data = make_dataset(rng, n=16, d=2)
        cfg = KernelConfig(signal_var=1.0, lengthscales=[0.7, 0.7])
        perm = rng.permutation(16)
        gp_a = build_posterior(data, cfg, 1e-3)
        gp_b = build_posterior(Dataset(X=data.X[perm], y=data.y[perm]),
                               cfg, 1e-3)
        queries = rng.uniform(-1, 1, size=(20, 2))
        mean_a, var_a = predict(gp_a, queries)
        mean_b, var_b = predict(gp_b, queries)
        np.testing.assert_allclose(mean_a, mean_b, atol=1e-10)
        np.testing.assert_allclose(var_a, var_b, atol=1e-10)

    def test_mean_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(12)
        data = make_dataset(rng, n=15, d=3)
        cfg = KernelConfig(signal_var=1.2, lengthscales=[0.5, 0.9, 0.7])
        gp = build_posterior(data, cfg, 1e-3)
        eps = 1e-6
        for _ in range(5):
            x = rng.uniform(-1, 1, size=3)
            g = mean_gradient(gp, x)
            for j in range(3):
                dx = np.zeros(3)
                dx[j] = eps
                fd = (predict_mean(gp, x + dx)
                      - predict_mean(gp, x - dx)) / (2 * eps)
                assert g[j] == pytest.approx(fd, rel=1e-5, abs=1e-8)


class TestFit:
    def test_recovers_known_hyperparameters(self):
        # Fixed-seed self-consistency study on an identifiable design:
        # ~60 samples spanning two lengthscales in each direction.
        rng = np.random.default_rng(123)
        cfg_true = KernelConfig(signal_var=1.5,
                                lengthscales=np.array([1.0, 1.0, 1.0]))
        noise_true = 0.15
        X = rng.uniform(-1, 1, size=(60, 3))
        K = kernel_matrix(cfg_true, X) + 1e-10 * np.eye(60)
        f = rng.multivariate_normal(np.zeros(60), K)
        data = Dataset(X=X, y=f + noise_true * rng.normal(size=60))
        res = fit_hyperparams(data, restarts=8, seed=1)
        assert abs(np.log(res.config.signal_var)
                   - np.log(cfg_true.signal_var)) < 0.3
        np.testing.assert_allclose(np.log(res.config.lengthscales),
                                   np.log(cfg_true.lengthscales), atol=0.3)
        assert abs(np.log(res.noise_var) - np.log(noise_true**2)) < 0.3

    def test_gradient_small_at_optimum(self):
        rng = np.random.default_rng(77)
        data = make_dataset(rng, n=40, d=2)
        res = fit_hyperparams(data, restarts=4, seed=2)
        assert res.grad_norm < 1e-5

    def test_white_noise_targets(self):
        rng = np.random.default_rng(99)
        X = rng.uniform(-1, 1, size=(50, 2))
        y = 0.3 * rng.normal(size=50)
        res = fit_hyperparams(Dataset(X=X, y=y), restarts=6, seed=3)
        sample_var = np.var(y)
        assert res.config.signal_var <= sample_var * 1.5
        assert 0.3 * sample_var < res.noise_var < 3.0 * sample_var

    def test_returned_lml_beats_every_start(self):
        rng = np.random.default_rng(55)
        data = make_dataset(rng, n=25, d=2)
        res = fit_hyperparams(data, restarts=5, seed=4)
        # The optimum must dominate a few arbitrary settings.
        for _ in range(5):
            cfg = KernelConfig(signal_var=np.exp(rng.normal()),
                               lengthscales=np.exp(rng.normal(size=2)))
            lml = log_marginal_likelihood(data, cfg,
                                          float(np.exp(rng.normal() - 2)))
            assert res.lml >= lml - 1e-9

    def test_needs_two_points(self):
        with pytest.raises(ValueError):
            fit_hyperparams(Dataset(X=np.array([[0.0]]), y=np.array([1.0])))


class TestSubsample:
    def test_identical_points_keep_one(self):
        pts = np.zeros((7, 3))
        idx = subsample_by_distance(pts, 0.015)
        np.testing.assert_array_equal(idx, [0])

    def test_grid_at_exact_spacing_keeps_all(self):
        pts = (np.arange(30) * 0.015)[:, None]
        idx = subsample_by_distance(pts, 0.015)
        np.testing.assert_array_equal(idx, np.arange(30))

    def test_against_pairwise_oracle(self):
        rng = np.random.default_rng(13)
        pts = rng.uniform(0, 0.2, size=(200, 3))
        min_dist = 0.03
        idx = subsample_by_distance(pts, min_dist)
        kept = pts[idx]
        # Retained pairs are separated.
        for i in range(len(kept)):
            for j in range(i + 1, len(kept)):
                assert np.linalg.norm(kept[i] - kept[j]) >= min_dist * (
                    1 - 1e-9)
        # Every rejected point is close to some retained one.
        rejected = np.setdiff1d(np.arange(len(pts)), idx)
        for r in rejected:
            dists = np.linalg.norm(kept - pts[r], axis=1)
            assert dists.min() < min_dist

    def test_deterministic_in_input_order(self):
        rng = np.random.default_rng(14)
        pts = rng.uniform(0, 1, size=(50, 2))
        a = subsample_by_distance(pts, 0.1)
        b = subsample_by_distance(pts, 0.1)
        np.testing.assert_array_equal(a, b)


class TestSerialization:
    def test_dataset_csv_round_trip(self, tmp_path):
        rng = np.random.default_rng(15)
        data = Dataset(X=rng.uniform(-1, 1, size=(12, 3)),
                       y=rng.normal(size=12))
        path = tmp_path / "train.csv"
        save_dataset_csv(data, path)
        loaded = load_dataset_csv(path)
        np.testing.assert_allclose(loaded.X, data.X, atol=1e-10)
        np.testing.assert_allclose(loaded.y, data.y, atol=1e-10)

    def test_dataset_csv_rejects_bad_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b,c,d\n1,2,3,4\n")
        with pytest.raises(ValueError):
            load_dataset_csv(path)

    def test_posterior_bundle_round_trip(self, tmp_path):
        rng = np.random.default_rng(16)
        data = make_dataset(rng, n=20, d=3)
        cfg = KernelConfig(signal_var=1.4, lengthscales=[0.5, 0.6, 0.7],
                           prior_mean=0.1)
        gp = build_posterior(data, cfg, 1e-3)
        path = tmp_path / "gp.npz"
        save_posterior(gp, path)
        loaded = load_posterior(path)
        queries = rng.uniform(-1, 1, size=(10, 3))
        np.testing.assert_allclose(predict(gp, queries)[0],
                                   predict(loaded, queries)[0], atol=1e-14)
        np.testing.assert_allclose(predict(gp, queries)[1],
                                   predict(loaded, queries)[1], atol=1e-14)
