import numpy as np
import pytest

from lccsub import presets
from lccsub.experiments import (
    ExperimentConfig,
    TooManyFailures,
    bootstrap_se,
    convergence_study,
    derived_rng,
    run_experiment,
    summarize,
)
from lccsub.glm import ModelParams
from lccsub.populations import population_theta_star


class TestSummarize:
    def test_exact_draws_give_zero(self):
        truth = ModelParams(0.5, [1.0, -2.0])
        draws = np.tile(truth.as_array(), (5, 1))
        assert summarize(draws, truth) == (0.0, 0.0)

    def test_two_symmetric_draws(self):
        truth = ModelParams(0.0, [1.0, 1.0])
        draws = np.array([[0.0, 2.0, 1.0], [0.0, 0.0, 1.0]])
        bias_sq, var = summarize(draws, truth)
        assert bias_sq == pytest.approx(0.0)
        assert var == pytest.approx(2.0)

    def test_gaussian_draws_match_closed_form(self):
        rng = np.random.default_rng(0)
        truth = ModelParams(0.0, np.zeros(3))
        delta = np.array([0.3, -0.1, 0.2])
        sigma = 0.5
        draws = np.hstack(
            [
                np.zeros((2000, 1)),
                truth.slopes + delta + sigma * rng.standard_normal((2000, 3)),
            ]
        )
        bias_sq, var = summarize(draws, truth)
        assert bias_sq == pytest.approx(np.sum(delta**2), abs=0.02)
        assert var == pytest.approx(3 * sigma**2, rel=0.1)

    def test_requires_two_draws(self):
        with pytest.raises(ValueError):
            summarize(np.zeros((1, 3)), ModelParams(0.0, [0.0, 0.0]))


class TestBootstrapSE:
    def test_constant_draws(self):
        truth = ModelParams(0.0, [1.0])
        draws = np.tile([0.0, 1.0], (50, 1))
        assert bootstrap_se(draws, truth, 200) == (0.0, 0.0)

    def test_se_shrinks_with_replications(self):
        truth = ModelParams(0.0, [0.0, 0.0])
        rng = np.random.default_rng(1)
        ratios = []
        for _ in range(20):
            small = np.hstack([np.zeros((100, 1)), rng.standard_normal((100, 2))])
            big = np.hstack([np.zeros((400, 1)), rng.standard_normal((400, 2))])
            _, v_small = bootstrap_se(small, truth, 200, rng)
            _, v_big = bootstrap_se(big, truth, 200, rng)
            ratios.append(v_big / v_small)
        assert 0.4 <= np.median(ratios) <= 0.6

    def test_matches_independent_resampler(self):
        # second, independently coded bootstrap over the same resample stream
        truth = ModelParams(0.0, [0.3, -0.2])
        rng = np.random.default_rng(2)
        draws = np.hstack(
            [np.zeros((200, 1)), 0.4 * rng.standard_normal((200, 2)) + [0.35, -0.1]]
        )
        b1, v1 = bootstrap_se(draws, truth, 500, np.random.default_rng(77))
        rng2 = np.random.default_rng(77)
        stats = []
        for _ in range(500):
            idx = rng2.integers(0, 200, size=200)
            s = draws[idx][:, 1:]
            stats.append(
                (
                    np.sum((s.mean(0) - truth.slopes) ** 2),
                    np.sum(s.var(0, ddof=1)),
                )
            )
        stats = np.array(stats)
        assert b1 == pytest.approx(stats[:, 0].std(ddof=1), rel=0.05)
        assert v1 == pytest.approx(stats[:, 1].std(ddof=1), rel=0.05)

    def test_requires_hundred_resamples(self):
        with pytest.raises(ValueError):
            bootstrap_se(np.zeros((10, 2)), ModelParams(0.0, [0.0]), 50)


@pytest.fixture(scope="module")
def small_config():
    return ExperimentConfig(
        spec=presets.correct_gaussian(p=3, mu_scale=0.8),
        n_full=20000,
        n_pilot=400,
        n_lcc=400,
        replications=12,
        methods=("lcc", "wcc", "cc", "uniform", "full"),
        bootstrap_B=150,
        master_seed=99,
    )


@pytest.fixture(scope="module")
def small_truth(small_config):
    return population_theta_star(small_config.spec)


class TestRunExperiment:
    def test_deterministic_across_worker_counts(self, small_config, small_truth):
        r1 = run_experiment(small_config, threads=1, theta_star=small_truth)
        r2 = run_experiment(small_config, threads=3, theta_star=small_truth)
        for m in small_config.methods:
            assert np.array_equal(r1.methods[m].draws, r2.methods[m].draws)
            assert r1.methods[m].bias_sq_se == r2.methods[m].bias_sq_se

    def test_budget_accounting(self, small_config, small_truth):
        rep = run_experiment(small_config, theta_star=small_truth)
        budget = small_config.comparison_budget
        for m in ("cc", "wcc", "uniform"):
            assert rep.methods[m].mean_subsample_size == pytest.approx(budget, rel=0.05)
        assert rep.methods["lcc"].mean_subsample_size == pytest.approx(
            small_config.n_lcc, rel=0.15
        )

    def test_all_methods_near_truth_on_correct_spec(self, small_config, small_truth):
        rep = run_experiment(small_config, theta_star=small_truth)
        truth = small_truth.params.slopes
        for m in ("lcc", "wcc", "cc"):
            draws = rep.methods[m].draws[:, 1:]
            se = draws.std(axis=0, ddof=1) / np.sqrt(draws.shape[0])
            assert np.all(np.abs(draws.mean(axis=0) - truth) < 4 * se + 0.05)

    def test_implicit_full_mode(self):
        cfg = ExperimentConfig(
            spec=presets.simulation2(p=6),
            n_full=10**6,
            n_pilot=500,
            n_lcc=500,
            replications=8,
            methods=("lcc", "cc", "wcc"),
            implicit_full=True,
            bootstrap_B=150,
            master_seed=5,
        )
        rep = run_experiment(cfg)
        assert rep.lcc_acceptance_rates.shape == (8,)
        assert np.all(rep.lcc_acceptance_rates > 0)
        truth = rep.theta_star.params.slopes
        draws = rep.methods["lcc"].draws[:, 1:]
        assert np.linalg.norm(draws.mean(axis=0) - truth) < 1.0

    def test_config_validation(self):
        spec = presets.correct_gaussian(p=2)
        with pytest.raises(ValueError):
            ExperimentConfig(spec, 100, 10, 10, replications=1)
        with pytest.raises(ValueError):
            ExperimentConfig(spec, 100, 10, 10, replications=2, methods=("nope",))
        with pytest.raises(ValueError):
            ExperimentConfig(
                spec, 100, 10, 10, replications=2, methods=("full",), implicit_full=True
            )

    def test_too_many_failures(self):
        # tiny subsamples on few rows separate almost surely
        cfg = ExperimentConfig(
            spec=presets.correct_gaussian(p=3, mu_scale=3.0, prior1=0.5),
            n_full=40,
            n_pilot=6,
            n_lcc=6,
            replications=6,
            methods=("cc",),
            bootstrap_B=150,
            master_seed=1,
            max_failure_fraction=0.0,
        )
        with pytest.raises(TooManyFailures):
            run_experiment(cfg)


class TestDerivedStreams:
    def test_streams_differ_by_stage_and_rep(self):
        a = derived_rng(0, 1, "data").random(4)
        b = derived_rng(0, 1, "pilot").random(4)
        c = derived_rng(0, 2, "data").random(4)
        assert not np.allclose(a, b)
        assert not np.allclose(a, c)
        assert np.allclose(a, derived_rng(0, 1, "data").random(4))


class TestConvergenceStudy:
    def test_oatmeal_lcc_shrinks_cc_plateaus(self):
        oat = presets.oatmeal()
        star = population_theta_star(oat)
        rows = convergence_study(
            oat,
            n_grid=[4000, 16000, 64000],
            methods=("lcc", "cc"),
            seeds=12,
            master_seed=3,
            theta_star=star,
        )
        med = {(r["n"], r["method"]): r["median_error"] for r in rows}
        assert med[(64000, "lcc")] < med[(4000, "lcc")]
        # cc error stays near its population-limit distance
        from lccsub.populations import equal_class_bias, theta_cc_limit

        plateau = np.linalg.norm(
            theta_cc_limit(oat, equal_class_bias(oat)).params.as_array()
            - star.params.as_array()
        )
        assert med[(64000, "cc")] == pytest.approx(plateau, rel=0.2)
