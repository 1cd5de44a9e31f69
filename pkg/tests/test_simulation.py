import json

import numpy as np
import pytest

from cafpca.quadrature import trapezoid_weights
from cafpca.simulation import (
    STREAM_SUBJECT,
    SimConfig,
    aggregate,
    generate_dataset,
    jittered_grid,
    run_monte_carlo,
    stream,
    table1_rows,
    table2_rows,
    true_covariance,
    true_eigenfunction,
    true_eigenvalue,
    true_marginal_mean,
    true_mean,
    true_pooled_covariance,
    mean_ise,
    worker_count,
    write_tables,
)
from cafpca.mean import MeanSurface


class TestConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [{"n": 1}, {"runs": 0}, {"noise_sd": -0.1}, {"grid_points": 2}, {"n_min": 0}, {"n_min": 5, "n_max": 4}, {"n_max": 50}],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            SimConfig(**kwargs)

    def test_defaults(self):
        c = SimConfig()
        assert (c.n, c.runs, c.noise_sd, c.grid_points, c.n_min, c.n_max, c.fve_threshold) == (100, 100, 0.05, 51, 2, 10, 0.8)


class TestTruth:
    def test_eigenfunctions_orthonormal(self):
        t = np.linspace(0, 1, 2001)
        w = trapezoid_weights(t)
        for z in (0.0, 0.3, 0.77, 1.0):
            p1, p2 = true_eigenfunction(1, t, z), true_eigenfunction(2, t, z)
            assert abs(w @ p1**2 - 1) < 1e-6
            assert abs(w @ p2**2 - 1) < 1e-6
            assert abs(w @ (p1 * p2)) < 1e-6

    def test_mean_formula(self):
        assert true_mean(0.0, 0.0) == 1.0
        assert abs(true_mean(1.0, 1.0) - (1 + np.sin(1.0))) < 1e-15

    def test_eigenvalue_ratio(self):
        z = np.linspace(0.01, 1, 50)
        np.testing.assert_allclose(true_eigenvalue(1, z) / true_eigenvalue(2, z), 4.0)

    def test_unknown_component(self):
        with pytest.raises(ValueError):
            true_eigenfunction(3, 0.5, 0.5)
        with pytest.raises(ValueError):
            true_eigenvalue(0, 0.5)

    def test_pooled_covariance_quadrature(self):
        t = np.linspace(0, 1, 7)
        zs = np.linspace(0, 1, 4001)
        wz = trapezoid_weights(zs)
        ref = sum(wi * true_covariance(t, t, z) for z, wi in zip(zs, wz))
        assert np.max(np.abs(true_pooled_covariance(t) - ref)) < 1e-7

    def test_marginal_mean(self):
        zs = np.linspace(0, 1, 20001)
        t = np.array([0.0, 0.4, 1.0])
        ref = trapezoid_weights(zs) @ true_mean(t[None, :], zs[:, None])
        np.testing.assert_allclose(true_marginal_mean(t), ref, atol=1e-9)

    def test_mean_ise(self):
        tg, zg = np.linspace(0, 1, 41), np.linspace(0, 1, 21)
        exact = true_mean(tg[:, None], zg[None, :])
        surf = MeanSurface("adjusted", "local-linear", (0.1, 0.1), [], tg, zg, exact, None)
        assert mean_ise(surf) == 0.0
        surf.report_grid = exact + 0.3
        assert abs(mean_ise(surf) - 0.09) < 1e-12
        flat = MeanSurface("unadjusted", "local-linear", (0.1,), [], tg, None, true_marginal_mean(tg) - 0.2, None)
        assert abs(mean_ise(flat) - 0.04) < 1e-12

    def test_score_variance(self):
        # the subject draw uses N(0, sqrt(lambda_1(z))) for the first score
        rng = np.random.default_rng(0)
        a = rng.normal(0.0, np.sqrt(true_eigenvalue(1, 0.9)), 100_000)
        assert abs(a.var(ddof=1) - 0.1) <= 0.002


class TestGenerate:
    def test_ranges(self):
        cfg = SimConfig(n=60, runs=1, seed=3)
        data, truth = generate_dataset(cfg, 0)
        assert data.n == 60
        for s in data.subjects:
            assert np.all((s.times > 0) & (s.times < 1) | np.isin(s.times, [0.0, 1.0]))
            assert 0 <= s.covariate <= 1
            assert 2 <= s.n_obs <= 10
            assert np.all(np.diff(s.times) > 0)
        assert truth.curves.shape == (60, cfg.report_points)
        assert np.all(np.isfinite(truth.curves))

    def test_times_from_interior_jitter_grid(self):
        cfg = SimConfig(n=30, runs=1, seed=4)
        data, _ = generate_dataset(cfg, 2)
        grid = jittered_grid(stream(4, 2, 0), 51)
        allowed = set(grid[1:-1].tolist())
        assert all(set(s.times.tolist()) <= allowed for s in data.subjects)

    def test_jitter_grid(self):
        g = jittered_grid(np.random.default_rng(1), 51)
        assert np.all((g >= 0) & (g <= 1))
        assert np.max(np.abs(g - np.linspace(0, 1, 51))) < 0.06

    def test_noise_free_truth_matches_observations(self):
        cfg = SimConfig(n=10, runs=1, seed=5, noise_sd=0.0)
        data, truth = generate_dataset(cfg, 0)
        for i, s in enumerate(data.subjects):
            x = true_mean(s.times, s.covariate)
            for k in (1, 2):
                x = x + truth.scores[i, k - 1] * true_eigenfunction(k, s.times, s.covariate)
            np.testing.assert_allclose(s.values, x, atol=1e-14)

    def test_deterministic_and_subject_streams(self):
        cfg = SimConfig(n=20, runs=3, seed=9)
        a, _ = generate_dataset(cfg, 1)
        b, _ = generate_dataset(cfg, 1)
        assert all(np.array_equal(x.values, y.values) for x, y in zip(a.subjects, b.subjects))
        # subject i of a run depends on its own stream only
        c, _ = generate_dataset(SimConfig(n=5, runs=3, seed=9), 1)
        assert all(np.array_equal(x.times, y.times) for x, y in zip(a.subjects[:5], c.subjects))
        rng = stream(9, 1, STREAM_SUBJECT, 0)
        assert rng.uniform(0.0, 1.0) == a.subjects[0].covariate

    def test_runs_differ_and_fixed_design(self):
        cfg = SimConfig(n=40, runs=3, seed=1)
        a, _ = generate_dataset(cfg, 0)
        b, _ = generate_dataset(cfg, 1)
        ta = set(np.concatenate([s.times for s in a.subjects]).tolist())
        tb = set(np.concatenate([s.times for s in b.subjects]).tolist())
        assert ta != tb
        fixed = SimConfig(n=40, runs=3, seed=1, fixed_design=True)
        fa, _ = generate_dataset(fixed, 0)
        fb, _ = generate_dataset(fixed, 1)
        grid = set(jittered_grid(stream(1, 0, 0), 51).tolist())
        for d in (fa, fb):
            assert set(np.concatenate([s.times for s in d.subjects]).tolist()) <= grid


@pytest.fixture(scope="module")
def small_report():
    cfg = SimConfig(n=30, runs=2, seed=11)
    return run_monte_carlo(cfg, methods=("ufpca", "mfpca"), criteria=("fve", "bic"), candidates_per_dim=2, workers=1)


class TestMonteCarlo:
    def test_report_layout(self, small_report):
        rep = small_report
        assert rep["schema_version"] == 1
        assert [r["run"] for r in rep["runs"]] == [0, 1]
        assert set(rep["table2"]) == {"ufpca/fve", "ufpca/bic", "mfpca/fve", "mfpca/bic"}
        cell = rep["table2"]["mfpca/bic"]
        assert cell["mise"]["count"] + cell["failed"] == 2
        assert rep["pooled"]["mfpca"]["covariance_ise"]["count"] == 2
        assert rep["pooled"]["ufpca"]["mean_ise"]["count"] == 2
        json.dumps(rep)

    def test_deterministic(self, small_report):
        cfg = SimConfig(n=30, runs=2, seed=11)
        again = run_monte_carlo(cfg, methods=("ufpca", "mfpca"), criteria=("fve", "bic"), candidates_per_dim=2, workers=1)
        assert json.dumps(again, sort_keys=True) == json.dumps(small_report, sort_keys=True)

    def test_parallel_matches_sequential(self, small_report):
        cfg = SimConfig(n=30, runs=2, seed=11)
        par = run_monte_carlo(cfg, methods=("ufpca", "mfpca"), criteria=("fve", "bic"), candidates_per_dim=2, workers=2)
        assert json.dumps(par, sort_keys=True) == json.dumps(small_report, sort_keys=True)

    def test_aggregation_order_independent(self, small_report):
        rev = aggregate(small_report["runs"][::-1], ["ufpca", "mfpca"], ["fve", "bic"])
        assert json.dumps(rev["table2"], sort_keys=True) == json.dumps(small_report["table2"], sort_keys=True)

    def test_tables(self, small_report, tmp_path):
        paths = write_tables({**small_report, "table1": {}}, tmp_path)
        assert [p.name for p in paths] == ["table1.csv", "table2.csv"]
        rows = list(table2_rows(small_report))
        assert rows[0][:2] == ["method", "criterion"] and len(rows) == 5
        assert len(list(table1_rows({**small_report, "table1": {}}))) == 1

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError):
            run_monte_carlo(SimConfig(runs=1), methods=())
        with pytest.raises(ValueError):
            run_monte_carlo(SimConfig(runs=1), criteria=("cv",))

    def test_failures_recorded(self):
        rec = {"run": 0, "methods": {"mfpca": {"ok": False, "error": "x"}}}
        agg = aggregate([rec], ["mfpca"], ["bic"])
        assert agg["table2"]["mfpca/bic"]["failed"] == 1
        assert agg["table2"]["mfpca/bic"]["mise"]["count"] == 0

    def test_outliers_flagged(self):
        def run(i, m):
            rec = {"ok": True, "sigma2": 0.0, "mean_ise": 0.0, "criteria": {"bic": {"K": 2, "mise": m, "msfe": m}}}
            return {"run": i, "methods": {"ufpca": rec}}

        agg = aggregate([run(0, 1.0), run(1, 1.1), run(2, 50.0)], ["ufpca"], ["bic"])
        cell = agg["table2"]["ufpca/bic"]
        assert cell["outliers"] == 1
        assert cell["mise_excluding_outliers"]["count"] == 2

    def test_worker_count(self, monkeypatch):
        monkeypatch.setenv("CAFPCA_THREADS", "3")
        assert worker_count(10) == 3
        assert worker_count(2) == 2


def test_noise_free_dense_rank_two():
    # exact rank-2 model, dense sampling, no noise: fitted curves reproduce the observations
    cfg = SimConfig(n=40, runs=1, seed=21, noise_sd=0.0, n_min=49, n_max=49)
    rep = run_monte_carlo(cfg, methods=("mfpca",), criteria=("fve",), candidates_per_dim=2, workers=1)
    rec = rep["runs"][0]["methods"]["mfpca"]
    assert rec["ok"]
    fit_msfe = rec["criteria"]["fve"]["msfe"]
    assert fit_msfe < 1e-3
