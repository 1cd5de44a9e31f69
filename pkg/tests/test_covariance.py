import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cafpca import covariance as cov
from cafpca.dataset import LongitudinalDataset
from cafpca.errors import DomainError, EstimationError, IntegrityError, SelectionError
from cafpca.quadrature import integrate2
from cafpca.simulation import SimConfig, generate_dataset, true_covariance, true_mean, true_pooled_covariance
from cafpca.smoothing import Samples, fit_surface
from oracles import dense_local_linear, raw_pairs_reference


def random_data(n=20, seed=0, m=(2, 7)):
    rng = np.random.default_rng(seed)
    times, values, zs = [], [], []
    for _ in range(n):
        t = np.sort(rng.uniform(0, 1, rng.integers(m[0], m[1] + 1)))
        times.append(t)
        values.append(rng.normal(size=t.size))
        zs.append(rng.uniform())
    return LongitudinalDataset.from_arrays(times, values, zs, time_domain=(0, 1), covariate_domain=(0, 1))


def zero_mean(data):
    return [np.zeros(s.n_obs) for s in data.subjects]


def const_raw(c, n=60, seed=1):
    data = random_data(n, seed, m=(4, 9))
    raw = cov.raw_covariances(data, zero_mean(data))
    return raw.replace(off_c=np.full(raw.n_off, c), diag_c=np.full(raw.n_diag, c))


class TestRaw:
    def test_counts_for_two_observations(self):
        data = LongitudinalDataset.from_arrays([[0.1, 0.4], [0.3]], [[1.0, 2.0], [3.0]], [0.2, 0.6])
        raw = cov.raw_covariances(data, zero_mean(data))
        assert raw.n_off == 2
        assert raw.n_diag == 3
        assert sorted(raw.off_c) == [2.0, 2.0]

    def test_exact_mean_gives_zero(self):
        data = random_data()
        raw = cov.raw_covariances(data, [s.values for s in data.subjects])
        assert not raw.off_c.any() and not raw.diag_c.any()

    def test_matches_loop(self):
        data = random_data(15, seed=2)
        mu = [np.sin(s.times) for s in data.subjects]
        raw = cov.raw_covariances(data, mu)
        ref = raw_pairs_reference(data, mu)
        got = list(zip(raw.off_subject, raw.off_j, raw.off_k, raw.off_t1, raw.off_t2, raw.off_z, raw.off_c))
        assert sorted(got) == sorted(ref)
        assert raw.n_off == sum(s.n_obs * (s.n_obs - 1) for s in data.subjects)
        for i, j, c in zip(raw.diag_subject, raw.diag_j, raw.diag_c):
            r = data.subjects[i].values[j] - mu[i][j]
            assert c == r * r

    def test_swapped_pairs_equal(self):
        data = random_data(10, seed=3)
        raw = cov.raw_covariances(data, zero_mean(data))
        lookup = {(i, j, k): c for i, j, k, c in zip(raw.off_subject, raw.off_j, raw.off_k, raw.off_c)}
        assert all(lookup[(i, k, j)] == c for (i, j, k), c in lookup.items())

    def test_mismatch(self):
        data = random_data(5)
        with pytest.raises(IntegrityError):
            cov.raw_covariances(data, zero_mean(data)[:-1])
        bad = zero_mean(data)
        bad[0] = np.zeros(bad[0].size + 1)
        with pytest.raises(IntegrityError):
            cov.raw_covariances(data, bad)


class TestGamma:
    def test_constant_pooled(self):
        m = cov.estimate_gamma_pooled(const_raw(0.7), 0.3, t_grid=np.linspace(0, 1, 11))
        assert np.max(np.abs(m.gamma_grid - 0.7)) <= 1e-10

    def test_constant_adjusted(self):
        m = cov.estimate_gamma_adjusted(const_raw(-0.2), (0.3, 0.5), t_grid=np.linspace(0, 1, 7), z_grid=np.linspace(0, 1, 4))
        assert np.max(np.abs(m.gamma_grid + 0.2)) <= 1e-10

    def test_dense_product_surface(self):
        rng = np.random.default_rng(4)
        t = rng.uniform(0, 1, 4000)
        s = rng.uniform(0, 1, 4000)
        n = t.size
        raw = cov.RawCovariances(
            np.arange(n), np.zeros(n, int), np.ones(n, int), t, s, np.zeros(n), t * s,
            np.arange(n), np.zeros(n, int), t, np.zeros(n), t * t,
        )
        grid = np.linspace(0, 1, 21)
        G = cov.estimate_gamma_pooled(raw, 0.1, t_grid=grid).gamma_grid
        assert np.max(np.abs(G - np.outer(grid, grid))) <= 0.02

    def test_symmetry_exact(self):
        data = random_data(40, seed=5)
        raw = cov.raw_covariances(data, zero_mean(data))
        G = cov.estimate_gamma_pooled(raw, 0.25, t_grid=np.linspace(0, 1, 17)).gamma_grid
        assert np.array_equal(G, G.T)
        A = cov.estimate_gamma_adjusted(raw, (0.3, 0.5), t_grid=np.linspace(0, 1, 9), z_grid=np.linspace(0, 1, 3)).gamma_grid
        for c in range(3):
            assert np.array_equal(A[:, :, c], A[:, :, c].T)

    def test_single_observations_fail(self):
        data = LongitudinalDataset.from_arrays([[0.1], [0.4]], [[1.0], [2.0]], [0.2, 0.6])
        raw = cov.raw_covariances(data, zero_mean(data))
        with pytest.raises(EstimationError):
            cov.estimate_gamma_pooled(raw, 0.3)

    def test_pooled_entry_matches_oracle(self):
        data = random_data(30, seed=6)
        raw = cov.raw_covariances(data, zero_mean(data))
        grid = np.array([0.2, 0.5, 0.7])
        G = cov.estimate_gamma_pooled(raw, 0.35, t_grid=grid).gamma_grid
        X = np.column_stack([raw.off_t1, raw.off_t2])
        a = dense_local_linear(X, raw.off_c, [0.2, 0.7], 0.35)[0]
        b = dense_local_linear(X, raw.off_c, [0.7, 0.2], 0.35)[0]
        assert abs(G[0, 2] - 0.5 * (a + b)) <= 1e-10

    def test_shared_time_bandwidth(self):
        with pytest.raises(ValueError):
            cov.gamma_bandwidths((0.1, 0.2, 0.3), cov.ADJUSTED)
        assert list(cov.gamma_bandwidths((0.1, 0.3), cov.ADJUSTED)) == [0.1, 0.1, 0.3]
        assert list(cov.gamma_bandwidths(0.2, cov.POOLED)) == [0.2, 0.2]

    def test_slice_interpolation(self):
        m = cov.estimate_gamma_adjusted(const_raw(1.0), (0.3, 0.5), t_grid=np.linspace(0, 1, 5), z_grid=np.array([0.0, 0.5, 1.0]))
        m.gamma_grid = m.gamma_grid * np.array([1.0, 2.0, 3.0])
        assert np.allclose(m.slice_at(0.25), 1.5)
        assert np.array_equal(m.slice_at(0.5), m.gamma_grid[:, :, 1])
        with pytest.raises(DomainError):
            m.slice_at(1.5)

    def test_z_independent_slices_agree(self):
        """Slices at different z agree within 3x the replicate spread of the z=0.5 slice."""
        grid = np.linspace(0, 1, 9)
        zg = np.array([0.2, 0.5, 0.8])
        slices = []
        rng = np.random.default_rng(7)
        for _ in range(8):
            times, values, zs = [], [], []
            for _ in range(150):
                t = np.sort(rng.uniform(0, 1, 8))
                a = rng.normal(0, [0.3, 0.15])
                values.append(a[0] * np.sqrt(2) * np.cos(np.pi * t) + a[1] * np.sqrt(2) * np.sin(np.pi * t))
                times.append(t)
                zs.append(rng.uniform())
            data = LongitudinalDataset.from_arrays(times, values, zs, time_domain=(0, 1), covariate_domain=(0, 1))
            raw = cov.raw_covariances(data, zero_mean(data))
            slices.append(cov.estimate_gamma_adjusted(raw, (0.25, 0.4), t_grid=grid, z_grid=zg).gamma_grid)
        S = np.array(slices)
        spread = S[:, :, :, 1].std(axis=0, ddof=1).max()
        mean_slices = S.mean(axis=0)
        deviation = max(np.max(np.abs(mean_slices[:, :, c] - mean_slices[:, :, 1])) for c in (0, 2))
        assert deviation < 3 * spread


class TestVariance:
    def test_constant(self):
        raw = const_raw(0.4)
        assert np.max(np.abs(cov.estimate_variance_diag(raw, 0.2) - 0.4)) <= 1e-10
        V = cov.estimate_variance_diag(raw, (0.2, 0.4), kind=cov.ADJUSTED)
        assert V.shape == (51, 11) and np.max(np.abs(V - 0.4)) <= 1e-10

    def test_affine(self):
        raw = const_raw(0.0)
        raw = raw.replace(diag_c=1 + 2 * raw.diag_t - raw.diag_z)
        grid = np.linspace(0, 1, 11)
        V = cov.estimate_variance_diag(raw, (0.3, 0.5), t_grid=grid, z_grid=grid, kind=cov.ADJUSTED)
        assert np.max(np.abs(V - (1 + 2 * grid[:, None] - grid[None, :]))) <= 1e-10

    def test_matches_direct_fit(self):
        data = random_data(30, seed=8)
        raw = cov.raw_covariances(data, zero_mean(data))
        grid = np.linspace(0, 1, 13)
        V = cov.estimate_variance_diag(raw, 0.25, t_grid=grid)
        direct = fit_surface(Samples(raw.diag_t[:, None], raw.diag_c), grid[:, None], 0.25)
        assert np.array_equal(V, direct)


class TestSigma2:
    def test_constant_offset(self):
        grid = np.linspace(0, 1, 21)
        G = np.outer(np.cos(grid), np.cos(grid)) + 0.3
        V = np.diagonal(G) + 0.0025
        assert abs(cov.estimate_sigma2(V, G, grid) - 0.0025) <= 1e-12

    def test_constant_offset_adjusted(self):
        grid = np.linspace(0, 1, 11)
        zg = np.linspace(0, 1, 5)
        G = np.stack([true_covariance(grid, grid, z) for z in zg], axis=2)
        V = np.diagonal(G, axis1=0, axis2=1).T + 0.0025
        got = cov.estimate_sigma2(V, G, grid, zg, kind=cov.ADJUSTED)
        assert abs(got - 0.0025) <= 1e-12

    def test_clamped(self):
        grid = np.linspace(0, 1, 21)
        G = np.eye(21)
        assert cov.estimate_sigma2(np.diagonal(G) - 0.1, G, grid) == 0.0

    def test_trimmed_window_only(self):
        grid = np.linspace(0, 1, 41)
        V = np.where((grid >= 0.25) & (grid <= 0.75), 2.0, 100.0)
        assert abs(cov.estimate_sigma2(V, np.zeros((41, 41)), grid) - 2.0) <= 1e-12

    def test_trimmed_average_oracle(self):
        grid = np.linspace(0, 2, 31)
        f = np.sin(grid) ** 2
        got = cov.estimate_sigma2(f, np.zeros((31, 31)), grid)
        # exact integral of the linear interpolant over [0.5, 1.5], one segment at a time
        knots = [0.5] + [g for g in grid if 0.5 < g < 1.5] + [1.5]
        area = 0.0
        for a, b in zip(knots[:-1], knots[1:]):
            area += 0.5 * (b - a) * (np.interp(a, grid, f) + np.interp(b, grid, f))
        assert abs(got - area) <= 1e-12

    def test_grid_mismatch(self):
        with pytest.raises(IntegrityError):
            cov.estimate_sigma2(np.zeros(3), np.zeros((4, 4)), np.linspace(0, 1, 4))


class TestInvariants:
    def setup_method(self):
        self.data = random_data(40, seed=9, m=(3, 8))
        self.raw = cov.raw_covariances(self.data, zero_mean(self.data))
        self.grid = np.linspace(0, 1, 11)

    def test_diagonal_perturbation_leaves_gamma(self):
        bumped = self.raw.replace(diag_c=self.raw.diag_c + np.random.default_rng(0).normal(size=self.raw.n_diag) * 50)
        for kind, bw in ((cov.POOLED, 0.3), (cov.ADJUSTED, (0.3, 0.5))):
            est = cov.estimate_gamma_pooled if kind == cov.POOLED else cov.estimate_gamma_adjusted
            a = est(self.raw, bw, t_grid=self.grid).gamma_grid
            b = est(bumped, bw, t_grid=self.grid).gamma_grid
            assert np.array_equal(a, b)

    def test_off_diagonal_perturbation_leaves_variance(self):
        bumped = self.raw.replace(off_c=self.raw.off_c + 50.0)
        a = cov.estimate_variance_diag(self.raw, 0.3, t_grid=self.grid)
        b = cov.estimate_variance_diag(bumped, 0.3, t_grid=self.grid)
        assert np.array_equal(a, b)

    @settings(max_examples=15, deadline=None)
    @given(c=st.floats(0.01, 100))
    def test_scaling(self, c):
        scaled = cov.raw_covariances(
            self.data.__class__.from_arrays(
                [s.times for s in self.data.subjects],
                [c * s.values for s in self.data.subjects],
                self.data.covariates,
                time_domain=(0, 1),
                covariate_domain=(0, 1),
            ),
            zero_mean(self.data),
        )
        Ga = cov.estimate_gamma_pooled(self.raw, 0.3, t_grid=self.grid).gamma_grid
        Gb = cov.estimate_gamma_pooled(scaled, 0.3, t_grid=self.grid).gamma_grid
        np.testing.assert_allclose(Gb, c**2 * Ga, rtol=1e-9, atol=1e-12 * c**2)
        Va = cov.estimate_variance_diag(self.raw, 0.3, t_grid=self.grid)
        Vb = cov.estimate_variance_diag(scaled, 0.3, t_grid=self.grid)
        np.testing.assert_allclose(Vb, c**2 * Va, rtol=1e-9, atol=1e-12 * c**2)
        sa = cov.estimate_sigma2(Va, Ga, self.grid)
        sb = cov.estimate_sigma2(Vb, Gb, self.grid)
        assert abs(sb - c**2 * sa) <= 1e-9 * c**2 * max(sa, 1e-3)


def kfold_reference(data, bw, k, seed, adjusted=False):
    """Fold loop: for each fold, refit on the other folds' pairs and score held-out pairs."""
    folds = cov.assign_folds(data.n, k, seed)
    raw = cov.raw_covariances(data, zero_mean(data))
    cols = [raw.off_t1, raw.off_t2] + ([raw.off_z] if adjusted else [])
    X = np.column_stack(cols)
    h = np.array([bw[0], bw[0]] + ([bw[1]] if adjusted else []))
    total = 0.0
    for f in range(k):
        held = folds[raw.off_subject] == f
        for x, c in zip(X[held], raw.off_c[held]):
            pred = dense_local_linear(X[~held], raw.off_c[~held], x, h)[0]
            total += (c - pred) ** 2
    return total


class TestKfold:
    @pytest.mark.parametrize("adjusted", [False, True])
    def test_score_matches_fold_loop(self, adjusted):
        data = random_data(12, seed=10, m=(3, 6))
        kind = cov.ADJUSTED if adjusted else cov.POOLED
        bw = (0.5, 0.7) if adjusted else (0.45,)
        raw = cov.raw_covariances(data, zero_mean(data))
        folds = cov.assign_folds(data.n, 3, 11)
        got = cov.kfold_score(raw, folds, bw, kind)
        assert np.isfinite(got)
        assert abs(got - kfold_reference(data, bw, 3, 11, adjusted)) <= 1e-10

    def test_single_candidate(self):
        data = random_data(12)
        assert cov.kfold_bandwidth(data, zero_mean(data), [(0.3,)], k=3) == (0.3,)

    def test_deterministic(self):
        data = random_data(30, seed=12)
        cands = [(0.1,), (0.2,), (0.4,)]
        a = cov.kfold_bandwidth(data, zero_mean(data), cands, k=5, seed=3, return_scores=True)
        b = cov.kfold_bandwidth(data, zero_mean(data), cands, k=5, seed=3, return_scores=True)
        assert a == b

    def test_folds_balanced(self):
        f = cov.assign_folds(23, 10, 0)
        counts = np.bincount(f)
        assert counts.max() - counts.min() <= 1 and counts.sum() == 23

    def test_errors(self):
        data = random_data(5)
        with pytest.raises(SelectionError):
            cov.kfold_bandwidth(data, zero_mean(data), [(0.3,)], k=10)
        with pytest.raises(SelectionError):
            cov.kfold_bandwidth(data, zero_mean(data), [(0.3,)], k=1)
        pts = LongitudinalDataset.from_arrays([[0.1, 0.1]] * 4, [[1.0, 2.0]] * 4, [0.1, 0.2, 0.3, 0.4], time_domain=(0, 1))
        with pytest.raises(SelectionError):
            cov.kfold_bandwidth(pts, zero_mean(pts), [(0.05,)], k=2)


def test_pooled_ise_small_on_simulated_data():
    data, _ = generate_dataset(SimConfig(n=100, seed=1), 0)
    mu = [true_mean(s.times, s.covariate) for s in data.subjects]
    raw = cov.raw_covariances(data, mu)
    grid = np.linspace(0, 1, 26)
    G = cov.estimate_gamma_pooled(raw, 0.15, t_grid=grid).gamma_grid
    assert integrate2((G - true_pooled_covariance(grid)) ** 2, grid) < 0.005
