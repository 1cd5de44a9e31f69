"""Covariance surfaces from raw residual products.

Pooled kind: Gamma*(t, s), a 2D smooth over (T_ij, T_ik).  Covariate-adjusted
kind: Gamma(t, s, z), a 3D smooth over (T_ij, T_ik, Z_i) that shares one time
bandwidth between both time axes.  Diagonal products carry the extra noise
variance, so they only feed the variance smoother V and never Gamma.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dataset import LongitudinalDataset
from .errors import DomainError, EstimationError, IntegrityError, SelectionError, SingularFitError
from .quadrature import trapezoid_weights
from .mean import MeanSurface, _pick, candidate_bandwidths, default_grid
from .smoothing import LOCAL_LINEAR, SMOOTHERS, Samples, fit_surface, normalize_bandwidths

POOLED = "pooled"
ADJUSTED = "covariate-adjusted"
KINDS = (POOLED, ADJUSTED)


@dataclass(frozen=True, eq=False)
class RawCovariances:
    """Residual products for all within-subject index pairs.

    ``off_*`` arrays hold the ordered pairs j != k (both orders present),
    ``diag_*`` arrays the j == k products.
    """

    off_subject: np.ndarray
    off_j: np.ndarray
    off_k: np.ndarray
    off_t1: np.ndarray
    off_t2: np.ndarray
    off_z: np.ndarray
    off_c: np.ndarray
    diag_subject: np.ndarray
    diag_j: np.ndarray
    diag_t: np.ndarray
    diag_z: np.ndarray
    diag_c: np.ndarray

    @property
    def n_off(self) -> int:
        return int(self.off_c.size)

    @property
    def n_diag(self) -> int:
        return int(self.diag_c.size)

    def scaled(self, factor: float) -> "RawCovariances":
        """Products for residuals multiplied by ``factor``."""
        f2 = float(factor) ** 2
        return RawCovariances(
            **{
                **self.__dict__,
                "off_c": self.off_c * f2,
                "diag_c": self.diag_c * f2,
            }
        )

    def replace(self, **changes) -> "RawCovariances":
        return RawCovariances(**{**self.__dict__, **changes})


def raw_covariances(data: LongitudinalDataset, mean) -> RawCovariances:
    """All products C_ijk = (Y_ij - mu_ij)(Y_ik - mu_ik).

    ``mean`` is a :class:`MeanSurface` fitted on ``data`` or a sequence of
    per-subject arrays of fitted means at the observations.
    """
    fitted = mean.fitted_at_obs if isinstance(mean, MeanSurface) else mean
    if len(fitted) != data.n:
        raise IntegrityError(f"mean has {len(fitted)} subjects, data has {data.n}")
    parts = {k: [] for k in ("os", "oj", "ok", "ot1", "ot2", "oz", "oc", "ds", "dj", "dt", "dz", "dc")}
    for i, (s, mu) in enumerate(zip(data.subjects, fitted)):
        mu = np.asarray(mu, dtype=float)
        if mu.shape != s.times.shape:
            raise IntegrityError(f"subject {s.id!r}: {mu.size} fitted means for {s.n_obs} observations")
        r = s.values - mu
        N = s.n_obs
        jj, kk = np.meshgrid(np.arange(N), np.arange(N), indexing="ij")
        off = jj != kk
        j, k = jj[off], kk[off]
        parts["os"].append(np.full(j.size, i))
        parts["oj"].append(j)
        parts["ok"].append(k)
        parts["ot1"].append(s.times[j])
        parts["ot2"].append(s.times[k])
        parts["oz"].append(np.full(j.size, s.covariate))
        parts["oc"].append(r[j] * r[k])
        parts["ds"].append(np.full(N, i))
        parts["dj"].append(np.arange(N))
        parts["dt"].append(s.times)
        parts["dz"].append(np.full(N, s.covariate))
        parts["dc"].append(r * r)
    cat = {k: np.concatenate(v) for k, v in parts.items()}
    return RawCovariances(
        off_subject=cat["os"].astype(np.int64),
        off_j=cat["oj"].astype(np.int64),
        off_k=cat["ok"].astype(np.int64),
        off_t1=cat["ot1"],
        off_t2=cat["ot2"],
        off_z=cat["oz"],
        off_c=cat["oc"],
        diag_subject=cat["ds"].astype(np.int64),
        diag_j=cat["dj"].astype(np.int64),
        diag_t=cat["dt"],
        diag_z=cat["dz"],
        diag_c=cat["dc"],
    )


@dataclass(eq=False)
class CovarianceModel:
    """A smoothed covariance surface plus the diagonal variance and noise level.

    ``gamma_grid`` is (nt, nt) for the pooled kind and (nt, nt, nz) for the
    covariate-adjusted kind, every (t, s) slice exactly symmetric.
    """

    kind: str
    smoother: str
    t_grid: np.ndarray
    gamma_grid: np.ndarray
    bandwidths: tuple
    z_grid: Optional[np.ndarray] = None
    variance_diag: Optional[np.ndarray] = None
    variance_bandwidths: Optional[tuple] = None
    sigma2: Optional[float] = None

    def slice_at(self, z: float) -> np.ndarray:
        """The (t, s) surface at covariate ``z``, linearly interpolated between z-slices."""
        if self.kind == POOLED:
            return self.gamma_grid
        zg = self.z_grid
        if not zg[0] <= z <= zg[-1]:
            raise DomainError(f"z={z} outside covariate grid [{zg[0]}, {zg[-1]}]")
        hit = np.flatnonzero(zg == z)
        if hit.size:
            return self.gamma_grid[:, :, hit[0]]
        c = int(np.searchsorted(zg, z)) - 1
        f = (z - zg[c]) / (zg[c + 1] - zg[c])
        g = (1.0 - f) * self.gamma_grid[:, :, c] + f * self.gamma_grid[:, :, c + 1]
        return 0.5 * (g + g.T)

    def grid_rows(self):
        """Yield ``(t, s, z, gamma)`` rows (z is None for the pooled kind)."""
        tg = self.t_grid
        if self.kind == POOLED:
            for a, t in enumerate(tg):
                for b, s in enumerate(tg):
                    yield float(t), float(s), None, float(self.gamma_grid[a, b])
        else:
            for c, z in enumerate(self.z_grid):
                for a, t in enumerate(tg):
                    for b, s in enumerate(tg):
                        yield float(t), float(s), float(z), float(self.gamma_grid[a, b, c])


def _check(kind, smoother):
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
    if smoother not in SMOOTHERS:
        raise ValueError(f"smoother must be one of {tuple(SMOOTHERS)}, got {smoother!r}")


def gamma_bandwidths(bw, kind) -> np.ndarray:
    """Expand (h_t,) or (h_t, h_z) to per-axis bandwidths, time shared by t and s."""
    h = np.atleast_1d(np.asarray(bw, dtype=float)).ravel()
    n_time = 1 if kind == POOLED else 2
    if h.size == n_time + 1 and kind == POOLED or h.size == 3:
        if h[0] != h[1]:
            raise ValueError("the two time axes share one bandwidth")
        h = np.delete(h, 1)
    h = normalize_bandwidths(h, n_time)
    return np.array([h[0], h[0]]) if kind == POOLED else np.array([h[0], h[0], h[1]])


def gamma_samples(raw: RawCovariances, kind: str, groups=None) -> Samples:
    if raw.n_off == 0:
        raise EstimationError("no off-diagonal raw covariances (every subject has a single observation)")
    cols = [raw.off_t1, raw.off_t2] if kind == POOLED else [raw.off_t1, raw.off_t2, raw.off_z]
    g = raw.off_subject if groups is None else groups
    return Samples(np.column_stack(cols), raw.off_c, groups=g)


def _grid_fit(S, nodes, h, smoother, what):
    try:
        return fit_surface(S, nodes, h, smoother)
    except SingularFitError as exc:
        raise EstimationError(f"{what} fit failed at {nodes[exc.index].tolist()}: {exc}") from exc


def estimate_gamma_pooled(raw: RawCovariances, bw, smoother: str = LOCAL_LINEAR, t_grid=None) -> CovarianceModel:
    """Smooth off-diagonal products over (t, s) on ``t_grid`` x ``t_grid``, then symmetrize."""
    _check(POOLED, smoother)
    h = gamma_bandwidths(bw, POOLED)
    t_grid = np.asarray(t_grid if t_grid is not None else np.linspace(0, 1, 51), dtype=float)
    S = gamma_samples(raw, POOLED)
    tt, ss = np.meshgrid(t_grid, t_grid, indexing="ij")
    nodes = np.column_stack([tt.ravel(), ss.ravel()])
    G = _grid_fit(S, nodes, h, smoother, "covariance").reshape(t_grid.size, t_grid.size)
    G = 0.5 * (G + G.T)
    return CovarianceModel(POOLED, smoother, t_grid, G, (float(h[0]),))


def estimate_gamma_adjusted(
    raw: RawCovariances, bw, smoother: str = LOCAL_LINEAR, t_grid=None, z_grid=None
) -> CovarianceModel:
    """Smooth off-diagonal products over (t, s, z) on a t x t x z grid; symmetrize each z-slice."""
    _check(ADJUSTED, smoother)
    h = gamma_bandwidths(bw, ADJUSTED)
    t_grid = np.asarray(t_grid if t_grid is not None else np.linspace(0, 1, 31), dtype=float)
    z_grid = np.asarray(z_grid if z_grid is not None else np.linspace(0, 1, 11), dtype=float)
    S = gamma_samples(raw, ADJUSTED)
    tt, ss, zz = np.meshgrid(t_grid, t_grid, z_grid, indexing="ij")
    nodes = np.column_stack([tt.ravel(), ss.ravel(), zz.ravel()])
    G = _grid_fit(S, nodes, h, smoother, "covariance").reshape(t_grid.size, t_grid.size, z_grid.size)
    G = 0.5 * (G + G.transpose(1, 0, 2))
    return CovarianceModel(ADJUSTED, smoother, t_grid, G, (float(h[0]), float(h[2])), z_grid=z_grid)


def variance_samples(raw: RawCovariances, kind: str) -> Samples:
    if raw.n_diag == 0:
        raise EstimationError("no diagonal raw covariances")
    X = raw.diag_t[:, None] if kind == POOLED else np.column_stack([raw.diag_t, raw.diag_z])
    return Samples(X, raw.diag_c, groups=raw.diag_subject)


def variance_nodes(kind, t_grid, z_grid=None) -> np.ndarray:
    if kind == POOLED:
        return np.asarray(t_grid, float)[:, None]
    tt, zz = np.meshgrid(t_grid, z_grid, indexing="ij")
    return np.column_stack([tt.ravel(), zz.ravel()])


def estimate_variance_diag(raw: RawCovariances, bw, smoother: str = LOCAL_LINEAR, t_grid=None, z_grid=None, kind: str = POOLED) -> np.ndarray:
    """Smooth the diagonal products C_ijj: over t (pooled) or over (t, z) (adjusted)."""
    _check(kind, smoother)
    d = 1 if kind == POOLED else 2
    h = normalize_bandwidths(bw, d)
    t_grid = np.asarray(t_grid if t_grid is not None else np.linspace(0, 1, 51), dtype=float)
    if kind == ADJUSTED:
        z_grid = np.asarray(z_grid if z_grid is not None else np.linspace(0, 1, 11), dtype=float)
    nodes = variance_nodes(kind, t_grid, z_grid)
    V = _grid_fit(variance_samples(raw, kind), nodes, h, smoother, "variance")
    return V if kind == POOLED else V.reshape(t_grid.size, z_grid.size)


def _trimmed_average(t_grid, values, t_domain):
    """Trapezoid average of a piecewise-linear function over the central half of ``t_domain``."""
    lo, hi = t_domain
    quarter = (hi - lo) / 4.0
    a, b = lo + quarter, hi - quarter
    inner = t_grid[(t_grid > a) & (t_grid < b)]
    pts = np.concatenate([[a], inner, [b]])
    vals = np.interp(pts, t_grid, values)
    return float(trapezoid_weights(pts) @ vals / (b - a))


def estimate_sigma2(variance_diag, gamma_grid, t_grid, z_grid=None, t_domain=None, kind: str = POOLED) -> float:
    """Noise variance: average of V(t[, z]) - Gamma(t, t[, z]) over the central half of T.

    The adjusted kind also averages over the whole covariate grid.  Negative
    estimates are clamped to 0.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if t_domain is None:
        t_domain = (float(t_grid[0]), float(t_grid[-1]))
    V = np.asarray(variance_diag, dtype=float)
    G = np.asarray(gamma_grid, dtype=float)
    if kind == POOLED:
        if V.shape != (t_grid.size,) or G.shape != (t_grid.size, t_grid.size):
            raise IntegrityError("variance and covariance grids do not match")
        est = _trimmed_average(t_grid, V - np.diagonal(G), t_domain)
    else:
        z_grid = np.asarray(z_grid, dtype=float)
        if V.shape != (t_grid.size, z_grid.size) or G.shape != (t_grid.size, t_grid.size, z_grid.size):
            raise IntegrityError("variance and covariance grids do not match")
        diag = np.diagonal(G, axis1=0, axis2=1).T  # (nt, nz)
        per_z = np.array([_trimmed_average(t_grid, V[:, c] - diag[:, c], t_domain) for c in range(z_grid.size)])
        est = float(trapezoid_weights(z_grid) @ per_z / (z_grid[-1] - z_grid[0]))
    return max(est, 0.0)


def default_gamma_candidates(data: LongitudinalDataset, kind: str, count: int = 6) -> list[tuple]:
    ts = candidate_bandwidths(data.time_domain, count)
    if kind == POOLED:
        return [(float(h),) for h in ts]
    zs = candidate_bandwidths(data.covariate_domain, count)
    return [(float(a), float(b)) for a in ts for b in zs]


def assign_folds(n: int, k: int, seed) -> np.ndarray:
    """Fold label per subject from a seeded shuffle; fold sizes differ by at most one."""
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.empty(n, dtype=np.int64)
    folds[perm] = np.arange(n) % k
    return folds


def kfold_score(raw: RawCovariances, folds, bw, kind: str, smoother: str = LOCAL_LINEAR, samples=None) -> float:
    """Sum over held-out off-diagonal pairs of (C - Gamma_without_fold)^2."""
    h = gamma_bandwidths(bw, kind)
    fold_of_pair = np.asarray(folds)[raw.off_subject]
    S = gamma_samples(raw, kind, groups=fold_of_pair) if samples is None else samples
    cols = [raw.off_t1, raw.off_t2] if kind == POOLED else [raw.off_t1, raw.off_t2, raw.off_z]
    try:
        pred = fit_surface(S, np.column_stack(cols), h, smoother, exclude=fold_of_pair)
    except SingularFitError:
        return float("inf")
    return float(np.sum((raw.off_c - pred) ** 2))


def kfold_bandwidth(
    data: LongitudinalDataset,
    mean,
    candidates: Optional[Sequence] = None,
    k: int = 10,
    kind: str = POOLED,
    smoother: str = LOCAL_LINEAR,
    seed=0,
    raw: Optional[RawCovariances] = None,
    return_scores: bool = False,
):
    """Choose the covariance bandwidth by k-fold cross-validation over subjects.

    Candidates are ``(h_t,)`` for the pooled kind and ``(h_t, h_z)`` for the
    adjusted kind.  Ties go to the larger bandwidth.
    """
    _check(kind, smoother)
    if k < 2:
        raise SelectionError("k-fold CV needs k >= 2")
    if data.n < k:
        raise SelectionError(f"{data.n} subjects cannot fill {k} folds")
    if candidates is None:
        candidates = default_gamma_candidates(data, kind)
    candidates = [tuple(float(v) for v in np.atleast_1d(c)) for c in candidates]
    if not candidates:
        raise SelectionError("empty candidate grid")
    if raw is None:
        raw = raw_covariances(data, mean)
    folds = assign_folds(data.n, k, seed)
    S = gamma_samples(raw, kind, groups=folds[raw.off_subject])
    scores = [kfold_score(raw, folds, c, kind, smoother, samples=S) for c in candidates]
    choice = _pick(candidates, scores)
    if choice is None:
        raise SelectionError("every covariance bandwidth candidate failed")
    if return_scores:
        return choice, scores
    return choice


def locv_variance_bandwidth(raw: RawCovariances, candidates: Sequence, kind: str = POOLED, smoother: str = LOCAL_LINEAR):
    """Leave-one-curve-out choice of the diagonal variance bandwidth."""
    d = 1 if kind == POOLED else 2
    candidates = [tuple(float(v) for v in normalize_bandwidths(c, d)) for c in candidates]
    S = variance_samples(raw, kind)
    X = raw.diag_t[:, None] if kind == POOLED else np.column_stack([raw.diag_t, raw.diag_z])
    scores = []
    for c in candidates:
        try:
            pred = fit_surface(S, X, c, smoother, exclude=raw.diag_subject)
            scores.append(float(np.sum((raw.diag_c - pred) ** 2)))
        except SingularFitError:
            scores.append(float("inf"))
    choice = _pick(candidates, scores)
    if choice is None:
        raise SelectionError("every variance bandwidth candidate failed")
    return choice
