"""Mean function estimation: mu(t, z) for the covariate-adjusted methods, mu(t) for uFPCA."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dataset import LongitudinalDataset
from .errors import EstimationError, SelectionError, SingularFitError
from .smoothing import LOCAL_LINEAR, SMOOTHERS, Samples, fit_surface, normalize_bandwidths

ADJUSTED = "adjusted"
UNADJUSTED = "unadjusted"
MODES = (ADJUSTED, UNADJUSTED)


def default_grid(domain, points: int) -> np.ndarray:
    return np.linspace(domain[0], domain[1], points)


def candidate_bandwidths(domain, count: int = 6, lo: float = 0.05, hi: float = 0.5) -> np.ndarray:
    """Log-spaced bandwidths from ``lo`` to ``hi`` times the domain length."""
    length = domain[1] - domain[0]
    return length * np.geomspace(lo, hi, count)


def candidate_grid(data: LongitudinalDataset, mode: str, count: int = 6) -> list[tuple]:
    ts = candidate_bandwidths(data.time_domain, count)
    if mode == UNADJUSTED:
        return [(float(h),) for h in ts]
    zs = candidate_bandwidths(data.covariate_domain, count)
    return [(float(a), float(b)) for a in ts for b in zs]


def _check_mode(mode, smoother):
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if smoother not in SMOOTHERS:
        raise ValueError(f"smoother must be one of {tuple(SMOOTHERS)}, got {smoother!r}")


def mean_samples(data: LongitudinalDataset, mode: str) -> Samples:
    """Pooled (T_ij[, Z_i], Y_ij) triples grouped by subject index."""
    idx, t, z, y = data.stacked
    X = t[:, None] if mode == UNADJUSTED else np.column_stack([t, z])
    return Samples(X, y, groups=idx)


def obs_locations(data: LongitudinalDataset, mode: str) -> np.ndarray:
    _, t, z, _ = data.stacked
    return t[:, None] if mode == UNADJUSTED else np.column_stack([t, z])


@dataclass(eq=False)
class MeanSurface:
    """Estimated mean with values at every observation and on a report grid.

    ``report_grid`` has shape ``(len(t_grid), len(z_grid))`` in adjusted mode
    and ``(len(t_grid),)`` in unadjusted mode.
    """

    mode: str
    smoother: str
    bandwidths: tuple
    fitted_at_obs: list
    t_grid: np.ndarray
    z_grid: Optional[np.ndarray]
    report_grid: np.ndarray
    samples: Samples = field(repr=False)

    def evaluate(self, t, z=None) -> np.ndarray:
        """Smooth directly at time points ``t`` (and covariate ``z``, scalar or per point)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if self.mode == UNADJUSTED:
            X = t[:, None]
        else:
            if z is None:
                raise ValueError("covariate-adjusted mean needs z")
            X = np.column_stack([t, np.broadcast_to(np.asarray(z, float), t.shape)])
        return fit_surface(self.samples, X, self.bandwidths, self.smoother)

    def grid_rows(self):
        """Yield ``(t, z, mu_hat)`` rows of the report grid (z is None when unadjusted)."""
        if self.z_grid is None:
            for t, m in zip(self.t_grid, self.report_grid):
                yield float(t), None, float(m)
        else:
            for a, t in enumerate(self.t_grid):
                for c, z in enumerate(self.z_grid):
                    yield float(t), float(z), float(self.report_grid[a, c])


def estimate_mean(
    data: LongitudinalDataset,
    bw,
    smoother: str = LOCAL_LINEAR,
    mode: str = ADJUSTED,
    t_grid=None,
    z_grid=None,
) -> MeanSurface:
    """Smooth Y against (T, Z) (or T alone) at every observation and grid node."""
    _check_mode(mode, smoother)
    d = 1 if mode == UNADJUSTED else 2
    h = normalize_bandwidths(bw, d)
    S = mean_samples(data, mode)
    t_grid = default_grid(data.time_domain, 51) if t_grid is None else np.asarray(t_grid, float)
    locs = obs_locations(data, mode)
    try:
        at_obs = fit_surface(S, locs, h, smoother)
    except SingularFitError as exc:
        raise EstimationError(f"mean fit failed at observation {locs[exc.index].tolist()}: {exc}") from exc
    if mode == UNADJUSTED:
        z_grid = None
        nodes = t_grid[:, None]
    else:
        z_grid = default_grid(data.covariate_domain, 21) if z_grid is None else np.asarray(z_grid, float)
        tt, zz = np.meshgrid(t_grid, z_grid, indexing="ij")
        nodes = np.column_stack([tt.ravel(), zz.ravel()])
    try:
        grid_vals = fit_surface(S, nodes, h, smoother)
    except SingularFitError as exc:
        raise EstimationError(f"mean fit failed at grid node {nodes[exc.index].tolist()}: {exc}") from exc
    if z_grid is not None:
        grid_vals = grid_vals.reshape(t_grid.size, z_grid.size)
    splits = np.cumsum(data.counts)[:-1]
    return MeanSurface(
        mode=mode,
        smoother=smoother,
        bandwidths=tuple(float(v) for v in h),
        fitted_at_obs=np.split(at_obs, splits),
        t_grid=t_grid,
        z_grid=z_grid,
        report_grid=grid_vals,
        samples=S,
    )


def locv_score(data: LongitudinalDataset, bw, smoother: str = LOCAL_LINEAR, mode: str = ADJUSTED, samples=None) -> float:
    """Leave-one-curve-out squared prediction error for one bandwidth choice.

    Subject i's own observations are excluded when predicting at its points.
    Returns ``inf`` if some leave-out fit cannot be formed.
    """
    d = 1 if mode == UNADJUSTED else 2
    h = normalize_bandwidths(bw, d)
    S = mean_samples(data, mode) if samples is None else samples
    idx, _, _, y = data.stacked
    try:
        pred = fit_surface(S, obs_locations(data, mode), h, smoother, exclude=idx)
    except SingularFitError:
        return float("inf")
    return float(np.sum((y - pred) ** 2))


def _pick(candidates, scores):
    """Argmin with exact ties resolved toward larger bandwidths."""
    best = None
    for c, s in zip(candidates, scores):
        if not np.isfinite(s):
            continue
        key = (s, tuple(-v for v in c))
        if best is None or key < best[0]:
            best = (key, c)
    return None if best is None else best[1]


def locv_bandwidth(
    data: LongitudinalDataset,
    candidates: Optional[Sequence] = None,
    smoother: str = LOCAL_LINEAR,
    mode: str = ADJUSTED,
    return_scores: bool = False,
):
    """Pick the candidate bandwidth with the smallest leave-one-curve-out error."""
    _check_mode(mode, smoother)
    if data.n < 2:
        raise SelectionError("leave-one-curve-out needs at least 2 subjects")
    if candidates is None:
        candidates = candidate_grid(data, mode)
    d = 1 if mode == UNADJUSTED else 2
    candidates = [tuple(float(v) for v in normalize_bandwidths(c, d)) for c in candidates]
    if not candidates:
        raise SelectionError("empty candidate grid")
    S = mean_samples(data, mode)
    scores = [locv_score(data, c, smoother, mode, samples=S) for c in candidates]
    choice = _pick(candidates, scores)
    if choice is None:
        raise SelectionError("every mean bandwidth candidate failed")
    if return_scores:
        return choice, scores
    return choice
