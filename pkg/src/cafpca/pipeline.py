"""End-to-end fits for the three methods.

``ufpca``  mean mu(t), pooled covariance (covariate ignored throughout)
``mfpca``  mean mu(t, z), pooled covariance of the covariate-centred curves
``ffpca``  mean mu(t, z), covariance Gamma(t, s, z) and eigen systems per z
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import covariance as cov
from . import mean as mn
from .dataset import LongitudinalDataset
from .eigen import AIC, BIC, CRITERIA, FVE, ComponentSelection, EigenSystem, eigendecompose, eigendecompose_adjusted, select_k_fve
from .errors import CriterionUndefinedError, EstimationError
from .scores import blup_scores, fitted_at_obs, msfe, predict_trajectory, select_k_ic
from .smoothing import LOCAL_LINEAR

log = logging.getLogger(__name__)

UFPCA = "ufpca"
MFPCA = "mfpca"
FFPCA = "ffpca"
METHODS = (UFPCA, MFPCA, FFPCA)


@dataclass
class FitOptions:
    """Tuning knobs; bandwidths left as None are chosen by cross-validation."""

    smoother: str = LOCAL_LINEAR
    fve_threshold: float = 0.80
    bw_mean: Optional[tuple] = None
    bw_cov: Optional[tuple] = None
    bw_var: Optional[tuple] = None
    folds: int = 10
    seed: int = 0
    k_max: int = 10
    t_grid_points: Optional[int] = None  # covariance grid; 51 pooled, 31 adjusted
    z_grid_points: int = 11
    report_t_points: int = 51
    report_z_points: int = 21
    candidates_per_dim: int = 6


@dataclass(eq=False)
class FpcaFit:
    method: str
    data: LongitudinalDataset = field(repr=False)
    mean: mn.MeanSurface = field(repr=False)
    covariance: cov.CovarianceModel = field(repr=False)
    eigen: object = field(repr=False)  # EigenSystem, or list of per-subject systems for ffpca
    sigma2: float
    selections: dict
    criterion: str
    scores: np.ndarray  # (n, K_max)
    mu_grid: np.ndarray = field(repr=False)  # (n, len(t_grid)) mean at each subject's z
    t_grid: np.ndarray = field(repr=False)
    bandwidths: dict = field(default_factory=dict)

    @property
    def selection(self) -> ComponentSelection:
        return self.selections[self.criterion]

    @property
    def K(self) -> int:
        return self.selection.K

    def subject_eigen(self, i: int) -> EigenSystem:
        return self.eigen[i] if isinstance(self.eigen, list) else self.eigen

    def predictions(self, K: Optional[int] = None) -> np.ndarray:
        """Predicted curves on ``t_grid``, one row per subject."""
        K = self.K if K is None else K
        return np.vstack(
            [
                predict_trajectory(self.mu_grid[i], self.subject_eigen(i), self.scores[i], K, self.t_grid)
                for i in range(self.data.n)
            ]
        )

    def fitted(self, K: Optional[int] = None) -> list:
        K = self.K if K is None else K
        return [
            fitted_at_obs(s.times, self.mean.fitted_at_obs[i], self.subject_eigen(i), self.scores[i], K)
            for i, s in enumerate(self.data.subjects)
        ]

    def msfe(self, K: Optional[int] = None) -> float:
        return msfe([s.values for s in self.data.subjects], self.fitted(K))

    def eigenvalues(self) -> np.ndarray:
        """Pooled eigenvalues (for ffpca: evaluated at the median covariate)."""
        if isinstance(self.eigen, list):
            z = float(np.median(self.data.covariates))
            return eigendecompose_adjusted(self.covariance, z).eigenvalues
        return self.eigen.eigenvalues


def _grid(domain, points):
    return np.linspace(domain[0], domain[1], points)


def fit_fpca(data: LongitudinalDataset, method: str = MFPCA, criterion: str = FVE, options: Optional[FitOptions] = None, **overrides) -> FpcaFit:
    """Estimate mean, covariance, noise variance, eigen systems and scores."""
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    if criterion not in CRITERIA:
        raise ValueError(f"criterion must be one of {CRITERIA}, got {criterion!r}")
    opts = options or FitOptions()
    for k, v in overrides.items():
        if not hasattr(opts, k):
            raise TypeError(f"unknown option {k!r}")
        setattr(opts, k, v)

    mean_mode = mn.UNADJUSTED if method == UFPCA else mn.ADJUSTED
    kind = cov.ADJUSTED if method == FFPCA else cov.POOLED
    npd = opts.candidates_per_dim

    # mean
    bw_mean = opts.bw_mean
    if bw_mean is None:
        bw_mean = mn.locv_bandwidth(data, mn.candidate_grid(data, mean_mode, npd), opts.smoother, mean_mode)
    t_report = _grid(data.time_domain, opts.report_t_points)
    z_report = _grid(data.covariate_domain, opts.report_z_points)
    mean = mn.estimate_mean(data, bw_mean, opts.smoother, mean_mode, t_report, z_report)

    # covariance
    raw = cov.raw_covariances(data, mean)
    bw_cov = opts.bw_cov
    if bw_cov is None:
        bw_cov = cov.kfold_bandwidth(
            data, mean, cov.default_gamma_candidates(data, kind, npd), opts.folds, kind, opts.smoother, opts.seed, raw=raw
        )
    nt = opts.t_grid_points or (51 if kind == cov.POOLED else 31)
    t_grid = _grid(data.time_domain, nt)
    if kind == cov.POOLED:
        model = cov.estimate_gamma_pooled(raw, bw_cov, opts.smoother, t_grid)
        z_grid = None
    else:
        z_grid = _grid(data.covariate_domain, opts.z_grid_points)
        model = cov.estimate_gamma_adjusted(raw, bw_cov, opts.smoother, t_grid, z_grid)
    bw_var = opts.bw_var
    if bw_var is None:
        bw_var = model.bandwidths[:1] if kind == cov.POOLED else model.bandwidths
    V = cov.estimate_variance_diag(raw, bw_var, opts.smoother, t_grid, z_grid, kind)
    sigma2 = cov.estimate_sigma2(V, model.gamma_grid, t_grid, z_grid, data.time_domain, kind)
    model.variance_diag = V
    model.variance_bandwidths = tuple(float(v) for v in np.atleast_1d(bw_var))
    model.sigma2 = sigma2

    # eigen systems
    if kind == cov.POOLED:
        eigen = eigendecompose(model.gamma_grid, t_grid)
        systems = [eigen] * data.n
    else:
        cache = {}
        systems = []
        for z in data.covariates:
            if z not in cache:
                cache[z] = eigendecompose(model.slice_at(float(z)), t_grid, covariate=float(z))
            systems.append(cache[z])
        eigen = systems
    k_avail = min(e.n_components for e in systems)
    if k_avail == 0:
        raise EstimationError("estimated covariance has no positive eigenvalues")
    K_max = min(opts.k_max, k_avail)

    # scores
    mu_obs = mean.fitted_at_obs
    scores = np.vstack(
        [blup_scores(s.times, s.values, mu_obs[i], systems[i], sigma2, K_max) for i, s in enumerate(data.subjects)]
    )
    selections = {FVE: select_k_fve(eigen, opts.fve_threshold)}
    values = [s.values for s in data.subjects]
    phis = [systems[i].phi_at(s.times, K_max) for i, s in enumerate(data.subjects)]
    for crit in (AIC, BIC):
        try:
            selections[crit] = select_k_ic(values, mu_obs, phis, scores, sigma2, crit, K_max)
        except CriterionUndefinedError:
            log.warning("%s undefined with zero noise variance; using the FVE choice", crit.upper())
            selections[crit] = ComponentSelection(crit, selections[FVE].K)
    for key, sel in selections.items():
        if sel.K > K_max:
            selections[key] = ComponentSelection(sel.criterion, K_max, sel.threshold, sel.per_subject_k, sel.scores)

    if mean_mode == mn.UNADJUSTED:
        mu_grid = np.tile(mean.report_grid, (data.n, 1))
    else:
        tt = np.tile(t_report, data.n)
        zz = np.repeat(data.covariates, t_report.size)
        mu_grid = mean.evaluate(tt, zz).reshape(data.n, t_report.size)

    return FpcaFit(
        method=method,
        data=data,
        mean=mean,
        covariance=model,
        eigen=eigen,
        sigma2=sigma2,
        selections=selections,
        criterion=criterion,
        scores=scores,
        mu_grid=mu_grid,
        t_grid=t_report,
        bandwidths={
            "mean": [float(v) for v in mean.bandwidths],
            "covariance": [float(v) for v in model.bandwidths],
            "variance": [float(v) for v in model.variance_bandwidths],
        },
    )
