"""Conditional-expectation scores, trajectory prediction, AIC/BIC and error metrics."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .eigen import AIC, BIC, ComponentSelection, EigenSystem
from .errors import ConditioningError, CriterionUndefinedError, IntegrityError
from .quadrature import trapezoid_weights

CONDITION_FLOOR = 1e-10
RIDGE_FRACTION = 1e-8


def observation_covariance(times, eigen: EigenSystem, sigma2: float) -> np.ndarray:
    """Sigma_Y = Gamma(T_j, T_l) + sigma2 * I, with Gamma rebuilt from the eigen system.

    The pairwise covariances come from the retained (positive) eigenpairs, so
    they equal the bilinear interpolation of the PSD part of the gridded
    covariance and stay consistent with the scores' eigenfunctions.
    """
    Sigma = eigen.covariance_at(times)
    Sigma = 0.5 * (Sigma + Sigma.T)
    Sigma[np.diag_indices_from(Sigma)] += sigma2
    return Sigma


def _conditioned(Sigma):
    ev = np.linalg.eigvalsh(Sigma)
    if ev[-1] > 0 and ev[0] >= CONDITION_FLOOR * ev[-1]:
        return Sigma
    ridge = RIDGE_FRACTION * float(np.mean(np.diag(Sigma)))
    Sigma = Sigma + ridge * np.eye(Sigma.shape[0])
    ev = np.linalg.eigvalsh(Sigma)
    if not ev[0] > 0:
        raise ConditioningError("observation covariance is singular after the ridge shift")
    return Sigma


def blup_scores(times, values, mu_obs, eigen: EigenSystem, sigma2: float, K: int) -> np.ndarray:
    """A_k = lambda_k phi_k(T)' Sigma_Y^-1 (Y - mu) for k = 1..K.

    ``times``/``values`` are one subject's observations and ``mu_obs`` the
    fitted mean at those observations.
    """
    if K > eigen.n_components:
        raise ValueError(f"K={K} exceeds the {eigen.n_components} retained components")
    if sigma2 < 0:
        raise ValueError("sigma2 must be nonnegative")
    times = np.asarray(times, dtype=float)
    resid = np.asarray(values, dtype=float) - np.asarray(mu_obs, dtype=float)
    if K == 0:
        return np.zeros(0)
    Sigma = _conditioned(observation_covariance(times, eigen, sigma2))
    phi = eigen.phi_at(times, K)
    x = np.linalg.solve(Sigma, resid)
    return eigen.eigenvalues[:K] * (phi.T @ x)


def predict_trajectory(mu_grid, eigen: EigenSystem, scores, K: int, t_grid) -> np.ndarray:
    """mu(t) + sum_{k<=K} A_k phi_k(t) on ``t_grid``; ``mu_grid`` already at the subject's z."""
    scores = np.asarray(scores, dtype=float)
    if scores.size < K:
        raise ValueError(f"need {K} scores, got {scores.size}")
    mu_grid = np.asarray(mu_grid, dtype=float)
    if K == 0:
        return mu_grid.copy()
    return mu_grid + eigen.phi_at(t_grid, K) @ scores[:K]


def fitted_at_obs(times, mu_obs, eigen: EigenSystem, scores, K: int) -> np.ndarray:
    if K == 0:
        return np.asarray(mu_obs, dtype=float).copy()
    return np.asarray(mu_obs, dtype=float) + eigen.phi_at(times, K) @ np.asarray(scores)[:K]


def deviance(values, mu_obs, phis, scores, sigma2: float, K: int) -> float:
    """Pseudo-Gaussian deviance summed over subjects for the first K components.

    ``phis[i]`` holds subject i's eigenfunctions at its observation times
    (N_i, >= K), ``scores[i]`` its scores.
    """
    total = 0.0
    for y, mu, phi, a in zip(values, mu_obs, phis, scores):
        r = np.asarray(y) - np.asarray(mu) - phi[:, :K] @ np.asarray(a)[:K]
        total += y.size * np.log(2 * np.pi * sigma2) + float(r @ r) / sigma2
    return float(total)


def select_k_ic(values, mu_obs, phis, scores, sigma2: float, criterion: str = BIC, K_max: int = 1) -> ComponentSelection:
    """AIC = D + 2K, BIC = D + K log(total observations); argmin over 1..K_max, ties to smaller K."""
    if criterion not in (AIC, BIC):
        raise ValueError(f"criterion must be aic or bic, got {criterion!r}")
    if not sigma2 > 0:
        raise CriterionUndefinedError("AIC/BIC need a positive noise variance")
    if K_max < 1:
        raise ValueError("K_max must be at least 1")
    n_total = sum(np.asarray(y).size for y in values)
    penalty = 2.0 if criterion == AIC else np.log(n_total)
    crit = []
    for K in range(1, K_max + 1):
        crit.append(deviance(values, mu_obs, phis, scores, sigma2, K) + penalty * K)
    K = int(np.argmin(crit)) + 1
    return ComponentSelection(criterion, K, scores=tuple(crit))


def mise(true_curves, predictions, t_grid) -> float:
    """(1/n) sum_i  int (X_i - Xhat_i)^2 dt  by the trapezoid rule."""
    X = np.asarray(true_curves, dtype=float)
    P = np.asarray(predictions, dtype=float)
    t_grid = np.asarray(t_grid, dtype=float)
    if X.shape != P.shape or X.ndim != 2 or X.shape[1] != t_grid.size:
        raise IntegrityError("true curves, predictions and grid are not aligned")
    w = trapezoid_weights(t_grid)
    return float(np.mean(((X - P) ** 2) @ w))


def msfe(values: Sequence, fitted: Sequence) -> float:
    """(1/n) sum_i (1/N_i) sum_j (Y_ij - Yhat_ij)^2."""
    if len(values) != len(fitted):
        raise IntegrityError("one fitted vector per subject is required")
    per = []
    for y, f in zip(values, fitted):
        y = np.asarray(y, dtype=float)
        f = np.asarray(f, dtype=float)
        if y.shape != f.shape:
            raise IntegrityError("one fitted value per observation is required")
        per.append(float(np.mean((y - f) ** 2)))
    return float(np.mean(per))
