"""Eigen-decomposition of covariance surfaces and choice of the number of components."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import CafpcaError, IntegrityError, SelectionError
from .quadrature import interp_columns, trapezoid_weights

FVE = "fve"
AIC = "aic"
BIC = "bic"
CRITERIA = (FVE, AIC, BIC)

SYMMETRY_TOL = 1e-9
# eigenvalues at or below this fraction of the largest are treated as zero
RELATIVE_ZERO = 1e-12
SIGN_SUM_TOL = 1e-6


@dataclass(eq=False)
class EigenSystem:
    """Positive eigenvalues (nonincreasing) and eigenfunctions on ``t_grid``.

    ``eigenfunctions`` has shape (len(t_grid), K); column k is orthonormal to
    the others under the trapezoid weights ``quad_weights``.
    """

    t_grid: np.ndarray
    quad_weights: np.ndarray
    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray
    covariate: Optional[float] = None

    @property
    def n_components(self) -> int:
        return int(self.eigenvalues.size)

    def phi_at(self, t, K: Optional[int] = None) -> np.ndarray:
        """Eigenfunctions at times ``t`` by linear interpolation; shape (len(t), K)."""
        K = self.n_components if K is None else K
        return interp_columns(t, self.t_grid, self.eigenfunctions[:, :K])

    def covariance_at(self, t, s=None) -> np.ndarray:
        """sum_k lambda_k phi_k(t) phi_k(s) over all retained components."""
        pt = self.phi_at(t)
        ps = pt if s is None else self.phi_at(s)
        return (pt * self.eigenvalues) @ ps.T

    def orthonormality_error(self) -> float:
        G = self.eigenfunctions.T @ (self.quad_weights[:, None] * self.eigenfunctions)
        return float(np.max(np.abs(G - np.eye(G.shape[0])))) if G.size else 0.0


def apply_sign_convention(phi: np.ndarray, weights) -> np.ndarray:
    """Flip columns so their integral is positive (or, if ~0, their left end is >= 0)."""
    phi = np.array(phi, dtype=float, copy=True)
    if phi.ndim == 1:
        return apply_sign_convention(phi[:, None], weights)[:, 0]
    integral = np.asarray(weights) @ phi
    for k in range(phi.shape[1]):
        if abs(integral[k]) >= SIGN_SUM_TOL:
            flip = integral[k] < 0
        else:
            flip = phi[0, k] < 0
        if flip:
            phi[:, k] = -phi[:, k]
    return phi


def eigendecompose(gamma, t_grid, quad_weights=None, covariate=None) -> EigenSystem:
    """Solve  int Gamma(t, s) phi(s) ds = lambda phi(t)  on a grid.

    With trapezoid weights W the discrete operator is Gamma W; the symmetric
    matrix W^1/2 Gamma W^1/2 has the same eigenvalues and eigenvectors v with
    phi = W^-1/2 v, so that sum_g w_g phi(t_g)^2 = 1.  Non-positive
    eigenvalues are dropped together with their eigenfunctions.
    """
    G = np.asarray(gamma, dtype=float)
    t_grid = np.asarray(t_grid, dtype=float)
    if G.ndim != 2 or G.shape[0] != G.shape[1] or G.shape[0] != t_grid.size:
        raise IntegrityError("covariance grid must be square and match the time grid")
    asym = float(np.max(np.abs(G - G.T))) if G.size else 0.0
    if asym > SYMMETRY_TOL:
        raise IntegrityError(f"covariance grid is not symmetric (max deviation {asym:.3g})")
    w = trapezoid_weights(t_grid) if quad_weights is None else np.asarray(quad_weights, dtype=float)
    if np.any(w <= 0):
        raise IntegrityError("quadrature weights must be positive")
    r = np.sqrt(w)
    B = r[:, None] * G * r[None, :]
    B = 0.5 * (B + B.T)
    try:
        lam, V = np.linalg.eigh(B)
    except np.linalg.LinAlgError as exc:
        raise CafpcaError(f"eigen solver failed: {exc}") from exc
    order = np.argsort(lam)[::-1]
    lam, V = lam[order], V[:, order]
    top = lam[0] if lam.size else 0.0
    keep = lam > max(RELATIVE_ZERO * top, 0.0)
    lam, V = lam[keep], V[:, keep]
    phi = V / r[:, None]
    phi = apply_sign_convention(phi, w)
    return EigenSystem(t_grid, w, lam, phi, covariate)


def eigendecompose_adjusted(model, z: float) -> EigenSystem:
    """Eigen system of a covariate-adjusted covariance at covariate value ``z``."""
    return eigendecompose(model.slice_at(float(z)), model.t_grid, covariate=float(z))


@dataclass(frozen=True)
class ComponentSelection:
    criterion: str
    K: int
    threshold: Optional[float] = None
    per_subject_k: Optional[tuple] = None
    scores: Optional[tuple] = None


def fve_count(eigenvalues, threshold: float) -> int:
    """Smallest k whose leading eigenvalues explain at least ``threshold`` of the positive mass."""
    lam = np.asarray(eigenvalues, dtype=float)
    lam = lam[lam > 0]
    if lam.size == 0:
        raise SelectionError("no positive eigenvalues")
    frac = np.cumsum(lam) / lam.sum()
    # tolerate round-off in cumulative sums so exact ratios like 4/5 hit the threshold
    hit = np.flatnonzero(frac >= threshold - 1e-12)
    return int(hit[0]) + 1 if hit.size else int(lam.size)


def ceil_percentile(values, q: float = 90.0) -> int:
    """Ceiling of the linearly interpolated q-th percentile."""
    return int(math.ceil(np.percentile(np.asarray(values, dtype=float), q) - 1e-12))


def select_k_fve(eigen, threshold: float = 0.80, percentile: float = 90.0) -> ComponentSelection:
    """FVE choice of K.

    ``eigen`` is either one eigenvalue sequence / :class:`EigenSystem`
    (pooled methods) or a sequence of per-subject :class:`EigenSystem`
    objects (fully adjusted method); in the latter case each subject gets its
    own k and the global K is the ceiling of their 90th percentile.
    """
    if isinstance(eigen, EigenSystem):
        return ComponentSelection(FVE, fve_count(eigen.eigenvalues, threshold), threshold)
    seq = list(eigen)
    if seq and isinstance(seq[0], EigenSystem):
        ks = [fve_count(e.eigenvalues, threshold) for e in seq]
        K = min(ceil_percentile(ks, percentile), min(e.n_components for e in seq))
        return ComponentSelection(FVE, max(K, 1), threshold, per_subject_k=tuple(ks))
    return ComponentSelection(FVE, fve_count(seq, threshold), threshold)
