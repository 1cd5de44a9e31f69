"""Weighted local polynomial regression with product kernels in 1 to 3 dimensions.

Every estimator in the package (mean surface, covariance surfaces, diagonal
variance) is a call into :func:`fit_surface`.  Fits are computed target by
target from the samples inside the kernel window.  In 1D the samples are
sorted once and each target scans its window slice.  In 2D and 3D the samples
are also bucketed into cells along the first coordinate (cell width chosen
from the target's bandwidth on a power-of-two ladder) and sorted on the second
coordinate inside each cell, so a target only scans a few short runs.
Per-target moment sums are accumulated with ``np.add.reduceat`` in that
fixed order.  A target's result therefore depends only on the target itself, never
on which other targets share the batch, so batched and single fits agree bit
for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import SingularFitError, WindowUnderflowError

__all__ = [
    "KernelSpec",
    "LocalFit",
    "Samples",
    "fit_surface",
    "kernel_eval",
    "local_poly_fit",
    "normalize_bandwidths",
]

LOCAL_LINEAR = "local-linear"
NADARAYA_WATSON = "nadaraya-watson"
SMOOTHERS = {LOCAL_LINEAR: 1, NADARAYA_WATSON: 0}

FALLBACK_FACTOR = 1.5
FALLBACK_STEPS = 5
RIDGE = 1e-10
# scaled normal matrices with eigenvalue spread beyond this are treated as rank deficient
DEGENERACY = 1e-9
# upper bound on (target, candidate sample) entries materialised at once
CHUNK_ENTRIES = 2_000_000
# finest cell ladder level: 2**MAX_LEVEL cells across the first coordinate
MAX_LEVEL = 12
# batches at least this large are checked for repeated target rows
DEDUP_MIN = 256


def _epanechnikov(u):
    u = np.asarray(u, dtype=float)
    return 0.75 * np.maximum(1.0 - u * u, 0.0)


def _biweight(u):
    u = np.asarray(u, dtype=float)
    return 0.9375 * np.maximum(1.0 - u * u, 0.0) ** 2


BASE_KERNELS: dict[str, Callable] = {
    "epanechnikov": _epanechnikov,
    "biweight": _biweight,
}


@dataclass(frozen=True)
class KernelSpec:
    """Product kernel built from a symmetric base kernel supported on [-1, 1]."""

    dimension: int = 1
    base: str = "epanechnikov"
    order: tuple = (0, 2)

    def __post_init__(self):
        if self.dimension not in (1, 2, 3):
            raise ValueError(f"dimension must be 1, 2 or 3, got {self.dimension}")
        if self.base not in BASE_KERNELS:
            raise ValueError(f"unknown base kernel {self.base!r}")
        if tuple(self.order) != (0, 2):
            raise ValueError("only kernels of order (0, 2) are supported")

    @property
    def base_kernel(self) -> Callable:
        return BASE_KERNELS[self.base]


def kernel_eval(spec: KernelSpec, u):
    """Evaluate the product kernel.

    A single point (a scalar in 1D, else shape ``(d,)``) gives a float; an
    array of points of shape ``(m, d)`` (or ``(m,)`` in 1D) gives an array.
    """
    u = np.asarray(u, dtype=float)
    d = spec.dimension
    if u.ndim == 0 or (u.ndim == 1 and d > 1):
        return float(np.prod(spec.base_kernel(u.reshape(-1))))
    if u.ndim == 1:
        u = u[:, None]
    if u.shape[1] != d:
        raise ValueError(f"expected points of dimension {d}, got {u.shape[1]}")
    return np.prod(spec.base_kernel(u), axis=1)


def normalize_bandwidths(bw, dimension: int) -> np.ndarray:
    h = np.atleast_1d(np.asarray(bw, dtype=float)).ravel()
    if h.size == 1 and dimension > 1:
        h = np.repeat(h, dimension)
    if h.size != dimension:
        raise ValueError(f"need {dimension} bandwidths, got {h.size}")
    if not np.all(np.isfinite(h)) or np.any(h <= 0):
        raise ValueError(f"bandwidths must be positive and finite, got {h.tolist()}")
    return h


class Samples:
    """Smoothing input: locations (P, d), responses (P,), base weights and groups.

    ``groups`` labels samples (a subject index or a fold id) so that fits can
    leave a whole group out.  Samples sharing a location and a group are
    merged into one with the summed weight and the weighted mean response;
    local polynomial moments depend on samples only through those sums, and
    ``multiplicity`` keeps window counts in terms of the original samples.
    The sort on the first coordinate is done once here and reused by every fit.
    """

    def __init__(self, locations, responses, weights=None, groups=None, *, multiplicity=None):
        X = np.asarray(locations, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(responses, dtype=float).ravel()
        if X.shape[0] != y.size:
            raise ValueError("locations and responses differ in length")
        w = np.ones(y.size) if weights is None else np.asarray(weights, dtype=float).ravel()
        if w.size != y.size or np.any(w < 0):
            raise ValueError("base weights must be nonnegative, one per sample")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y)) and np.all(np.isfinite(w))):
            raise ValueError("non-finite sample entries")
        g = np.zeros(y.size, dtype=np.int64) if groups is None else np.asarray(groups).astype(np.int64)
        self.dimension = X.shape[1]
        mult = np.ones(y.size, dtype=np.int64) if multiplicity is None else np.asarray(multiplicity, dtype=np.int64)
        if mult.shape != y.shape:
            raise ValueError("one multiplicity per sample")
        if y.size > 1:
            rows, first, inverse = np.unique(
                np.column_stack([X, g]), axis=0, return_index=True, return_inverse=True
            )
            if first.size < y.size:
                inverse = inverse.ravel()
                sw = np.bincount(inverse, weights=w)
                swy = np.bincount(inverse, weights=w * y)
                mult = np.bincount(inverse, weights=mult).astype(np.int64)
                y = np.divide(swy, sw, out=np.zeros_like(sw), where=sw > 0)
                X, w, g = X[first], sw, g[first]
        order = np.argsort(X[:, 0], kind="stable")
        self.X = np.ascontiguousarray(X[order])
        self.y = y[order]
        self.w = w[order]
        self.groups = g[order]
        self.multiplicity = mult[order]
        self.size = int(self.multiplicity.sum())
        for k in range(self.dimension):
            setattr(self, f"x{k}", self.X[:, k].copy())
        self.key = self.X[:, 0].copy()
        n = self.y.size
        self.lo0 = float(self.key[0]) if n else 0.0
        self.span0 = float(self.key[-1] - self.key[0]) if n else 0.0
        if self.dimension > 1 and n:
            self.lo1 = float(self.X[:, 1].min())
            self.span1 = float(self.X[:, 1].max()) - self.lo1
        else:
            self.lo1 = self.span1 = 0.0
        self._cells = {}
        self._groups = None

    def __len__(self):
        return self.size

    def cells(self, level: int) -> "_Cells":
        c = self._cells.get(level)
        if c is None:
            c = self._cells[level] = _Cells(self, level)
        return c

    def group(self, label: int) -> Optional["Samples"]:
        """The samples of one group as their own ``Samples`` (None if absent)."""
        if self._groups is None:
            order = np.argsort(self.groups, kind="stable")
            labels, starts = np.unique(self.groups[order], return_index=True)
            stops = np.append(starts[1:], order.size)
            self._group_rows = {int(g): order[a:c] for g, a, c in zip(labels, starts, stops)}
            self._groups = {}
        sub = self._groups.get(label)
        if sub is None and label in self._group_rows:
            idx = self._group_rows[label]
            sub = self._groups[label] = Samples(
                self.X[idx], self.y[idx], self.w[idx], self.groups[idx], multiplicity=self.multiplicity[idx]
            )
        return sub


class _Cells:
    """Sample order by (cell of the first coordinate, second coordinate).

    ``key`` is ``cell * stride + (x1 - lo1)`` with a stride wide enough that
    cells never overlap, so one ``searchsorted`` finds a run inside a cell.
    """

    def __init__(self, S: Samples, level: int):
        self.count = 2**level
        self.width = S.span0 / self.count
        self.stride = 2.0 * S.span1 + 1.0
        cell = np.minimum(((S.key - S.lo0) / self.width).astype(np.int64), self.count - 1)
        self.order = np.lexsort((S.X[:, 1], cell))
        self.key = cell[self.order] * self.stride + (S.X[self.order, 1] - S.lo1)
        for k in range(S.dimension):
            setattr(self, f"x{k}", S.X[self.order, k])
        self.y = S.y[self.order]
        self.w = S.w[self.order]
        self.groups = S.groups[self.order]
        self.multiplicity = S.multiplicity[self.order]


@dataclass(frozen=True)
class LocalFit:
    """Coefficients of a local fit: the intercept and (degree 1) the slopes."""

    intercept: float
    slopes: tuple = ()
    n_window: int = 0
    widenings: int = 0


def _as_samples(samples, dimension=None) -> Samples:
    if isinstance(samples, Samples):
        return samples
    if isinstance(samples, tuple) and len(samples) in (2, 3, 4):
        return Samples(*samples)
    raise TypeError("samples must be a Samples instance or a (locations, responses[, weights[, groups]]) tuple")


def _segments(S: Samples, targets, h):
    """Candidate runs per target as (target, start, stop, level) arrays, grouped by target.

    ``level`` is -1 for runs into the first-coordinate order, else the cell
    ladder level whose order the run indexes.
    """
    m = targets.shape[0]
    if S.dimension == 1 or S.span0 <= 0:
        lo = np.searchsorted(S.key, targets[:, 0] - h[:, 0], side="left")
        hi = np.searchsorted(S.key, targets[:, 0] + h[:, 0], side="right")
        return np.arange(m), lo, hi, np.full(m, -1)
    level = np.clip(np.floor(np.log2(S.span0 / h[:, 0])), 0, MAX_LEVEL).astype(np.int64)
    pad = 1e-9 * (S.span1 + 1.0)
    parts = []
    for L in np.unique(level):
        sel = np.flatnonzero(level == L)
        C = S.cells(int(L))
        t0, h0 = targets[sel, 0], h[sel, 0]
        c_lo = np.clip(np.floor((t0 - h0 - S.lo0) / C.width), 0, C.count - 1).astype(np.int64)
        c_hi = np.clip(np.floor((t0 + h0 - S.lo0) / C.width), 0, C.count - 1).astype(np.int64)
        outside = (t0 + h0 < S.lo0) | (t0 - h0 > S.lo0 + S.span0)
        nseg = np.where(outside, 0, c_hi - c_lo + 1)
        tgt = np.repeat(sel, nseg)
        first = np.repeat(np.cumsum(nseg) - nseg, nseg)
        cell = np.repeat(c_lo, nseg) + (np.arange(tgt.size) - first)
        q_lo = np.clip(targets[tgt, 1] - h[tgt, 1] - S.lo1, -pad, S.span1 + pad) - pad
        q_hi = np.clip(targets[tgt, 1] + h[tgt, 1] - S.lo1, -pad, S.span1 + pad) + pad
        start = np.searchsorted(C.key, cell * C.stride + q_lo, side="left")
        stop = np.searchsorted(C.key, cell * C.stride + q_hi, side="right")
        parts.append((tgt, start, stop, np.full(tgt.size, L)))
    tgt, start, stop, lev = (np.concatenate(a) for a in zip(*parts))
    order = np.argsort(tgt, kind="stable")
    return tgt[order], start[order], stop[order], lev[order]


def _gather(S: Samples, lev, pos, entry_lev, field):
    """Values of a per-sample field at run positions, each run in its own order."""
    if lev.size and np.all(lev == lev[0]):
        return getattr(S if lev[0] < 0 else S.cells(int(lev[0])), field)[pos]
    out = np.empty(pos.size, dtype=getattr(S, field).dtype)
    for L in np.unique(lev):
        hit = entry_lev == L
        out[hit] = getattr(S if L < 0 else S.cells(int(L)), field)[pos[hit]]
    return out


def _batch_moments(S: Samples, targets, h, segments, degree, base_kernel, exclude):
    """Per-target normal equations for targets (m, d) with bandwidths h (m, d).

    ``segments`` are the candidate runs from :func:`_segments` with target
    indices local to this batch.  Returns (M, b, count, mass) with M of
    shape (m, p, p), b (m, p), p = 1 + d*degree, built in scaled coordinates
    u = (x - target) / h, and mass the kernel-weighted sum of |y|.  The
    entries of one target are contiguous and summed in order by
    ``np.add.reduceat``.
    """
    m, d = targets.shape
    p = 1 + d * degree
    tgt, start, stop, lev = segments
    lens = stop - start
    total = int(lens.sum())
    M = np.zeros((m, p, p))
    b = np.zeros((m, p))
    if total == 0:
        return M, b, np.zeros(m, dtype=np.int64), np.zeros(m)
    seg = np.repeat(tgt, lens)
    pos = np.arange(total) - np.repeat(np.cumsum(lens) - lens, lens) + np.repeat(start, lens)
    entry_lev = np.repeat(lev, lens) if lev.size and not np.all(lev == lev[0]) else None
    inv_h = 1.0 / h
    U = []
    w = _gather(S, lev, pos, entry_lev, "w")
    for k in range(d):
        u = (_gather(S, lev, pos, entry_lev, f"x{k}") - targets[seg, k]) * inv_h[seg, k]
        w = w * base_kernel(u)
        U.append(u)
    if exclude is not None:
        w = w * (_gather(S, lev, pos, entry_lev, "groups") != exclude[seg])
    keep = np.flatnonzero(w > 0)
    seg, w, pos = seg[keep], w[keep], pos[keep]
    if entry_lev is not None:
        entry_lev = entry_lev[keep]
    U = [u[keep] for u in U]
    y = _gather(S, lev, pos, entry_lev, "y")
    design = [w] + [w * u for u in U] if degree else [w]
    n_rows = p * (p + 1) // 2 + p + 2
    P = np.empty((n_rows, seg.size))
    r = 0
    for a in range(p):
        for c in range(a, p):
            if c == 0:
                P[r] = w
            else:
                np.multiply(design[a], U[c - 1], out=P[r]) if a else np.copyto(P[r], design[c])
            r += 1
    for a in range(p):
        np.multiply(design[a], y, out=P[r])
        r += 1
    np.multiply(w, np.abs(y), out=P[r])
    P[r + 1] = _gather(S, lev, pos, entry_lev, "multiplicity")
    per_target = np.bincount(seg, minlength=m)
    first = np.cumsum(per_target) - per_target
    has = per_target > 0
    R = np.zeros((n_rows, m))
    if seg.size:
        R[:, has] = np.add.reduceat(P, first[has], axis=1)
    r = 0
    for a in range(p):
        for c in range(a, p):
            M[:, a, c] = M[:, c, a] = R[r]
            r += 1
    b[:] = R[r : r + p].T
    return M, b, R[-1].astype(np.int64), R[-2]


def _solve(M, b, count, degree, d):
    """Solve the stacked normal equations; returns (beta_scaled, ok)."""
    m = M.shape[0]
    p = M.shape[1]
    beta = np.full((m, p), np.nan)
    if degree == 0:
        ok = (count >= 1) & (M[:, 0, 0] > 0)
        beta[ok, 0] = b[ok, 0] / M[ok, 0, 0]
        return beta, ok
    ok = count >= d + 2
    if not np.any(ok):
        return beta, ok
    Mk = M[ok]
    ev = np.linalg.eigvalsh(Mk)
    good = ev[:, 0] > DEGENERACY * ev[:, -1]
    sub = np.flatnonzero(ok)
    ok[sub[~good]] = False
    Mk = Mk[good]
    bk = b[ok]
    if Mk.shape[0]:
        ridge = RIDGE * np.trace(Mk, axis1=1, axis2=2) / p
        A = Mk + ridge[:, None, None] * np.eye(p)
        x = np.linalg.solve(A, bk[..., None])[..., 0]
        # one refinement step against the unconditioned system removes the ridge bias
        r = bk - (Mk * x[:, None, :]).sum(axis=2)
        x = x + np.linalg.solve(A, r[..., None])[..., 0]
        beta[ok] = x
    return beta, ok


def _moments(S, targets, h, degree, base_kernel, exclude=None):
    """Normal equations for every target, materialised in bounded chunks."""
    m, d = targets.shape
    p = 1 + d * degree
    M = np.zeros((m, p, p))
    b = np.zeros((m, p))
    count = np.zeros(m, dtype=np.int64)
    mass = np.zeros(m)
    if m == 0 or len(S) == 0:
        return M, b, count, mass
    tgt, start, stop, lev = _segments(S, targets, h)
    per_target = np.bincount(tgt, weights=stop - start, minlength=m)
    cum = np.cumsum(per_target)
    seg_first = np.searchsorted(tgt, np.arange(m + 1))
    bounds = [0]
    while bounds[-1] < m:
        base = cum[bounds[-1] - 1] if bounds[-1] else 0
        nxt = int(np.searchsorted(cum, base + CHUNK_ENTRIES, side="right"))
        bounds.append(max(nxt, bounds[-1] + 1))
    bounds[-1] = m
    for a, c in zip(bounds[:-1], bounds[1:]):
        ex = None if exclude is None else exclude[a:c]
        r = slice(seg_first[a], seg_first[c])
        segments = (tgt[r] - a, start[r], stop[r], lev[r])
        M[a:c], b[a:c], count[a:c], mass[a:c] = _batch_moments(
            S, targets[a:c], h[a:c], segments, degree, base_kernel, ex
        )
    return M, b, count, mass


def _moments_leave_out(S, targets, h, degree, base_kernel, exclude):
    """Leave-group-out normal equations by subtraction.

    Moments are sums over samples, so the fit without group g uses the
    all-sample moments (computed once per distinct target row) minus the
    moments of group g alone.  When the removed group carries more than half
    of the kernel mass or of the weighted |y| mass, the target is recomputed
    directly, so rounding stays within twice that of a direct sum.
    """
    _, first, inverse = np.unique(np.hstack([targets, h]), axis=0, return_index=True, return_inverse=True)
    inverse = inverse.ravel()
    M, b, count, mass = _moments(S, targets[first], h[first], degree, base_kernel)
    M, b, count, mass = M[inverse], b[inverse], count[inverse], mass[inverse]
    removed_w = np.zeros(targets.shape[0])
    removed_y = np.zeros(targets.shape[0])
    for g in np.unique(exclude):
        sel = np.flatnonzero(exclude == g)
        Sg = S.group(int(g))
        if Sg is None:
            continue
        Mg, bg, cg, ag = _moments(Sg, targets[sel], h[sel], degree, base_kernel)
        M[sel] -= Mg
        b[sel] -= bg
        count[sel] -= cg
        removed_w[sel] = Mg[:, 0, 0]
        removed_y[sel] = ag
    total_w = M[:, 0, 0] + removed_w
    redo = np.flatnonzero((count > 0) & ((removed_w > 0.5 * total_w) | (removed_y > 0.5 * mass)))
    if redo.size:
        M[redo], b[redo], count[redo], _ = _moments(S, targets[redo], h[redo], degree, base_kernel, exclude[redo])
    empty = count == 0
    M[empty] = 0.0
    b[empty] = 0.0
    return M, b, count


def _fit_targets(S, targets, h, degree, spec, exclude, fallback):
    """Fit every target; returns (beta in original units, widenings, n_window, failed)."""
    m, d = targets.shape
    p = 1 + d * degree
    beta = np.full((m, p), np.nan)
    widen = np.zeros(m, dtype=int)
    nwin = np.zeros(m, dtype=np.int64)
    pending = np.arange(m)
    steps = FALLBACK_STEPS if fallback else 0
    base_kernel = spec.base_kernel
    for step in range(steps + 1):
        if pending.size == 0:
            break
        hs = h[pending] * FALLBACK_FACTOR**step
        ts = targets[pending]
        if exclude is None:
            M, b, count, _ = _moments(S, ts, hs, degree, base_kernel)
        else:
            M, b, count = _moments_leave_out(S, ts, hs, degree, base_kernel, exclude[pending])
        bs, ok = _solve(M, b, count, degree, d)
        if degree:
            bs[:, 1:] /= hs
        beta[pending[ok]] = bs[ok]
        widen[pending] = step
        nwin[pending] = count
        pending = pending[~ok]
    return beta, widen, nwin, pending


def _check_targets(targets, d):
    T = np.asarray(targets, dtype=float)
    if T.ndim == 1:
        T = T[:, None] if d == 1 else T[None, :]
    if T.ndim != 2 or T.shape[1] != d:
        raise ValueError(f"targets must have {d} coordinates")
    return T


def _degree(degree):
    if isinstance(degree, str):
        degree = SMOOTHERS[degree]
    if degree not in (0, 1):
        raise ValueError("degree must be 0 or 1")
    return degree


def _fit_unique(S, T, h, degree, spec, exclude, fallback):
    """Fit each distinct (target, bandwidth, excluded group) row once and scatter back."""
    m = T.shape[0]
    if m < DEDUP_MIN:
        return _fit_targets(S, T, h, degree, spec, exclude, fallback)
    cols = [T, h] if exclude is None else [T, h, exclude[:, None].astype(float)]
    _, first, inverse = np.unique(np.hstack(cols), axis=0, return_index=True, return_inverse=True)
    inverse = inverse.ravel()
    if first.size == m:
        return _fit_targets(S, T, h, degree, spec, exclude, fallback)
    ex = None if exclude is None else exclude[first]
    beta, widen, nwin, failed = _fit_targets(S, T[first], h[first], degree, spec, ex, fallback)
    bad = np.zeros(first.size, dtype=bool)
    bad[failed] = True
    return beta[inverse], widen[inverse], nwin[inverse], np.flatnonzero(bad[inverse])


def fit_surface(
    samples,
    targets,
    bw,
    degree=1,
    spec: Optional[KernelSpec] = None,
    *,
    exclude=None,
    fallback: bool = True,
    return_slopes: bool = False,
):
    """Local polynomial fit at every target; returns the intercepts.

    Parameters
    ----------
    samples : Samples or tuple
        Sample locations, responses and optional base weights / groups.
    targets : array, shape (m, d)
    bw : float or sequence of d floats, or array (m, d) for per-target bandwidths
    degree : 0, 1, "nadaraya-watson" or "local-linear"
    exclude : array of m group labels, optional
        Samples whose group equals ``exclude[i]`` are ignored for target ``i``.
    fallback : bool
        Widen the bandwidth by 1.5 up to five times for targets whose window is
        underfilled or degenerate.  When False an underfilled window raises
        :class:`WindowUnderflowError` immediately.

    Raises
    ------
    SingularFitError
        A window is still degenerate after the last widening.
    """
    S = _as_samples(samples)
    d = S.dimension
    if spec is None:
        spec = KernelSpec(d)
    elif spec.dimension != d:
        raise ValueError("kernel dimension does not match the samples")
    degree = _degree(degree)
    T = _check_targets(targets, d)
    h = np.asarray(bw, dtype=float)
    if h.ndim == 2:
        if h.shape != T.shape or np.any(h <= 0) or not np.all(np.isfinite(h)):
            raise ValueError("per-target bandwidths must be positive with shape (m, d)")
    else:
        h = np.broadcast_to(normalize_bandwidths(h, d), T.shape)
    if exclude is not None:
        exclude = np.broadcast_to(np.asarray(exclude).astype(np.int64), (T.shape[0],))
    beta, widen, nwin, failed = _fit_unique(S, T, h, degree, spec, exclude, fallback)
    if failed.size:
        i = int(failed.min())
        if not fallback:
            raise WindowUnderflowError(
                f"target {i} at {T[i].tolist()}: window holds {int(nwin[i])} usable samples", index=i
            )
        raise SingularFitError(
            f"target {i} at {T[i].tolist()}: fit still degenerate after "
            f"{FALLBACK_STEPS} bandwidth widenings",
            index=i,
        )
    if return_slopes:
        return beta, widen, nwin
    return beta[:, 0].copy()


def local_poly_fit(samples, target, bw, degree=1, spec: Optional[KernelSpec] = None, *, fallback=True) -> LocalFit:
    """Single-target local fit; intercept plus (for degree 1) slopes in original units."""
    S = _as_samples(samples)
    T = np.asarray(target, dtype=float).reshape(1, S.dimension)
    beta, widen, nwin = fit_surface(S, T, bw, degree, spec, fallback=fallback, return_slopes=True)
    return LocalFit(
        intercept=float(beta[0, 0]),
        slopes=tuple(float(v) for v in beta[0, 1:]),
        n_window=int(nwin[0]),
        widenings=int(widen[0]),
    )
