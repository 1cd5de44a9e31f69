"""Simulation design with a covariate-dependent mean and covariance, plus the Monte-Carlo harness.

Random streams come from ``numpy.random.SeedSequence(seed, spawn_key=...)``
with these spawn keys:

* ``(run, 0)``        jittered time grid of a run (``(0, 0)`` for every run when the design is fixed)
* ``(run, 1, i)``     subject i of the run: covariate, N_i, times, scores, noise
* ``(run, 2)``        fold assignment for covariance cross-validation

so every run and every subject is reproducible on its own, whatever the
execution order.
"""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .covariance import POOLED
from .dataset import LongitudinalDataset, Subject
from .eigen import CRITERIA, eigendecompose, eigendecompose_adjusted
from .errors import CafpcaError
from .pipeline import METHODS, FitOptions, fit_fpca
from .quadrature import integrate2, trapezoid_weights
from .scores import mise

log = logging.getLogger(__name__)

STREAM_DESIGN = 0
STREAM_SUBJECT = 1
STREAM_FOLDS = 2


# ---- true model -------------------------------------------------------------


def true_mean(t, z):
    t = np.asarray(t, dtype=float)
    return t + z * np.sin(t) + (1.0 - z) * np.cos(t)


def true_marginal_mean(t):
    """E_z mu(t, z) for z ~ U(0, 1)."""
    t = np.asarray(t, dtype=float)
    return t + 0.5 * (np.sin(t) + np.cos(t))


def true_eigenfunction(k: int, t, z):
    arg = np.pi * (np.asarray(t, dtype=float) + np.asarray(z, dtype=float) / 2.0)
    if k == 1:
        return -np.cos(arg) * np.sqrt(2.0)
    if k == 2:
        return np.sin(arg) * np.sqrt(2.0)
    raise ValueError("the model has two components")


def true_eigenvalue(k: int, z):
    if k == 1:
        return np.asarray(z, dtype=float) / 9.0
    if k == 2:
        return np.asarray(z, dtype=float) / 36.0
    raise ValueError("the model has two components")


def true_covariance(t, s, z) -> np.ndarray:
    """Gamma(t, s, z) on the outer grid t x s."""
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    out = np.zeros((t.size, s.size))
    for k in (1, 2):
        out += true_eigenvalue(k, z) * np.outer(true_eigenfunction(k, t, z), true_eigenfunction(k, s, z))
    return out


def true_pooled_covariance(t, s=None, nodes: int = 64) -> np.ndarray:
    """Gamma*(t, s) = E_z Gamma(t, s, z) for z ~ U(0, 1), by Gauss-Legendre quadrature."""
    s = t if s is None else s
    x, w = np.polynomial.legendre.leggauss(nodes)
    zs = 0.5 * (x + 1.0)
    ws = 0.5 * w
    return sum(wi * true_covariance(t, s, zi) for zi, wi in zip(zs, ws))


# ---- configuration ----------------------------------------------------------


@dataclass(frozen=True)
class SimConfig:
    n: int = 100
    runs: int = 100
    seed: int = 0
    noise_sd: float = 0.05
    grid_points: int = 51
    n_min: int = 2
    n_max: int = 10
    fve_threshold: float = 0.80
    fixed_design: bool = False
    report_points: int = 51

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("n must be at least 2")
        if self.runs < 1:
            raise ValueError("runs must be at least 1")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be nonnegative")
        if self.grid_points < 3:
            raise ValueError("grid_points must be at least 3")
        if not 1 <= self.n_min <= self.n_max <= self.grid_points - 2:
            raise ValueError("need 1 <= n_min <= n_max <= number of interior grid points")


@dataclass(eq=False)
class SimTruth:
    t_grid: np.ndarray
    covariates: np.ndarray
    scores: np.ndarray  # (n, 2)
    curves: np.ndarray  # (n, len(t_grid)) true X_i(t, z_i)


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key)))


def jittered_grid(rng: np.random.Generator, points: int) -> np.ndarray:
    """Equispaced nodes on [0, 1] plus N(0, 0.01^2) jitter, clamped to [0, 1]."""
    c = np.linspace(0.0, 1.0, points)
    return np.clip(c + rng.normal(0.0, 0.01, size=points), 0.0, 1.0)


def generate_dataset(config: SimConfig, run_index: int = 0):
    """One replicate: (LongitudinalDataset, SimTruth)."""
    design_run = 0 if config.fixed_design else run_index
    s = jittered_grid(stream(config.seed, design_run, STREAM_DESIGN), config.grid_points)
    interior = s[1:-1]
    t_grid = np.linspace(0.0, 1.0, config.report_points)
    subjects = []
    zs = np.empty(config.n)
    scores = np.empty((config.n, 2))
    curves = np.empty((config.n, t_grid.size))
    for i in range(config.n):
        rng = stream(config.seed, run_index, STREAM_SUBJECT, i)
        z = rng.uniform(0.0, 1.0)
        N = int(rng.integers(config.n_min, config.n_max + 1))
        times = np.sort(rng.choice(interior, size=N, replace=False))
        a = rng.normal(0.0, np.sqrt([true_eigenvalue(1, z), true_eigenvalue(2, z)]))
        x = true_mean(times, z) + a[0] * true_eigenfunction(1, times, z) + a[1] * true_eigenfunction(2, times, z)
        y = x + rng.normal(0.0, config.noise_sd, size=N)
        subjects.append(Subject(i, z, times, y))
        zs[i] = z
        scores[i] = a
        curves[i] = true_mean(t_grid, z) + a[0] * true_eigenfunction(1, t_grid, z) + a[1] * true_eigenfunction(2, t_grid, z)
    data = LongitudinalDataset(tuple(subjects), (0.0, 1.0), (0.0, 1.0))
    return data, SimTruth(t_grid, zs, scores, curves)


# ---- Monte-Carlo harness ----------------------------------------------------

TABLE1_Z = (0.1, 0.3, 0.5, 0.7, 0.9)
SCHEMA_VERSION = 1


def _aligned_ise(phi_hat, phi, weights) -> float:
    return float(min(weights @ (phi_hat - phi) ** 2, weights @ (phi_hat + phi) ** 2))


def _eigen_errors(eigen, lam_true, phi_true, weights):
    """Eigenvalue biases and sign-aligned eigenfunction ISEs for the first two components."""
    bias, ise = [], []
    for k in range(2):
        if k < eigen.n_components:
            bias.append(float(eigen.eigenvalues[k] - lam_true[k]))
            ise.append(_aligned_ise(eigen.eigenfunctions[:, k], phi_true[:, k], weights))
        else:
            bias.append(None)
            ise.append(None)
    return bias, ise


def mean_ise(mean) -> float:
    """Integrated squared error of an estimated mean on its report grid.

    Adjusted means are compared with mu(t, z) over T x Z; unadjusted means
    with the covariate-averaged mean over T.
    """
    tg = mean.t_grid
    wt = trapezoid_weights(tg)
    if mean.z_grid is None:
        return float(wt @ (mean.report_grid - true_marginal_mean(tg)) ** 2)
    zg = mean.z_grid
    err = (mean.report_grid - true_mean(tg[:, None], zg[None, :])) ** 2
    return float(wt @ err @ trapezoid_weights(zg))


def _method_record(fit, truth: SimTruth, criteria, method):
    rec = {
        "ok": True,
        "sigma2": fit.sigma2,
        "mean_ise": mean_ise(fit.mean),
        "bandwidths": fit.bandwidths,
        "criteria": {},
    }
    for c in criteria:
        K = fit.selections[c].K
        rec["criteria"][c] = {
            "K": K,
            "mise": mise(truth.curves, fit.predictions(K), truth.t_grid),
            "msfe": fit.msfe(K),
        }
    model = fit.covariance
    tg = model.t_grid
    w = trapezoid_weights(tg)
    if model.kind == POOLED:
        if method == "mfpca":
            G_true = true_pooled_covariance(tg)
            rec["covariance_ise"] = float(integrate2((model.gamma_grid - G_true) ** 2, tg))
            ref = eigendecompose(G_true, tg)
            bias, ise = _eigen_errors(fit.eigen, ref.eigenvalues[:2], ref.eigenfunctions[:, :2], w)
            rec["eigenvalue_bias"] = bias
            rec["eigenfunction_ise"] = ise
    else:
        slices = {}
        for z in TABLE1_Z:
            G_true = true_covariance(tg, tg, z)
            e = eigendecompose_adjusted(model, z)
            lam = [float(true_eigenvalue(k, z)) for k in (1, 2)]
            phi = np.column_stack([true_eigenfunction(k, tg, z) for k in (1, 2)])
            bias, ise = _eigen_errors(e, lam, phi, w)
            slices[f"{z:g}"] = {
                "covariance_ise": float(integrate2((model.slice_at(z) - G_true) ** 2, tg)),
                "eigenvalue_bias": bias,
                "eigenfunction_ise": ise,
            }
        rec["slices"] = slices
    return rec


def run_once(config: SimConfig, run_index: int, methods: Sequence[str], criteria: Sequence[str], candidates_per_dim: int = 4) -> dict:
    """Generate one replicate and fit every requested method; failures are recorded, not raised."""
    data, truth = generate_dataset(config, run_index)
    fold_seed = int(stream(config.seed, run_index, STREAM_FOLDS).integers(2**63))
    out = {"run": run_index, "methods": {}}
    for method in methods:
        opts = FitOptions(fve_threshold=config.fve_threshold, seed=fold_seed, candidates_per_dim=candidates_per_dim)
        try:
            fit = fit_fpca(data, method, criteria[0], opts)
            out["methods"][method] = _method_record(fit, truth, criteria, method)
        except (CafpcaError, np.linalg.LinAlgError) as exc:
            log.warning("run %d %s failed: %s", run_index, method, exc)
            out["methods"][method] = {"ok": False, "error": f"{type(exc).__name__}: {exc}"}
    return out


def worker_count(runs: int) -> int:
    """Process count: CAFPCA_THREADS if set, else the CPU count, never more than the runs."""
    env = os.environ.get("CAFPCA_THREADS")
    cap = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(cap, runs))


def _stats(values) -> dict:
    v = np.asarray([x for x in values if x is not None], dtype=float)
    if v.size == 0:
        return {"count": 0, "mean": None, "median": None, "sd": None}
    return {
        "count": int(v.size),
        "mean": float(v.mean()),
        "median": float(np.median(v)),
        "sd": float(v.std(ddof=1)) if v.size > 1 else 0.0,
    }


def aggregate(records: Sequence[dict], methods, criteria) -> dict:
    """Table-2 style summaries per (method, criterion) and Table-1 style summaries per z."""
    table2 = {}
    for m in methods:
        ok = [r["methods"][m] for r in records if r["methods"][m]["ok"]]
        failed = len(records) - len(ok)
        for c in criteria:
            mises = np.array([x["criteria"][c]["mise"] for x in ok])
            msfes = [x["criteria"][c]["msfe"] for x in ok]
            ks = [x["criteria"][c]["K"] for x in ok]
            keep = mises <= 10 * np.median(mises) if mises.size else mises.astype(bool)
            table2[f"{m}/{c}"] = {
                "method": m,
                "criterion": c,
                "failed": failed,
                "outliers": int((~keep).sum()),
                "K": _stats(ks),
                "mise": _stats(mises),
                "msfe": _stats(msfes),
                "mise_excluding_outliers": _stats(mises[keep]),
                "msfe_excluding_outliers": _stats(np.asarray(msfes)[keep]),
            }
    extra = {}
    for m in methods:
        ok = [r["methods"][m] for r in records if r["methods"][m]["ok"]]
        extra[m] = {"sigma2": _stats([x["sigma2"] for x in ok]), "mean_ise": _stats([x["mean_ise"] for x in ok])}
        if m == "mfpca":
            extra[m]["covariance_ise"] = _stats([x["covariance_ise"] for x in ok])
            extra[m]["eigenvalue_bias"] = [_stats([x["eigenvalue_bias"][k] for x in ok]) for k in range(2)]
            extra[m]["eigenfunction_ise"] = [_stats([x["eigenfunction_ise"][k] for x in ok]) for k in range(2)]
    table1 = {}
    if "ffpca" in methods:
        ok = [r["methods"]["ffpca"] for r in records if r["methods"]["ffpca"]["ok"]]
        for z in TABLE1_Z:
            key = f"{z:g}"
            rows = [x["slices"][key] for x in ok]
            table1[key] = {
                "covariance_ise": _stats([x["covariance_ise"] for x in rows]),
                "eigenvalue_bias": [_stats([x["eigenvalue_bias"][k] for x in rows]) for k in range(2)],
                "eigenfunction_ise": [_stats([x["eigenfunction_ise"][k] for x in rows]) for k in range(2)],
            }
    return {"table1": table1, "table2": table2, "pooled": extra}


def run_monte_carlo(
    config: SimConfig,
    methods: Sequence[str] = ("ufpca", "mfpca", "ffpca"),
    criteria: Sequence[str] = ("fve", "aic", "bic"),
    candidates_per_dim: int = 4,
    workers: Optional[int] = None,
) -> dict:
    """Run ``config.runs`` replicates and aggregate them into a JSON-ready report."""
    methods = tuple(methods)
    criteria = tuple(criteria)
    if not methods or any(m not in METHODS for m in methods):
        raise ValueError(f"methods must be a nonempty subset of {METHODS}")
    if not criteria or any(c not in CRITERIA for c in criteria):
        raise ValueError(f"criteria must be a nonempty subset of {CRITERIA}")
    workers = worker_count(config.runs) if workers is None else max(1, min(workers, config.runs))
    args = [(config, r, methods, criteria, candidates_per_dim) for r in range(config.runs)]
    if workers == 1:
        records = [run_once(*a) for a in args]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(run_once, *zip(*args)))
    records.sort(key=lambda r: r["run"])
    report = {
        "schema_version": SCHEMA_VERSION,
        "config": asdict(config),
        "methods": list(methods),
        "criteria": list(criteria),
        "candidates_per_dim": candidates_per_dim,
        "runs": records,
    }
    report.update(aggregate(records, methods, criteria))
    return report


def _cell(x):
    return "" if x is None else format(x, ".10g") if isinstance(x, float) else str(x)


def table1_rows(report: dict):
    yield ["z", "gamma_ise_mean", "gamma_ise_sd", "lambda1_bias", "lambda1_sd", "lambda2_bias", "lambda2_sd", "phi1_ise", "phi2_ise"]
    for z, row in report["table1"].items():
        lb, fi = row["eigenvalue_bias"], row["eigenfunction_ise"]
        yield [z, row["covariance_ise"]["mean"], row["covariance_ise"]["sd"], lb[0]["mean"], lb[0]["sd"], lb[1]["mean"], lb[1]["sd"], fi[0]["mean"], fi[1]["mean"]]


def table2_rows(report: dict):
    yield ["method", "criterion", "K_mean", "mise_mean", "mise_median", "mise_sd", "msfe_mean", "msfe_sd", "mise_mean_excluding_outliers", "outliers", "failed"]
    for row in report["table2"].values():
        yield [
            row["method"], row["criterion"], row["K"]["mean"], row["mise"]["mean"], row["mise"]["median"], row["mise"]["sd"],
            row["msfe"]["mean"], row["msfe"]["sd"], row["mise_excluding_outliers"]["mean"], row["outliers"], row["failed"],
        ]


def write_tables(report: dict, out_dir) -> list:
    """Write table1.csv (per-z fFPCA errors) and table2.csv (MISE/MSFE per method and criterion)."""
    out = Path(out_dir)
    paths = []
    for name, rows in (("table1.csv", table1_rows(report)), ("table2.csv", table2_rows(report))):
        p = out / name
        with p.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for row in rows:
                w.writerow([_cell(x) for x in row])
        paths.append(p)
    return paths
