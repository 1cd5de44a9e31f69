"""Command-line entry point: ``cafpca {simulate,fit,predict,report}``.

Every failure exits nonzero with one line on stderr of the form
``error: <ErrorType>: <message>``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import CsvSchema, fmt, load_csv, summary, write_csv
from .eigen import CRITERIA, FVE, eigendecompose_adjusted
from .errors import CafpcaError
from .pipeline import FFPCA, METHODS, MFPCA, FitOptions, fit_fpca
from .scores import blup_scores, predict_trajectory
from .simulation import SCHEMA_VERSION, SimConfig, generate_dataset, run_monte_carlo, write_tables

log = logging.getLogger("cafpca")


def _floats(text: str, lo: int, hi: int, name: str) -> tuple:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"{name}: expected comma-separated numbers, got {text!r}") from None
    if not lo <= len(vals) <= hi:
        raise argparse.ArgumentTypeError(f"{name}: expected {lo}..{hi} values, got {len(vals)}")
    if any(not np.isfinite(v) or v <= 0 for v in vals):
        raise argparse.ArgumentTypeError(f"{name}: values must be positive")
    return vals


def _interval(text: str) -> tuple:
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lo,hi, got {text!r}") from None
    return lo, hi


def _choices(text: str, allowed, name):
    if text == "all":
        return tuple(allowed)
    if text == "none":
        return ()
    items = tuple(v.strip().lower() for v in text.split(",") if v.strip())
    bad = [v for v in items if v not in allowed]
    if bad:
        raise argparse.ArgumentTypeError(f"{name}: unknown {bad}; choose from {list(allowed)} or 'all'")
    return items


def _write_rows(path: Path, header, rows):
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(["" if v is None else fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _options(args) -> FitOptions:
    opts = FitOptions(fve_threshold=args.fve_threshold, folds=args.folds, seed=args.seed)
    opts.bw_mean = args.bw_mean
    opts.bw_cov = args.bw_cov
    if args.grid:
        opts.t_grid_points = int(args.grid[0])
        if len(args.grid) > 1:
            opts.z_grid_points = int(args.grid[1])
    return opts


def _load(path, args) -> "LongitudinalDataset":  # noqa: F821
    return load_csv(path, CsvSchema(time_domain=args.time_domain, covariate_domain=args.covariate_domain))


def _eigen_rows(fit):
    if fit.method == FFPCA:
        model = fit.covariance
        for z in model.z_grid:
            e = eigendecompose_adjusted(model, float(z))
            for k in range(e.n_components):
                for t, v in zip(e.t_grid, e.eigenfunctions[:, k]):
                    yield k + 1, float(t), float(z), float(v)
    else:
        e = fit.eigen
        for k in range(e.n_components):
            for t, v in zip(e.t_grid, e.eigenfunctions[:, k]):
                yield k + 1, float(t), None, float(v)


def fit_report(fit) -> dict:
    rep = {
        "schema_version": SCHEMA_VERSION,
        "method": fit.method,
        "criterion": fit.criterion,
        "K": fit.K,
        "K_by_criterion": {c: s.K for c, s in fit.selections.items()},
        "sigma2": fit.sigma2,
        "eigenvalues": [float(v) for v in fit.eigenvalues()],
        "msfe": fit.msfe(),
        "bandwidths": fit.bandwidths,
        "data": summary(fit.data).as_dict(),
    }
    sel = fit.selections[FVE]
    rep["fve_threshold"] = sel.threshold
    if fit.method == FFPCA:
        model = fit.covariance
        rep["eigenvalues_by_z"] = [
            {"z": float(z), "eigenvalues": [float(v) for v in eigendecompose_adjusted(model, float(z)).eigenvalues]}
            for z in model.z_grid
        ]
        rep["eigenvalues_at"] = float(np.median(fit.data.covariates))
    return rep


def _write_predictions(path, fit, subjects, predictions):
    rows = (
        (s.id, s.covariate, float(t), float(v))
        for s, pred in zip(subjects, predictions)
        for t, v in zip(fit.t_grid, pred)
    )
    _write_rows(path, ["subject_id", "covariate", "time", "prediction"], rows)


def _write_scores(path, K, subjects, scores):
    _write_rows(
        path,
        ["subject_id", "covariate"] + [f"score_{k + 1}" for k in range(K)],
        ([s.id, s.covariate] + [float(v) for v in a[:K]] for s, a in zip(subjects, scores)),
    )


def cmd_fit(args) -> int:
    data = _load(args.input, args)
    fit = fit_fpca(data, args.method, args.criterion, _options(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", fit_report(fit))
    _write_rows(out / "mean_grid.csv", ["t", "z", "mu_hat"], fit.mean.grid_rows())
    _write_rows(out / "gamma_grid.csv", ["t", "s", "z", "gamma"], fit.covariance.grid_rows())
    _write_rows(out / "eigenfunctions.csv", ["component", "t", "z", "phi"], _eigen_rows(fit))
    _write_scores(out / "scores.csv", fit.K, data.subjects, fit.scores)
    _write_predictions(out / "predictions.csv", fit, data.subjects, fit.predictions())
    return 0


def cmd_predict(args) -> int:
    train = _load(args.train or args.input, args)
    fit = fit_fpca(train, args.method, args.criterion, _options(args))
    new = _load(args.input, args) if args.train else train
    K = fit.K
    preds, scores = [], []
    for s in new.subjects:
        if fit.method == FFPCA:
            e = eigendecompose_adjusted(fit.covariance, s.covariate)
            if e.n_components < K:
                raise CafpcaError(f"subject {s.id!r}: only {e.n_components} components at z={s.covariate}")
        else:
            e = fit.eigen
        z = None if fit.method not in (MFPCA, FFPCA) else s.covariate
        mu_obs = fit.mean.evaluate(s.times, z)
        mu_grid = fit.mean.evaluate(fit.t_grid, z)
        a = blup_scores(s.times, s.values, mu_obs, e, fit.sigma2, K)
        scores.append(a)
        preds.append(predict_trajectory(mu_grid, e, a, K, fit.t_grid))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_scores(out / "scores.csv", K, new.subjects, scores)
    _write_predictions(out / "predictions.csv", fit, new.subjects, preds)
    return 0


def cmd_simulate(args) -> int:
    config = SimConfig(
        n=args.n, runs=args.runs, seed=args.seed, noise_sd=args.noise_sd,
        fve_threshold=args.fve_threshold, fixed_design=args.fixed_design,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data, truth = generate_dataset(config, 0)
    write_csv(data, out / "dataset.csv")
    _write_rows(
        out / "truth.csv",
        ["subject_id", "covariate", "time", "true_value"],
        ((s.id, s.covariate, float(t), float(v)) for s, curve in zip(data.subjects, truth.curves) for t, v in zip(truth.t_grid, curve)),
    )
    _write_rows(
        out / "truth_scores.csv",
        ["subject_id", "covariate", "score_1", "score_2"],
        ((s.id, s.covariate, float(a[0]), float(a[1])) for s, a in zip(data.subjects, truth.scores)),
    )
    if args.methods:
        report = run_monte_carlo(config, args.methods, args.criteria or CRITERIA, workers=args.workers)
        _write_json(out / "mc_report.json", report)
        write_tables(report, out)
    return 0


def cmd_report(args) -> int:
    path = Path(args.path)
    if path.is_dir():
        path = path / ("mc_report.json" if (path / "mc_report.json").exists() else "report.json")
    rep = json.loads(path.read_text(encoding="utf-8"))
    if "table2" in rep:
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            write_tables(rep, args.out)
        print(f"{'method':8} {'crit':5} {'K':>6} {'MISE':>10} {'MSFE':>10} {'out':>4} {'fail':>4}")
        for row in rep["table2"].values():
            print(
                f"{row['method']:8} {row['criterion']:5} {_num(row['K']['mean']):>6} "
                f"{_num(row['mise']['mean']):>10} {_num(row['msfe']['mean']):>10} {row['outliers']:>4} {row['failed']:>4}"
            )
        for z, row in rep["table1"].items():
            print(f"z={z}: Gamma ISE {_num(row['covariance_ise']['mean'])}, lambda1 bias {_num(row['eigenvalue_bias'][0]['mean'])}")
    else:
        print(f"method {rep['method']}  criterion {rep['criterion']}  K {rep['K']}")
        print(f"sigma2 {rep['sigma2']:.6g}  MSFE {rep['msfe']:.6g}")
        print("eigenvalues " + " ".join(f"{v:.6g}" for v in rep["eigenvalues"][: max(rep["K"], 5)]))
    return 0


def _num(x):
    return "-" if x is None else f"{x:.4g}"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cafpca", description="Covariate-adjusted FPCA for sparse longitudinal data.")
    p.add_argument("--version", action="version", version=f"cafpca {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common_fit(sp):
        sp.add_argument("--method", choices=METHODS, default=MFPCA)
        sp.add_argument("--criterion", choices=CRITERIA, default="bic")
        sp.add_argument("--fve-threshold", type=float, default=0.80)
        sp.add_argument("--seed", type=int, default=0, help="seed for the covariance CV folds")
        sp.add_argument("--bw-mean", type=lambda s: _floats(s, 1, 2, "--bw-mean"), help="t[,z]")
        sp.add_argument("--bw-cov", type=lambda s: _floats(s, 1, 2, "--bw-cov"), help="t[,z]")
        sp.add_argument("--grid", type=lambda s: _floats(s, 1, 2, "--grid"), help="covariance grid points t[,z]")
        sp.add_argument("--folds", type=int, default=10)
        sp.add_argument("--time-domain", type=_interval, help="lo,hi (default: observed range)")
        sp.add_argument("--covariate-domain", type=_interval, help="lo,hi (default: observed range)")
        sp.add_argument("--out", default=".", help="output directory")

    f = sub.add_parser("fit", help="fit one method to a CSV and write the report and grids")
    f.add_argument("input")
    common_fit(f)
    f.set_defaults(func=cmd_fit)

    pr = sub.add_parser("predict", help="scores and predicted trajectories for the subjects of a CSV")
    pr.add_argument("input")
    pr.add_argument("--train", help="CSV to fit on (default: the input itself)")
    common_fit(pr)
    pr.set_defaults(func=cmd_predict)

    s = sub.add_parser("simulate", help="generate simulated data and run the Monte-Carlo study")
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--runs", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise-sd", type=float, default=0.05)
    s.add_argument("--fve-threshold", type=float, default=0.80)
    s.add_argument("--fixed-design", action="store_true", help="reuse one jittered grid for every run")
    s.add_argument("--methods", type=lambda v: _choices(v, METHODS, "--methods"), default=tuple(METHODS), help="comma list, 'all' or 'none'")
    s.add_argument("--criteria", type=lambda v: _choices(v, CRITERIA, "--criteria"), default=tuple(CRITERIA), help="comma list or 'all'")
    s.add_argument("--workers", type=int, help="process count (default: CAFPCA_THREADS or CPU count)")
    s.add_argument("--out", default=".", help="output directory")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("report", help="summarize a report.json / mc_report.json")
    r.add_argument("path", help="report file or output directory")
    r.add_argument("--out", help="also write table1.csv/table2.csv here (Monte-Carlo reports)")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CafpcaError, ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
