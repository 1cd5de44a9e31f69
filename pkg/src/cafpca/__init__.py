"""Covariate-adjusted functional principal component analysis for sparse longitudinal data."""

from .dataset import CsvSchema, LongitudinalDataset, Subject, load_csv, summary, write_csv
from .errors import CafpcaError
from .pipeline import FFPCA, MFPCA, UFPCA, FitOptions, FpcaFit, fit_fpca
from .simulation import SimConfig, generate_dataset, run_monte_carlo

__version__ = "0.1.0"

__all__ = [
    "CafpcaError",
    "CsvSchema",
    "FFPCA",
    "FitOptions",
    "FpcaFit",
    "LongitudinalDataset",
    "MFPCA",
    "SimConfig",
    "Subject",
    "UFPCA",
    "fit_fpca",
    "generate_dataset",
    "load_csv",
    "run_monte_carlo",
    "summary",
    "write_csv",
]
