"""Sparse longitudinal data with one scalar covariate per subject.

CSV layout is ``subject_id,covariate,time,value`` (header required, UTF-8).
Column names can be remapped through :class:`CsvSchema`.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Hashable, Iterable, Optional, Sequence

import numpy as np

from .errors import DomainError, EmptyInputError, IntegrityError, ParseError

__all__ = [
    "CsvSchema",
    "DatasetSummary",
    "LongitudinalDataset",
    "Subject",
    "load_csv",
    "summary",
    "write_csv",
]


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Subject:
    """One subject: an opaque id, a covariate value and its observations.

    Observations are stored as two parallel arrays sorted by time.
    """

    id: Hashable
    covariate: float
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).ravel()
        values = np.asarray(self.values, dtype=float).ravel()
        if times.size == 0:
            raise IntegrityError(f"subject {self.id!r} has no observations")
        if times.shape != values.shape:
            raise IntegrityError(f"subject {self.id!r}: times and values differ in length")
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(values))):
            raise IntegrityError(f"subject {self.id!r}: non-finite observation")
        if not math.isfinite(self.covariate):
            raise IntegrityError(f"subject {self.id!r}: non-finite covariate")
        order = np.argsort(times, kind="stable")
        object.__setattr__(self, "covariate", float(self.covariate))
        object.__setattr__(self, "times", _frozen(times[order]))
        object.__setattr__(self, "values", _frozen(values[order]))

    @property
    def n_obs(self) -> int:
        return int(self.times.size)

    def __eq__(self, other):
        if not isinstance(other, Subject):
            return NotImplemented
        return (
            self.id == other.id
            and self.covariate == other.covariate
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.values, other.values)
        )

    def __hash__(self):
        return hash((self.id, self.covariate, self.times.tobytes(), self.values.tobytes()))


@dataclass(frozen=True, eq=False)
class LongitudinalDataset:
    subjects: tuple
    time_domain: tuple
    covariate_domain: tuple

    def __post_init__(self):
        subjects = tuple(self.subjects)
        object.__setattr__(self, "subjects", subjects)
        if len(subjects) < 2:
            raise IntegrityError("a dataset needs at least 2 subjects")
        t_lo, t_hi = map(float, self.time_domain)
        z_lo, z_hi = map(float, self.covariate_domain)
        if not t_lo < t_hi:
            raise DomainError(f"empty time domain [{t_lo}, {t_hi}]")
        if not z_lo < z_hi:
            raise DomainError(
                f"empty covariate domain [{z_lo}, {z_hi}]; pass explicit bounds"
            )
        object.__setattr__(self, "time_domain", (t_lo, t_hi))
        object.__setattr__(self, "covariate_domain", (z_lo, z_hi))
        ids = [s.id for s in subjects]
        if len(set(ids)) != len(ids):
            raise IntegrityError("duplicate subject ids")
        for s in subjects:
            if s.times[0] < t_lo or s.times[-1] > t_hi:
                raise DomainError(f"subject {s.id!r} has times outside {self.time_domain}")
            if not z_lo <= s.covariate <= z_hi:
                raise DomainError(
                    f"subject {s.id!r} covariate {s.covariate} outside {self.covariate_domain}"
                )

    @classmethod
    def from_arrays(
        cls,
        times: Sequence[Sequence[float]],
        values: Sequence[Sequence[float]],
        covariates: Sequence[float],
        ids: Optional[Sequence[Hashable]] = None,
        time_domain=None,
        covariate_domain=None,
    ) -> "LongitudinalDataset":
        if ids is None:
            ids = list(range(len(covariates)))
        subjects = tuple(
            Subject(i, float(z), np.asarray(t, float), np.asarray(y, float))
            for i, z, t, y in zip(ids, covariates, times, values)
        )
        if time_domain is None:
            time_domain = (min(s.times[0] for s in subjects), max(s.times[-1] for s in subjects))
        if covariate_domain is None:
            zs = [s.covariate for s in subjects]
            covariate_domain = (min(zs), max(zs))
        return cls(subjects, time_domain, covariate_domain)

    @property
    def n(self) -> int:
        return len(self.subjects)

    @cached_property
    def counts(self) -> np.ndarray:
        return np.array([s.n_obs for s in self.subjects], dtype=int)

    @cached_property
    def covariates(self) -> np.ndarray:
        return _frozen([s.covariate for s in self.subjects])

    @cached_property
    def stacked(self):
        """Flat view ``(subject_index, t, z, y)`` over all observations."""
        idx = np.repeat(np.arange(self.n), self.counts)
        t = np.concatenate([s.times for s in self.subjects])
        y = np.concatenate([s.values for s in self.subjects])
        z = self.covariates[idx]
        for arr in (idx, t, y, z):
            arr.setflags(write=False)
        return idx, t, z, y

    @property
    def total_obs(self) -> int:
        return int(self.counts.sum())

    def with_covariates(self, covariates: Iterable[float]) -> "LongitudinalDataset":
        subjects = tuple(
            Subject(s.id, float(z), s.times, s.values) for s, z in zip(self.subjects, covariates)
        )
        return LongitudinalDataset(subjects, self.time_domain, self.covariate_domain)

    def __eq__(self, other):
        if not isinstance(other, LongitudinalDataset):
            return NotImplemented
        return (
            self.subjects == other.subjects
            and self.time_domain == other.time_domain
            and self.covariate_domain == other.covariate_domain
        )

    __hash__ = None


@dataclass(frozen=True)
class CsvSchema:
    subject_id: str = "subject_id"
    covariate: str = "covariate"
    time: str = "time"
    value: str = "value"
    time_domain: Optional[tuple] = None
    covariate_domain: Optional[tuple] = None


def _to_float(text, column, row):
    try:
        x = float(text)
    except (TypeError, ValueError):
        raise ParseError(f"non-numeric {column} {text!r}", row=row) from None
    if not math.isfinite(x):
        raise ParseError(f"non-finite {column} {text!r}", row=row)
    return x


def load_csv(path, schema: CsvSchema = CsvSchema()) -> LongitudinalDataset:
    """Read a long-format CSV into a dataset, grouped by subject in order of first appearance.

    Row numbers in errors count the header as row 1.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise EmptyInputError(f"{path}: empty file")
        columns = (schema.subject_id, schema.covariate, schema.time, schema.value)
        missing = [c for c in columns if c not in reader.fieldnames]
        if missing:
            raise ParseError(f"missing column(s) {missing} in header", row=1)
        groups: dict = {}
        for row_no, row in enumerate(reader, start=2):
            sid = row.get(schema.subject_id)
            if sid is None or sid == "":
                raise ParseError("missing subject_id", row=row_no)
            z = _to_float(row.get(schema.covariate), "covariate", row_no)
            t = _to_float(row.get(schema.time), "time", row_no)
            y = _to_float(row.get(schema.value), "value", row_no)
            g = groups.get(sid)
            if g is None:
                groups[sid] = g = [z, [], []]
            elif g[0] != z:
                raise IntegrityError(
                    f"row {row_no}: subject {sid!r} covariate {z!r} conflicts with {g[0]!r}"
                )
            g[1].append(t)
            g[2].append(y)
    if not groups:
        raise EmptyInputError(f"{path}: no data rows")
    ids = list(groups)
    return LongitudinalDataset.from_arrays(
        [groups[i][1] for i in ids],
        [groups[i][2] for i in ids],
        [groups[i][0] for i in ids],
        ids=ids,
        time_domain=schema.time_domain,
        covariate_domain=schema.covariate_domain,
    )


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_csv(data: LongitudinalDataset, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "covariate", "time", "value"])
        for s in data.subjects:
            for t, y in zip(s.times, s.values):
                w.writerow([s.id, fmt(s.covariate), fmt(t), fmt(y)])


@dataclass(frozen=True)
class DatasetSummary:
    n: int
    total_obs: int
    min_obs: int
    mean_obs: float
    max_obs: int
    time_domain: tuple
    covariate_domain: tuple

    def as_dict(self) -> dict:
        return {
            "n": self.n,
            "total_obs": self.total_obs,
            "min_obs": self.min_obs,
            "mean_obs": self.mean_obs,
            "max_obs": self.max_obs,
            "time_domain": list(self.time_domain),
            "covariate_domain": list(self.covariate_domain),
        }


def summary(data: LongitudinalDataset) -> DatasetSummary:
    c = data.counts
    return DatasetSummary(
        n=data.n,
        total_obs=int(c.sum()),
        min_obs=int(c.min()),
        mean_obs=float(c.mean()),
        max_obs=int(c.max()),
        time_domain=data.time_domain,
        covariate_domain=data.covariate_domain,
    )
