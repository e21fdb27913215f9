"""Individual patient data: schema, records, validation, CSV round-trip.

The on-disk format is UTF-8 CSV with a header row and columns
``study,treat,outcome,<cov1>,<cov2>,...``. ``treat`` and ``outcome`` are
binary; everything after the three reserved columns is a numeric covariate.
Study identifiers are arbitrary strings, mapped internally to a dense index
in first-appearance order; reports always show the original labels.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .errors import (
    EmptyDataset,
    MissingColumn,
    NonBinaryValue,
    NonNumericCovariate,
    SingleArmStudy,
    UnknownStudy,
)

RESERVED = ("study", "treat", "outcome")


@dataclass(frozen=True)
class CovariateSchema:
    names: tuple
    kinds: tuple  # "continuous" | "binary", parallel to names

    def __post_init__(self):
        if len(self.names) == 0:
            raise ValueError("schema needs at least one covariate")
        if len(set(self.names)) != len(self.names):
            raise ValueError("covariate names must be unique")
        if any(not n for n in self.names):
            raise ValueError("covariate names must be non-empty")
        if len(self.kinds) != len(self.names):
            raise ValueError("kinds must parallel names")
        for k in self.kinds:
            if k not in ("continuous", "binary"):
                raise ValueError(f"unknown covariate kind {k!r}")

    @classmethod
    def infer(cls, names: Sequence[str], columns: np.ndarray) -> "CovariateSchema":
        kinds = []
        for idx in range(columns.shape[1]):
            vals = np.unique(columns[:, idx])
            kinds.append("binary" if np.all(np.isin(vals, (0.0, 1.0))) else "continuous")
        return cls(tuple(names), tuple(kinds))


@dataclass(frozen=True)
class IpdRecord:
    study: str
    treat: int
    outcome: int
    covariates: tuple

    def __post_init__(self):
        if self.treat not in (0, 1):
            raise NonBinaryValue(f"treat must be 0/1, got {self.treat!r}")
        if self.outcome not in (0, 1):
            raise NonBinaryValue(f"outcome must be 0/1, got {self.outcome!r}")


class IpdDataset:
    """Immutable K-trial dataset backed by numpy arrays.

    `study_idx` is the dense 0-based index aligned with `study_labels`;
    `cov` is the n x d covariate matrix in schema order.
    """

    def __init__(self, schema: CovariateSchema, study_labels: Sequence[str],
                 study_idx: np.ndarray, treat: np.ndarray, outcome: np.ndarray,
                 cov: np.ndarray):
        self.schema = schema
        self.study_labels = tuple(str(s) for s in study_labels)
        self.study_idx = np.asarray(study_idx, dtype=np.intp)
        self.treat = np.asarray(treat, dtype=np.int8)
        self.outcome = np.asarray(outcome, dtype=np.int8)
        self.cov = np.asarray(cov, dtype=float)
        self._validate()
        for a in (self.study_idx, self.treat, self.outcome, self.cov):
            a.setflags(write=False)

    def _validate(self):
        n = len(self.study_idx)
        if n == 0:
            raise EmptyDataset("dataset has no records")
        if self.cov.shape != (n, len(self.schema.names)):
            raise NonNumericCovariate("covariate matrix shape does not match schema")
        if not np.all(np.isfinite(self.cov)):
            raise NonNumericCovariate("covariates contain non-finite values")
        if len(self.treat) != n or len(self.outcome) != n:
            raise EmptyDataset("column lengths differ")
        if not np.all((self.treat == 0) | (self.treat == 1)):
            raise NonBinaryValue("treat outside {0,1}")
        if not np.all((self.outcome == 0) | (self.outcome == 1)):
            raise NonBinaryValue("outcome outside {0,1}")
        if len(set(self.study_labels)) != len(self.study_labels):
            raise ValueError("duplicate study labels")
        for idx, label in enumerate(self.study_labels):
            m = self.study_idx == idx
            if not m.any():
                raise EmptyDataset(f"study {label!r} has no records")
            if not (self.treat[m] == 1).any() or not (self.treat[m] == 0).any():
                raise SingleArmStudy(f"study {label!r} lacks one of the two arms")

    # --- constructors ---

    @classmethod
    def from_records(cls, schema: CovariateSchema, records: Iterable[IpdRecord]) -> "IpdDataset":
        records = list(records)
        if not records:
            raise EmptyDataset("no records")
        labels: list[str] = []
        idx = []
        for r in records:
            if r.study not in labels:
                labels.append(r.study)
            idx.append(labels.index(r.study))
            if len(r.covariates) != len(schema.names):
                raise NonNumericCovariate(
                    f"record has {len(r.covariates)} covariates, schema has {len(schema.names)}")
        cov = np.array([r.covariates for r in records], dtype=float)
        return cls(schema, labels, np.array(idx), np.array([r.treat for r in records]),
                   np.array([r.outcome for r in records]), cov)

    @classmethod
    def from_arrays(cls, cov_names: Sequence[str], study_labels: Sequence[str],
                    study_idx, treat, outcome, cov) -> "IpdDataset":
        cov = np.asarray(cov, dtype=float)
        schema = CovariateSchema.infer(cov_names, cov)
        return cls(schema, study_labels, study_idx, treat, outcome, cov)

    # --- views ---

    @property
    def n(self) -> int:
        return len(self.study_idx)

    @property
    def studies(self) -> tuple:
        return self.study_labels

    @property
    def K(self) -> int:
        return len(self.study_labels)

    @property
    def records(self) -> list:
        return [IpdRecord(self.study_labels[self.study_idx[i]], int(self.treat[i]),
                          int(self.outcome[i]), tuple(self.cov[i]))
                for i in range(self.n)]

    def study_number(self, study: str) -> int:
        try:
            return self.study_labels.index(str(study))
        except ValueError:
            raise UnknownStudy(f"unknown study {study!r}; have {list(self.study_labels)}") from None

    def mask(self, study) -> np.ndarray:
        return self.study_idx == self.study_number(study)

    def covariate_columns(self) -> dict:
        return {name: self.cov[:, i] for i, name in enumerate(self.schema.names)}

    def subset(self, row_mask: np.ndarray) -> "IpdDataset":
        """Row subset keeping the full study label set (used by resampling)."""
        return IpdDataset(self.schema, self.study_labels, self.study_idx[row_mask],
                          self.treat[row_mask], self.outcome[row_mask], self.cov[row_mask])


def arm_counts(ds: IpdDataset, k) -> tuple:
    """(n_treated, n_control) in study k; their ratio is the randomization ratio."""
    m = ds.mask(k)
    n_t = int(np.sum(ds.treat[m] == 1))
    return n_t, int(m.sum() - n_t)


def _open_text(source, mode="r"):
    if isinstance(source, (str, os.PathLike)):
        return open(source, mode, encoding="utf-8", newline=""), True
    if isinstance(source, bytes):
        return io.StringIO(source.decode("utf-8")), False
    if isinstance(source, io.TextIOBase):
        return source, False
    # binary file-like
    return io.TextIOWrapper(source, encoding="utf-8", newline=""), False


def load_ipd(source, schema: Optional[CovariateSchema] = None) -> IpdDataset:
    """Read an IPD CSV (path, bytes, or open stream) into a validated dataset."""
    stream, should_close = _open_text(source)
    try:
        reader = csv.reader(stream)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyDataset("CSV has no header row") from None
        header = [h.strip() for h in header]
        for col in RESERVED:
            if col not in header:
                raise MissingColumn(f"required column {col!r} missing from header")
        cov_names = [h for h in header if h not in RESERVED]
        if not cov_names:
            raise MissingColumn("no covariate columns after study/treat/outcome")
        if schema is not None and tuple(cov_names) != tuple(schema.names):
            raise MissingColumn(
                f"covariate columns {cov_names} do not match schema {list(schema.names)}")
        pos = {h: i for i, h in enumerate(header)}

        labels: list[str] = []
        idx, treat, outcome, rows = [], [], [], []
        for ln, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise MissingColumn(f"line {ln}: expected {len(header)} fields, got {len(row)}")
            s = row[pos["study"]].strip()
            if s not in labels:
                labels.append(s)
            idx.append(labels.index(s))
            treat.append(_binary(row[pos["treat"]], "treat", ln))
            outcome.append(_binary(row[pos["outcome"]], "outcome", ln))
            try:
                rows.append([float(row[pos[c]]) for c in cov_names])
            except ValueError:
                raise NonNumericCovariate(f"line {ln}: non-numeric covariate value") from None
        if not rows:
            raise EmptyDataset("CSV has a header but no data rows")
        cov = np.array(rows, dtype=float)
        if schema is None:
            schema = CovariateSchema.infer(cov_names, cov)
        return IpdDataset(schema, labels, np.array(idx), np.array(treat),
                          np.array(outcome), cov)
    finally:
        if should_close:
            stream.close()


def _binary(raw: str, what: str, ln: int) -> int:
    try:
        v = float(raw)
    except ValueError:
        raise NonBinaryValue(f"line {ln}: {what} value {raw!r} is not numeric") from None
    if v not in (0.0, 1.0):
        raise NonBinaryValue(f"line {ln}: {what} must be 0 or 1, got {raw!r}")
    return int(v)


def save_ipd(ds: IpdDataset, target) -> None:
    """Write the dataset as CSV. `repr` float formatting makes the
    save -> load round trip bit-identical."""
    stream, should_close = _open_text(target, mode="w")
    try:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(list(RESERVED) + list(ds.schema.names))
        for i in range(ds.n):
            writer.writerow(
                [ds.study_labels[ds.study_idx[i]], int(ds.treat[i]), int(ds.outcome[i])]
                + [repr(float(v)) for v in ds.cov[i]])
    finally:
        if should_close:
            stream.close()
