"""Dataset ingestion with unit-typed columns, splitting, and export.

A dataset is columnar: float64 feature columns (NaN marks missing values),
an integer class-label column, and a unit type per feature so the grammar
can bind terminals to the right columns. The typed-header CSV convention is
`name:TYPE` with exactly one column typed `CLASS`; upstream files with plain
headers are described by a JSON schema sidecar instead.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Malformed dataset file or schema."""


@dataclass(frozen=True)
class Schema:
    """Typed column list, label column, and accepted missing-value tokens."""

    columns: tuple[tuple[str, str], ...]  # (name, unit type) per feature
    label: str
    missing_values: tuple[str, ...] = ("",)
    label_map: dict[str, int] | None = None

    def feature_items(self):
        return self.columns

    @property
    def feature_names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.columns)


def load_schema(path) -> Schema:
    doc = json.loads(Path(path).read_text())
    cols = tuple((c["name"], c["type"]) for c in doc["columns"])
    return Schema(
        columns=cols,
        label=doc["label"],
        missing_values=tuple(str(v) for v in doc.get("missing_values", [""])),
        label_map={str(k): int(v) for k, v in doc["label_map"].items()} if "label_map" in doc else None,
    )


@dataclass
class Dataset:
    """Columnar dataset: features, unit types, and integer class labels."""

    feature_names: list[str]
    feature_types: list[str]
    X: np.ndarray  # (row_count, n_features) float64, NaN = missing
    y: np.ndarray  # (row_count,) int64
    label_name: str = "label"

    def __post_init__(self):
        self._index = {n: i for i, n in enumerate(self.feature_names)}

    @property
    def row_count(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.y.max()) + 1 if self.y.size else 0

    def column(self, name: str) -> np.ndarray:
        return self.X[:, self._index[name]]

    def schema(self) -> Schema:
        return Schema(columns=tuple(zip(self.feature_names, self.feature_types)), label=self.label_name)

    def take(self, idx: np.ndarray) -> "Dataset":
        return Dataset(
            list(self.feature_names), list(self.feature_types), self.X[idx], self.y[idx], self.label_name
        )

    def with_columns(self, names, types, columns) -> "Dataset":
        """New dataset with extra columns appended; originals are untouched."""
        extra = np.column_stack([np.asarray(c, dtype=np.float64) for c in columns])
        return Dataset(
            self.feature_names + list(names),
            self.feature_types + list(types),
            np.hstack([self.X, extra]),
            self.y,
            self.label_name,
        )

    def missing_counts(self) -> dict[str, int]:
        return {n: int(np.isnan(self.column(n)).sum()) for n in self.feature_names}


@dataclass(frozen=True)
class SplitSpec:
    """Train/test split settings."""

    train_fraction: float = 2.0 / 3.0
    stratified: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")


def _parse_cell(text: str, missing: tuple[str, ...], row: int, col: str) -> float:
    if text in missing:
        return math.nan
    try:
        v = float(text)
    except ValueError:
        raise DataError(f"non-numeric cell {text!r} at row {row}, column {col!r}") from None
    if math.isnan(v):
        raise DataError(
            f"literal NaN at row {row}, column {col!r}: declare it via missing_values instead"
        )
    return v


def _parse_label(text: str, label_map: dict[str, int] | None, row: int, col: str) -> int:
    if label_map is not None:
        if text not in label_map:
            raise DataError(f"label {text!r} at row {row} not in label_map")
        return label_map[text]
    try:
        v = float(text)
    except ValueError:
        raise DataError(f"non-numeric label {text!r} at row {row}, column {col!r}") from None
    if v != int(v):
        raise DataError(f"non-integer label {text!r} at row {row}")
    return int(v)


def _finish(names, types, label_name, feat_rows, label_vals) -> Dataset:
    if not feat_rows:
        raise DataError("dataset has zero rows")
    X = np.array(feat_rows, dtype=np.float64)
    y = np.array(label_vals, dtype=np.int64)
    classes = np.unique(y)
    if classes.size < 2:
        raise DataError("need at least two classes")
    if classes.min() < 0 or classes.max() != classes.size - 1:
        raise DataError(f"labels must be 0..C-1, got {classes.tolist()}")
    return Dataset(list(names), list(types), X, y, label_name)


def load_csv(path, missing_token: str = "") -> Dataset:
    """Load a typed-header CSV: columns `name:TYPE`, exactly one `name:CLASS`."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("empty file") from None
        names, types = [], []
        label_idx = None
        label_name = "label"
        for i, tok in enumerate(header):
            if ":" not in tok:
                raise DataError(f"malformed header token {tok!r}: expected name:TYPE")
            name, type_name = tok.rsplit(":", 1)
            if type_name == "CLASS":
                if label_idx is not None:
                    raise DataError("more than one CLASS column")
                label_idx, label_name = i, name
            else:
                names.append(name)
                types.append(type_name)
        if label_idx is None:
            raise DataError("no CLASS column in header")

        missing = (missing_token,)
        feat_rows, labels = [], []
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"row {row_no} has {len(row)} cells, expected {len(header)}")
            vals = []
            for i, cell in enumerate(row):
                if i == label_idx:
                    labels.append(_parse_label(cell.strip(), None, row_no, label_name))
                else:
                    vals.append(_parse_cell(cell.strip(), missing, row_no, header[i]))
            feat_rows.append(vals)
    return _finish(names, types, label_name, feat_rows, labels)


def load_csv_with_schema(path, schema: Schema) -> Dataset:
    """Load a plain-header CSV through a schema sidecar.

    Only the schema's columns are read (extras in the file are ignored), cell
    values matching any schema missing token become missing, and string labels
    go through the schema's label_map.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError("empty file") from None
        positions = {}
        for name, _ in schema.columns:
            if name not in header:
                raise DataError(f"schema column {name!r} not found in CSV header")
            positions[name] = header.index(name)
        if schema.label not in header:
            raise DataError(f"label column {schema.label!r} not found in CSV header")
        label_pos = header.index(schema.label)

        names = [n for n, _ in schema.columns]
        types = [t for _, t in schema.columns]
        feat_rows, labels = [], []
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            labels.append(_parse_label(row[label_pos].strip(), schema.label_map, row_no, schema.label))
            feat_rows.append(
                [_parse_cell(row[positions[n]].strip(), schema.missing_values, row_no, n) for n in names]
            )
    return _finish(names, types, schema.label, feat_rows, labels)


def split(d: Dataset, s: SplitSpec) -> tuple[Dataset, Dataset]:
    """Deterministic train/test partition; stratified keeps class ratios.

    Stratified mode puts round(train_fraction * n_c) rows of each class in the
    training part, so per-class proportions are within one row of the target.
    """
    rng = np.random.default_rng(s.seed)
    if s.stratified:
        train_idx = []
        test_idx = []
        for c in np.unique(d.y):
            rows = np.flatnonzero(d.y == c)
            if rows.size < 2:
                raise DataError(f"class {c} has {rows.size} row(s); cannot stratify")
            rows = rows[rng.permutation(rows.size)]
            n_train = int(round(s.train_fraction * rows.size))
            n_train = min(max(n_train, 1), rows.size - 1)
            train_idx.append(rows[:n_train])
            test_idx.append(rows[n_train:])
        train_idx = np.sort(np.concatenate(train_idx))
        test_idx = np.sort(np.concatenate(test_idx))
    else:
        perm = rng.permutation(d.row_count)
        n_train = int(round(s.train_fraction * d.row_count))
        n_train = min(max(n_train, 1), d.row_count - 1)
        train_idx = np.sort(perm[:n_train])
        test_idx = np.sort(perm[n_train:])
    return d.take(train_idx), d.take(test_idx)


def _format_value(v: float, missing_token: str) -> str:
    if math.isnan(v):
        return missing_token
    return f"{v:.17g}"


def write_csv(d: Dataset, path, missing_token: str = "") -> None:
    """Write the typed-header CSV form; 17 significant digits round-trip exactly."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"{n}:{t}" for n, t in zip(d.feature_names, d.feature_types)] + [f"{d.label_name}:CLASS"])
        for i in range(d.row_count):
            writer.writerow([_format_value(v, missing_token) for v in d.X[i]] + [str(int(d.y[i]))])


def export_augmented(d: Dataset, individual, path, missing_token: str = "") -> tuple[str, str]:
    """Write base + constructed columns plus a sidecar listing each formula.

    Returns (csv_path, formulas_path). Constructed columns keep their missing
    entries as the missing token, so re-evaluating the formulas on the
    reloaded file reproduces the columns exactly.
    """
    from .fitness import augment  # local import avoids a cycle
    from .tree import render_infix

    augmented, valid = augment(d, individual)
    if not valid:
        raise DataError("individual is invalid on this dataset (an all-missing column)")
    path = Path(path)
    write_csv(augmented, path, missing_token=missing_token)
    formulas_path = path.with_suffix(path.suffix + ".formulas.txt")
    formulas_path.write_text("".join(render_infix(t) + "\n" for t in individual.trees))
    return str(path), str(formulas_path)


def histogram(column: np.ndarray, labels: np.ndarray, bins: int):
    """Per-class counts over equal-width bins of the non-missing values.

    Returns (edges, counts) with counts shaped (bins, n_classes). Rows whose
    value is missing are excluded from every bin.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    column = np.asarray(column, dtype=np.float64)
    mask = np.isfinite(column)
    if not mask.any():
        raise DataError("column is entirely missing")
    vals = column[mask]
    labs = np.asarray(labels)[mask]
    lo, hi = float(vals.min()), float(vals.max())
    n_classes = int(labels.max()) + 1
    if lo == hi:
        counts = np.zeros((1, n_classes), dtype=np.int64)
        for c in range(n_classes):
            counts[0, c] = int((labs == c).sum())
        return np.array([lo, hi]), counts
    edges = np.linspace(lo, hi, bins + 1)
    counts = np.zeros((bins, n_classes), dtype=np.int64)
    for c in range(n_classes):
        counts[:, c], _ = np.histogram(vals[labs == c], bins=edges)
    return edges, counts


def write_histogram_csv(edges: np.ndarray, counts: np.ndarray, path) -> None:
    n_bins, n_classes = counts.shape
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_low", "bin_high"] + [f"count_class{c}" for c in range(n_classes)])
        for b in range(n_bins):
            writer.writerow([f"{edges[b]:.17g}", f"{edges[b + 1]:.17g}"] + counts[b].tolist())
