"""Tabular datasets: toy generator, CSV ingestion, normalization and splits."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

MISSING_TOKENS = {"", "?", "na", "nan", "null", "none"}


class DataError(ValueError):
    """Malformed or unusable input data."""


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class NormStats:
    method: str                 # "zscore" or "minmax"
    shift: np.ndarray           # mean or min
    scale: np.ndarray           # std or range; 0 marks a degenerate column

    def apply(self, X: np.ndarray) -> np.ndarray:
        safe = np.where(self.scale > 0, self.scale, 1.0)
        return np.where(self.scale > 0, (X - self.shift) / safe, 0.0)

    def inverse(self, Z: np.ndarray) -> np.ndarray:
        return np.where(self.scale > 0, Z * self.scale + self.shift, self.shift)


@dataclass
class TabularDataset:
    """N x d feature matrix with optional labels and a train/test assignment.

    ``test_mask`` is None until :func:`split` has been applied; before that
    every row counts as training data.
    """

    X: np.ndarray
    y: np.ndarray | None = None
    k: int = 0
    column_names: list[str] = field(default_factory=list)
    column_kinds: list[str] = field(default_factory=list)
    norm_stats: NormStats | None = None
    test_mask: np.ndarray | None = None
    label_names: list[str] | None = None
    report: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2:
            raise DataError(f"X must be 2-D, got shape {self.X.shape}")
        if not np.isfinite(self.X).all():
            raise DataError("X contains non-finite values")
        n, d = self.X.shape
        if not self.column_names:
            self.column_names = [f"x{j}" for j in range(d)]
        if not self.column_kinds:
            self.column_kinds = ["continuous"] * d
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=np.int64)
            if self.y.shape != (n,):
                raise DataError(f"label vector has shape {self.y.shape}, expected ({n},)")
            if self.k == 0:
                self.k = int(self.y.max()) + 1 if n else 0
            if n and (self.y.min() < 0 or self.y.max() >= self.k):
                raise DataError(f"labels must lie in [0, {self.k})")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def _rows(self, test: bool) -> np.ndarray:
        if self.test_mask is None:
            return np.arange(self.n) if not test else np.arange(0)
        return np.flatnonzero(self.test_mask == test)

    def train_indices(self) -> np.ndarray:
        return self._rows(False)

    def test_indices(self) -> np.ndarray:
        return self._rows(True)

    def train(self) -> tuple[np.ndarray, np.ndarray | None]:
        idx = self.train_indices()
        return self.X[idx], None if self.y is None else self.y[idx]

    def test(self) -> tuple[np.ndarray, np.ndarray | None]:
        idx = self.test_indices()
        return self.X[idx], None if self.y is None else self.y[idx]

    def subset(self, rows: np.ndarray) -> "TabularDataset":
        rows = np.asarray(rows)
        return replace(
            self,
            X=self.X[rows],
            y=None if self.y is None else self.y[rows],
            test_mask=None if self.test_mask is None else self.test_mask[rows],
            report=dict(self.report),
        )


# --------------------------------------------------------------------------
# toy data
# --------------------------------------------------------------------------


def generate_two_circles(
    n_per_class: int = 5000,
    seed: int = 0,
    center_offset: float = 0.5,
    radius: float = 1.0,
    points_per_example: int = 5,
    noise_std: float = 0.0,
    on_disk: bool = False,
) -> TabularDataset:
    """Two overlapping circles centred at (-offset, 0) and (+offset, 0).

    Every example concatenates ``points_per_example`` i.i.d. points from its
    class circle as (x1, y1, x2, y2, ...). Rows are shuffled.
    """
    if n_per_class < 1:
        raise DataError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    blocks, labels = [], []
    for c, cx in enumerate((-center_offset, center_offset)):
        theta = rng.uniform(0.0, 2 * np.pi, size=(n_per_class, points_per_example))
        r = radius * np.sqrt(rng.uniform(size=theta.shape)) if on_disk else radius
        pts = np.stack([cx + r * np.cos(theta), r * np.sin(theta)], axis=-1)
        if noise_std > 0:
            pts = pts + rng.normal(0.0, noise_std, size=pts.shape)
        blocks.append(pts.reshape(n_per_class, 2 * points_per_example))
        labels.append(np.full(n_per_class, c))
    X = np.concatenate(blocks)
    y = np.concatenate(labels)
    perm = rng.permutation(len(X))
    names = [f"{axis}{i + 1}" for i in range(points_per_example) for axis in "xy"]
    return TabularDataset(X[perm], y[perm], k=2, column_names=names)


def project_2d(x: np.ndarray) -> np.ndarray:
    """Mean of even entries and mean of odd entries along the last axis."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] % 2:
        raise DataError(f"project_2d needs an even-length last axis, got {x.shape[-1]}")
    return np.stack([x[..., 0::2].mean(axis=-1), x[..., 1::2].mean(axis=-1)], axis=-1)


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------


@dataclass
class Schema:
    label_column: str | None = None
    categorical_columns: list[str] = field(default_factory=list)
    one_hot_groups: dict[str, list[str]] = field(default_factory=dict)

    @classmethod
    def from_file(cls, path: str | Path) -> "Schema":
        """Parse ``key = value`` lines.

        Keys: ``label_column``, ``categorical_columns`` (comma list) and
        ``one_hot_group.<name>`` (comma list, or ``first..last`` meaning the
        header range inclusive).
        """
        schema = cls()
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key == "label_column":
                schema.label_column = value or None
            elif key == "categorical_columns":
                schema.categorical_columns = [c.strip() for c in value.split(",") if c.strip()]
            elif key.startswith("one_hot_group."):
                schema.one_hot_groups[key.split(".", 1)[1]] = [c.strip() for c in value.split(",") if c.strip()]
            else:
                raise DataError(f"{path}:{lineno}: unknown schema key {key!r}")
        return schema

    def resolve_group(self, members: list[str], header: list[str]) -> list[str]:
        if len(members) == 1 and ".." in members[0]:
            first, last = (s.strip() for s in members[0].split(".."))
            try:
                i, j = header.index(first), header.index(last)
            except ValueError:
                raise DataError(f"one-hot range {members[0]!r} names unknown columns") from None
            if j < i:
                raise DataError(f"one-hot range {members[0]!r} is reversed")
            return header[i: j + 1]
        return members


def _parse_float(text: str, row: int, col: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise DataError(f"row {row}, column {col!r}: cannot parse {text!r} as a number") from None
    if not math.isfinite(v):
        raise DataError(f"row {row}, column {col!r}: non-finite value {text!r}")
    return v


def load_csv(path: str | Path, schema: Schema | None = None, seed: int = 0, shuffle: bool = True) -> TabularDataset:
    """Read a headed CSV into a TabularDataset.

    One-hot groups collapse to a single integer column (argmax, ties to the
    lowest index) placed where the group's first column was. Rows with
    missing fields are dropped and counted in ``report``.
    """
    schema = schema or Schema()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [(i + 2, r) for i, r in enumerate(reader) if r]

    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate column names in header")
    label_col = schema.label_column
    if label_col is not None and label_col not in header:
        raise DataError(f"label column {label_col!r} not in header")
    groups = {name: schema.resolve_group(m, header) for name, m in schema.one_hot_groups.items()}
    grouped = {c: name for name, members in groups.items() for c in members}
    for c in list(grouped) + schema.categorical_columns:
        if c not in header:
            raise DataError(f"schema names unknown column {c!r}")

    # output layout: header order, groups collapsed at their first member
    layout: list[tuple[str, str, list[int]]] = []      # (name, kind, source column indices)
    emitted = set()
    for j, c in enumerate(header):
        if c == label_col:
            continue
        if c in grouped:
            g = grouped[c]
            if g not in emitted:
                layout.append((g, "categorical", [header.index(m) for m in groups[g]]))
                emitted.add(g)
            continue
        kind = "categorical" if c in schema.categorical_columns else "continuous"
        layout.append((c, kind, [j]))

    label_idx = header.index(label_col) if label_col is not None else None
    X_rows, labels = [], []
    missing = ties = 0
    for lineno, r in rows:
        if len(r) != len(header):
            raise DataError(f"row {lineno}: expected {len(header)} fields, got {len(r)}")
        fields = [f.strip() for f in r]
        if any(f.lower() in MISSING_TOKENS for f in fields):
            missing += 1
            continue
        feat = []
        for name, kind, src in layout:
            if len(src) > 1:
                vals = np.array([_parse_float(fields[s], lineno, header[s]) for s in src])
                top = vals.max()
                if (vals == top).sum() > 1:
                    ties += 1
                feat.append(float(np.argmax(vals)))
            else:
                v = _parse_float(fields[src[0]], lineno, header[src[0]])
                if kind == "categorical":
                    if v != int(v):
                        raise DataError(f"row {lineno}, column {name!r}: categorical value {v} is not an integer")
                feat.append(v)
        X_rows.append(feat)
        if label_idx is not None:
            labels.append(fields[label_idx])

    if not X_rows:
        raise DataError(f"{path}: no usable rows")
    X = np.array(X_rows, dtype=np.float64)
    y = label_names = None
    k = 0
    if label_idx is not None:
        label_names, y = _encode_labels(labels)
        k = len(label_names)
    if shuffle:
        perm = np.random.default_rng(seed).permutation(len(X))
        X = X[perm]
        y = None if y is None else y[perm]
    return TabularDataset(
        X, y, k=k,
        column_names=[n for n, _, _ in layout],
        column_kinds=[kd for _, kd, _ in layout],
        label_names=label_names,
        report={"rows_read": len(rows), "rows_rejected_missing": missing, "one_hot_ties": ties},
    )


def _encode_labels(raw: list[str]) -> tuple[list[str], np.ndarray]:
    try:
        numeric = [float(v) for v in raw]
        uniq = sorted(set(numeric))
        lookup = {v: i for i, v in enumerate(uniq)}
        names = [f"{v:g}" for v in uniq]
        return names, np.array([lookup[v] for v in numeric], dtype=np.int64)
    except ValueError:
        uniq = sorted(set(raw))
        lookup = {v: i for i, v in enumerate(uniq)}
        return uniq, np.array([lookup[v] for v in raw], dtype=np.int64)


def write_csv(ds: TabularDataset, path: str | Path, label_column: str = "label") -> Path:
    """Write features (17 significant digits) and labels, if any."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = list(ds.column_names) + ([label_column] if ds.y is not None else [])
        w.writerow(header)
        for i in range(ds.n):
            row = [f"{v:.17g}" for v in ds.X[i]]
            if ds.y is not None:
                row.append(str(int(ds.y[i])))
            w.writerow(row)
    return path


# --------------------------------------------------------------------------
# normalization and splits
# --------------------------------------------------------------------------


def fit_norm_stats(X_train: np.ndarray, method: str = "zscore") -> NormStats:
    if len(X_train) == 0:
        raise DataError("cannot fit normalization on an empty train split")
    if method == "zscore":
        shift, scale = X_train.mean(axis=0), X_train.std(axis=0)
    elif method == "minmax":
        shift = X_train.min(axis=0)
        scale = X_train.max(axis=0) - shift
    else:
        raise DataError(f"unknown normalization {method!r}")
    return NormStats(method, shift, np.where(scale < 1e-12, 0.0, scale))


def normalize_fit_apply(ds: TabularDataset, method: str = "zscore") -> TabularDataset:
    """Fit statistics on train rows only and transform every row."""
    X_train, _ = ds.train()
    stats = fit_norm_stats(X_train, method)
    return replace(ds, X=stats.apply(ds.X), norm_stats=stats, report=dict(ds.report))


def split(
    ds: TabularDataset,
    test_fraction: float | None = None,
    seed: int = 0,
    index_file: str | Path | None = None,
) -> TabularDataset:
    """Assign rows to train/test, stratified by label when labels exist.

    With ``index_file`` the listed row indices (one per line) form the test
    set and ``test_fraction`` is ignored.
    """
    test = np.zeros(ds.n, dtype=bool)
    if index_file is not None:
        idx = [int(s) for s in Path(index_file).read_text().split()]
        if any(i < 0 or i >= ds.n for i in idx):
            raise DataError("split index file references rows outside the dataset")
        test[idx] = True
    else:
        if test_fraction is None or not 0 < test_fraction < 1:
            raise DataError("test_fraction must lie in (0, 1)")
        rng = np.random.default_rng(seed)
        groups = [np.arange(ds.n)] if ds.y is None else [np.flatnonzero(ds.y == c) for c in range(ds.k)]
        for rows in groups:
            if len(rows) == 0:
                continue
            n_test = round_half_up(test_fraction * len(rows))
            test[rng.permutation(rows)[:n_test]] = True
    if test.all() or not test.any():
        raise DataError("split leaves the train or test side empty")
    return replace(ds, test_mask=test, report=dict(ds.report))
