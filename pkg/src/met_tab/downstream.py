"""Frozen-encoder representations and the downstream MLP classifier."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbone import ModelParams, encode, encoder_tokens
from .data import DataError, round_half_up
from .tensor import Graph, Tensor
from .trainer import Adam

REP_MODES = ("concat", "average")


def represent(params: ModelParams, X: np.ndarray, mode: str = "concat", batch_size: int = 512) -> np.ndarray:
    """Encoder output with nothing masked, one row per example.

    ``concat`` flattens the d x (e+1) token outputs in coordinate order;
    ``average`` returns their mean over coordinates.
    """
    if mode not in REP_MODES:
        raise ValueError(f"mode must be one of {REP_MODES}")
    cfg = params.config
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != cfg.d:
        raise DataError(f"input has {X.shape[1]} columns, checkpoint expects d={cfg.d}")
    p = params.bind()
    chunks = []
    for lo in range(0, len(X), batch_size):
        xb = X[lo: lo + batch_size]
        none = np.zeros((len(xb), 0), dtype=np.int64)
        out = encode(cfg, p, encoder_tokens(cfg, Tensor(xb), none, p)).value   # (B, d, e+1)
        chunks.append(out.reshape(len(xb), -1) if mode == "concat" else out.mean(axis=1))
    width = cfg.d * cfg.width if mode == "concat" else cfg.width
    return np.concatenate(chunks) if chunks else np.zeros((0, width))


def mean_interclass_distance(reps: np.ndarray, labels: np.ndarray) -> float:
    """Distance between class-mean vectors, averaged over all class pairs."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("need at least two classes")
    means = [reps[labels == c].mean(axis=0) for c in classes]
    return float(np.mean([np.linalg.norm(a - b) for a, b in combinations(means, 2)]))


def export_representations(path: str | Path, reps: np.ndarray, labels: np.ndarray | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"rep_{i}" for i in range(reps.shape[1])] + (["label"] if labels is not None else []))
        for i, row in enumerate(reps):
            w.writerow([f"{v:.17g}" for v in row] + ([str(int(labels[i]))] if labels is not None else []))
    return path


# --------------------------------------------------------------------------
# head
# --------------------------------------------------------------------------


@dataclass
class HeadConfig:
    hidden_layers: int = 2
    hidden_width: int | None = None         # None -> min(256, input width)
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.hidden_layers < 0:
            raise ValueError("hidden_layers must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class HeadParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    train_accuracy: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.biases[-1].shape[0]

    def logits(self, reps: np.ndarray) -> np.ndarray:
        h = np.asarray(reps, dtype=np.float64)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < len(self.weights) - 1:
                h = np.maximum(h, 0.0)
        return h

    def predict(self, reps: np.ndarray) -> np.ndarray:
        # argmax breaks ties toward the lowest class index
        return np.argmax(self.logits(reps), axis=1)


def init_head(in_width: int, k: int, cfg: HeadConfig, rng: np.random.Generator) -> HeadParams:
    width = cfg.hidden_width or min(256, in_width)
    sizes = [in_width] + [width] * cfg.hidden_layers + [k]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return HeadParams(weights, biases)


def _forward(ws: list[Tensor], bs: list[Tensor], x: Tensor) -> Tensor:
    h = x
    for i, (w, b) in enumerate(zip(ws, bs)):
        h = T.add(T.matmul(h, w), b)
        if i < len(ws) - 1:
            h = T.relu(h)
    return h


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels."""
    logp = T.log_softmax(logits)
    picked = T.index(logp, (np.arange(len(labels)), labels))
    return T.scale(T.mean(picked), -1.0)


def train_head(reps: np.ndarray, labels: np.ndarray, cfg: HeadConfig, k: int | None = None) -> HeadParams:
    """Fit the MLP head on fixed representations with Adam on mean cross-entropy."""
    reps = np.asarray(reps, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(reps) == 0 or len(reps) != len(labels):
        raise ValueError("reps and labels must be non-empty and aligned")
    k = int(k if k is not None else labels.max() + 1)
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    rng = np.random.default_rng(cfg.seed)
    head = init_head(reps.shape[1], k, cfg, rng)
    names = [f"w{i}" for i in range(len(head.weights))] + [f"b{i}" for i in range(len(head.biases))]
    arrays = dict(zip(names, head.weights + head.biases))
    opt = Adam(cfg.lr)
    trace = []
    n = len(reps)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo: lo + cfg.batch_size]
            leaves = {name: Tensor(a, requires_grad=True) for name, a in arrays.items()}
            nl = len(head.weights)
            with Graph() as g:
                logits = _forward([leaves[f"w{i}"] for i in range(nl)], [leaves[f"b{i}"] for i in range(nl)],
                                  Tensor(reps[idx]))
                loss = cross_entropy(logits, labels[idx])
            g.backward(loss)
            arrays = opt.step(_Arrays(arrays), {k_: t.grad for k_, t in leaves.items()}).arrays
        current = _to_head(arrays, len(head.weights))
        trace.append(float((current.predict(reps) == labels).mean()))
    out = _to_head(arrays, len(head.weights))
    out.train_accuracy = trace
    return out


class _Arrays:
    """Minimal stand-in so the backbone optimizers can update plain dicts."""

    def __init__(self, arrays: dict[str, np.ndarray]):
        self.arrays = arrays

    def __getitem__(self, k):
        return self.arrays[k]

    def replace(self, **updates):
        return _Arrays({**self.arrays, **updates})


def _to_head(arrays: dict[str, np.ndarray], n_layers: int) -> HeadParams:
    return HeadParams([arrays[f"w{i}"] for i in range(n_layers)], [arrays[f"b{i}"] for i in range(n_layers)])


def accuracy(head: HeadParams, reps: np.ndarray, labels: np.ndarray) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty test set")
    return float((head.predict(reps) == labels).mean())


def evaluate(params: ModelParams, head: HeadParams, X_test: np.ndarray, y_test: np.ndarray, mode: str = "concat") -> float:
    """Test accuracy of ``head`` on frozen-encoder representations of X_test."""
    if len(X_test) == 0:
        raise ValueError("empty test set")
    return accuracy(head, represent(params, X_test, mode), y_test)


def label_fraction_subsample(labels: np.ndarray, fraction: float, seed: int = 0) -> np.ndarray:
    """Row indices of a class-stratified subset.

    Each class keeps round(fraction * n_c) rows taken from a per-class
    permutation fixed by ``seed``, so smaller fractions are subsets of
    larger ones.
    """
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    labels = np.asarray(labels)
    if fraction == 1.0:
        return np.arange(len(labels))
    rng = np.random.default_rng(seed)
    keep = []
    for c in np.unique(labels):
        rows = np.flatnonzero(labels == c)
        take = round_half_up(fraction * len(rows))
        if take == 0:
            raise ValueError(f"class {c} gets no examples at fraction {fraction}")
        keep.append(rng.permutation(rows)[:take])
    return np.sort(np.concatenate(keep))
