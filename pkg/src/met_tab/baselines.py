"""Reference featurizers: random Gaussian projection, random frozen encoder, raw MLP."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import ModelConfig, ModelParams, init_seed
from .downstream import HeadConfig, accuracy, train_head


@dataclass(frozen=True)
class RandomFeatureMap:
    """phi(x) = R x with i.i.d. N(0, std^2) entries; optional cos(Rx + b) variant."""

    R: np.ndarray
    seed: int
    std: float
    offsets: np.ndarray | None = None

    @classmethod
    def create(cls, d: int, m: int, seed: int = 0, std: float | None = None, cosine: bool = False) -> "RandomFeatureMap":
        std = 1.0 / np.sqrt(d) if std is None else std
        rng = np.random.default_rng(seed)
        R = rng.normal(0.0, std, size=(m, d))
        R.setflags(write=False)
        offsets = rng.uniform(0.0, 2 * np.pi, size=m) if cosine else None
        return cls(R, seed, std, offsets)

    @property
    def m(self) -> int:
        return self.R.shape[0]

    @property
    def d(self) -> int:
        return self.R.shape[1]

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return rfg_features(self, X)


def rfg_features(fmap: RandomFeatureMap, X: np.ndarray) -> np.ndarray:
    """Apply the map to a vector (d,) or a batch (N, d)."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != fmap.d:
        raise ValueError(f"input has {X.shape[-1]} coordinates, feature map expects {fmap.d}")
    Z = X @ fmap.R.T
    if fmap.offsets is not None:
        Z = np.cos(Z + fmap.offsets)
    return Z


def met_r_checkpoint(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Randomly initialized encoder, used frozen (never trained)."""
    return ModelParams.init(config, init_seed(seed))


def raw_mlp_baseline(
    X_train: np.ndarray, y_train: np.ndarray, X_test: np.ndarray, y_test: np.ndarray,
    head_cfg: HeadConfig, k: int | None = None,
) -> float:
    """Head trained directly on the input coordinates; returns test accuracy."""
    head = train_head(X_train, y_train, head_cfg, k=k)
    return accuracy(head, X_test, y_test)
