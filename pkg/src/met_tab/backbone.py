"""Per-coordinate transformer autoencoder.

Each coordinate j of an example becomes a token ``[pe_j, x_j]`` of width
``e + 1``. The encoder sees only the unmasked coordinates; the decoder sees
all ``d`` positions, with masked ones filled by ``[pe_j, u]``. A shared
linear head maps every decoder token to one scalar reconstruction.

All forward functions are batched: masks within a batch share the same
masked-count, so every example contributes the same number of tokens.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHECKPOINT_FORMAT_VERSION = 1
MASK_TOKEN_MODES = ("shared", "per-coordinate", "through-encoder")
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    d: int
    e: int = 64
    fw: int = 64
    heads: int = 1
    enc_depth: int = 1
    dec_depth: int = 1
    mask_token_mode: str = "shared"

    def __post_init__(self):
        if self.d < 2:
            raise ValueError(f"d must be >= 2, got {self.d}")
        for name in ("e", "fw", "heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.enc_depth < 0 or self.dec_depth < 0:
            raise ValueError("depths must be non-negative")
        if (self.e + 1) % self.heads:
            raise ValueError(f"token width e+1={self.e + 1} is not divisible by heads={self.heads}")
        if self.mask_token_mode not in MASK_TOKEN_MODES:
            raise ValueError(f"mask_token_mode must be one of {MASK_TOKEN_MODES}")

    @property
    def width(self) -> int:
        return self.e + 1

    def to_dict(self) -> dict:
        return asdict(self)


def _block_shapes(prefix: str, w: int, fw: int) -> Iterator[tuple[str, tuple[int, ...]]]:
    yield f"{prefix}.ln1.g", (w,)
    yield f"{prefix}.ln1.b", (w,)
    for p in "qkvo":
        yield f"{prefix}.attn.w{p}", (w, w)
        yield f"{prefix}.attn.b{p}", (w,)
    yield f"{prefix}.ln2.g", (w,)
    yield f"{prefix}.ln2.b", (w,)
    yield f"{prefix}.ff.w1", (w, fw)
    yield f"{prefix}.ff.b1", (fw,)
    yield f"{prefix}.ff.w2", (fw, w)
    yield f"{prefix}.ff.b2", (w,)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every learnable tensor, in a fixed order."""
    w = cfg.width
    shapes = {
        "pos": (cfg.d, cfg.e),
        "mask": (cfg.d,) if cfg.mask_token_mode == "per-coordinate" else (1,),
    }
    for i in range(cfg.enc_depth):
        shapes.update(_block_shapes(f"enc.{i}", w, cfg.fw))
    for i in range(cfg.dec_depth):
        shapes.update(_block_shapes(f"dec.{i}", w, cfg.fw))
    shapes["head.w"] = (w, 1)
    shapes["head.b"] = (1,)
    return shapes


def init_seed(seed: int) -> np.random.SeedSequence:
    """Seed stream for weight initialization, shared by pretraining and MET-R."""
    return np.random.SeedSequence(seed).spawn(4)[3]


class ModelParams:
    """Config plus a name -> array mapping of weights.

    Arrays are treated as immutable; optimizers produce a new ModelParams.
    """

    def __init__(self, config: ModelConfig, arrays: Mapping[str, np.ndarray]):
        expected = param_shapes(config)
        if set(arrays) != set(expected):
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise ValueError(f"parameter names do not match config (missing={missing}, extra={extra})")
        for name, shape in expected.items():
            if tuple(arrays[name].shape) != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arrays[name].shape}")
        self.config = config
        self.arrays = {name: np.asarray(arrays[name], dtype=T.DTYPE) for name in expected}

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator | int) -> "ModelParams":
        rng = np.random.default_rng(rng)
        arrays = {}
        for name, shape in param_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if name == "mask":
                arrays[name] = np.zeros(shape)
            elif leaf == "g":
                arrays[name] = np.ones(shape)
            elif leaf.startswith("b") and name != "pos":
                arrays[name] = np.zeros(shape)
            else:
                arrays[name] = rng.normal(0.0, INIT_STD, size=shape)
        return cls(config, arrays)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def names(self) -> list[str]:
        return list(self.arrays)

    def num_parameters(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def replace(self, **updates: np.ndarray) -> "ModelParams":
        arrays = dict(self.arrays)
        arrays.update(updates)
        return ModelParams(self.config, arrays)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def bind(self, requires_grad: bool = False) -> dict[str, Tensor]:
        """Wrap every array as a graph leaf."""
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.arrays.items()}

    def digest(self) -> str:
        h = hashlib.sha256(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        for k, v in self.arrays.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()

    def equals(self, other: "ModelParams") -> bool:
        return self.config == other.config and all(
            np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays
        )


# --------------------------------------------------------------------------
# tokens and masks
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TokenBatch:
    """Encoder input: tokens (B, n, e+1) and the coordinate of each token (B, n)."""

    tokens: Tensor
    coordinate_ids: np.ndarray


def _index_arrays(d: int, masked: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split [0, d) into sorted unmasked / masked index arrays per row."""
    masked = np.atleast_2d(np.asarray(masked, dtype=np.int64))
    b, nm = masked.shape
    if nm >= d:
        raise ValueError("mask plan covers every coordinate; at least one must stay visible")
    keep = np.ones((b, d), dtype=bool)
    rows = np.repeat(np.arange(b), nm)
    keep[rows, masked.reshape(-1)] = False
    if (keep.sum(axis=1) != d - nm).any():
        raise ValueError("mask plan contains duplicate indices")
    visible = np.nonzero(keep)[1].reshape(b, d - nm)
    return visible, np.sort(masked, axis=1)


def build_token_batch(x: Tensor, masked: np.ndarray, params: Mapping[str, Tensor]) -> TokenBatch:
    """Tokens for the unmasked coordinates of each row of ``x`` (B, d).

    ``masked`` is an integer array (B, n_masked); tokens come out in ascending
    coordinate order.
    """
    b, d = x.shape
    visible, _ = _index_arrays(d, masked)
    n = visible.shape[1]
    rows = np.arange(b)[:, None]
    pe = T.index(params["pos"], visible)                    # (B, n, e)
    vals = T.reshape(T.index(x, (rows, visible)), (b, n, 1))
    return TokenBatch(T.concat([pe, vals], axis=-1), visible)


def _mask_tokens(masked: np.ndarray, params: Mapping[str, Tensor], mode: str) -> Tensor:
    b, nm = masked.shape
    pe = T.index(params["pos"], masked)
    if mode == "per-coordinate":
        u = T.index(params["mask"], masked)
    else:
        u = T.index(params["mask"], np.zeros_like(masked))
    return T.concat([pe, T.reshape(u, (b, nm, 1))], axis=-1)


# --------------------------------------------------------------------------
# transformer blocks
# --------------------------------------------------------------------------


def _affine_norm(x: Tensor, p: Mapping[str, Tensor], prefix: str) -> Tensor:
    return T.add(T.mul(T.layernorm(x), p[prefix + ".g"]), p[prefix + ".b"])


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.add(T.matmul(x, w), b)


def _attention(x: Tensor, p: Mapping[str, Tensor], prefix: str, heads: int) -> Tensor:
    b, n, w = x.shape
    hw = w // heads

    def split(t):
        return T.transpose(T.reshape(t, (b, n, heads, hw)), (0, 2, 1, 3))

    q = split(_linear(x, p[prefix + ".wq"], p[prefix + ".bq"]))
    k = split(_linear(x, p[prefix + ".wk"], p[prefix + ".bk"]))
    v = split(_linear(x, p[prefix + ".wv"], p[prefix + ".bv"]))
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(hw))
    ctx = T.matmul(T.softmax(scores), v)                     # (B, H, n, hw)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, n, w))
    return _linear(ctx, p[prefix + ".wo"], p[prefix + ".bo"])


def transformer_block(x: Tensor, p: Mapping[str, Tensor], prefix: str, heads: int) -> Tensor:
    """Pre-norm residual block: x + attn(ln(x)), then + ff(ln(.))."""
    x = T.add(x, _attention(_affine_norm(x, p, prefix + ".ln1"), p, prefix + ".attn", heads))
    hdn = T.gelu(_linear(_affine_norm(x, p, prefix + ".ln2"), p[prefix + ".ff.w1"], p[prefix + ".ff.b1"]))
    return T.add(x, _linear(hdn, p[prefix + ".ff.w2"], p[prefix + ".ff.b2"]))


def encode(cfg: ModelConfig, params: Mapping[str, Tensor], tokens: Tensor) -> Tensor:
    """Run the encoder stack on (B, n, e+1) tokens; output has the same shape."""
    if tokens.shape[-1] != cfg.width:
        raise T.ShapeError(f"token width {tokens.shape[-1]} != e+1 = {cfg.width}")
    h = tokens
    for i in range(cfg.enc_depth):
        h = transformer_block(h, params, f"enc.{i}", cfg.heads)
    return h


def assemble_decoder_input(
    cfg: ModelConfig, enc_out: Tensor, masked: np.ndarray, params: Mapping[str, Tensor]
) -> Tensor:
    """Scatter encoder rows and mask tokens back into coordinate order (B, d, e+1).

    In through-encoder mode the encoder already produced all d rows (visible
    first, then masked) and this only reorders them.
    """
    masked = np.atleast_2d(np.asarray(masked, dtype=np.int64))
    b = enc_out.shape[0]
    visible, masked_sorted = _index_arrays(cfg.d, masked)
    if cfg.mask_token_mode == "through-encoder":
        if enc_out.shape[1] != cfg.d:
            raise T.ShapeError(f"through-encoder mode expects {cfg.d} encoder rows, got {enc_out.shape[1]}")
        stacked = enc_out
    else:
        if enc_out.shape[1] != visible.shape[1]:
            raise T.ShapeError(
                f"encoder output has {enc_out.shape[1]} rows, mask plan leaves {visible.shape[1]} visible"
            )
        if masked_sorted.shape[1] == 0:
            stacked = enc_out
        else:
            stacked = T.concat([enc_out, _mask_tokens(masked_sorted, params, cfg.mask_token_mode)], axis=1)
    order = np.concatenate([visible, masked_sorted], axis=1)
    if np.array_equal(order, np.broadcast_to(np.arange(cfg.d), order.shape)):
        return stacked
    inv = np.argsort(order, axis=1)
    return T.index(stacked, (np.arange(b)[:, None], inv))


def decode(cfg: ModelConfig, params: Mapping[str, Tensor], dec_in: Tensor) -> Tensor:
    """Decoder stack plus per-token linear head; returns (B, d) reconstructions."""
    if dec_in.shape[1] != cfg.d:
        raise T.ShapeError(f"decoder input needs {cfg.d} rows, got {dec_in.shape[1]}")
    h = dec_in
    for i in range(cfg.dec_depth):
        h = transformer_block(h, params, f"dec.{i}", cfg.heads)
    out = _linear(h, params["head.w"], params["head.b"])     # (B, d, 1)
    return T.reshape(out, out.shape[:2])


def encoder_tokens(cfg: ModelConfig, x: Tensor, masked: np.ndarray, params: Mapping[str, Tensor]) -> Tensor:
    """Encoder input for the configured mask-token mode."""
    batch = build_token_batch(x, masked, params)
    if cfg.mask_token_mode != "through-encoder":
        return batch.tokens
    masked = np.atleast_2d(np.asarray(masked, dtype=np.int64))
    if masked.shape[1] == 0:
        return batch.tokens
    _, masked_sorted = _index_arrays(cfg.d, masked)
    return T.concat([batch.tokens, _mask_tokens(masked_sorted, params, "shared")], axis=1)


def reconstruct(cfg: ModelConfig, params: Mapping[str, Tensor], x: Tensor, masked: np.ndarray) -> Tensor:
    """Full autoencoder pass: (B, d) input and (B, n_masked) mask -> (B, d)."""
    enc = encode(cfg, params, encoder_tokens(cfg, x, masked, params))
    return decode(cfg, params, assemble_decoder_input(cfg, enc, masked, params))


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(path: str | Path, params: ModelParams, extra: Mapping[str, np.ndarray] | None = None,
                    meta: Mapping | None = None) -> Path:
    """Write params (and optional training state) to a single .npz file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": params.config.to_dict(),
        "shapes": {k: list(v.shape) for k, v in params.arrays.items()},
        "meta": dict(meta or {}),
    }
    payload = {f"param/{k}": v for k, v in params.arrays.items()}
    for k, v in (extra or {}).items():
        payload[f"extra/{k}"] = np.asarray(v)
    payload["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **payload)
    tmp.replace(path)
    return path


@dataclass
class Checkpoint:
    params: ModelParams
    extra: dict[str, np.ndarray]
    meta: dict


def load_checkpoint(path: str | Path) -> Checkpoint:
    with np.load(Path(path), allow_pickle=False) as z:
        header = json.loads(bytes(z["header"]).decode())
        if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {header.get('format_version')!r}")
        cfg = ModelConfig(**header["model_config"])
        arrays = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
        extra = {k[len("extra/"):]: z[k] for k in z.files if k.startswith("extra/")}
    for k, shape in header["shapes"].items():
        if list(arrays[k].shape) != shape:
            raise ValueError(f"checkpoint tensor {k} has shape {arrays[k].shape}, header says {shape}")
    return Checkpoint(ModelParams(cfg, arrays), extra, header.get("meta", {}))
