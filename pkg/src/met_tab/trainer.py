"""Masked + adversarial reconstruction pretraining.

One training step, per example: mask a fixed number of coordinates, measure
the clean reconstruction loss, search an L2-bounded input perturbation by
normalized gradient ascent on the same loss, and descend on
``loss_std + lam * loss_adv``. Everything is batched; masks inside a batch
share the masked-count so token tensors stay rectangular.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .backbone import ModelConfig, ModelParams, init_seed, load_checkpoint, reconstruct, save_checkpoint
from .data import round_half_up
from .tensor import Graph, Tensor

log = logging.getLogger(__name__)

VARIANTS = ("met", "met-s")
DEGENERATE_GRAD = 1e-12
METRIC_FIELDS = ("epoch", "loss_std", "loss_adv", "loss_total", "grad_norm", "degenerate_grads", "interclass_distance")


@dataclass
class TrainConfig:
    mask_pct: float = 70.0
    epsilon: float = 2.0
    lam: float = 1.0
    adv_steps: int = 2
    ascent_lr: float = 1e-2
    descent_lr: float = 1e-4
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    optimizer: str = "adam"
    variant: str = "met"
    checkpoint_every: int = 0

    def __post_init__(self):
        if not 0 < self.mask_pct < 100:
            raise ValueError(f"mask_pct must lie in (0, 100), got {self.mask_pct}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.adv_steps < 0:
            raise ValueError("adv_steps must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# masks
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MaskPlan:
    masked: tuple[int, ...]
    d: int

    def __post_init__(self):
        if len(set(self.masked)) != len(self.masked):
            raise ValueError("masked indices must be unique")
        if any(j < 0 or j >= self.d for j in self.masked):
            raise ValueError("masked index out of range")
        if len(self.masked) >= self.d:
            raise ValueError("cannot mask every coordinate")

    @property
    def visible(self) -> tuple[int, ...]:
        m = set(self.masked)
        return tuple(j for j in range(self.d) if j not in m)


def masked_count(d: int, mask_pct: float) -> int:
    if not 0 < mask_pct < 100:
        raise ValueError(f"mask_pct must lie in (0, 100), got {mask_pct}")
    n = round_half_up(mask_pct / 100.0 * d)
    if n <= 0 or n >= d:
        raise ValueError(f"masking {mask_pct}% of d={d} coordinates leaves {d - n} visible; need 0 < count < d")
    return n


def sample_masks(batch: int, d: int, mask_pct: float, rng: np.random.Generator) -> np.ndarray:
    """(batch, count) sorted masked indices, uniform without replacement per row."""
    n = masked_count(d, mask_pct)
    order = np.argsort(rng.random((batch, d)), axis=1, kind="stable")
    return np.sort(order[:, :n], axis=1)


def sample_mask_plan(d: int, mask_pct: float, rng: np.random.Generator) -> MaskPlan:
    return MaskPlan(tuple(int(j) for j in sample_masks(1, d, mask_pct, rng)[0]), d)


# --------------------------------------------------------------------------
# losses and projection
# --------------------------------------------------------------------------


def per_example_loss(x: Tensor, x_hat: Tensor) -> Tensor:
    """Squared error summed over all d coordinates, one value per row."""
    return T.sum_(T.square(T.sub(x, x_hat)), axis=-1)


def reconstruction_loss(x, x_hat) -> Tensor:
    """||x - x_hat||^2 over every coordinate (and every row for a batch)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    x_hat = x_hat if isinstance(x_hat, Tensor) else Tensor(x_hat)
    if x.shape != x_hat.shape:
        raise T.ShapeError(f"reconstruction_loss: shapes differ {x.shape} vs {x_hat.shape}")
    return T.sum_(T.square(T.sub(x, x_hat)))


def _outside(r: np.ndarray, eps: float) -> bool:
    return bool(np.linalg.norm(r) > eps or np.linalg.norm(r[None], axis=1)[0] > eps)


def project_l2(h: np.ndarray, eps: float) -> np.ndarray:
    """Project each row of ``h`` (or a single vector) onto the L2 ball of radius eps.

    Rows inside the closed ball are returned unchanged; the others are
    rescaled to norm eps, shaved by an ulp if rounding left them just
    outside, so the projection is exactly idempotent.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    h = np.asarray(h, dtype=np.float64)
    single = h.ndim == 1
    rows = np.atleast_2d(h)
    norms = np.linalg.norm(rows, axis=1)
    out = rows.copy()
    for i in range(len(rows)):
        # vector and row-wise norms round differently; rows within eps under
        # both are left alone, which is what makes the projection idempotent
        if not _outside(rows[i], eps):
            continue
        r = rows[i] / norms[i] * eps
        while _outside(r, eps):
            r = np.nextafter(r, 0.0)
        out[i] = r
    return out[0] if single else out


# --------------------------------------------------------------------------
# adversarial search
# --------------------------------------------------------------------------


@dataclass
class AscentResult:
    h: np.ndarray                       # (B, d)
    loss_init: np.ndarray               # per-example loss at the initial h
    loss_final: np.ndarray              # per-example loss at the returned h
    degenerate: int = 0


def _loss_at(params: ModelParams, x: np.ndarray, masked: np.ndarray, h: np.ndarray) -> np.ndarray:
    p = params.bind()
    x_hat = reconstruct(params.config, p, Tensor(x + h), masked)
    return per_example_loss(Tensor(x), x_hat).value


def adversarial_perturbation(
    params: ModelParams,
    x: np.ndarray,
    masked: np.ndarray,
    cfg: TrainConfig,
    rng: np.random.Generator,
    track_losses: bool = False,
    on_step: Callable[[np.ndarray], None] | None = None,
) -> AscentResult:
    """Normalized gradient ascent on the reconstruction loss w.r.t. the input.

    ``h`` starts as N(0, I)/sqrt(d). Masked coordinates of ``h`` never reach
    the model, so their gradient is zero and they keep their initial values.
    The model parameters are only read. ``on_step`` sees ``h`` after every
    projection.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    masked = np.atleast_2d(masked)
    b, d = x.shape
    h = rng.standard_normal((b, d)) / np.sqrt(d)
    loss_init = _loss_at(params, x, masked, h) if track_losses else None
    degenerate = 0
    xt = Tensor(x)
    for _ in range(cfg.adv_steps):
        ht = Tensor(h, requires_grad=True)
        with Graph() as g:
            x_hat = reconstruct(params.config, params.bind(), T.add(xt, ht), masked)
            # rows are independent, so the summed loss gives each row its own gradient
            loss = T.sum_(per_example_loss(xt, x_hat))
        grad = g.backward(loss, leaves=[ht])[ht]
        norms = np.linalg.norm(grad, axis=1)
        ok = norms >= DEGENERATE_GRAD
        degenerate += int((~ok).sum())
        h = h.copy()
        h[ok] += cfg.ascent_lr * grad[ok] / norms[ok, None]
        h = project_l2(h, cfg.epsilon)
        if on_step is not None:
            on_step(h)
    loss_final = _loss_at(params, x, masked, h) if track_losses else None
    if degenerate:
        log.debug("adversarial ascent: %d degenerate gradient(s) skipped", degenerate)
    return AscentResult(h, loss_init, loss_final, degenerate)


# --------------------------------------------------------------------------
# optimizers
# --------------------------------------------------------------------------


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]) -> ModelParams:
        return params.replace(**{k: params[k] - self.lr * g for k, g in grads.items()})

    def state_dict(self) -> dict[str, np.ndarray]:
        return {}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        pass


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]) -> ModelParams:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        new = {}
        for k, g in grads.items():
            m = self.beta1 * self.m.get(k, 0.0) + (1.0 - self.beta1) * g
            v = self.beta2 * self.v.get(k, 0.0) + (1.0 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            new[k] = params[k] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params.replace(**new)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {"t": np.array(self.t)}
        state.update({f"m.{k}": v for k, v in self.m.items()})
        state.update({f"v.{k}": v for k, v in self.v.items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["t"])
        self.m = {k[2:]: np.array(v) for k, v in state.items() if k.startswith("m.")}
        self.v = {k[2:]: np.array(v) for k, v in state.items() if k.startswith("v.")}


def make_optimizer(cfg: TrainConfig):
    return Adam(cfg.descent_lr) if cfg.optimizer == "adam" else SGD(cfg.descent_lr)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


class TrainRng:
    """Independent streams for shuffling, masks and adversarial noise.

    Keeping the noise on its own stream means a run that skips the
    adversarial branch draws exactly the same masks and batches.
    """

    def __init__(self, seed: int):
        s_shuffle, s_mask, s_noise = np.random.SeedSequence(seed).spawn(3)
        self.shuffle = np.random.default_rng(s_shuffle)
        self.mask = np.random.default_rng(s_mask)
        self.noise = np.random.default_rng(s_noise)

    def state(self) -> dict:
        return {k: getattr(self, k).bit_generator.state for k in ("shuffle", "mask", "noise")}

    def set_state(self, state: dict) -> None:
        for k, s in state.items():
            getattr(self, k).bit_generator.state = s


@dataclass
class StepMetrics:
    loss_std: float
    loss_adv: float
    loss_total: float
    grad_norm: float
    degenerate_grads: int = 0


def batch_losses(mcfg: ModelConfig, leaves, x: np.ndarray, masked: np.ndarray, h: np.ndarray | None,
                 lam: float) -> tuple[Tensor, Tensor | None, Tensor]:
    """Batch-mean standard loss, adversarial loss (None without ``h``) and their weighted total.

    The adversarial branch feeds ``x + h`` but is scored against the clean ``x``.
    """
    xt = Tensor(x)
    loss_std = T.mean(per_example_loss(xt, reconstruct(mcfg, leaves, xt, masked)))
    if h is None:
        return loss_std, None, loss_std
    loss_adv = T.mean(per_example_loss(xt, reconstruct(mcfg, leaves, Tensor(x + h), masked)))
    return loss_std, loss_adv, T.add(loss_std, T.scale(loss_adv, lam))


def train_step(params: ModelParams, x: np.ndarray, cfg: TrainConfig, rng: TrainRng, optimizer) -> tuple[ModelParams, StepMetrics]:
    """One descent step on a batch ``x`` (B, d); returns new params and batch-mean losses."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    mcfg = params.config
    masked = sample_masks(x.shape[0], mcfg.d, cfg.mask_pct, rng.mask)

    adv = None
    stage = "adversarial ascent"
    try:
        if cfg.variant == "met":
            adv = adversarial_perturbation(params, x, masked, cfg, rng.noise)
        stage = "loss"
        leaves = params.bind(requires_grad=True)
        with Graph() as g:
            loss_std, loss_adv, total = batch_losses(mcfg, leaves, x, masked, None if adv is None else adv.h, cfg.lam)
        stage = "backward"
        g.backward(total, leaves=list(leaves.values()))
    except T.NonFiniteError as err:
        adv_norm = None if adv is None else float(np.linalg.norm(adv.h, axis=1).max())
        raise T.NonFiniteError(
            f"non-finite value during {stage}: {err}; batch={x.shape[0]} masked={masked.shape[1]}/{mcfg.d} "
            f"max|x|={float(np.abs(x).max())!r} max||h||={adv_norm!r} optimizer_steps={getattr(optimizer, 't', None)}"
        ) from err
    grads = {k: t.grad for k, t in leaves.items()}
    grad_norm = float(np.sqrt(sum(float((v * v).sum()) for v in grads.values())))
    new_params = optimizer.step(params, grads)
    metrics = StepMetrics(
        loss_std=loss_std.item(),
        loss_adv=0.0 if loss_adv is None else loss_adv.item(),
        loss_total=total.item(),
        grad_norm=grad_norm,
        degenerate_grads=0 if adv is None else adv.degenerate,
    )
    return new_params, metrics


@dataclass
class PretrainResult:
    params: ModelParams
    history: list[dict] = field(default_factory=list)
    initial_distance: float | None = None
    timings: list[float] = field(default_factory=list)


def _write_metrics(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for row in history:
            w.writerow([_fmt(row.get(k)) for k in METRIC_FIELDS])


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_metrics(path: str | Path) -> list[dict]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rec = {}
            for k, v in row.items():
                if v == "":
                    rec[k] = None
                elif k in ("epoch", "degenerate_grads"):
                    rec[k] = int(v)
                else:
                    rec[k] = float(v)
            out.append(rec)
    return out


def pretrain(
    X: np.ndarray,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    monitor: Callable[[ModelParams], float] | None = None,
    init_params: ModelParams | None = None,
    resume: bool = False,
) -> PretrainResult:
    """Run ``cfg.epochs`` epochs of :func:`train_step` over shuffled mini-batches.

    With ``out_dir`` set, ``metrics.csv`` (deterministic) and ``timing.csv``
    are rewritten every epoch and ``last.npz`` holds params, optimizer and
    rng state so an interrupted run can continue with ``resume=True``.
    ``monitor`` (e.g. inter-class distance of representations) is evaluated
    before training and after every epoch.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model_cfg.d:
        raise ValueError(f"data has shape {X.shape}, model expects d={model_cfg.d}")
    out = Path(out_dir) if out_dir is not None else None
    rng = TrainRng(cfg.seed)
    optimizer = make_optimizer(cfg)
    params = init_params if init_params is not None else ModelParams.init(model_cfg, init_seed(cfg.seed))
    history: list[dict] = []
    timings: list[float] = []
    start_epoch = 0
    initial_distance = None

    if resume and out is not None and (out / "last.npz").exists():
        ck = load_checkpoint(out / "last.npz")
        params = ck.params
        optimizer.load_state_dict({k[4:]: v for k, v in ck.extra.items() if k.startswith("opt/")})
        rng.set_state(ck.meta["rng"])
        start_epoch = int(ck.meta["epoch"])
        initial_distance = ck.meta.get("initial_distance")
        history = read_metrics(out / "metrics.csv")[:start_epoch]
        log.info("resuming from epoch %d", start_epoch)
    elif monitor is not None:
        initial_distance = float(monitor(params))

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if start_epoch == 0:
            save_checkpoint(out / "init.npz", params)

    n = len(X)
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.shuffle.permutation(n)
        sums = np.zeros(4)
        degenerate = 0
        for lo in range(0, n, cfg.batch_size):
            xb = X[order[lo: lo + cfg.batch_size]]
            params, m = train_step(params, xb, cfg, rng, optimizer)
            sums += len(xb) * np.array([m.loss_std, m.loss_adv, m.loss_total, m.grad_norm])
            degenerate += m.degenerate_grads
        means = sums / n
        row = {
            "epoch": epoch,
            "loss_std": float(means[0]),
            "loss_adv": float(means[1]),
            "loss_total": float(means[2]),
            "grad_norm": float(means[3]),
            "degenerate_grads": degenerate,
            "interclass_distance": float(monitor(params)) if monitor is not None else None,
        }
        history.append(row)
        timings.append(time.perf_counter() - t0)
        log.info("epoch %d loss_std=%.5f loss_adv=%.5f", epoch, row["loss_std"], row["loss_adv"])
        if out is not None:
            _write_metrics(out / "metrics.csv", history)
            with open(out / "timing.csv", "a" if epoch > 1 else "w") as fh:
                if epoch == 1:
                    fh.write("epoch,wall_seconds\n")
                fh.write(f"{epoch},{timings[-1]:.6f}\n")
            meta = {"epoch": epoch, "rng": rng.state(), "train_config": cfg.to_dict(),
                    "initial_distance": initial_distance}
            extra = {f"opt/{k}": v for k, v in optimizer.state_dict().items()}
            save_checkpoint(out / "last.npz", params, extra=extra, meta=meta)
            if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"epoch_{epoch:04d}.npz", params, meta={"epoch": epoch})

    if out is not None:
        if cfg.epochs == 0 or not history:
            _write_metrics(out / "metrics.csv", history)
        save_checkpoint(out / "final.npz", params, meta={"epoch": cfg.epochs, "train_config": cfg.to_dict()})
        (out / "train_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return PretrainResult(params, history, initial_distance, timings)
