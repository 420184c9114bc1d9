"""Experiment runners behind the CLI: pretrain, finetune/eval, toy study, sweeps."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .backbone import ModelParams, load_checkpoint
from .baselines import RandomFeatureMap, met_r_checkpoint, rfg_features
from .config import VERSION, ConfigError, ExperimentConfig
from .data import Schema, TabularDataset, generate_two_circles, load_csv, normalize_fit_apply, project_2d, split
from .downstream import (
    accuracy,
    export_representations,
    label_fraction_subsample,
    mean_interclass_distance,
    represent,
    train_head,
)
from .trainer import PretrainResult, pretrain

log = logging.getLogger(__name__)

SWEEP_AXES = ("mask_pct", "head_depth", "label_fraction", "epsilon")
MONITOR_ROWS = 2000


def load_dataset(cfg: ExperimentConfig) -> TabularDataset:
    """Build (or read), split and normalize the configured dataset."""
    if cfg.dataset == "toy":
        ds = generate_two_circles(cfg.n_per_class, seed=cfg.data_seed)
    else:
        schema = Schema.from_file(cfg.schema) if cfg.schema else Schema()
        ds = load_csv(cfg.dataset, schema, seed=cfg.data_seed)
    ds = split(ds, cfg.test_fraction, seed=cfg.data_seed, index_file=cfg.split_file)
    method = cfg.normalize
    if method == "auto":
        method = "none" if cfg.dataset == "toy" else "zscore"
    if method != "none":
        ds = normalize_fit_apply(ds, method)
    return ds


def write_manifest(out: Path, cfg: ExperimentConfig, seed: int, extra: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    manifest = {"config_hash": cfg.digest(), "seed": seed, "version": VERSION, **(extra or {})}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _monitor(ds: TabularDataset):
    if ds.y is None:
        return None
    X_tr, y_tr = ds.train()
    X_m, y_m = X_tr[:MONITOR_ROWS], y_tr[:MONITOR_ROWS]
    if len(np.unique(y_m)) < 2:
        return None
    return lambda params: mean_interclass_distance(represent(params, X_m), y_m)


def run_pretrain(cfg: ExperimentConfig, ds: TabularDataset | None = None, out: str | Path | None = None,
                 seed: int | None = None, resume: bool = False, monitor: bool = True) -> PretrainResult:
    """Pretrain on the train split (labels unused except for the distance monitor)."""
    ds = ds if ds is not None else load_dataset(cfg)
    seed = cfg.seed if seed is None else seed
    cfg.validate(ds.d)
    out_path = Path(out) if out is not None else None
    if out_path is not None:
        write_manifest(out_path, cfg, seed, {"command": "pretrain", "d": ds.d})
    X_tr, _ = ds.train()
    return pretrain(X_tr, cfg.model_config(ds.d), cfg.train_config(seed=seed), out_dir=out_path,
                    monitor=_monitor(ds) if monitor else None, resume=resume)


@dataclass
class FinetuneReport:
    baseline: str
    mode: str
    label_fraction: float
    head_depth: int
    seed: int
    n_train: int
    train_accuracy: float
    test_accuracy: float
    interclass_distance: float | None

    FIELDS = ("baseline", "mode", "label_fraction", "head_depth", "seed", "n_train",
              "train_accuracy", "test_accuracy", "interclass_distance")

    def row(self) -> list[str]:
        out = []
        for k in self.FIELDS:
            v = getattr(self, k)
            out.append("" if v is None else (repr(v) if isinstance(v, float) else str(v)))
        return out


def featurizer(cfg: ExperimentConfig, d: int, params: ModelParams | None, seed: int):
    """Function mapping raw rows to the features the head is trained on."""
    if cfg.baseline == "raw-mlp":
        return lambda X: np.asarray(X, dtype=np.float64)
    if cfg.baseline == "rfg":
        mcfg = cfg.model_config(d)
        m = d * mcfg.width if cfg.mode == "concat" else mcfg.width
        fmap = RandomFeatureMap.create(d, m, seed=seed)
        return lambda X: rfg_features(fmap, X)
    if cfg.baseline == "met-r":
        params = met_r_checkpoint(cfg.model_config(d), seed)
    if params is None:
        raise ConfigError("a checkpoint is required unless a baseline is selected")
    if params.config.d != d:
        raise ConfigError(f"checkpoint expects d={params.config.d}, data has d={d}")
    return lambda X: represent(params, X, cfg.mode)


def run_finetune(cfg: ExperimentConfig, ds: TabularDataset, params: ModelParams | None = None,
                 seed: int | None = None, head_depth: int | None = None,
                 label_fraction: float | None = None) -> FinetuneReport:
    """Frozen features -> head on a stratified label fraction -> test accuracy."""
    if ds.y is None:
        raise ConfigError("finetuning needs a labelled dataset")
    seed = cfg.seed if seed is None else seed
    depth = cfg.head_depth if head_depth is None else head_depth
    frac = cfg.label_fraction if label_fraction is None else label_fraction
    feats = featurizer(cfg, ds.d, params, seed)
    X_tr, y_tr = ds.train()
    X_te, y_te = ds.test()
    rows = label_fraction_subsample(y_tr, frac, seed=seed)
    F_tr, F_te = feats(X_tr[rows]), feats(X_te)
    head = train_head(F_tr, y_tr[rows], cfg.head_config(seed=seed, hidden_layers=depth), k=ds.k)
    dist = mean_interclass_distance(F_te, y_te) if len(np.unique(y_te)) > 1 else None
    return FinetuneReport(cfg.baseline, cfg.mode, frac, depth, seed, len(rows),
                          accuracy(head, F_tr, y_tr[rows]), accuracy(head, F_te, y_te), dist)


def write_reports(path: Path, reports: list[FinetuneReport]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FinetuneReport.FIELDS)
        for r in reports:
            w.writerow(r.row())


def summary_text(reports: list[FinetuneReport]) -> str:
    lines = []
    for r in reports:
        dist = "n/a" if r.interclass_distance is None else f"{r.interclass_distance:.4f}"
        lines.append(f"[{r.baseline}/{r.mode}] seed={r.seed} depth={r.head_depth} fraction={r.label_fraction:g} "
                     f"n_train={r.n_train} train_acc={r.train_accuracy:.4f} test_acc={r.test_accuracy:.4f} "
                     f"interclass_distance={dist}")
    return "\n".join(lines) + "\n"


def run_finetune_eval(cfg: ExperimentConfig, checkpoint: str | Path | None, out: str | Path | None = None) -> list[FinetuneReport]:
    ds = load_dataset(cfg)
    cfg.validate(ds.d)
    params = load_checkpoint(checkpoint).params if checkpoint else None
    reports = [run_finetune(cfg, ds, params, seed=s) for s in cfg.seed_list()]
    if out is not None:
        out = Path(out)
        write_manifest(out, cfg, cfg.seed, {"command": "finetune", "checkpoint": str(checkpoint) if checkpoint else None})
        write_reports(out / "report.csv", reports)
        (out / "summary.txt").write_text(summary_text(reports))
    return reports


# --------------------------------------------------------------------------
# toy study
# --------------------------------------------------------------------------


@dataclass
class ToyStudyResult:
    pretrain: PretrainResult
    raw_2d: Path
    rep_2d: Path
    distance: Path


def _write_2d(path: Path, pts: np.ndarray, labels: np.ndarray) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["px", "py", "label"])
        for (px, py), c in zip(pts, labels):
            w.writerow([f"{px:.17g}", f"{py:.17g}", int(c)])
    return path


def run_toy_study(cfg: ExperimentConfig, out: str | Path) -> ToyStudyResult:
    """Pretrain on the two-circles data and emit plot-ready CSVs.

    ``raw_2d.csv`` and ``rep_2d.csv`` hold one row per example;
    ``distance.csv`` holds the inter-class distance at epoch 0 (initial
    weights) and after every epoch.
    """
    if cfg.dataset != "toy":
        raise ConfigError("toy-study only runs on the toy dataset")
    out = Path(out)
    ds = load_dataset(cfg)
    res = run_pretrain(cfg, ds, out=out / "pretrain")
    raw = _write_2d(out / "raw_2d.csv", project_2d(ds.X), ds.y)
    rep = _write_2d(out / "rep_2d.csv", project_2d(represent(res.params, ds.X)), ds.y)
    dist = out / "distance.csv"
    with open(dist, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "interclass_distance"])
        w.writerow([0, repr(res.initial_distance)])
        for row in res.history:
            w.writerow([row["epoch"], repr(row["interclass_distance"])])
    write_manifest(out, cfg, cfg.seed, {"command": "toy-study"})
    return ToyStudyResult(res, raw, rep, dist)


# --------------------------------------------------------------------------
# sweeps
# --------------------------------------------------------------------------


@dataclass
class SweepResult:
    rows: list[dict]
    summary: list[dict]
    pretrain_count: int


def _parse_value(axis: str, v):
    return int(v) if axis == "head_depth" else float(v)


def run_sweep(cfg: ExperimentConfig, axis: str, values, out: str | Path | None = None,
              ds: TabularDataset | None = None) -> SweepResult:
    """One pretrain/finetune per (value, seed); head_depth and label_fraction reuse one checkpoint."""
    axis = axis.replace("-", "_")
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}")
    values = [_parse_value(axis, v) for v in values]
    if not values:
        raise ConfigError("sweep needs at least one value")
    ds = ds if ds is not None else load_dataset(cfg)
    cfg.validate(ds.d)
    out = Path(out) if out is not None else None
    seeds = cfg.seed_list()
    rows, pretrains = [], 0

    finetune_only = axis in ("head_depth", "label_fraction")
    shared = None
    if finetune_only and cfg.baseline in ("none",):
        shared = run_pretrain(cfg, ds, out=None if out is None else out / "pretrain", monitor=False).params
        pretrains += 1

    for value in values:
        for seed in seeds:
            if finetune_only:
                kw = {axis: value}
                params = shared
            else:
                vcfg = replace(cfg, **{axis: value})
                vcfg.validate(ds.d)
                params = None
                if cfg.baseline == "none":
                    cell = None if out is None else out / f"{axis}={value:g}" / f"seed={seed}"
                    params = run_pretrain(vcfg, ds, out=cell, seed=seed, monitor=False).params
                    pretrains += 1
                kw = {}
            rep = run_finetune(cfg, ds, params, seed=seed, **kw)
            rows.append({"axis": axis, "value": value, "seed": seed,
                         "train_accuracy": rep.train_accuracy, "test_accuracy": rep.test_accuracy})
            log.info("sweep %s=%s seed=%d test_acc=%.4f", axis, value, seed, rep.test_accuracy)

    summary = []
    for value in values:
        accs = np.array([r["test_accuracy"] for r in rows if r["value"] == value])
        summary.append({"value": value, "mean": float(accs.mean()), "std": float(accs.std()), "n": len(accs)})

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(out, cfg, cfg.seed, {"command": "sweep", "axis": axis, "values": values,
                                            "pretrain_count": pretrains})
        with open(out / "sweep.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["axis", "value", "seed", "train_accuracy", "test_accuracy"])
            for r in rows:
                w.writerow([r["axis"], f"{r['value']:g}", r["seed"], repr(r["train_accuracy"]), repr(r["test_accuracy"])])
        with open(out / "summary.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["value", "mean_test_accuracy", "std_test_accuracy", "n"])
            for s in summary:
                w.writerow([f"{s['value']:g}", repr(s["mean"]), repr(s["std"]), s["n"]])
        text = "\n".join(f"{axis}={s['value']:g}: {100 * s['mean']:.2f}% +/- {100 * s['std']:.2f} (n={s['n']})"
                         for s in summary)
        (out / "summary.txt").write_text(text + "\n")
    return SweepResult(rows, summary, pretrains)
