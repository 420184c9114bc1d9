"""Command-line entry point: ``met-tab {pretrain,finetune,toy-study,sweep}``.

Exit codes: 0 success, 1 config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .config import BASELINES, ConfigError, from_preset, read_config_file, PRESETS
from .data import DataError
from .experiments import SWEEP_AXES, run_finetune_eval, run_pretrain, run_sweep, run_toy_study, summary_text
from .tensor import NonFiniteError

log = logging.getLogger("met_tab")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# flag -> (config key, type)
CONFIG_FLAGS = {
    "--dataset": ("dataset", str), "--schema": ("schema", str), "--split-file": ("split_file", str),
    "--test-fraction": ("test_fraction", float), "--n-per-class": ("n_per_class", int),
    "--normalize": ("normalize", str), "--data-seed": ("data_seed", int),
    "--e": ("e", int), "--fw": ("fw", int), "--heads": ("heads", int),
    "--enc-depth": ("enc_depth", int), "--dec-depth": ("dec_depth", int),
    "--mask-token-mode": ("mask_token_mode", str),
    "--epochs": ("epochs", int), "--batch-size": ("batch_size", int), "--mask-pct": ("mask_pct", float),
    "--epsilon": ("epsilon", float), "--lambda": ("lam", float), "--adv-steps": ("adv_steps", int),
    "--ascent-lr": ("ascent_lr", float), "--descent-lr": ("descent_lr", float),
    "--optimizer": ("optimizer", str), "--variant": ("variant", str),
    "--checkpoint-every": ("checkpoint_every", int),
    "--mode": ("mode", str), "--label-fraction": ("label_fraction", float), "--baseline": ("baseline", str),
    "--head-depth": ("head_depth", int), "--head-width": ("head_width", int),
    "--head-epochs": ("head_epochs", int), "--head-lr": ("head_lr", float),
    "--seed": ("seed", int), "--seeds": ("seeds", str), "--out": ("out", str),
}
CHOICES = {
    "--variant": ["met", "met-s"], "--mask-token-mode": ["shared", "per-coordinate", "through-encoder"],
    "--mode": ["concat", "average"], "--baseline": list(BASELINES), "--optimizer": ["adam", "sgd"],
    "--normalize": ["auto", "zscore", "minmax", "none"],
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file mirroring the flags")
    p.add_argument("--preset", choices=sorted(PRESETS))
    for flag, (dest, typ) in CONFIG_FLAGS.items():
        p.add_argument(flag, dest=dest, type=typ, default=None, choices=CHOICES.get(flag))
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="met-tab", description="Masked-encoding pretraining for tabular data.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    _add_common(p)
    p.add_argument("--resume", action="store_true", help="continue from OUT/last.npz")

    p = sub.add_parser("finetune", help="train a head on frozen features and report accuracy")
    _add_common(p)
    p.add_argument("--checkpoint", help="pretrained checkpoint (.npz); not needed with --baseline")

    p = sub.add_parser("toy-study", help="two-circles study with plot-ready CSVs")
    _add_common(p)

    p = sub.add_parser("sweep", help="accuracy table over one hyperparameter axis")
    _add_common(p)
    p.add_argument("--axis", required=True, choices=list(SWEEP_AXES) + [a.replace("_", "-") for a in SWEEP_AXES])
    p.add_argument("--values", required=True, help="comma-separated values")
    return parser


def resolve_config(args: argparse.Namespace):
    """Preset, then config file, then explicit flags."""
    values = read_config_file(args.config) if args.config else {}
    preset = args.preset or values.pop("preset", None)
    cfg = from_preset(preset)
    cfg.update(values)
    cfg.update({dest: getattr(args, dest) for dest, _ in CONFIG_FLAGS.values() if getattr(args, dest) is not None})
    cfg.validate()
    return cfg


def _thread_limit():
    n = os.environ.get("MET_TAB_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        out = Path(cfg.out)
        # overflow surfaces as NonFiniteError from the engine's own checks
        with _thread_limit(), np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            if args.command == "pretrain":
                res = run_pretrain(cfg, out=out, resume=args.resume)
                last = res.history[-1] if res.history else None
                print(f"wrote {out / 'final.npz'} ({len(res.history)} epochs)")
                if last:
                    print(f"final loss_std={last['loss_std']:.6f} loss_adv={last['loss_adv']:.6f}")
            elif args.command == "finetune":
                reports = run_finetune_eval(cfg, args.checkpoint, out=out)
                sys.stdout.write(summary_text(reports))
            elif args.command == "toy-study":
                res = run_toy_study(cfg, out)
                print(f"wrote {res.raw_2d}, {res.rep_2d}, {res.distance}")
            elif args.command == "sweep":
                res = run_sweep(cfg, args.axis, [v for v in args.values.split(",") if v.strip()], out=out)
                sys.stdout.write((out / "summary.txt").read_text())
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, FloatingPointError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
