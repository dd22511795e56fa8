"""Command-line entry point: ``agfanet {phantom,train,infer,eval,ablate}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

from . import metrics
from .data import (AugmentConfig, GeometryError, LabelMask, PhantomSpec, Sample, Volume, VolumeFormatError,
                   generate_phantom, kfold_split, load_dataset, load_volume, normalize, save_volume, write_manifest)
from .model import ConfigError, ModelConfig, build_network, config_from_text, config_to_text, named_config
from .tensor import ShapeError
from .training import (CheckpointError, NumericError, TrainConfig, TrainRun, ablation_json, ablation_table,
                       checkpoint_load, checkpoint_save, evaluate, predict, run_ablation, train)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _prepare(samples: Sequence[Sample]) -> List[Sample]:
    """Intensities rescaled to [0, 1] per volume, as used for training and inference."""
    return [Sample(normalize(s.volume), s.mask, s.id) for s in samples]


def _model_config(arg: str, base_channels: Optional[int]) -> ModelConfig:
    path = Path(arg)
    if path.is_file():
        cfg = config_from_text(path.read_text())
        if base_channels is not None:
            cfg = replace(cfg, base_channels=base_channels)
        return cfg
    return named_config(arg, base_channels if base_channels is not None else 8)


def _train_config(args, epochs: int, samples: Sequence[Sample]) -> TrainConfig:
    if args.no_augment:
        aug = None
    else:
        # default crop: 32 per axis, capped by the smallest volume in the dataset
        crop = args.crop or [min([32] + [s.volume.extents[a] for s in samples]) for a in range(3)]
        aug = AugmentConfig(crop=tuple(crop))
    return TrainConfig(epochs=epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed, augment=aug)


def _out_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise VolumeFormatError(f"cannot create output directory {p}: {exc}") from None
    return p


# -- commands ------------------------------------------------------------------------

def cmd_phantom(args) -> int:
    out = _out_dir(args.out_dir)
    entries = []
    for i in range(args.count):
        spec = PhantomSpec(seed=args.seed + i, extents=tuple(args.extents), spacing=tuple(args.spacing),
                           branch_count=args.branches, noise_sigma=args.noise)
        s = generate_phantom(spec, f"phantom_{i:03d}")
        vol_name, mask_name = f"{s.id}_volume.agv", f"{s.id}_mask.agv"
        save_volume(s.volume, out / vol_name)
        save_volume(s.mask, out / mask_name)
        entries.append({"id": s.id, "volume": vol_name, "mask": mask_name})
    write_manifest(out / "manifest.json", entries, {"seed": args.seed})
    print(f"wrote {args.count} phantoms and manifest.json to {out}")
    return EXIT_OK


def _folds(samples: List[Sample], k: int, seed: int):
    if k <= 1:
        return [(samples, [], [])]
    by_id = {s.id: s for s in samples}
    out = []
    for f in kfold_split([s.id for s in samples], k=k, seed=seed):
        out.append(tuple([by_id[i] for i in part] for part in (f.train, f.val, f.test)))
    return out


def cmd_train(args) -> int:
    cfg = _model_config(args.config, args.base_channels)
    samples = _prepare(load_dataset(args.data_manifest))
    tcfg = _train_config(args, args.epochs, samples)
    out = _out_dir(args.out)
    (out / "model.cfg").write_text(config_to_text(cfg))
    for i, (tr, val, test) in enumerate(_folds(samples, args.folds, args.seed)):
        fold_dir = _out_dir(out / f"fold{i}")
        with open(fold_dir / "train.log", "w") as log_file:
            def log(line, _f=log_file, _i=i):
                _f.write(line + "\n")
                _f.flush()
                print(f"[fold {_i}] {line}")

            net = build_network(cfg, args.seed)
            run = train(TrainRun(cfg, tcfg), tr, net, val_samples=val or None, log=log)
        checkpoint_save(net, run, fold_dir / "checkpoint.agck")
        if test:
            res = evaluate(net, test)
            (fold_dir / "test_report.json").write_text(res.raw.to_json() + "\n")
            (fold_dir / "test_report_postprocessed.json").write_text(res.post.to_json() + "\n")
    return EXIT_OK


def cmd_infer(args) -> int:
    net, _ = checkpoint_load(args.checkpoint)
    vol = load_volume(args.volume)
    if not isinstance(vol, Volume):
        raise VolumeFormatError(f"{args.volume}: expected an intensity volume, found a mask")
    mask = predict(net, normalize(vol), postprocess=args.postprocess)
    save_volume(LabelMask(mask.values, vol.spacing, vol.origin), args.out)
    print(f"wrote {args.out} ({int(mask.values.sum())} foreground voxels)")
    return EXIT_OK


def cmd_eval(args) -> int:
    pred, truth = load_volume(args.pred), load_volume(args.truth)
    for name, obj in (("pred", pred), ("truth", truth)):
        if not isinstance(obj, LabelMask):
            raise VolumeFormatError(f"--{name} must be a mask file")
    if not pred.same_geometry(truth):
        raise GeometryError(f"geometry mismatch: {pred.extents}/{pred.spacing}/{pred.origin} "
                            f"vs {truth.extents}/{truth.spacing}/{truth.origin}")
    rep = metrics.compute_report(pred.values, truth.values, truth.spacing)
    if args.report:
        Path(args.report).write_text(rep.to_json() + "\n")
    sys.stdout.write(rep.to_text())
    return EXIT_OK


def cmd_ablate(args) -> int:
    samples = _prepare(load_dataset(args.data_manifest))
    out = _out_dir(args.out)
    rows = run_ablation(samples, _train_config(args, args.epochs, samples), args.base_channels or 8, log=print)
    table = ablation_table(rows)
    (out / "ablation.txt").write_text(table)
    (out / "ablation.json").write_text(ablation_json(rows))
    sys.stdout.write(table)
    return EXIT_OK


# -- parser -------------------------------------------------------------------------------

def _add_training_flags(p, epochs_default: int) -> None:
    p.add_argument("--epochs", type=int, default=epochs_default, help=f"training epochs (default {epochs_default})")
    p.add_argument("--seed", type=int, default=0, help="seed for init, shuffling and augmentation (default 0)")
    p.add_argument("--batch-size", type=int, default=2, help="volumes per step (default 2)")
    p.add_argument("--lr", type=float, default=0.003, help="initial learning rate (default 0.003)")
    p.add_argument("--base-channels", type=int, default=None, help="first-level width (default 8)")
    p.add_argument("--no-augment", action="store_true", help="disable rotation/flip/crop augmentation")
    p.add_argument("--crop", type=int, nargs=3, default=None, metavar=("D", "H", "W"),
                   help="training crop size (default 32 per axis, capped by the smallest volume)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="agfanet", description="3D vessel segmentation with attention-guided feature fusion.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", help="generate synthetic vessel volumes and a manifest")
    p.add_argument("--count", type=int, default=4, help="number of phantoms (default 4)")
    p.add_argument("--seed", type=int, default=0, help="phantom i uses seed+i (default 0)")
    p.add_argument("--extents", type=int, nargs=3, default=[32, 32, 32], metavar=("D", "H", "W"),
                   help="grid size (default 32 32 32)")
    p.add_argument("--spacing", type=float, nargs=3, default=[1.0, 1.0, 1.0], metavar=("SD", "SH", "SW"),
                   help="voxel size in mm (default 1 1 1)")
    p.add_argument("--branches", type=int, default=3, help="tube segments per phantom (default 3)")
    p.add_argument("--noise", type=float, default=0.1, help="Gaussian noise sigma (default 0.1)")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="train one configuration, optionally over k folds")
    p.add_argument("--config", default="agfa", help="configuration name (baseline, net1..net9, agfa) or file (default agfa)")
    p.add_argument("--data-manifest", required=True, help="dataset manifest JSON")
    p.add_argument("--folds", type=int, default=1, help="k for k-fold training; 1 trains on everything (default 1)")
    p.add_argument("--out", required=True, help="output directory")
    _add_training_flags(p, 500)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="segment a volume with a trained checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint written by train")
    p.add_argument("--volume", required=True, help="input volume file")
    p.add_argument("--out", required=True, help="output mask file")
    p.add_argument("--postprocess", action="store_true", help="closing plus largest component (default off)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score a predicted mask against the ground truth")
    p.add_argument("--pred", required=True, help="predicted mask file")
    p.add_argument("--truth", required=True, help="ground-truth mask file")
    p.add_argument("--report", default=None, help="JSON report path (default: stdout only)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and score all eleven ablation configurations")
    p.add_argument("--data-manifest", required=True, help="dataset manifest JSON")
    p.add_argument("--out", required=True, help="output directory for ablation.txt/ablation.json")
    _add_training_flags(p, 2)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, UsageError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (VolumeFormatError, GeometryError, ShapeError, CheckpointError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
