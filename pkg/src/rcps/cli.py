"""``rcps`` command line: make-phantoms, train, eval, infer, plot.

Exit codes: 0 success, 1 validation error, 2 I/O error. Artifacts go to a
timestamped directory under ``$RCPS_OUTPUT_ROOT`` (default ``./runs``)
unless ``--out`` names one explicitly.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from .config import ConfigError, RunConfig
from .inference import evaluate, sliding_window_predict
from .network import load_checkpoint
from .plotting import plot_loss_curves, plot_overlay, plot_schedules, read_log
from .trainer import fit
from .volume_io import Dataset, NiftiFormatError, generate_phantoms, load_dataset, load_nifti, save_dataset, save_nifti

log = logging.getLogger("rcps")

OUTPUT_ROOT_ENV = "RCPS_OUTPUT_ROOT"
CONFIG_NAME = "config.yaml"
EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; here 2 means I/O, so re-route
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def run_directory(kind: str, out=None, force: bool = False) -> Path:
    """``out`` if given, else ``<root>/<kind>-<YYYYmmdd-HHMMSS>`` (suffixed on collision)."""
    if out is not None:
        path = Path(out)
        if path.exists() and any(path.iterdir()):
            if not force:
                raise UsageError(f"output directory {path} is not empty (use --force to overwrite)")
            shutil.rmtree(path)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        path = output_root() / f"{kind}-{stamp}"
        n = 1
        while path.exists():
            path = output_root() / f"{kind}-{stamp}-{n}"
            n += 1
    path.mkdir(parents=True, exist_ok=True)
    return path


def _overrides(args, mapping: dict) -> dict:
    """Dotted config overrides for the flags the user actually passed."""
    out = {}
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is None or value is False:
            continue
        out[key] = list(value) if isinstance(value, (list, tuple)) else value
    return out


def _load_config(args, base_dir=None, mapping=None) -> RunConfig:
    path = args.config
    if path is None and base_dir is not None and (Path(base_dir) / CONFIG_NAME).is_file():
        path = Path(base_dir) / CONFIG_NAME
    return config_mod.resolve(path, _overrides(args, mapping or {}))


# ---------------------------------------------------------------------------
# make-phantoms
# ---------------------------------------------------------------------------

PHANTOM_FLAGS = {"seed": "phantoms.seed", "shape": "phantoms.volume_shape", "classes": "phantoms.num_classes",
                 "noise": "phantoms.noise_sigma"}


def cmd_make_phantoms(args) -> int:
    if args.labeled < 0 or args.unlabeled < 0 or args.test < 0:
        raise UsageError("case counts must be non-negative")
    if args.labeled + args.unlabeled == 0:
        raise UsageError("--labeled and --unlabeled cannot both be 0")
    cfg = _load_config(args, mapping=PHANTOM_FLAGS)
    out = run_directory("phantoms", args.out, args.force)
    ds = generate_phantoms(cfg.phantoms, args.labeled, args.unlabeled, args.test)
    save_dataset(ds, out, cfg.phantoms)
    config_mod.dump(cfg, out / CONFIG_NAME)
    print(out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

TRAIN_FLAGS = {
    "seed": "train.seed",
    "epochs": "train.epochs",
    "lr": "train.lr0",
    "patch": "train.patch_size",
    "alpha": "train.loss.alpha",
    "beta": "train.loss.beta",
    "temp_T": "train.loss.temperature_T",
    "temp_tau": "train.loss.temperature_tau",
    "negatives": "train.sampling.num_negatives",
    "supervised_only": "train.supervised_only",
    "checkpoint_every": "train.checkpoint_every",
    "labeled_ratio": "data.labeled_ratio",
    "base_channels": "network.base_channels",
}


def apply_labeled_ratio(ds: Dataset, ratio) -> Dataset:
    if ratio is None:
        return ds
    pool = ds.num_labeled + ds.num_unlabeled
    keep = int(round(ratio * pool))
    if keep < 1 or keep > ds.num_labeled:
        raise UsageError(f"labeled_ratio {ratio} needs {keep} labeled cases; dataset has {ds.num_labeled}")
    demoted = [v for v, _ in ds.labeled[keep:]]
    return Dataset(ds.labeled[:keep], demoted + list(ds.unlabeled), ds.test)


def _num_classes_of(data_dir) -> int:
    from .volume_io import read_manifest

    return int(read_manifest(data_dir)["num_classes"])


def cmd_train(args) -> int:
    resume = Path(args.resume) if args.resume else None
    if resume is not None and not (resume / "manifest.json").is_file():
        raise FileNotFoundError(f"checkpoint not found: {resume}")
    base = resume.parent if resume is not None else None
    cfg = _load_config(args, base_dir=base, mapping=TRAIN_FLAGS)
    num_classes = _num_classes_of(args.data)
    if cfg.network.num_classes != num_classes:
        cfg = dataclasses.replace(cfg, network=dataclasses.replace(cfg.network, num_classes=num_classes))
    if resume is not None and args.out is None:
        run_dir = base
    else:
        run_dir = run_directory("train", args.out, args.force)
    dataset = apply_labeled_ratio(load_dataset(args.data), cfg.data.labeled_ratio)
    config_mod.dump(cfg, run_dir / CONFIG_NAME)
    (run_dir / "data.json").write_text(json.dumps({"data": str(Path(args.data).resolve())}, indent=2) + "\n")
    result = fit(dataset, cfg.network, cfg.train, run_dir=run_dir, resume=resume, max_steps_override=args.max_steps)
    log.info("wrote %s", ", ".join(p.name for p in result.checkpoints))
    print(run_dir)
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval / infer
# ---------------------------------------------------------------------------


def _model_and_config(args):
    ckpt = Path(args.checkpoint)
    cfg = _load_config(args, base_dir=ckpt.parent, mapping={"patch": "inference.patch_size",
                                                           "overlap": "inference.overlap"})
    expected = cfg.network if args.config is not None else None
    model, manifest, _ = load_checkpoint(ckpt, expected=expected)
    model.eval()
    cfg = dataclasses.replace(cfg, network=model.cfg)
    return model, cfg, manifest


def cmd_eval(args) -> int:
    model, cfg, manifest = _model_and_config(args)
    ds = load_dataset(args.data)
    cases = ds.test if args.split == "test" else ds.labeled
    if not cases:
        raise UsageError(f"dataset split '{args.split}' is empty")
    out = run_directory("eval", args.out, args.force)
    pred_dir = out / "predictions" if args.save_preds else None
    if pred_dir is not None:
        pred_dir.mkdir()
    with torch.no_grad():
        table = evaluate(model, cases, cfg.inference, num_classes=model.cfg.num_classes, save_dir=pred_dir)
    table.write(out / "metrics.csv")
    overall = table.overall()
    summary = {"checkpoint": str(Path(args.checkpoint).resolve()), "step": manifest["step"],
               "split": args.split, "cases": len(cases),
               **{k: getattr(overall, k) for k in ("dsc_mean", "dsc_std", "hd95_mean", "asd_mean", "undefined")}}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    config_mod.dump(cfg, out / CONFIG_NAME)
    print(f"DSC {100 * overall.dsc_mean:.2f}  HD95 {overall.hd95_mean:.2f}  ASD {overall.asd_mean:.2f}  -> {out}")
    return EXIT_OK


def _nifti_inputs(path: Path) -> list:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.name.endswith((".nii", ".nii.gz")))
        if not files:
            raise FileNotFoundError(f"no NIfTI files in {path}")
        return files
    if not path.exists():
        raise FileNotFoundError(f"input not found: {path}")
    return [path]


def cmd_infer(args) -> int:
    model, cfg, _ = _model_and_config(args)
    inputs = _nifti_inputs(Path(args.input))
    out = run_directory("infer", args.out, args.force)
    with torch.no_grad():
        for path in inputs:
            v, _ = load_nifti(path)
            pred = sliding_window_predict(model, v, cfg.inference)
            save_nifti(pred, out / f"{v.identifier}_pred.nii", spacing=v.spacing)
    config_mod.dump(cfg, out / CONFIG_NAME)
    print(out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# plot
# ---------------------------------------------------------------------------


def cmd_plot(args) -> int:
    if args.log is None and args.image is None:
        raise UsageError("nothing to plot: pass --log and/or --image")
    if args.image is None and (args.gt or args.pred):
        raise UsageError("--gt/--pred need --image")
    out = run_directory("plot", args.out, args.force)
    written = []
    if args.log is not None:
        log_path = Path(args.log)
        if log_path.is_dir():
            log_path = log_path / "train_log.csv"
        curves = read_log(log_path)
        written += [plot_loss_curves(curves, out / "loss_curves.png"), plot_schedules(curves, out / "schedules.png")]
    if args.image is not None:
        image, _ = load_nifti(args.image)
        gt = load_nifti(args.gt, label=True)[1].data if args.gt else None
        pred = load_nifti(args.pred, label=True)[1].data if args.pred else None
        written.append(plot_overlay(np.asarray(image.data), gt, pred, out / f"overlay_{image.identifier}.png"))
    for p in written:
        print(p)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rcps", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="YAML or JSON run configuration")
        sp.add_argument("--out", help="output directory (default: timestamped under $%s)" % OUTPUT_ROOT_ENV)
        sp.add_argument("--force", action="store_true", help="overwrite a non-empty --out")

    mp = sub.add_parser("make-phantoms", help="synthesise a labeled/unlabeled phantom dataset")
    mp.add_argument("--labeled", type=int, default=4)
    mp.add_argument("--unlabeled", type=int, default=36)
    mp.add_argument("--test", type=int, default=0)
    mp.add_argument("--seed", type=int)
    mp.add_argument("--shape", type=int, nargs=3, metavar=("H", "W", "D"))
    mp.add_argument("--classes", type=int)
    mp.add_argument("--noise", type=float)
    common(mp)
    mp.set_defaults(func=cmd_make_phantoms)

    tp = sub.add_parser("train", help="train a model on a dataset directory")
    tp.add_argument("--data", required=True)
    tp.add_argument("--seed", type=int)
    tp.add_argument("--epochs", type=int)
    tp.add_argument("--lr", type=float)
    tp.add_argument("--patch", type=int, nargs=3, metavar=("H", "W", "D"))
    tp.add_argument("--alpha", type=float, help="plateau weight of the rectified pseudo loss")
    tp.add_argument("--beta", type=float, help="plateau weight of the contrastive loss")
    tp.add_argument("--temp-T", dest="temp_T", type=float, help="sharpening temperature")
    tp.add_argument("--temp-tau", dest="temp_tau", type=float, help="contrastive temperature")
    tp.add_argument("--negatives", type=int, help="negatives per anchor")
    tp.add_argument("--labeled-ratio", dest="labeled_ratio", type=float)
    tp.add_argument("--base-channels", dest="base_channels", type=int)
    tp.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, help="epochs between checkpoints")
    tp.add_argument("--supervised-only", dest="supervised_only", action="store_true")
    tp.add_argument("--resume", help="checkpoint directory to continue from")
    tp.add_argument("--max-steps", dest="max_steps", type=int, help="stop after this many steps")
    common(tp)
    tp.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "score a checkpoint on a labeled split"),
                                 ("infer", cmd_infer, "predict label maps for NIfTI volumes")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--checkpoint", required=True)
        if name == "eval":
            sp.add_argument("--data", required=True)
            sp.add_argument("--split", choices=("test", "labeled"), default="test")
            sp.add_argument("--save-preds", dest="save_preds", action="store_true")
        else:
            sp.add_argument("--input", required=True, help="NIfTI file or directory")
        sp.add_argument("--patch", type=int, nargs=3, metavar=("H", "W", "D"))
        sp.add_argument("--overlap", type=float)
        common(sp)
        sp.set_defaults(func=func)

    pp = sub.add_parser("plot", help="learning curves and slice overlays")
    pp.add_argument("--log", help="train_log.csv or a run directory")
    pp.add_argument("--image")
    pp.add_argument("--gt")
    pp.add_argument("--pred")
    common(pp, config=False)
    pp.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(levelname)s %(message)s")
        return args.func(args)
    except NiftiFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
