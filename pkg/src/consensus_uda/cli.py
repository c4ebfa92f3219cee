"""Command-line entry point.

Exit codes: 0 success, 2 usage error, 3 data/format error, 4 validation
failure (gradcheck over tolerance, non-finite gradients).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, toynet
from .errors import DataError, NonFiniteGradientError
from .fusion import fuse_directory, list_predictions
from .metrics import ConfusionMatrix, format_machine_report, format_report, summarize
from .pipeline import PipelineConfig, run_pipeline
from .synth import SceneSpec, default_sources, gen_dataset
from .taxonomy import apply_mapping, load_config
from .tensor_io import read_image, read_labelmap, write_labelmap, write_probmap
from .uda_loss import kld_uncertainty

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VALIDATION = 0, 2, 3, 4
GRADCHECK_TOL = 1e-4

log = logging.getLogger("consensus_uda")


class UsageError(Exception):
    pass


def write_run_manifest(path, args, inputs=(), outputs=()):
    flags = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    manifest = {
        "subcommand": args.command,
        "flags": flags,
        "seed": getattr(args, "seed", None),
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "version": __version__,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


def _parse_sources(specs):
    out = []
    for spec in specs or []:
        name, sep, directory = spec.partition("=")
        if not sep or not name or not directory:
            raise UsageError(f"--sources expects name=dir, got {spec!r}")
        out.append((name, Path(directory)))
    return out


def _image_files(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"not a directory: {directory}")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() == ".ppm")
    if not files:
        raise DataError(f"no .ppm images in {directory}")
    return files


def cmd_synth(args) -> int:
    config = load_config(args.config)
    scene = SceneSpec(width=args.size, height=args.size, seed=args.seed)
    manifest = gen_dataset(scene, default_sources(config), args.train, args.test, args.out)
    print(f"wrote {len(manifest.entries)} scenes to {args.out}")
    write_run_manifest(Path(args.out) / "run.json", args, outputs=[Path(args.out) / "manifest.txt"])
    return EXIT_OK


def cmd_fuse(args) -> int:
    config = load_config(args.config)
    sources = _parse_sources(args.sources)
    if not sources:
        raise UsageError("fuse needs at least one --sources name=dir")
    report = fuse_directory(config, sources, args.out, args.target_taxonomy)
    sys.stdout.write(report.summary_text())
    write_run_manifest(Path(args.out) / "run.json", args, inputs=[d for _, d in sources], outputs=[args.out])
    return EXIT_OK


def _load_pairs(image_dir, label_dir):
    images, labels, names = [], [], []
    for path in _image_files(image_dir):
        label_path = Path(label_dir) / f"{path.stem}.pgm"
        if not label_path.exists():
            raise DataError(f"no label map {label_path} for image {path}")
        images.append(read_image(path))
        labels.append(read_labelmap(label_path))
        if labels[-1].shape != images[-1].shape[:2]:
            raise DataError(f"{label_path}: shape {labels[-1].shape} does not match image {path}")
        names.append(path.stem)
    return images, labels, names


def cmd_train(args) -> int:
    train_cfg = toynet.TrainConfig(
        epochs=args.epochs, batch_size=args.batch, lr=args.lr, seed=args.seed,
        weights_mode=args.weights, hidden=args.hidden,
    )
    config = load_config(args.config)
    target = config.taxonomy(args.target_taxonomy)
    images, pseudo, _ = _load_pairs(args.images, args.pseudo)
    val = None
    eval_classes = [c for c in range(len(target)) if c not in target.ids_named("other")]
    if args.val_images or args.val_gt:
        if not (args.val_images and args.val_gt):
            raise UsageError("--val-images and --val-gt go together")
        vi, vg, _ = _load_pairs(args.val_images, args.val_gt)
        val = (vi, vg)
    result = toynet.train(train_cfg, images, pseudo, len(target), val=val, eval_classes=eval_classes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    toynet.save_model(result.params, out / "model.tnet")
    lines = [e.line() for e in result.log]
    (out / "train.log").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    write_run_manifest(out / "run.json", args, inputs=[args.images, args.pseudo],
                       outputs=[out / "model.tnet", out / "train.log"])
    return EXIT_OK


def cmd_infer(args) -> int:
    params = toynet.load_model(args.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.probs:
        (out / "probs").mkdir(exist_ok=True)
    if args.losscheck:
        Path(args.losscheck).mkdir(parents=True, exist_ok=True)
    for path in _image_files(args.images):
        image = read_image(path)
        primary, aux = toynet.forward(params, image)
        write_labelmap(np.argmax(primary, axis=-1).astype(np.uint8), out / f"{path.stem}.pgm")
        if args.probs:
            write_probmap(primary, out / "probs" / f"{path.stem}.pmf")
        if args.losscheck:
            write_probmap(kld_uncertainty(primary, aux)[..., None], Path(args.losscheck) / f"{path.stem}.pmf")
    outputs = [out] + ([args.losscheck] if args.losscheck else [])
    write_run_manifest(out / "run.json", args, inputs=[args.model, args.images], outputs=outputs)
    return EXIT_OK


def cmd_eval(args) -> int:
    config = load_config(args.config)
    target = config.taxonomy(args.target_taxonomy)
    gt_files = list_predictions(args.gt)
    pred_files = list_predictions(args.pred)
    missing = sorted(set(gt_files) - set(pred_files))
    if missing:
        raise DataError(f"no prediction for ground-truth files {missing}")
    if not gt_files:
        raise DataError(f"no ground-truth label maps in {args.gt}")
    cm = ConfusionMatrix(len(target))
    for stem in sorted(gt_files):
        gt = read_labelmap(gt_files[stem])
        pred = read_labelmap(pred_files[stem])
        if gt.shape != pred.shape:
            raise DataError(f"{pred_files[stem]}: shape {pred.shape} != ground truth {gt_files[stem]} {gt.shape}")
        if args.source_taxonomy:
            pred = apply_mapping(config.mapping(args.source_taxonomy, args.target_taxonomy), pred)
        cm.accumulate(gt, pred)
    eval_classes = [c for c in range(len(target)) if c not in target.ids_named("other")]
    rows = [(args.label, *summarize(cm, eval_classes))]
    sys.stdout.write(format_report(rows, [target.classes[c] for c in eval_classes]))
    if args.report:
        text_path, tsv_path = _report_paths(args.report)
        text_path.write_text(format_report(rows, [target.classes[c] for c in eval_classes]), encoding="utf-8")
        tsv_path.write_text(format_machine_report(rows), encoding="utf-8")
        write_run_manifest(Path(str(args.report) + ".run.json"), args, inputs=[args.gt, args.pred],
                           outputs=[text_path, tsv_path])
    return EXIT_OK


def _report_paths(report):
    """The text table goes to ``report``, the machine-readable lines to ``report`` + ``.tsv``."""
    report = Path(report)
    report.parent.mkdir(parents=True, exist_ok=True)
    return report, report.with_name(report.name + ".tsv")


def cmd_gradcheck(args) -> int:
    report = toynet.gradcheck(seed=args.seed, size=args.size, hidden=args.hidden, n_classes=args.classes)
    for name, err in report.max_rel_error.items():
        print(f"{name:8s} max_rel_error={err:.3e}")
    print(f"seed={args.seed} max_rel_error={report.worst:.3e} skipped={report.skipped} "
          f"tolerance={GRADCHECK_TOL:g} {'PASS' if report.worst < GRADCHECK_TOL else 'FAIL'}")
    if args.out:
        write_run_manifest(Path(args.out) / "run.json", args)
    return EXIT_OK if report.worst < GRADCHECK_TOL else EXIT_VALIDATION


def cmd_pipeline(args) -> int:
    cfg = PipelineConfig(
        seed=args.seed, n_train=args.train, n_test=args.test, size=args.size, epochs=args.epochs,
        batch_size=args.batch, lr=args.lr, weights_mode=args.weights, hidden=args.hidden,
        target=args.target_taxonomy,
    )
    result = run_pipeline(args.out, cfg, load_config(args.config))
    sys.stdout.write(result.report)
    if args.report:
        text_path, tsv_path = _report_paths(args.report)
        text_path.write_text(result.report, encoding="utf-8")
        tsv_path.write_text((Path(args.out) / "report.tsv").read_text(encoding="utf-8"), encoding="utf-8")
    write_run_manifest(Path(args.out) / "run.json", args,
                       outputs=[Path(args.out) / "report.txt", Path(args.out) / "report.tsv"])
    return EXIT_OK


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _seed(text):
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="consensus-uda", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", type=Path, default=None, help="taxonomy/mapping file (default: bundled label-mapping config)")
        if seed:
            p.add_argument("--seed", type=_seed, default=0)

    def training(p, epochs):
        p.add_argument("--epochs", type=_positive_int, default=epochs)
        p.add_argument("--batch", type=_positive_int, default=8)
        p.add_argument("--lr", type=float, default=0.0005)
        p.add_argument("--weights", choices=["none", "freq"], default="none")
        p.add_argument("--hidden", type=_positive_int, default=16)
        p.add_argument("--target-taxonomy", default="greenhouse")

    p = sub.add_parser("synth", help="generate a seeded synthetic dataset")
    common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--train", type=_positive_int, default=60)
    p.add_argument("--test", type=_positive_int, default=12)
    p.add_argument("--size", type=_positive_int, default=64)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fuse", help="consensus pseudo-labels from source predictions")
    common(p, seed=False)
    p.add_argument("--sources", action="append", metavar="NAME=DIR", required=True)
    p.add_argument("--target-taxonomy", default="greenhouse")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("train", help="train the toy network on pseudo-labels")
    common(p)
    training(p, epochs=30)
    p.add_argument("--images", type=Path, required=True)
    p.add_argument("--pseudo", type=Path, required=True)
    p.add_argument("--val-images", type=Path)
    p.add_argument("--val-gt", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run a trained model over a directory of images")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--images", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--probs", action="store_true", help="also write primary-branch PMF1 maps to OUT/probs")
    p.add_argument("--losscheck", type=Path, metavar="DIR",
                   help="dump per-pixel branch KL divergence as single-channel PMF1")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="IoU/mIoU of predictions against ground truth")
    common(p, seed=False)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--target-taxonomy", default="greenhouse")
    p.add_argument("--source-taxonomy", help="map predictions from this taxonomy first (no-adapt evaluation)")
    p.add_argument("--label", default="prediction")
    p.add_argument("--report", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="verify analytic gradients by central differences")
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--size", type=_positive_int, default=8)
    p.add_argument("--hidden", type=_positive_int, default=16)
    p.add_argument("--classes", type=_positive_int, default=4)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("pipeline", help="full synthetic comparison of no-adapt, single- and multi-source training")
    common(p)
    training(p, epochs=PipelineConfig.epochs)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--train", type=_positive_int, default=60)
    p.add_argument("--test", type=_positive_int, default=12)
    p.add_argument("--size", type=_positive_int, default=64)
    p.add_argument("--report", type=Path)
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteGradientError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
