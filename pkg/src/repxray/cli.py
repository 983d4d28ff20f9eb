"""Command-line interface: synth, train, fuse, classify, explain, hog, evaluate.

Exit status is 0 on success, 1 for validation errors and 2 for I/O errors;
failures also print one JSON line to stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, gradcam, hog, metrics, serialize
from .autodiff import TrainConfig
from .errors import ModelFileError, ModeError, ReproError, ValidationError
from .model import CLASS_NAMES, fuse_model, model_forward
from .tensor import softmax
from .train import evaluate, predict_proba, train_new

log = logging.getLogger("repxray")


def _class_arg(value):
    if value in CLASS_NAMES:
        return CLASS_NAMES.index(value)
    try:
        idx = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"class must be one of {CLASS_NAMES} or an index") from None
    if not 0 <= idx < len(CLASS_NAMES):
        raise argparse.ArgumentTypeError(f"class index must lie in [0, {len(CLASS_NAMES)})")
    return idx


def _load_input(path, model, roi):
    raw = data.read_image(path)
    target = tuple(model.input_shape[1:])
    note = None
    if raw.shape != target and not roi:
        note = f"resized {raw.shape[1]}x{raw.shape[0]} -> {target[1]}x{target[0]}"
    return raw, data.prepare(raw, target, roi), note


def cmd_synth(args):
    rows = data.generate_synthetic(args.out, args.n, args.seed)
    print(f"wrote {len(rows)} images to {args.out}")


def cmd_train(args):
    manifest = data.load_dataset(args.data, seed=args.split_seed)
    for name, c in manifest.counts().items():
        print(f"{name}: train {c['train']} test {c['test']}")
    x_train, y_train = data.load_split(manifest, "train", roi=args.roi)
    eval_set = data.load_split(manifest, "test", roi=args.roi)
    config = TrainConfig(epochs=args.epochs, learning_rate=args.lr, batch_size=args.batch_size, seed=args.seed)
    model, history = train_new(x_train, y_train, config, eval_set=eval_set if len(eval_set[1]) else None)
    serialize.save_model(model, args.out)
    log_path = Path(args.log) if args.log else Path(args.out).with_suffix(".log.csv")
    with open(log_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(history[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(history)
    for row in history:
        print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    print(f"saved {args.out}; log {log_path}")


def cmd_fuse(args):
    model = serialize.load_model(args.model)
    fused = fuse_model(model)
    serialize.save_model(fused, args.out)
    rng = np.random.default_rng(args.seed)
    probe = rng.uniform(-1, 1, (8,) + tuple(model.input_shape)).astype(np.float32)
    div = float(np.abs(model_forward(model, probe) - model_forward(fused, probe)).max())
    print(f"fused {len(fused.blocks)} blocks: {model.num_elements()} -> {fused.num_elements()} stored values")
    print(f"max |logit divergence| on probe batch: {div:.3e}")


def cmd_classify(args):
    model = serialize.load_model(args.model)
    _, img, note = _load_input(args.image, model, args.roi)
    if note:
        print(f"note: {note}")
    probs = predict_proba(model, img[None])[0]
    print(f"predicted: {CLASS_NAMES[int(probs.argmax())]}")
    for name, p in zip(CLASS_NAMES, probs):
        print(f"{name} {p:.6f}")


def cmd_explain(args):
    model = serialize.load_model(args.model)
    raw, img, note = _load_input(args.image, model, args.roi)
    if note:
        print(f"note: {note}")
    x = data.normalize(img, data.AugmentationConfig())[None, None].astype(model.dtype)
    cls = args.class_index
    if cls is None:
        cls = int(softmax(model_forward(model, x))[0].argmax())
    heat = gradcam.gradcam(model, x, cls, args.block)
    base = img if args.roi else raw
    if heat.shape != base.shape:
        heat = hog.resize_image(heat, *base.shape)
    data.write_png(args.out, gradcam.overlay(base, heat, args.alpha))
    print(f"class {CLASS_NAMES[cls]}: overlay written to {args.out}")


def cmd_hog(args):
    img = data.read_image(args.image)
    params = hog.HogParams(cell_size=args.cell_size, bins=args.bins)
    desc = hog.hog_descriptor(img, params)
    data.write_png(args.out, hog.hog_visualize(desc))
    print(f"descriptor length {len(desc)}; visualization written to {args.out}")
    boxes = hog.extract_roi(img, params)
    lines = [f"{b.x} {b.y} {b.width} {b.height} {b.side}" for b in boxes]
    if args.roi_out:
        Path(args.roi_out).write_text("x y width height side\n" + "\n".join(lines) + "\n")
    for line in lines:
        print(f"roi {line}")


def cmd_evaluate(args):
    model = serialize.load_model(args.model)
    manifest = data.load_dataset(args.data, seed=args.split_seed)
    images, labels = data.load_split(manifest, args.split, tuple(model.input_shape[1:]), args.roi)
    if len(labels) == 0:
        raise ValidationError(f"split {args.split!r} is empty")
    report, rocs, per_class = evaluate(model, images, labels)
    text, _ = metrics.render_report({metrics.PROPOSED_MODEL: per_class})
    report["fixtures"] = metrics.fixture_rows()
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    for name, roc in rocs.items():
        (report_path.parent / f"{report_path.stem}_roc_{name}.csv").write_text(roc.to_csv())
    print("confusion matrix (rows actual, columns predicted):")
    for name, row in zip(CLASS_NAMES, report["confusion_matrix"]):
        print(f"  {name:<10}" + "".join(f"{v:>6}" for v in row))
    print(f"overall accuracy {report['overall_accuracy']:.4f}")
    print(text)


def build_parser():
    p = argparse.ArgumentParser(prog="repxray", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=250, help="images per class")
    s.add_argument("--seed", type=int, required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a multi-branch model")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int, default=20)
    s.add_argument("--lr", type=float, default=0.001)
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--split-seed", type=int, default=0)
    s.add_argument("--roi", action="store_true", help="crop to the HOG lung ROI before resizing")
    s.add_argument("--log", help="per-epoch CSV (default: <out>.log.csv)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("fuse", help="re-parameterize into a plain 3x3 stack")
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0, help="probe batch seed")
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("classify", help="classify one image")
    s.add_argument("--model", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--roi", action="store_true")
    s.set_defaults(func=cmd_classify)

    s = sub.add_parser("explain", help="Grad-CAM overlay for one image")
    s.add_argument("--model", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--class", dest="class_index", type=_class_arg, default=None,
                   help="class name or index (default: predicted class)")
    s.add_argument("--out", required=True)
    s.add_argument("--block", type=int, default=-1, help="target block index (default: last)")
    s.add_argument("--alpha", type=float, default=0.4)
    s.add_argument("--roi", action="store_true")
    s.set_defaults(func=cmd_explain)

    s = sub.add_parser("hog", help="HOG visualization and lung ROI boxes")
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--roi-out")
    s.add_argument("--cell-size", type=int, default=8)
    s.add_argument("--bins", type=int, default=9)
    s.set_defaults(func=cmd_hog)

    s = sub.add_parser("evaluate", help="metrics, ROC curves and comparison report")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--split", choices=("test", "train", "all"), default="test")
    s.add_argument("--split-seed", type=int, default=0)
    s.add_argument("--roi", action="store_true")
    s.set_defaults(func=cmd_evaluate)
    return p


def _fail(kind, exc, status):
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
    return status


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except ModelFileError as exc:
        return _fail("io", exc, 2)
    except (ValidationError, ModeError, IndexError) as exc:
        return _fail("validation", exc, 1)
    except OSError as exc:
        return _fail("io", exc, 2)
    except ReproError as exc:
        return _fail("validation", exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
