"""Command-line surface: fuse, verify, flops, anchors, infer, eval, bench.

Exit codes: 0 success, 1 verification/metric failure, 2 usage error,
3 I/O or format error (bad files, wrong weight mode).
"""

import argparse
import hashlib
import os
import sys

import numpy as np

from .analysis import compare_osa_elan, kmeans_anchors, model_complexity, read_label_dir
from .errors import ConfigError, ImageFormatError, ShapeError, StateError, WeightFileError
from .imageio import Image, read_image
from .metrics import evaluate, fps_benchmark
from .model import (
    build_model,
    forward,
    load_config,
    load_weights,
    reparameterize_model,
    save_weights,
)
from .pipeline import detect, format_detection
from .kernels import backend_name
from .reparam import TRAIN

_IMAGE_EXTS = (".ppm", ".pgm")


def _load_model(args):
    cfg = load_config(args.config)
    return cfg, load_weights(cfg, args.weights)


def _synthetic_image(size: int = 320) -> Image:
    """Deterministic gradient-plus-disc test card."""
    yy, xx = np.mgrid[0:size, 0:size]
    r = np.hypot(xx - size / 2, yy - size / 3)
    pixels = np.stack(
        [
            (xx * 255 / size).astype(np.uint8),
            (yy * 255 / size).astype(np.uint8),
            np.where(r < size / 5, 220, 40).astype(np.uint8),
        ],
        axis=2,
    )
    return Image(width=size, height=size, pixels=np.ascontiguousarray(pixels))


def _image_paths(directory):
    paths = [
        os.path.join(directory, p)
        for p in sorted(os.listdir(directory))
        if p.lower().endswith(_IMAGE_EXTS)
    ]
    if not paths:
        raise ImageFormatError(f"no .ppm/.pgm images under {directory}")
    return paths


def cmd_fuse(args) -> int:
    cfg = load_config(args.config)
    model = load_weights(cfg, args.weights_in)
    before = model.parameter_count
    fused = reparameterize_model(model)
    save_weights(fused, args.weights_out)
    after = fused.parameter_count
    print(f"parameters: {before:,} -> {after:,} ({before - after:,} removed)")
    return 0


def cmd_verify(args) -> int:
    cfg, model = _load_model(args)
    if model.mode != TRAIN:
        raise StateError("verify needs train-mode weights (dual-path comparison)")
    fused = reparameterize_model(model)
    rng = np.random.default_rng(args.seed)
    s = cfg.input_size
    worst = 0.0
    devs = []
    for _ in range(args.trials):
        x = rng.uniform(0.0, 1.0, (1, 3, s, s)).astype(np.float32)
        for a, b in zip(forward(model, x), forward(fused, x)):
            devs.append(float(np.abs(a - b).max()))
    worst = max(devs)
    print(f"trials: {args.trials}  max deviation: {worst:.3e}  "
          f"mean deviation: {sum(devs) / len(devs):.3e}  tolerance: {args.tolerance:.3e}")
    if worst <= args.tolerance:
        print("verify: PASS")
        return 0
    print("verify: FAIL")
    return 1


def cmd_flops(args) -> int:
    if args.paper_compare:
        c, m, n = args.paper_compare
        report = compare_osa_elan(c, m, n)
        print(report.to_csv() if args.csv else report.to_text())
        return 0
    cfg = load_config(args.config)
    reports = model_complexity(build_model(cfg, seed=0))
    if args.csv:
        print("mode,flops,mac")
        print(f"train,{reports.train.flops},{reports.train.mac}")
        print(f"deployed,{reports.deployed.flops},{reports.deployed.mac}")
        return 0
    for mode, report in (("train", reports.train), ("deployed", reports.deployed)):
        print(f"== {mode} ==")
        print(report.to_text())
        print()
    return 0


def cmd_anchors(args) -> int:
    labels = read_label_dir(args.labels_dir)
    boxes = [b for bs in labels.values() for b in bs]
    if not boxes:
        raise ConfigError(f"no label boxes under {args.labels_dir}")
    anchors = kmeans_anchors(
        boxes, k=args.k, input_size=args.input_size, seed=args.seed, metric=args.metric
    )
    unique = {(round(w, 6), round(h, 6)) for w, h in anchors.pairs}
    if len(unique) < len(anchors.pairs):
        print("warning: degenerate corpus, duplicated anchor centroids", file=sys.stderr)
    for w, h in anchors.pairs:
        print(f"{w:.1f}x{h:.1f}")
    print("anchors: " + " ".join(f"{w:g}x{h:g}" for w, h in anchors.pairs))
    return 0


def cmd_infer(args) -> int:
    _, model = _load_model(args)
    img = read_image(args.image)
    dets, times = detect(model, img, conf_thresh=args.conf, iou_thresh=args.iou)
    for d in dets:
        print(format_detection(d))
    print(
        f"# phases: preprocess {times.preprocess * 1e3:.2f} ms, "
        f"forward {times.forward * 1e3:.2f} ms, "
        f"postprocess {times.postprocess * 1e3:.2f} ms",
        file=sys.stderr,
    )
    return 0


def cmd_eval(args) -> int:
    cfg, model = _load_model(args)
    labels = read_label_dir(args.labels_dir)
    preds_by_image, gts_by_image = [], []
    total_time = 0.0
    n_images = 0
    for path in _image_paths(args.images_dir):
        stem = os.path.splitext(os.path.basename(path))[0]
        img = read_image(path)
        dets, times = detect(model, img, conf_thresh=args.conf, iou_thresh=args.iou)
        preds_by_image.append(dets)
        gts = [
            (b.class_id, (b.cx * img.width, b.cy * img.height,
                          b.w * img.width, b.h * img.height))
            for b in labels.get(stem, [])
        ]
        gts_by_image.append(gts)
        total_time += times.total
        n_images += 1
    result = evaluate(preds_by_image, gts_by_image, iou_t=0.5)
    fps = n_images / total_time if total_time > 0 else 0.0
    with open(args.config, "rb") as fh:
        config_hash = hashlib.sha256(fh.read()).hexdigest()[:12]
    print(f"# conf_thresh={args.conf} iou_thresh={args.iou} (assumed; see docs)")
    if result.degenerate:
        print("# warning: degenerate counts (a zero denominator was defined as 0.0)")
    if args.csv:
        print(result.to_csv(extra={
            "FPS": f"{fps:.4f}", "config_hash": config_hash,
            "conf_thresh": args.conf, "iou_thresh": args.iou,
        }), end="")
    else:
        print(f"{'Precision':>10} {'Recall':>10} {'AP50':>10} {'AP50:95':>10} {'FPS':>10}")
        print(f"{result.precision:>10.3f} {result.recall:>10.3f} "
              f"{result.ap50:>10.3f} {result.ap50_95:>10.3f} {fps:>10.1f}")
    return 0


def cmd_bench(args) -> int:
    cfg, model = _load_model(args)
    if args.images_dir:
        images = [read_image(p) for p in _image_paths(args.images_dir)]
    else:
        images = [_synthetic_image()]
    report = fps_benchmark(model, images, warmup=args.warmup, runs=args.runs)
    print(f"# kernel backend: {backend_name()}")
    print(report.to_csv() if args.csv else report.to_text())
    if len(report.rows) == 2:
        train_row, deployed_row = report.rows
        ratio = deployed_row.fps / train_row.fps if train_row.fps > 0 else float("nan")
        print(f"# deployed/train speed ratio: {ratio:.2f} (informational, hardware-bound)")
    reports = model_complexity(model)
    print(f"# analyzer flops: train {reports.train.flops:,} "
          f"deployed {reports.deployed.flops:,}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rcsnet",
        description="Reparameterized channel-shuffle detector toolkit (CPU)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fuse", help="reparameterize train weights into deployed form")
    p.add_argument("--config", required=True)
    p.add_argument("--weights-in", required=True)
    p.add_argument("--weights-out", required=True)
    p.set_defaults(fn=cmd_fuse)

    p = sub.add_parser("verify", help="dual-path train-vs-deployed equivalence check")
    p.add_argument("--config", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("flops", help="complexity analysis and reference constants")
    p.add_argument("--config")
    p.add_argument("--paper-compare", nargs=3, type=int, metavar=("C", "M", "N"),
                   help="print closed-form module costs at width C, spatial M, depth N")
    p.add_argument("--csv", action="store_true")
    p.set_defaults(fn=cmd_flops)

    p = sub.add_parser("anchors", help="regenerate anchors by K-means over labels")
    p.add_argument("--labels-dir", required=True)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--input-size", type=int, default=640)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--metric", choices=("iou", "euclidean"), default="iou")
    p.set_defaults(fn=cmd_anchors)

    p = sub.add_parser("infer", help="detect objects in one PPM/PGM image")
    p.add_argument("--config", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--conf", type=float, default=0.25)
    p.add_argument("--iou", type=float, default=0.45)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="precision/recall/AP metrics over a dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--images-dir", required=True)
    p.add_argument("--labels-dir", required=True)
    p.add_argument("--conf", type=float, default=0.25)
    p.add_argument("--iou", type=float, default=0.45)
    p.add_argument("--csv", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="three-phase FPS benchmark")
    p.add_argument("--config", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--images-dir")
    p.add_argument("--csv", action="store_true")
    p.set_defaults(fn=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.fn is cmd_flops and not args.config and not args.paper_compare:
        parser.error("flops needs --config or --paper-compare")
    try:
        return args.fn(args)
    except (WeightFileError, ConfigError, ImageFormatError, StateError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
