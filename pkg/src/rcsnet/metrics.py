"""Detection evaluation: IoU matching, precision/recall, AP50, AP50:95,
and the three-phase FPS benchmark.

AP integration defaults to 101-point interpolation (precision envelope
sampled at recall 0, 0.01, ..., 1.0); the exact all-point staircase area
is available as method="exact". AP50:95 averages the ten IoU thresholds
0.50, 0.55, ..., 0.95.
"""

import csv
import io
import statistics
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import Model, reparameterize_model
from .pipeline import (
    DEFAULT_CONF_THRESH,
    DEFAULT_IOU_THRESH,
    Detection,
    detect,
)
from .reparam import TRAIN

# thresholds built from integer hundredths so 0.70 compares exactly
AP_50_95_THRESHOLDS = tuple((50 + 5 * i) / 100.0 for i in range(10))

GroundTruth = tuple[int, tuple[float, float, float, float]]  # class_id, cxcywh


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn) < 0:
            raise ValueError(f"negative confusion counts: {self}")


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple[float, ...] = (0.5,)
    conf_thresh: float = DEFAULT_CONF_THRESH

    def __post_init__(self):
        ts = self.iou_thresholds
        if not ts or any(not 0.0 < t < 1.0 for t in ts):
            raise ValueError(f"iou thresholds must lie in (0, 1): {ts}")
        if any(a >= b for a, b in zip(ts, ts[1:])):
            raise ValueError(f"iou thresholds must be strictly increasing: {ts}")


def _to_xyxy(box):
    cx, cy, w, h = box
    return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def iou(a, b) -> float:
    """Intersection over union of two xyxy boxes."""
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def match_detections(
    preds: Sequence[Detection],
    gts: Sequence[GroundTruth],
    iou_t: float,
) -> tuple[ConfusionCounts, list[bool]]:
    """Greedy matching; preds must already be sorted by descending confidence.

    Each prediction claims the highest-IoU unmatched ground truth of its
    class with IoU >= iou_t (TP), else counts as FP; leftover ground truths
    are FN. Returns the counts plus a per-prediction TP flag list.
    """
    gt_xyxy = [(_to_xyxy(box), cls) for cls, box in gts]
    taken = [False] * len(gts)
    flags = []
    for det in preds:
        box = _to_xyxy(det.box)
        best, best_iou = -1, 0.0
        for gi, (gbox, gcls) in enumerate(gt_xyxy):
            if taken[gi] or gcls != det.class_id:
                continue
            val = iou(box, gbox)
            if val >= iou_t and val > best_iou:
                best, best_iou = gi, val
        if best >= 0:
            taken[best] = True
            flags.append(True)
        else:
            flags.append(False)
    tp = sum(flags)
    return ConfusionCounts(tp=tp, fp=len(flags) - tp, fn=len(gts) - tp), flags


def precision(c: ConfusionCounts) -> float:
    """TP / (TP + FP); 0.0 when undefined."""
    denom = c.tp + c.fp
    return c.tp / denom if denom else 0.0


def recall(c: ConfusionCounts) -> float:
    """TP / (TP + FN); 0.0 when undefined."""
    denom = c.tp + c.fn
    return c.tp / denom if denom else 0.0


def _pr_points(preds_by_image, gts_by_image, iou_t):
    """Confidence-ordered cumulative (recall, precision) arrays."""
    if len(preds_by_image) != len(gts_by_image):
        raise ValueError("prediction and ground-truth image counts differ")
    confs, flags = [], []
    total_gt = 0
    for preds, gts in zip(preds_by_image, gts_by_image):
        total_gt += len(gts)
        ordered = sorted(preds, key=lambda d: -d.confidence)
        _, tp_flags = match_detections(ordered, gts, iou_t)
        confs.extend(d.confidence for d in ordered)
        flags.extend(tp_flags)
    if not confs:
        return np.zeros(0), np.zeros(0), total_gt
    order = np.argsort(-np.array(confs), kind="stable")
    tp = np.array(flags, dtype=np.float64)[order]
    cum_tp = np.cumsum(tp)
    ranks = np.arange(1, len(tp) + 1, dtype=np.float64)
    prec = cum_tp / ranks
    rec = cum_tp / total_gt if total_gt else np.zeros_like(cum_tp)
    return rec, prec, total_gt


def average_precision(
    preds_by_image: Sequence[Sequence[Detection]],
    gts_by_image: Sequence[Sequence[GroundTruth]],
    iou_t: float,
    method: str = "interp101",
) -> float:
    """Area under the precision-recall curve at one IoU threshold.

    method="interp101": precision envelope (running max from the right)
    sampled at the 101 recalls 0.00 ... 1.00.
    method="exact": exact area under the enveloped staircase.
    Returns 0.0 when there are no ground truths (degenerate).
    """
    if method not in ("interp101", "exact"):
        raise ValueError(f"unknown AP method {method!r}")
    rec, prec, total_gt = _pr_points(preds_by_image, gts_by_image, iou_t)
    if total_gt == 0 or len(rec) == 0:
        return 0.0
    # envelope: best precision achievable at recall >= r
    env = np.maximum.accumulate(prec[::-1])[::-1]
    if method == "interp101":
        samples = np.array([i / 100.0 for i in range(101)])
        idx = np.searchsorted(rec, samples, side="left")
        vals = np.where(idx < len(rec), env[np.minimum(idx, len(rec) - 1)], 0.0)
        return float(vals.mean())
    prev_r = 0.0
    area = 0.0
    for r, p in zip(rec, env):
        if r > prev_r:
            area += (r - prev_r) * p
            prev_r = r
    return float(area)


def ap50_95(preds_by_image, gts_by_image, method: str = "interp101") -> float:
    """Mean AP over the ten IoU thresholds 0.50:0.05:0.95."""
    values = [
        average_precision(preds_by_image, gts_by_image, t, method=method)
        for t in AP_50_95_THRESHOLDS
    ]
    return sum(values) / len(values)


@dataclass(frozen=True)
class EvalResult:
    counts: ConfusionCounts
    precision: float
    recall: float
    ap50: float
    ap50_95: float
    degenerate: bool  # a zero denominator was hit somewhere

    def to_csv(self, extra: dict | None = None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["metric", "value"])
        writer.writerow(["Precision", f"{self.precision:.6f}"])
        writer.writerow(["Recall", f"{self.recall:.6f}"])
        writer.writerow(["AP50", f"{self.ap50:.6f}"])
        writer.writerow(["AP50:95", f"{self.ap50_95:.6f}"])
        for key, val in (extra or {}).items():
            writer.writerow([key, val])
        return buf.getvalue()


def evaluate(preds_by_image, gts_by_image, iou_t: float = 0.5) -> EvalResult:
    """Dataset-level precision/recall at iou_t plus AP50 and AP50:95."""
    tp = fp = fn = 0
    for preds, gts in zip(preds_by_image, gts_by_image):
        ordered = sorted(preds, key=lambda d: -d.confidence)
        counts, _ = match_detections(ordered, gts, iou_t)
        tp, fp, fn = tp + counts.tp, fp + counts.fp, fn + counts.fn
    counts = ConfusionCounts(tp=tp, fp=fp, fn=fn)
    return EvalResult(
        counts=counts,
        precision=precision(counts),
        recall=recall(counts),
        ap50=average_precision(preds_by_image, gts_by_image, 0.5),
        ap50_95=ap50_95(preds_by_image, gts_by_image),
        degenerate=(tp + fp == 0) or (tp + fn == 0),
    )


# ---------------------------------------------------------------------------
# FPS benchmark
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BenchRow:
    mode: str
    images: int
    fps: float
    pre_mean: float
    fwd_mean: float
    post_mean: float
    pre_median: float
    fwd_median: float
    post_median: float
    total_time: float
    cv_total: float  # coefficient of variation of per-image totals


@dataclass(frozen=True)
class BenchReport:
    rows: tuple[BenchRow, ...]
    warmup: int
    runs: int
    outputs_deterministic: bool

    def to_text(self) -> str:
        out = [f"{'mode':<9} {'fps':>8} {'pre ms':>9} {'fwd ms':>9} {'post ms':>9} "
               f"{'cv':>6}"]
        for r in self.rows:
            out.append(
                f"{r.mode:<9} {r.fps:>8.2f} {r.pre_mean * 1e3:>9.3f} "
                f"{r.fwd_mean * 1e3:>9.3f} {r.post_mean * 1e3:>9.3f} {r.cv_total:>6.3f}"
            )
        out.append(f"warmup={self.warmup} runs={self.runs} "
                   f"deterministic_outputs={self.outputs_deterministic}")
        return "\n".join(out)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["mode", "fps", "pre_mean", "fwd_mean", "post_mean",
                         "pre_median", "fwd_median", "post_median", "cv_total"])
        for r in self.rows:
            writer.writerow([r.mode, f"{r.fps:.4f}", r.pre_mean, r.fwd_mean,
                             r.post_mean, r.pre_median, r.fwd_median,
                             r.post_median, f"{r.cv_total:.6f}"])
        return buf.getvalue()


def _bench_one(m, images, warmup, runs, conf_thresh, iou_thresh):
    for i in range(warmup):
        detect(m, images[i % len(images)], conf_thresh, iou_thresh)
    phases = []
    first_outputs = None
    deterministic = True
    for r in range(runs):
        run_outputs = []
        for img in images:
            dets, times = detect(m, img, conf_thresh, iou_thresh)
            phases.append(times)
            run_outputs.append(tuple((d.class_id, d.box, d.confidence) for d in dets))
        if first_outputs is None:
            first_outputs = run_outputs
        elif run_outputs != first_outputs:
            deterministic = False
    pre = [t.preprocess for t in phases]
    fwd = [t.forward for t in phases]
    post = [t.postprocess for t in phases]
    totals = [t.total for t in phases]
    total_time = sum(totals)
    mean_total = total_time / len(totals)
    cv = (statistics.pstdev(totals) / mean_total) if len(totals) > 1 and mean_total > 0 else 0.0
    row = BenchRow(
        mode=m.mode,
        images=len(phases),
        fps=len(phases) / total_time,
        pre_mean=sum(pre) / len(pre),
        fwd_mean=sum(fwd) / len(fwd),
        post_mean=sum(post) / len(post),
        pre_median=statistics.median(pre),
        fwd_median=statistics.median(fwd),
        post_median=statistics.median(post),
        total_time=total_time,
        cv_total=cv,
    )
    return row, deterministic


def fps_benchmark(
    m: Model,
    images,
    warmup: int = 10,
    runs: int = 100,
    conf_thresh: float = DEFAULT_CONF_THRESH,
    iou_thresh: float = DEFAULT_IOU_THRESH,
) -> BenchReport:
    """Wall-clock the three pipeline phases over the image set.

    A train-mode model is benchmarked both as-is and after fusion, one row
    per mode; a deployed model yields a single row. Timing uses the
    monotonic performance counter; output determinism (not timing) is
    checked across repeat runs.
    """
    if runs < 1 or warmup < 0 or not images:
        raise ValueError("need runs >= 1, warmup >= 0 and at least one image")
    rows = []
    deterministic = True
    row, det_ok = _bench_one(m, images, warmup, runs, conf_thresh, iou_thresh)
    rows.append(row)
    deterministic &= det_ok
    if m.mode == TRAIN:
        fused = reparameterize_model(m)
        row, det_ok = _bench_one(fused, images, warmup, runs, conf_thresh, iou_thresh)
        rows.append(row)
        deterministic &= det_ok
    return BenchReport(
        rows=tuple(rows), warmup=warmup, runs=runs,
        outputs_deterministic=deterministic,
    )
