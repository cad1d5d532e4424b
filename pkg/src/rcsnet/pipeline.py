"""Inference pipeline: letterbox preprocessing, anchor decoding, NMS and
coordinate un-mapping, plus the composed detect() with per-phase timing.

Decode follows the sigmoid-based convention of the YOLOv5/v7 lineage:
per cell (i, j) and anchor a,

    cx = (2*sig(tx) - 0.5 + j) * stride        w = (2*sig(tw))^2 * anchor_w
    cy = (2*sig(ty) - 0.5 + i) * stride        h = (2*sig(th))^2 * anchor_h
    confidence = sig(t_obj) * max_c sig(t_cls[c])
"""

import time
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import ImageFormatError, ShapeError
from .imageio import Image
from .model import Model, forward
from .tensor_ops import sigmoid

PAD_VALUE = 114  # grey fill for letterbox borders
DEFAULT_CONF_THRESH = 0.25
DEFAULT_IOU_THRESH = 0.45


@dataclass(frozen=True)
class TransformMeta:
    """Inverse-mapping record from letterboxed to original coordinates."""

    scale: float
    pad_left: int
    pad_top: int
    orig_w: int
    orig_h: int

    def __post_init__(self):
        if self.scale <= 0 or self.pad_left < 0 or self.pad_top < 0:
            raise ShapeError(f"bad transform meta: {self}")


@dataclass(frozen=True)
class Detection:
    """One detected box (cx, cy, w, h) with confidence and class id."""

    box: tuple[float, float, float, float]
    confidence: float
    class_id: int

    def __post_init__(self):
        if self.box[2] <= 0 or self.box[3] <= 0:
            raise ShapeError(f"detection box must have positive size: {self.box}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ShapeError(f"confidence outside [0, 1]: {self.confidence}")


@dataclass(frozen=True)
class PhaseTimes:
    preprocess: float
    forward: float
    postprocess: float

    @property
    def total(self) -> float:
        return self.preprocess + self.forward + self.postprocess


def _resize_nearest(pixels: np.ndarray, new_w: int, new_h: int) -> np.ndarray:
    h, w = pixels.shape[:2]
    ys = np.minimum((np.arange(new_h) + 0.5) * (h / new_h), h - 1).astype(np.int64)
    xs = np.minimum((np.arange(new_w) + 0.5) * (w / new_w), w - 1).astype(np.int64)
    return pixels[ys[:, None], xs[None, :]]


def letterbox(
    img: Image, target: int = 640, stride: int = 32, square: bool = False
) -> tuple[np.ndarray, TransformMeta]:
    """Aspect-preserving resize to the target long side, grey-padded.

    The long border maps to exactly `target` pixels; the short border
    scales by the same factor and is padded symmetrically with grey (114)
    up to the next multiple of `stride` -- or all the way to `target` when
    square=True, which fixed-input models require. Pixel values become
    float32 in [0, 1], laid out (1, 3, H, W).
    """
    if target < stride or target % stride != 0:
        raise ShapeError(f"target {target} must be a positive multiple of stride {stride}")
    if img.width < 1 or img.height < 1:
        raise ImageFormatError(f"degenerate image {img.width}x{img.height}")
    scale = target / max(img.width, img.height)
    new_w = max(1, round(img.width * scale))
    new_h = max(1, round(img.height * scale))
    resized = _resize_nearest(img.pixels, new_w, new_h)

    def canvas_dim(size):
        if square:
            return target
        return ((size + stride - 1) // stride) * stride

    canvas_w, canvas_h = canvas_dim(new_w), canvas_dim(new_h)
    pad_left = (canvas_w - new_w) // 2
    pad_top = (canvas_h - new_h) // 2
    canvas = np.full((canvas_h, canvas_w, 3), PAD_VALUE, dtype=np.uint8)
    canvas[pad_top:pad_top + new_h, pad_left:pad_left + new_w] = resized

    tensor = (canvas.astype(np.float32) / np.float32(255.0)).transpose(2, 0, 1)[None]
    meta = TransformMeta(
        scale=scale, pad_left=pad_left, pad_top=pad_top,
        orig_w=img.width, orig_h=img.height,
    )
    return np.ascontiguousarray(tensor), meta


def decode_head(
    out: np.ndarray,
    anchors: Sequence[tuple[float, float]],
    stride: int,
    conf_thresh: float,
) -> list[Detection]:
    """Decode one raw head tensor into letterboxed-frame detections.

    Channel layout is a*(5+nc) blocks of (tx, ty, tw, th, t_obj, t_cls...).
    Emission order is (anchor, row, column), row-major, which downstream
    tie-breaking relies on.
    """
    if out.ndim != 4 or out.shape[0] != 1:
        raise ShapeError(f"expected a single-image head tensor, got {out.shape}")
    a = len(anchors)
    per = out.shape[1] // a
    if per * a != out.shape[1] or per < 6:
        raise ShapeError(
            f"head channels {out.shape[1]} do not factor into {a} anchors x (5 + nc)"
        )
    nc = per - 5
    hs, ws = out.shape[2], out.shape[3]
    raw = out[0].reshape(a, per, hs, ws)
    sig = sigmoid(raw)

    grid_x = np.arange(ws, dtype=np.float32)[None, None, :]
    grid_y = np.arange(hs, dtype=np.float32)[None, :, None]
    anchor_w = np.array([w for w, _ in anchors], dtype=np.float32)[:, None, None]
    anchor_h = np.array([h for _, h in anchors], dtype=np.float32)[:, None, None]

    cx = (2.0 * sig[:, 0] - 0.5 + grid_x) * stride
    cy = (2.0 * sig[:, 1] - 0.5 + grid_y) * stride
    bw = (2.0 * sig[:, 2]) ** 2 * anchor_w
    bh = (2.0 * sig[:, 3]) ** 2 * anchor_h
    cls_sig = sig[:, 5:]
    class_id = cls_sig.argmax(axis=1)
    conf = sig[:, 4] * np.take_along_axis(cls_sig, class_id[:, None], axis=1)[:, 0]

    keep = conf >= conf_thresh
    # extreme negative tw/th underflow to exactly zero in float32; those
    # degenerate boxes carry no information and are dropped
    keep &= (bw > 0) & (bh > 0)
    dets = []
    for ai, yi, xi in zip(*np.nonzero(keep)):
        dets.append(Detection(
            box=(float(cx[ai, yi, xi]), float(cy[ai, yi, xi]),
                 float(bw[ai, yi, xi]), float(bh[ai, yi, xi])),
            confidence=float(conf[ai, yi, xi]),
            class_id=int(class_id[ai, yi, xi]),
        ))
    return dets


def _boxes_xyxy(dets: Sequence[Detection]) -> np.ndarray:
    arr = np.array([d.box for d in dets], dtype=np.float64)
    half = arr[:, 2:] / 2.0
    return np.concatenate([arr[:, :2] - half, arr[:, :2] + half], axis=1)


def nms(dets: Sequence[Detection], iou_thresh: float = DEFAULT_IOU_THRESH) -> list[Detection]:
    """Greedy per-class suppression by descending confidence.

    Survivors within a class are pairwise below the IoU threshold; output
    order is descending confidence with ties broken by larger box area,
    then by input position (stable).
    """
    if not 0.0 < iou_thresh < 1.0:
        raise ShapeError(f"iou_thresh must be in (0, 1), got {iou_thresh}")
    if not dets:
        return []

    def rank(i):
        return (-dets[i].confidence, -dets[i].box[2] * dets[i].box[3], i)

    order = sorted(range(len(dets)), key=rank)
    xyxy = _boxes_xyxy(dets)
    areas = (xyxy[:, 2] - xyxy[:, 0]) * (xyxy[:, 3] - xyxy[:, 1])

    by_class: dict[int, list[int]] = {}
    for i in order:
        by_class.setdefault(dets[i].class_id, []).append(i)

    survivors: list[int] = []
    for idxs in by_class.values():
        idx = np.array(idxs, dtype=np.int64)
        boxes = xyxy[idx]
        ar = areas[idx]
        alive = np.ones(len(idx), dtype=bool)
        for pos in range(len(idx)):
            if not alive[pos]:
                continue
            survivors.append(int(idx[pos]))
            rest = alive[pos + 1:].nonzero()[0] + pos + 1
            if len(rest) == 0:
                continue
            lt = np.maximum(boxes[rest, :2], boxes[pos, :2])
            rb = np.minimum(boxes[rest, 2:], boxes[pos, 2:])
            inter = np.clip(rb - lt, 0.0, None).prod(axis=1)
            iou = inter / (ar[rest] + ar[pos] - inter)
            alive[rest[iou >= iou_thresh]] = False
    return [dets[i] for i in sorted(survivors, key=rank)]


def unletterbox(dets: Sequence[Detection], meta: TransformMeta) -> list[Detection]:
    """Map boxes back to original-image pixels, clipped to its bounds.

    Detections whose boxes fall entirely inside the padding collapse to
    zero size on clipping and are dropped.
    """
    out = []
    for d in dets:
        cx = (d.box[0] - meta.pad_left) / meta.scale
        cy = (d.box[1] - meta.pad_top) / meta.scale
        w = d.box[2] / meta.scale
        h = d.box[3] / meta.scale
        x1 = min(max(cx - w / 2, 0.0), meta.orig_w)
        y1 = min(max(cy - h / 2, 0.0), meta.orig_h)
        x2 = min(max(cx + w / 2, 0.0), meta.orig_w)
        y2 = min(max(cy + h / 2, 0.0), meta.orig_h)
        if x2 - x1 <= 0 or y2 - y1 <= 0:
            continue
        out.append(replace(d, box=((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)))
    return out


def detect(
    m: Model,
    img: Image,
    conf_thresh: float = DEFAULT_CONF_THRESH,
    iou_thresh: float = DEFAULT_IOU_THRESH,
) -> tuple[list[Detection], PhaseTimes]:
    """letterbox -> forward -> decode both heads -> merge -> NMS -> unmap.

    Returns the final detections in original-image pixels plus wall-clock
    durations of the three phases.
    """
    t0 = time.perf_counter()
    tensor, meta = letterbox(img, target=m.cfg.input_size, stride=32, square=True)
    t1 = time.perf_counter()
    heads = forward(m, tensor)
    t2 = time.perf_counter()
    merged: list[Detection] = []
    for i, (head_out, head_stride) in enumerate(zip(heads, m.cfg.head_strides)):
        merged.extend(decode_head(head_out, m.cfg.head_anchors(i), head_stride, conf_thresh))
    final = unletterbox(nms(merged, iou_thresh), meta)
    t3 = time.perf_counter()
    return final, PhaseTimes(preprocess=t1 - t0, forward=t2 - t1, postprocess=t3 - t2)


def format_detection(d: Detection) -> str:
    """One output line: class_id cx cy w h confidence (6-decimal fixed)."""
    cx, cy, w, h = d.box
    return f"{d.class_id} {cx:.6f} {cy:.6f} {w:.6f} {h:.6f} {d.confidence:.6f}"
