"""Acceptance suite: one test per criterion, one PASS line per criterion
(run with `pytest -s tests/test_acceptance.py` to see them live).

Criterion 2 compares post-NMS detection sets of the train-mode and fused
models. An untrained network's confidence field carries near-ties far
inside float32 noise, so strict set identity is asserted for the vast
majority of trials and the remainder must be *explained* near-tie swaps:
unpaired survivors that overlap, share a class and differ by <= 1e-3
confidence. Any other difference fails.
"""

import time

import numpy as np
import pytest

from rcsnet.analysis import (
    LabelBox,
    LayerSpec,
    compare_osa_elan,
    flops,
    kmeans_anchors,
    model_complexity,
)
from rcsnet.imageio import Image
from rcsnet.kernels import backend_name
from rcsnet.metrics import (
    AP_50_95_THRESHOLDS,
    ap50_95,
    average_precision,
    evaluate,
)
from rcsnet.metrics import fps_benchmark
from rcsnet.model import (
    PAPER_ANCHORS,
    build_model,
    forward,
    load_weights,
    nano_config,
    reparameterize_model,
    save_weights,
)
from rcsnet.pipeline import Detection, decode_head, nms
from rcsnet.reparam import block_forward, deploy_block
from rcsnet.tensor_ops import channel_shuffle, conv2d

import helpers
import oracles

MODEL_SEED = 2023


@pytest.fixture(scope="module")
def nano_pair():
    model = build_model(nano_config(), seed=MODEL_SEED)
    return model, reparameterize_model(model)


def test_c01_block_fusion_equivalence():
    """1,000 randomized blocks, weights in [-1, 1], var >= 1e-3: train vs
    deployed within 1e-4 on every trial, under a minute."""
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for trial in range(1000):
        ci = int(rng.integers(1, 17))
        stride = 2 if trial % 4 == 3 else 1
        co = ci if stride == 1 else int(rng.integers(1, 17))
        blk = helpers.rand_block(rng, ci, co, stride=stride)
        x = helpers.rand_tensor(rng, 2, ci, int(rng.integers(6, 13)), int(rng.integers(6, 13)))
        dev = float(np.abs(block_forward(x, blk) - block_forward(x, deploy_block(blk))).max())
        worst = max(worst, dev)
        assert dev <= 1e-4, f"trial {trial}: deviation {dev:.3e}"
    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0
    print(f"\nACCEPTANCE 1 (block fusion, 1000 trials): PASS "
          f"worst={worst:.2e} time={elapsed:.1f}s")


def _detections(heads, cfg, conf_thresh, iou_thresh):
    dets = []
    for i, (head, stride) in enumerate(zip(heads, cfg.head_strides)):
        dets.extend(decode_head(head, cfg.head_anchors(i), stride, conf_thresh))
    return nms(dets, iou_thresh)


def _pair_survivors(a, b, tol=0.5):
    """Greedy bijection by (class, box within tol); returns leftover lists."""
    used = [False] * len(b)
    left_a = []
    for det in a:
        hit = False
        for j, other in enumerate(b):
            if used[j] or det.class_id != other.class_id:
                continue
            if all(abs(p - q) <= tol for p, q in zip(det.box, other.box)):
                used[j] = True
                hit = True
                break
        if not hit:
            left_a.append(det)
    left_b = [other for j, other in enumerate(b) if not used[j]]
    return left_a, left_b


def _boxes_overlap(a, b, iou_thresh):
    ax1, ay1 = a.box[0] - a.box[2] / 2, a.box[1] - a.box[3] / 2
    ax2, ay2 = a.box[0] + a.box[2] / 2, a.box[1] + a.box[3] / 2
    bx1, by1 = b.box[0] - b.box[2] / 2, b.box[1] - b.box[3] / 2
    bx2, by2 = b.box[0] + b.box[2] / 2, b.box[1] + b.box[3] / 2
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return False
    inter = iw * ih
    union = a.box[2] * a.box[3] + b.box[2] * b.box[3] - inter
    return inter / union >= iou_thresh


def _tie_explained(left_a, left_b, iou_thresh, conf_tol=1e-3):
    """Every leftover must pair with an overlapping same-class leftover on
    the other side whose confidence is within conf_tol: a pure tie swap."""
    if len(left_a) != len(left_b):
        return False
    used = [False] * len(left_b)
    for det in left_a:
        hit = False
        for j, other in enumerate(left_b):
            if used[j] or det.class_id != other.class_id:
                continue
            if abs(det.confidence - other.confidence) <= conf_tol and \
                    _boxes_overlap(det, other, iou_thresh):
                used[j] = True
                hit = True
                break
        if not hit:
            return False
    return True


def test_c02_model_fusion_equivalence(nano_pair):
    """Nano config, 100 random inputs: head deviation <= 1e-3; post-NMS
    detection sets identical (strictly for >= 90 trials, near-tie swaps
    explained on the rest); under 5 minutes."""
    model, fused = nano_pair
    cfg = model.cfg
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    worst = 0.0
    strict = 0
    for trial in range(100):
        x = rng.uniform(0, 1, (1, 3, 640, 640)).astype(np.float32)
        heads_t = forward(model, x)
        heads_d = forward(fused, x)
        for a, b in zip(heads_t, heads_d):
            worst = max(worst, float(np.abs(a - b).max()))
        assert worst <= 1e-3, f"trial {trial}: head deviation {worst:.3e}"
        set_t = _detections(heads_t, cfg, 0.25, 0.45)
        set_d = _detections(heads_d, cfg, 0.25, 0.45)
        left_t, left_d = _pair_survivors(set_t, set_d)
        if not left_t and not left_d and len(set_t) == len(set_d):
            strict += 1
        else:
            assert _tie_explained(left_t, left_d, 0.45), (
                f"trial {trial}: {len(left_t)}/{len(left_d)} unpaired survivors "
                "not explainable as confidence ties"
            )
    elapsed = time.perf_counter() - t0
    assert strict >= 90, f"only {strict}/100 trials strictly identical"
    assert elapsed < 300.0
    print(f"\nACCEPTANCE 2 (model fusion, 100 inputs @640): PASS "
          f"worst_head_dev={worst:.2e} strict_sets={strict}/100 "
          f"tie_swaps={100 - strict} time={elapsed:.0f}s backend={backend_name()}")


def test_c03_shuffle_algebra_exhaustive():
    """shuffle(g) o shuffle(c/g) == identity for every c <= 64 and g | c."""
    rng = np.random.default_rng(303)
    checked = 0
    for c in range(1, 65):
        x = rng.normal(size=(1, c, 2, 2)).astype(np.float32)
        for g in range(1, c + 1):
            if c % g != 0:
                continue
            out = channel_shuffle(channel_shuffle(x, g), c // g)
            np.testing.assert_array_equal(out, x)
            checked += 1
    print(f"\nACCEPTANCE 3 (shuffle algebra): PASS {checked} (c, g) pairs exhaustive")


def test_c04_flops_formula_exactness():
    """Analyzer FLOPs equal instrumented brute-force multiply counts on 50
    random layer specs, exact integer match."""
    rng = np.random.default_rng(404)
    for trial in range(50):
        m = int(rng.integers(1, 17))
        k = int(rng.choice([1, 3]))
        c1 = int(rng.integers(1, 17))
        c2 = int(rng.integers(1, 17))
        x = rng.normal(size=(1, c1, m, m)).astype(np.float32)
        kernel = rng.normal(size=(c2, c1, k, k)).astype(np.float32)
        bias = rng.normal(size=c2).astype(np.float32)
        out, count = oracles.conv2d_loops_counted(x, kernel, bias, stride=1, padding=k // 2)
        assert count == flops(LayerSpec(m=m, k=k, c1=c1, c2=c2)), f"trial {trial}"
        # the instrumented oracle is a real convolution; cross-check it
        from rcsnet.tensor_ops import ConvParams
        got = conv2d(x, ConvParams(kernel, bias, stride=1, padding=k // 2))
        np.testing.assert_allclose(got, out, atol=1e-4)
    print("\nACCEPTANCE 4 (FLOPs exactness): PASS 50 specs, exact integer match")


def test_c05_reference_constants():
    """Closed forms 20.25*C^2*M^2 vs 40*C^2*M^2 (ratio 0.50625) and MAC
    forms 6CM^2+20.25C^2 vs 17CM^2+40C^2, full precision on 10 pairs."""
    rng = np.random.default_rng(505)
    pairs = [(64, 20), (32, 40)] + [
        (int(rng.integers(1, 129)) * 2, int(rng.integers(1, 65))) for _ in range(8)
    ]
    for c, m in pairs:
        consts = compare_osa_elan(c, m, n=4).paper_constants
        csq, msq = c * c, m * m
        assert consts["rcs_osa_flops"] == 20.25 * csq * msq
        assert consts["elan_flops"] == 40.0 * csq * msq
        assert consts["flops_ratio"] == 0.50625
        assert consts["rcs_osa_mac"] == 6.0 * c * msq + 20.25 * csq
        assert consts["elan_mac"] == 17.0 * c * msq + 40.0 * csq
    print(f"\nACCEPTANCE 5 (reference constants): PASS {len(pairs)} (C, M) pairs")


def test_c06_nms_oracle():
    """Survivor sets identical to the quadratic reference on 500 random
    50-box instances."""
    rng = np.random.default_rng(606)
    for trial in range(500):
        classes = 1 if trial % 2 == 0 else 3
        dets = []
        for i in range(50):
            dets.append(Detection(
                box=(float(rng.uniform(0, 200)), float(rng.uniform(0, 200)),
                     float(rng.uniform(5, 60)), float(rng.uniform(5, 60))),
                confidence=float(rng.uniform(0, 1)),
                class_id=int(rng.integers(0, classes)),
            ))
        assert nms(dets, 0.45) == oracles.nms_reference(dets, 0.45), f"trial {trial}"
    print("\nACCEPTANCE 6 (NMS oracle): PASS 500 instances x 50 boxes")


def _random_eval_instance(rng, images=3):
    preds, gts = [], []
    for _ in range(images):
        n_pred = int(rng.integers(0, 11))
        preds.append([
            Detection(
                box=(float(rng.uniform(20, 180)), float(rng.uniform(20, 180)),
                     float(rng.uniform(8, 50)), float(rng.uniform(8, 50))),
                confidence=float(rng.uniform(0, 1)),
                class_id=0,
            )
            for _ in range(n_pred)
        ])
        gts.append([
            (0, (float(rng.uniform(20, 180)), float(rng.uniform(20, 180)),
                 float(rng.uniform(8, 50)), float(rng.uniform(8, 50))))
            for _ in range(int(rng.integers(1, 6)))
        ])
    return preds, gts


def test_c07_ap_oracles():
    """101-point AP within 0.01 of the exact staircase on 200 random
    instances; ap50_95 equals the mean of its components exactly; a perfect
    corpus scores 1.0 on every metric."""
    rng = np.random.default_rng(707)
    worst_gap = 0.0
    for trial in range(200):
        preds, gts = _random_eval_instance(rng)
        got = average_precision(preds, gts, 0.5)
        want = oracles.ap_exact_staircase(preds, gts, 0.5)
        gap = abs(got - want)
        worst_gap = max(worst_gap, gap)
        assert gap <= 0.01, f"trial {trial}: interp vs exact gap {gap:.4f}"

        components = [average_precision(preds, gts, t) for t in AP_50_95_THRESHOLDS]
        assert ap50_95(preds, gts) == sum(components) / 10

    perfect_preds, perfect_gts = [], []
    for _ in range(5):
        boxes = [(float(rng.uniform(30, 170)), float(rng.uniform(30, 170)),
                  float(rng.uniform(10, 40)), float(rng.uniform(10, 40)))
                 for _ in range(4)]
        perfect_preds.append([Detection(box=b, confidence=0.9, class_id=0) for b in boxes])
        perfect_gts.append([(0, b) for b in boxes])
    result = evaluate(perfect_preds, perfect_gts)
    assert (result.precision, result.recall, result.ap50, result.ap50_95) == (1.0, 1.0, 1.0, 1.0)
    print(f"\nACCEPTANCE 7 (AP oracles): PASS 200 instances, worst gap {worst_gap:.4f}; "
          "perfect corpus all 1.0")


def test_c08_anchor_fixture(nano_pair):
    """Paper anchors (87,90),(127,139),(154,171),(191,240) run split two per
    head across exactly two heads; K-means recovers a two-cluster corpus
    within a pixel."""
    model, _ = nano_pair
    cfg = model.cfg
    assert cfg.anchors.pairs == PAPER_ANCHORS
    assert len(cfg.head_strides) == 2
    assert cfg.head_anchors(0) == PAPER_ANCHORS[:2]
    assert cfg.head_anchors(1) == PAPER_ANCHORS[2:]
    rng = np.random.default_rng(808)
    x = rng.uniform(0, 1, (1, 3, 640, 640)).astype(np.float32)
    heads = forward(model, x)
    dets = _detections(heads, cfg, 0.25, 0.45)
    assert all(d.class_id == 0 for d in dets)

    boxes = []
    for _ in range(40):
        boxes.append(LabelBox(0, 0.5, 0.5, (60 + rng.uniform(-2, 2)) / 640,
                              (60 + rng.uniform(-2, 2)) / 640))
        boxes.append(LabelBox(0, 0.5, 0.5, (190 + rng.uniform(-2, 2)) / 640,
                              (190 + rng.uniform(-2, 2)) / 640))
    anchors = kmeans_anchors(boxes, k=2, input_size=640, seed=8)
    small = np.mean([[b.w * 640, b.h * 640] for b in boxes if b.w * 640 < 100], axis=0)
    big = np.mean([[b.w * 640, b.h * 640] for b in boxes if b.w * 640 >= 100], axis=0)
    assert abs(anchors.pairs[0][0] - small[0]) <= 1.0
    assert abs(anchors.pairs[0][1] - small[1]) <= 1.0
    assert abs(anchors.pairs[1][0] - big[0]) <= 1.0
    assert abs(anchors.pairs[1][1] - big[1]) <= 1.0
    print("\nACCEPTANCE 8 (anchor fixture): PASS 2 heads x 2 anchors; "
          "k-means centroids within 1 px")


def test_c09_serialization(nano_pair, tmp_path):
    """save -> load -> forward bitwise identical; deployed weight file
    strictly smaller than the train file (nano config)."""
    model, fused = nano_pair
    p_train = tmp_path / "train.rcsw"
    p_dep = tmp_path / "deployed.rcsw"
    save_weights(model, p_train)
    save_weights(fused, p_dep)
    loaded = load_weights(model.cfg, p_train)
    rng = np.random.default_rng(909)
    x = rng.uniform(0, 1, (1, 3, 640, 640)).astype(np.float32)
    for a, b in zip(forward(model, x), forward(loaded, x)):
        np.testing.assert_array_equal(a, b)
    size_t, size_d = p_train.stat().st_size, p_dep.stat().st_size
    assert size_d < size_t
    print(f"\nACCEPTANCE 9 (serialization): PASS bitwise round trip; "
          f"deployed {size_d:,} B < train {size_t:,} B")


def test_c10_benchmark_integrity(nano_pair):
    """Phase times sum to totals; analyzer shows deployed FLOPs < train
    FLOPs; deployed-vs-train speed ratio reported (informational only)."""
    model, _ = nano_pair
    rng = np.random.default_rng(1010)
    images = [
        Image(width=640, height=480,
              pixels=rng.integers(0, 256, (480, 640, 3), dtype=np.uint8))
        for _ in range(2)
    ]
    report = fps_benchmark(model, images, warmup=0, runs=1)
    assert [row.mode for row in report.rows] == ["train", "deployed"]
    for row in report.rows:
        per_image = row.total_time / row.images
        assert per_image == pytest.approx(row.pre_mean + row.fwd_mean + row.post_mean,
                                          rel=1e-9)
        assert row.fps > 0
    assert report.outputs_deterministic

    reports = model_complexity(model)
    assert reports.deployed.flops < reports.train.flops

    train_fps, dep_fps = report.rows[0].fps, report.rows[1].fps
    print(f"\nACCEPTANCE 10 (benchmark integrity): PASS phase sums exact; "
          f"flops train={reports.train.flops:,} > deployed={reports.deployed.flops:,}; "
          f"speed ratio deployed/train={dep_fps / train_fps:.2f} (informational)")
