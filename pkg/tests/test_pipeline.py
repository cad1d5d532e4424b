"""Preprocessing, decoding, NMS, inverse mapping, image IO and the
composed detect() call."""

import numpy as np
import pytest

from rcsnet.errors import ImageFormatError, ShapeError
from rcsnet.imageio import Image, read_image, write_ppm
from rcsnet.model import build_model, reparameterize_model
from rcsnet.pipeline import (
    Detection,
    decode_head,
    detect,
    format_detection,
    letterbox,
    nms,
    unletterbox,
    TransformMeta,
)

import helpers
import oracles


def make_image(rng, w, h):
    return Image(width=w, height=h,
                 pixels=rng.integers(0, 256, (h, w, 3), dtype=np.uint8))


class TestLetterbox:
    def test_square_identity(self):
        rng = np.random.default_rng(1)
        img = make_image(rng, 640, 640)
        tensor, meta = letterbox(img, target=640, stride=32)
        assert tensor.shape == (1, 3, 640, 640)
        assert meta.scale == 1.0 and meta.pad_left == 0 and meta.pad_top == 0
        np.testing.assert_allclose(
            tensor[0].transpose(1, 2, 0), img.pixels.astype(np.float32) / 255.0
        )

    def test_aligned_short_side_no_pads(self):
        rng = np.random.default_rng(2)
        tensor, meta = letterbox(make_image(rng, 640, 320), target=640, stride=32)
        assert tensor.shape == (1, 3, 320, 640)
        assert meta.scale == 1.0 and meta.pad_top == 0

    def test_600x300_scales_to_640x320(self):
        rng = np.random.default_rng(3)
        tensor, meta = letterbox(make_image(rng, 600, 300), target=640, stride=32)
        assert tensor.shape == (1, 3, 320, 640)
        assert meta.pad_left == 0 and meta.pad_top == 0
        assert meta.scale == pytest.approx(640 / 600)

    def test_box_round_trip_within_one_pixel(self):
        rng = np.random.default_rng(4)
        img = make_image(rng, 600, 300)
        _, meta = letterbox(img, target=640, stride=32)
        for _ in range(50):
            cx, cy = rng.uniform(60, 540), rng.uniform(45, 255)
            w, h = rng.uniform(10, 100), rng.uniform(10, 80)
            lb = (cx * meta.scale + meta.pad_left, cy * meta.scale + meta.pad_top,
                  w * meta.scale, h * meta.scale)
            det = Detection(box=lb, confidence=0.5, class_id=0)
            (back,) = unletterbox([det], meta)
            assert all(abs(a - b) <= 1.0 for a, b in zip(back.box, (cx, cy, w, h)))

    def test_square_mode_pads_to_canvas(self):
        rng = np.random.default_rng(5)
        tensor, meta = letterbox(make_image(rng, 640, 320), target=640, stride=32, square=True)
        assert tensor.shape == (1, 3, 640, 640)
        assert meta.pad_top == 160
        assert tensor[0, 0, 0, 0] == np.float32(114 / 255.0)

    def test_aspect_ratio_single_scale(self):
        rng = np.random.default_rng(6)
        _, meta = letterbox(make_image(rng, 123, 77), target=640, stride=32)
        assert meta.scale == 640 / 123

    def test_bad_target(self):
        rng = np.random.default_rng(7)
        with pytest.raises(ShapeError):
            letterbox(make_image(rng, 10, 10), target=100, stride=32)


class TestDecode:
    ANCHORS = ((87.0, 90.0), (127.0, 139.0))

    def test_zero_raw_values(self):
        out = np.zeros((1, 12, 2, 2), np.float32)
        dets = decode_head(out, self.ANCHORS, 32, conf_thresh=0.2)
        assert len(dets) == 8  # 2 anchors x 2x2 cells, conf 0.25 each
        first = dets[0]
        assert first.box == (16.0, 16.0, 87.0, 90.0)
        assert first.confidence == 0.25

    def test_threshold_one_empty(self):
        rng = np.random.default_rng(8)
        out = rng.normal(size=(1, 12, 4, 4)).astype(np.float32)
        assert decode_head(out, self.ANCHORS, 16, conf_thresh=1.0) == []

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(9)
        out = rng.normal(size=(1, 2 * (5 + 3), 5, 7)).astype(np.float32)
        anchors = ((20.0, 30.0), (50.0, 40.0))
        dets = decode_head(out, anchors, 16, conf_thresh=0.0)
        expected = oracles.decode_scalar(out, anchors, 16, 0.0)
        assert len(dets) == len(expected) == 2 * 5 * 7
        for d, (box, conf, cls) in zip(dets, expected):
            np.testing.assert_allclose(d.box, box, rtol=1e-4, atol=1e-3)
            assert d.confidence == pytest.approx(conf, abs=1e-6)
            assert d.class_id == cls

    def test_monotone_in_objectness(self):
        rng = np.random.default_rng(10)
        out = rng.normal(size=(1, 12, 3, 3)).astype(np.float32)
        base = decode_head(out, self.ANCHORS, 32, conf_thresh=0.3)
        bumped = out.copy()
        bumped[0, 4] += 2.0  # anchor-0 objectness only
        more = decode_head(bumped, self.ANCHORS, 32, conf_thresh=0.3)
        base_boxes = {d.box[:2] for d in base}
        more_boxes = {d.box[:2] for d in more}
        assert base_boxes <= more_boxes

    def test_layout_mismatch(self):
        out = np.zeros((1, 11, 2, 2), np.float32)
        with pytest.raises(ShapeError):
            decode_head(out, self.ANCHORS, 32, 0.5)


def _rand_dets(rng, n, classes=1, span=200.0):
    dets = []
    for i in range(n):
        dets.append(Detection(
            box=(float(rng.uniform(0, span)), float(rng.uniform(0, span)),
                 float(rng.uniform(5, 60)), float(rng.uniform(5, 60))),
            confidence=float(rng.uniform(0, 1)),
            class_id=int(rng.integers(0, classes)),
        ))
    return dets


class TestNMS:
    def test_single_detection(self):
        d = Detection(box=(10, 10, 5, 5), confidence=0.7, class_id=0)
        assert nms([d]) == [d]

    def test_identical_boxes_keep_highest(self):
        a = Detection(box=(10, 10, 5, 5), confidence=0.9, class_id=0)
        b = Detection(box=(10, 10, 5, 5), confidence=0.8, class_id=0)
        assert nms([a, b], iou_thresh=0.45) == [a]

    def test_matches_reference_on_random_instances(self):
        rng = np.random.default_rng(11)
        for classes in (1, 3):
            for _ in range(20):
                dets = _rand_dets(rng, 50, classes=classes)
                got = nms(dets, iou_thresh=0.45)
                want = oracles.nms_reference(dets, 0.45)
                assert got == want

    def test_survivors_form_antichain(self):
        rng = np.random.default_rng(12)
        dets = _rand_dets(rng, 80)
        from rcsnet.metrics import iou as iou_xyxy

        def xyxy(d):
            cx, cy, w, h = d.box
            return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)

        out = nms(dets, iou_thresh=0.45)
        for i, a in enumerate(out):
            for b in out[i + 1:]:
                if a.class_id == b.class_id:
                    assert iou_xyxy(xyxy(a), xyxy(b)) < 0.45

    def test_output_confidence_nonincreasing(self):
        rng = np.random.default_rng(13)
        out = nms(_rand_dets(rng, 60), iou_thresh=0.45)
        confs = [d.confidence for d in out]
        assert confs == sorted(confs, reverse=True)

    def test_cross_class_not_suppressed(self):
        a = Detection(box=(10, 10, 5, 5), confidence=0.9, class_id=0)
        b = Detection(box=(10, 10, 5, 5), confidence=0.8, class_id=1)
        assert nms([a, b]) == [a, b]

    def test_bad_threshold(self):
        with pytest.raises(ShapeError):
            nms([], iou_thresh=0.0)


class TestUnletterbox:
    def test_identity(self):
        meta = TransformMeta(scale=1.0, pad_left=0, pad_top=0, orig_w=100, orig_h=100)
        d = Detection(box=(50, 50, 10, 10), confidence=0.5, class_id=0)
        assert unletterbox([d], meta) == [d]

    def test_scale_and_pad_arithmetic(self):
        meta = TransformMeta(scale=2.0, pad_left=10, pad_top=0, orig_w=100, orig_h=100)
        d = Detection(box=(30, 40, 8, 8), confidence=0.5, class_id=0)
        (out,) = unletterbox([d], meta)
        assert out.box == (10.0, 20.0, 4.0, 4.0)

    def test_clipped_to_bounds(self):
        meta = TransformMeta(scale=1.0, pad_left=0, pad_top=0, orig_w=50, orig_h=50)
        d = Detection(box=(48, 25, 10, 10), confidence=0.5, class_id=0)
        (out,) = unletterbox([d], meta)
        x2 = out.box[0] + out.box[2] / 2
        assert x2 <= 50.0

    def test_padding_only_boxes_dropped(self):
        meta = TransformMeta(scale=1.0, pad_left=100, pad_top=0, orig_w=50, orig_h=50)
        d = Detection(box=(600, 25, 10, 10), confidence=0.5, class_id=0)
        assert unletterbox([d], meta) == []


@pytest.fixture(scope="module")
def model_pair():
    m = build_model(helpers.tiny_config(input_size=64), seed=21)
    return m, reparameterize_model(m)


class TestDetect:
    def test_deterministic(self, model_pair):
        rng = np.random.default_rng(14)
        img = make_image(rng, 90, 70)
        m, _ = model_pair
        dets1, _ = detect(m, img)
        dets2, _ = detect(m, img)
        assert dets1 == dets2

    def test_train_vs_deployed_same_detections(self, model_pair):
        rng = np.random.default_rng(15)
        m, fused = model_pair
        for _ in range(5):
            img = make_image(rng, 80, 64)
            train_dets, _ = detect(m, img)
            dep_dets, _ = detect(fused, img)
            assert len(train_dets) == len(dep_dets)
            for a, b in zip(train_dets, dep_dets):
                assert a.class_id == b.class_id
                assert all(abs(x - y) <= 0.5 for x, y in zip(a.box, b.box))

    def test_phase_times_positive_and_sum(self, model_pair):
        rng = np.random.default_rng(16)
        m, _ = model_pair
        _, times = detect(m, make_image(rng, 64, 64))
        assert times.preprocess > 0 and times.forward > 0 and times.postprocess > 0
        assert times.total == times.preprocess + times.forward + times.postprocess

    def test_conf_one_empty(self, model_pair):
        rng = np.random.default_rng(17)
        m, _ = model_pair
        dets, _ = detect(m, make_image(rng, 64, 64), conf_thresh=1.0)
        assert dets == []


class TestImageIO:
    def test_ppm_round_trip(self, tmp_path):
        rng = np.random.default_rng(18)
        img = make_image(rng, 13, 7)
        path = tmp_path / "img.ppm"
        write_ppm(img, path)
        back = read_image(path)
        assert (back.width, back.height) == (13, 7)
        np.testing.assert_array_equal(back.pixels, img.pixels)

    def test_pgm_replicates_channels(self, tmp_path):
        gray = np.arange(12, dtype=np.uint8).reshape(3, 4)
        path = tmp_path / "img.pgm"
        path.write_bytes(b"P5\n4 3\n255\n" + gray.tobytes())
        img = read_image(path)
        for c in range(3):
            np.testing.assert_array_equal(img.pixels[:, :, c], gray)

    def test_comments_in_header(self, tmp_path):
        path = tmp_path / "img.ppm"
        path.write_bytes(b"P6\n# a comment\n2 1\n# another\n255\n" + bytes(6))
        img = read_image(path)
        assert (img.width, img.height) == (2, 1)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "img.ppm"
        path.write_bytes(b"P3\n1 1\n255\n0 0 0")
        with pytest.raises(ImageFormatError):
            read_image(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "img.ppm"
        path.write_bytes(b"P6\n4 4\n255\n" + bytes(10))
        with pytest.raises(ImageFormatError):
            read_image(path)

    def test_unsupported_maxval(self, tmp_path):
        path = tmp_path / "img.ppm"
        path.write_bytes(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00")
        with pytest.raises(ImageFormatError):
            read_image(path)


class TestFormat:
    def test_detection_line(self):
        d = Detection(box=(12.5, 40.0, 87.0, 90.0), confidence=0.25, class_id=0)
        assert format_detection(d) == "0 12.500000 40.000000 87.000000 90.000000 0.250000"
