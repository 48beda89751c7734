import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dettrans.boxes import (
    AnchorSpec,
    BBox,
    GeometryError,
    decode_box,
    decode_boxes,
    encode_box,
    encode_boxes,
    generate_anchors,
    iou,
    iou_matrix,
    nms,
)

from factories import random_boxes
from oracles import brute_force_nms, plain_iou, raster_iou


@st.composite
def boxes(draw, extent=50.0):
    x0 = draw(st.floats(0, extent - 1))
    y0 = draw(st.floats(0, extent - 1))
    w = draw(st.floats(0.5, extent))
    h = draw(st.floats(0.5, extent))
    return BBox(x0, y0, x0 + w, y0 + h)


class TestBBox:
    def test_rejects_degenerate(self):
        with pytest.raises(GeometryError):
            BBox(0, 0, 0, 5)

    def test_area(self):
        assert BBox(1, 2, 4, 6).area == 12


class TestAnchors:
    def test_count(self):
        spec = AnchorSpec(scales=(8, 16, 24), aspect_ratios=(1,))
        assert len(generate_anchors(7, 96, spec)) == 147

    def test_centre_and_size(self):
        # g=2 on a 96 image puts cell (0,0) at (24,24); on 192, cell (0,0) is at (48,48)
        a = generate_anchors(2, 192, AnchorSpec(scales=(16,), aspect_ratios=(1,)))
        np.testing.assert_allclose(a[0], [40, 40, 56, 56])

    def test_hand_enumerated_grid(self):
        a = generate_anchors(2, 32, AnchorSpec(scales=(16,), aspect_ratios=(1,)))
        expected = [(0, 0, 16, 16), (16, 0, 32, 16), (0, 16, 16, 32), (16, 16, 32, 32)]
        np.testing.assert_allclose(a, expected)

    def test_aspect_ratio_shape(self):
        a = generate_anchors(1, 64, AnchorSpec(scales=(16,), aspect_ratios=(0.5, 2.0)))
        w = a[:, 2] - a[:, 0]
        h = a[:, 3] - a[:, 1]
        np.testing.assert_allclose(w / h, [0.5, 2.0])
        np.testing.assert_allclose(w * h, [256, 256])


class TestEncodeDecode:
    def test_identity(self):
        b = BBox(3, 4, 9, 12)
        assert encode_box(b, b) == (0.0, 0.0, 0.0, 0.0)

    def test_shift(self):
        anchor = BBox(8, 8, 12, 12)  # centre (10, 10), 4 x 4
        gt = BBox(10, 8, 14, 12)  # centre (12, 10)
        deltas = encode_box(anchor, gt)
        assert deltas == pytest.approx((0.5, 0.0, 0.0, 0.0))
        assert decode_box(anchor, deltas).as_tuple() == pytest.approx(gt.as_tuple())

    def test_zero_deltas_keep_anchor(self):
        a = BBox(1, 2, 5, 9)
        assert decode_box(a, (0, 0, 0, 0)) == a

    def test_log2_doubles_size(self):
        a = BBox(10, 10, 14, 16)
        d = decode_box(a, (0, 0, math.log(2), math.log(2)))
        assert (d.width, d.height) == pytest.approx((8, 12))
        assert ((d.x_min + d.x_max) / 2, (d.y_min + d.y_max) / 2) == pytest.approx((12, 13))

    def test_roundtrip_random(self):
        rng = np.random.default_rng(0)
        a, b = random_boxes(rng, 100), random_boxes(rng, 100)
        np.testing.assert_allclose(decode_boxes(a, encode_boxes(a, b)), b, atol=1e-5)

    def test_degenerate_anchor(self):
        with pytest.raises(GeometryError):
            encode_boxes(np.array([[0, 0, 0, 4.0]]), np.array([[0, 0, 1, 1.0]]))

    def test_clip_discards_outside(self):
        assert decode_box(BBox(-20, -20, -10, -10), (0, 0, 0, 0), image_size=32) is None
        clipped = decode_box(BBox(-4, -4, 4, 4), (0, 0, 0, 0), image_size=32)
        assert clipped.as_tuple() == (0, 0, 4, 4)


class TestIoU:
    def test_identical(self):
        assert iou(BBox(0, 0, 3, 2), BBox(0, 0, 3, 2)) == 1.0

    def test_disjoint(self):
        assert iou(BBox(0, 0, 1, 1), BBox(2, 2, 3, 3)) == 0.0

    def test_one_seventh(self):
        assert iou(BBox(0, 0, 2, 2), BBox(1, 1, 3, 3)) == pytest.approx(1 / 7)
        assert raster_iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7, abs=2e-3)

    def test_against_raster_oracle(self):
        rng = np.random.default_rng(5)
        a, b = random_boxes(rng, 30, min_side=1.0), random_boxes(rng, 30, min_side=1.0)
        got = np.diag(iou_matrix(a, b))
        ref = [raster_iou(x, y) for x, y in zip(a, b)]
        np.testing.assert_allclose(got, ref, atol=2e-3)

    @given(boxes(), boxes())
    def test_symmetric_and_bounded(self, a, b):
        v = iou(a, b)
        assert 0.0 <= v <= 1.0
        assert v == pytest.approx(iou(b, a))
        assert v == pytest.approx(plain_iou(a.as_tuple(), b.as_tuple()))

    @given(boxes())
    def test_self_iou_is_one(self, a):
        assert iou(a, a) == pytest.approx(1.0)


class TestNMS:
    def test_single(self):
        assert nms([(0, 0, 1, 1)], [0.3], 0.5).tolist() == [0]

    def test_pair(self):
        kept = nms([(0, 0, 10, 10), (1, 1, 11, 11)], [0.9, 0.8], 0.5)
        assert kept.tolist() == [0]
        assert iou(BBox(0, 0, 10, 10), BBox(1, 1, 11, 11)) == pytest.approx(81 / 119)

    def test_threshold_one_keeps_all(self):
        b = [(0, 0, 10, 10)] * 3
        assert nms(b, [0.5, 0.7, 0.6], 1.0).tolist() == [1, 2, 0]

    def test_ties_by_index(self):
        b = [(0, 0, 10, 10), (20, 20, 30, 30), (0, 0, 10, 10)]
        assert nms(b, [0.5, 0.5, 0.5], 0.5).tolist() == [0, 1]

    def test_matches_brute_force(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            n = int(rng.integers(1, 21))
            b = random_boxes(rng, n)
            s = rng.random(n)
            t = float(rng.uniform(0.05, 0.95))
            assert nms(b, s, t).tolist() == brute_force_nms(b, s, t)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 20), st.integers(0, 2**31), st.floats(0.1, 0.9), st.floats(0.0, 0.1))
    def test_properties(self, n, seed, t, dt):
        rng = np.random.default_rng(seed)
        b, s = random_boxes(rng, n), rng.random(n)
        kept = nms(b, s, t)
        assert set(kept) <= set(range(n))
        assert np.all(np.diff(s[kept]) <= 0)
        ious = iou_matrix(b[kept], b[kept])
        np.fill_diagonal(ious, 0)
        assert np.all(ious <= t)
        assert len(nms(b, s, min(t + dt, 1.0))) >= len(kept)
