import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dettrans.boxes import BBox, Detection
from dettrans.data import DatasetManifest, load_coco_json
from dettrans.metrics import (
    EvalResult,
    EvaluationError,
    average_precision,
    evaluate,
    load_detections_json,
    match_detections,
)

from factories import random_dataset, small_boxes, toy_manifest, with_extra_fp
from oracles import brute_force_match, hand_ap_101

FIXTURE = Path(__file__).parent / "fixtures" / "eval2"


def det(box, cls=0, score=1.0):
    return Detection(BBox(*box), cls, score)


class TestMatch:
    def test_single_tp(self):
        assert match_detections([det((0, 0, 10, 10))], [((0, 0, 10, 9), 0)], 0.5) == [True]

    def test_two_dets_one_gt(self):
        dets = [det((0, 0, 10, 10), score=0.9), det((0, 0, 10, 9), score=0.8)]
        assert match_detections(dets, [((0, 0, 10, 10), 0)], 0.5) == [True, False]

    def test_class_aware(self):
        assert match_detections([det((0, 0, 10, 10), cls=1)], [((0, 0, 10, 10), 0)], 0.5) == [False]

    def test_below_threshold(self):
        assert match_detections([det((0, 0, 10, 10))], [((5, 0, 15, 10), 0)], 0.5) == [False]

    def test_matches_brute_force(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            gts = [tuple(b) for b in small_boxes(rng, 5)]
            dets = [tuple(b) for b in small_boxes(rng, 10)]
            thr = float(rng.choice([0.3, 0.5, 0.75]))
            flags = match_detections([det(b) for b in dets], [(g, 0) for g in gts], thr)
            assert flags == brute_force_match(dets, gts, thr)


class TestAveragePrecision:
    def test_all_tp(self):
        assert average_precision([True, True, True], [0.9, 0.8, 0.7], 3) == 1.0

    def test_no_detections(self):
        assert average_precision([], [], 4) == 0.0

    def test_undefined(self):
        assert average_precision([True], [1.0], 0) is None

    def test_tp_fp_tp(self):
        got = average_precision([True, False, True], [0.9, 0.8, 0.7], 2)
        assert got == pytest.approx(hand_ap_101([True, False, True], 2), abs=1e-12)
        # recall <= .5 at precision 1 (51 points), recall in (.5, 1] at 2/3 (50 points)
        assert got == pytest.approx((51 + 50 * 2 / 3) / 101, abs=1e-12)

    def test_random_against_hand_walk(self):
        rng = np.random.default_rng(8)
        for _ in range(200):
            n = int(rng.integers(1, 15))
            flags = list(rng.random(n) < 0.5)
            n_gt = int(sum(flags) + rng.integers(0, 4)) or 1
            scores = np.sort(rng.random(n))[::-1]
            assert average_precision(flags, scores, n_gt) == pytest.approx(hand_ap_101(flags, n_gt), abs=1e-12)

    def test_exact_grid_recalls(self):
        # 35 TP of 100 GT lands exactly on recall point 0.35
        assert average_precision([True] * 35, np.linspace(1, 0.5, 35), 100) == pytest.approx(36 / 101)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.booleans(), min_size=1, max_size=15), st.integers(0, 3))
    def test_monotone_score_transform(self, flags, extra):
        n_gt = sum(flags) + extra or 1
        scores = np.linspace(0.9, 0.1, len(flags))
        a = average_precision(flags, scores, n_gt)
        b = average_precision(flags, np.exp(3 * scores) - 7, n_gt)
        assert a == b

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.booleans(), min_size=0, max_size=15), st.integers(0, 3))
    def test_append_fp_never_raises_tp_never_lowers(self, flags, extra):
        n_gt = sum(flags) + extra + 1
        scores = list(np.linspace(0.9, 0.2, len(flags)))
        base = average_precision(flags, scores, n_gt)
        assert average_precision(flags + [False], scores + [0.1], n_gt) <= base
        assert average_precision(flags + [True], scores + [0.1], n_gt) >= base


class TestEvaluate:
    manifest = toy_manifest(
        [[[0, 0, 10, 10], [20, 20, 60, 60]], [[0, 0, 100, 100]]],
        [[0, 1], [0]],
    )

    def test_perfect(self):
        dets = {s.image_id: (s.boxes, np.ones(len(s.boxes)), s.classes) for s in self.manifest.samples}
        r = evaluate(dets, self.manifest)
        assert r.ap == r.ap50 == r.ap_small == r.ap_medium == r.ap_large == 1.0
        assert r.per_class == {"a": 1.0, "b": 1.0}

    def test_empty(self):
        r = evaluate({}, self.manifest)
        assert r.ap == r.ap50 == r.ap_small == r.ap_medium == r.ap_large == 0.0

    def test_undefined_bucket(self):
        m = toy_manifest([[[0, 0, 10, 10]]], [[0]], names=("a",))
        r = evaluate({1: [det((0, 0, 10, 10))]}, m)
        assert r.ap_small == 1.0 and r.ap_medium is None and r.ap_large is None
        assert json.loads(r.to_json())["ap_medium"] is None

    def test_unknown_image(self):
        with pytest.raises(EvaluationError, match="99"):
            evaluate({99: []}, self.manifest)

    def test_golden_fixture(self):
        m = load_coco_json(FIXTURE / "annotations.json", FIXTURE)
        r = evaluate(load_detections_json(FIXTURE / "detections.json", m), m)
        expected = json.loads((FIXTURE / "expected.json").read_text())
        got = r.to_dict()
        assert got.keys() == expected.keys()
        assert got == expected
        # hand fractions, correctly rounded
        assert (r.ap, r.ap50, r.ap_medium) == (47 / 60, 5 / 6, 9 / 10)
        assert r.per_class == {"a": 2 / 3, "b": 9 / 10}
        assert r.to_json() == (FIXTURE / "expected.json").read_text()

    def test_json_round_trip(self):
        m = load_coco_json(FIXTURE / "annotations.json", FIXTURE)
        r = evaluate(load_detections_json(FIXTURE / "detections.json", m), m)
        assert EvalResult.from_dict(json.loads(r.to_json())).to_json() == r.to_json()

    def test_order_independent(self):
        m = load_coco_json(FIXTURE / "annotations.json", FIXTURE)
        dets = load_detections_json(FIXTURE / "detections.json", m)
        flipped = dict(reversed(list(dets.items())))
        m2 = DatasetManifest(list(reversed(m.samples)), m.class_names, category_ids=m.category_ids)
        assert evaluate(flipped, m2).to_json() == evaluate(dets, m).to_json()

    def test_max_detections_cap(self):
        gts = self.manifest
        noise = [det((50, 50, 55, 55), 0, 0.99)] * 5 + [det((0, 0, 10, 10), 0, 0.5)]
        assert evaluate({1: noise}, gts, max_detections=5).ap50 < evaluate({1: noise}, gts).ap50


def test_randomised_dataset_properties():
    rng = np.random.default_rng(21)
    for _ in range(100):
        m, dets = random_dataset(rng)
        base = evaluate(dets, m)
        assert base.ap50 >= base.ap
        # an extra lowest-scored false positive never raises AP
        after = evaluate(with_extra_fp(m, dets), m)
        assert after.ap <= base.ap and after.ap50 <= base.ap50
        for v in (base.ap, base.ap50, base.ap_small, base.ap_medium, base.ap_large):
            assert v is None or 0.0 <= v <= 1.0
