"""Acceptance criteria, one test each, at their stated tolerances.

Every test prints ``criterion N: PASS|FAIL`` with the measured numbers; the
lines are repeated in the terminal summary of a full run.
"""

import json
import time
from collections import defaultdict
from pathlib import Path

import numpy as np

from dettrans import tensor as T
from dettrans.backbone import PatchConfig, extract_patches
from dettrans.boxes import decode_boxes, encode_boxes, iou_matrix, nms
from dettrans.cli import main
from dettrans.data import load_coco_json
from dettrans.gradcheck import run_loss_suite, run_op_suite
from dettrans.metrics import evaluate, load_detections_json
from dettrans.model import DetTransNet
from dettrans.tensor import Tensor

from factories import desk_config, random_boxes, random_dataset, with_extra_fp
from oracles import brute_force_nms, enumerate_windows, raster_iou, vit_tiles

ROOT = Path(__file__).resolve().parents[1]


def test_1_gradient_suite(criterion):
    start = time.perf_counter()
    ops = run_op_suite(instances=20, seed=0)
    losses = run_loss_suite(instances=20, seed=0)
    seconds = time.perf_counter() - start
    worst, count = defaultdict(float), defaultdict(int)
    for r in ops + losses:
        worst[r.name] = max(worst[r.name], r.max_rel_error)
        count[r.name] += 1
    op_names = {r.name for r in ops}
    loss_names = {r.name for r in losses}
    ok = (
        all(worst[n] < 1e-4 for n in op_names)
        and all(worst[n] < 1e-3 for n in loss_names)
        and min(count.values()) >= 20
        and loss_names == {"rpn_loss", "roi_loss"}
        and seconds < 300
    )
    op_max = max(worst[n] for n in op_names)
    loss_max = max(worst[n] for n in loss_names)
    criterion(
        1, ok,
        f"{len(op_names)} ops max rel err {op_max:.1e} (<1e-4), losses {loss_max:.1e} (<1e-3), "
        f">= {min(count.values())} instances each, {seconds:.0f}s (<300s)",
    )


def _valid_triples():
    return [
        (H, P, m)
        for H in range(8, 49, 4)
        for P in range(2, H + 1, 2)
        for m in range(P)
        if (H - P) % (P - m) == 0
    ]


def test_2_patching_laws(criterion):
    rng = np.random.default_rng(2)
    triples = _valid_triples()
    tiling_ok = True
    for H, P in ((32, 8), (96, 16), (48, 12), (24, 4)):
        img = rng.standard_normal((H, H, 3)).astype(np.float32)
        out = extract_patches(Tensor(img), PatchConfig(H, H, 3, P, 0)).data
        tiling_ok &= out.tobytes() == vit_tiles(img, P).tobytes()
    counts_ok = columns_ok = True
    for H, P, m in triples:
        cfg = PatchConfig(H, H, 2, P, m)
        counts_ok &= cfg.num_patches == len(enumerate_windows(H, H, P, m))
        g = cfg.patches_per_side
        out = extract_patches(Tensor(rng.standard_normal((H, H, 2))), cfg).data.reshape(g, g, P, P, 2)
        columns_ok &= bool(np.array_equal(out[:, :-1, :, P - m :], out[:, 1:, :, :m]))
        columns_ok &= bool(np.array_equal(out[:-1, :, P - m :], out[1:, :, :m]))
    ok = tiling_ok and counts_ok and columns_ok and len(triples) >= 50
    criterion(
        2, ok,
        f"m=0 bit-identical to tiler: {tiling_ok}; counts match on {len(triples)} triples: {counts_ok}; "
        f"overlap equality exact: {columns_ok}",
    )


def test_3_geometry_oracles(criterion):
    rng = np.random.default_rng(3)
    a, b = random_boxes(rng, 200, min_side=1.0), random_boxes(rng, 200, min_side=1.0)
    got = np.diag(iou_matrix(a, b))
    iou_err = max(abs(g - raster_iou(x, y)) for g, x, y in zip(got, a, b))
    nms_bad = 0
    for _ in range(500):
        n = int(rng.integers(0, 21))
        boxes, scores = random_boxes(rng, n), rng.random(n)
        t = float(rng.uniform(0.05, 0.95))
        nms_bad += nms(boxes, scores, t).tolist() != brute_force_nms(boxes, scores, t)
    # side ratios up to 20 stay inside the decoder's log-scale clamp
    anchors, targets = random_boxes(rng, 100), random_boxes(rng, 100)
    rt_err = float(np.abs(decode_boxes(anchors, encode_boxes(anchors, targets)) - targets).max())
    ok = iou_err < 2e-3 and nms_bad == 0 and rt_err < 1e-5
    criterion(
        3, ok,
        f"IoU vs 1000x1000 raster max err {iou_err:.1e} (<2e-3) on 200 pairs; "
        f"NMS mismatches {nms_bad}/500; roundtrip err {rt_err:.1e} (<1e-5) on 100 pairs",
    )


def test_4_ap_oracle(criterion):
    fixture = ROOT / "tests" / "fixtures" / "eval2"
    m = load_coco_json(fixture / "annotations.json", fixture)
    got = evaluate(load_detections_json(fixture / "detections.json", m), m)
    golden = got.to_json() == (fixture / "expected.json").read_text()
    rng = np.random.default_rng(4)
    violations = 0
    for _ in range(100):
        ds, dets = random_dataset(rng)
        base = evaluate(dets, ds)
        after = evaluate(with_extra_fp(ds, dets), ds)
        violations += not (base.ap50 >= base.ap and after.ap <= base.ap and after.ap50 <= base.ap50)
    ok = golden and violations == 0
    criterion(4, ok, f"golden EvalResult byte-exact: {golden}; property violations {violations}/100")


def test_5_overfit_smoke(overfit_run, criterion):
    cfg = overfit_run.config
    total = cfg.train.phase1_iters + cfg.train.phase2_iters
    ap50 = overfit_run.result.ap50
    ok = ap50 >= 0.90 and total <= 5000 and overfit_run.seconds < 1800
    ref = ROOT / "reference" / "run.json"
    recorded = json.loads(ref.read_text()) if ref.exists() else {}
    criterion(
        5, ok,
        f"AP50 {ap50:.4f} (>=0.90) after {total} iterations (<=5000) in {overfit_run.seconds:.0f}s (<1800s); "
        f"recorded reference AP50 {recorded.get('ap50')}, {recorded.get('train_seconds')}s",
    )


def test_6_freeze_semantics(overfit_run, criterion):
    params = dict(overfit_run.model.phase1_parameters())
    changed = [n for n, v in overfit_run.phase1_final.items() if params[n].data.tobytes() != v.tobytes()]
    ok = not changed and set(params) == set(overfit_run.phase1_final)
    criterion(6, ok, f"{len(params) - len(changed)}/{len(params)} phase-1 tensors bit-identical after phase 2")


def test_7_determinism(tmp_path, monkeypatch, capsys, criterion):
    monkeypatch.chdir(ROOT)
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code = main(["train", "--config", "configs/desk.toml", "--iters-phase1", "6", "--iters-phase2", "6",
                     "--output-dir", str(out)])
        runs.append((code, out))
    ckpt_same = all(c == 0 for c, _ in runs) and all(
        (runs[0][1] / f).read_bytes() == (runs[1][1] / f).read_bytes()
        for f in ("final.ckpt", "checkpoints/ckpt-000012.ckpt", "loss.csv")
    )
    outputs = []
    for name in ("a", "b"):
        code = main(["eval", "--checkpoint", str(tmp_path / name / "final.ckpt"), "--split", "train",
                     "--output", str(tmp_path / f"{name}.json")])
        outputs.append((code, (tmp_path / f"{name}.json").read_bytes(), capsys.readouterr().out))
    eval_same = all(c == 0 for c, _, _ in outputs) and outputs[0][1:] == outputs[1][1:]
    criterion(7, ckpt_same and eval_same, f"train checkpoints bit-identical: {ckpt_same}; eval JSON byte-identical: {eval_same}")


def test_8_shape_contract(criterion):
    net = DetTransNet(desk_config(), seed=0)
    img = Tensor(np.random.default_rng(8).standard_normal((96, 96, 3)))
    with T.no_grad():
        tokens = net.backbone.tokens(img)
        fmap = net.features(img)
        obj, deltas = net.rpn(fmap)
    shapes = (tokens.shape, fmap.shape, obj.shape, deltas.shape)
    ok = shapes == ((122, 64), (11, 11, 64), (11, 11, 3), (11, 11, 12))
    criterion(8, ok, "tokens {}, feature map {}, objectness {}, deltas {}".format(*shapes))
