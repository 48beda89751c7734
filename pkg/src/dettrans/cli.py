"""Command-line entry point: ``dettrans {train,eval,detect,gen-data,gradcheck}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or numeric
failure. Log verbosity comes from the ``DETTRANS_LOG_LEVEL`` environment
variable (DEBUG, INFO, WARNING, ERROR; default INFO).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .backbone import ConfigError
from .boxes import clip_boxes
from .checkpoint import CheckpointError
from .config import RunConfig
from .data import (
    DataLoadError,
    DatasetManifest,
    generate_synthetic,
    load_coco_json,
    read_image,
    resize_scale,
    resize_shorter_edge,
    save_coco_json,
)
from .metrics import EvaluationError, class_pr, evaluate
from .model import DetTransNet
from .tensor import NumericalError
from .train import Trainer, TrainingError, records_to_csv

log = logging.getLogger("dettrans")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
LOG_ENV = "DETTRANS_LOG_LEVEL"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; usage errors here are exit code 1
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ------------------------------------------------------------------ helpers
def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "INFO").upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR"):
        raise UsageError(f"{LOG_ENV} must be DEBUG, INFO, WARNING or ERROR, got {level!r}")
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    logging.getLogger("dettrans").setLevel(level)


def _parse_override(text: str) -> tuple[str, object]:
    key, sep, raw = text.partition("=")
    if not sep:
        raise UsageError(f"--set expects section.key=value, got {text!r}")
    from .config import tomllib

    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw  # bare strings need no quoting on the command line
    return key.strip(), value


def fit_to_model(sample, cfg: RunConfig):
    """Resize a sample to the model input; fails naming H, W, P, m when it cannot fit."""
    out = resize_shorter_edge(sample, cfg.data.resize_target)
    H, W, P, m = cfg.patch.image_height, cfg.patch.image_width, cfg.patch.patch_size, cfg.patch.overlap
    if out.image.shape[:2] != (H, W):
        h, w = out.image.shape[:2]
        raise ConfigError(
            f"image {sample.source_id} resizes to {h}x{w}, which does not satisfy the patch grid "
            f"(H={H}, W={W}, P={P}, m={m})"
        )
    return out


def load_dataset(cfg: RunConfig, annotations=None, image_dir=None, split="train") -> DatasetManifest:
    if annotations:
        manifest = load_coco_json(annotations, image_dir or Path(annotations).parent, split)
    elif cfg.data.mode == "coco":
        manifest = load_coco_json(cfg.data.annotations, cfg.data.image_dir, split)
    else:
        d = cfg.data
        manifest = generate_synthetic(d.count, d.image_size, d.synthetic_seed, split=split)
    if manifest.num_classes != cfg.head.num_classes:
        raise ConfigError(
            f"head.num_classes={cfg.head.num_classes} but the dataset has {manifest.num_classes} categories"
        )
    manifest.samples = [fit_to_model(s, cfg) for s in manifest.samples]
    return manifest


def _ckpt_name(iteration: int) -> str:
    return f"ckpt-{iteration:06d}.ckpt"


def _config_without_output(cfg: RunConfig) -> dict:
    d = cfg.to_dict()
    d["run"].pop("output_dir")
    return d


# ------------------------------------------------------------------ commands
def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    overrides = dict(_parse_override(s) for s in args.set or [])
    for flag, key in (
        ("iters_phase1", "train.phase1_iters"),
        ("iters_phase2", "train.phase2_iters"),
        ("seed", "run.seed"),
        ("output_dir", "run.output_dir"),
        ("checkpoint_every", "train.checkpoint_every"),
    ):
        if getattr(args, flag) is not None:
            overrides[key] = getattr(args, flag)
    cfg = cfg.with_overrides(overrides)
    out = Path(cfg.output_dir)

    resume = ckpt_io.load(args.resume) if args.resume else None
    if resume is not None and _config_without_output(resume.config) != _config_without_output(cfg):
        raise ConfigError(f"config differs from the one stored in {args.resume}; resume needs the same settings")

    data = load_dataset(cfg)
    model = DetTransNet(cfg.model_config(), seed=cfg.seed)
    trainer = Trainer(model, data, cfg.train)
    if resume is not None:
        model.load_state_dict(resume.params)
        trainer.iteration = resume.iteration
        trainer.opt.update(resume.optimizers)
        trainer.records = list(resume.records)
        log.info("resumed from %s at iteration %d", args.resume, resume.iteration)

    out.mkdir(parents=True, exist_ok=True)
    ckpt_io.atomic_write_text(out / "config.toml", cfg.to_toml())
    (out / "checkpoints").mkdir(exist_ok=True)

    def snapshot(path: Path) -> None:
        ck = ckpt_io.from_model(cfg, model, trainer.iteration, trainer.opt, trainer.records, data.class_names)
        ckpt_io.save(path, ck)
        ckpt_io.atomic_write_text(out / "loss.csv", records_to_csv(trainer.records))

    stop = cfg.train.total_iters if args.stop_at is None else min(args.stop_at, cfg.train.total_iters)
    start = time.perf_counter()

    def on_step(rec):
        it = rec.iteration + 1
        if it % 50 == 0 or it == stop:
            log.info("iter %d/%d phase %d loss %.4f (%.0fs)", it, cfg.train.total_iters, rec.phase, rec.loss,
                     time.perf_counter() - start)
        if it % cfg.checkpoint_every == 0 and it < stop:
            snapshot(out / "checkpoints" / _ckpt_name(it))

    trainer.run(until=stop, callback=on_step)
    snapshot(out / "checkpoints" / _ckpt_name(trainer.iteration))
    if trainer.done:
        snapshot(out / "final.ckpt")
        log.info("training complete: %s", out / "final.ckpt")
    else:
        log.info("stopped at iteration %d; resume with --resume %s", trainer.iteration,
                 out / "checkpoints" / _ckpt_name(trainer.iteration))
    return EXIT_OK


def run_detector(model: DetTransNet, manifest: DatasetManifest) -> dict:
    return {s.image_id: model.detect(s.pixels) for s in manifest.samples}


def cmd_eval(args) -> int:
    ck = ckpt_io.load(args.checkpoint)
    cfg = ck.config
    model = ckpt_io.build_model(ck)
    manifest = load_dataset(cfg, args.annotations, args.images, args.split)
    dets = run_detector(model, manifest)
    result = evaluate(dets, manifest, max_detections=cfg.head.max_detections)
    text = result.to_json()
    if args.output:
        Path(args.output).parent.mkdir(parents=True, exist_ok=True)
        ckpt_io.atomic_write_text(args.output, text)
    sys.stdout.write(text)
    if args.pr_curve:
        write_pr_curve(args.pr_curve, dets, manifest)
    if args.annotated_dir:
        out = Path(args.annotated_dir)
        out.mkdir(parents=True, exist_ok=True)
        for s in manifest.samples:
            b, sc, c = dets[s.image_id]
            keep = sc > args.score_threshold
            name = Path(s.file_name or f"{s.image_id}.png").stem + ".png"
            draw_detections(out / name, s.image, b[keep], c[keep], sc[keep], manifest.class_names, s.boxes)
    return EXIT_OK


def cmd_detect(args) -> int:
    ck = ckpt_io.load(args.checkpoint)
    cfg = ck.config
    model = ckpt_io.build_model(ck)
    image = read_image(args.image)
    if image.shape[2] != cfg.patch.channels:
        raise ConfigError(f"image has {image.shape[2]} channels, model expects C={cfg.patch.channels}")
    from .data import ImageSample

    sample = ImageSample(image, np.zeros((0, 4)), np.zeros(0), file_name=str(args.image))
    fitted = fit_to_model(sample, cfg)
    boxes, scores, classes = model.detect(fitted.pixels)
    scale, _, _ = resize_scale(sample.height, sample.width, cfg.data.resize_target)
    keep = scores > args.score_threshold
    boxes = clip_boxes(boxes[keep] / scale, (sample.height, sample.width))
    scores, classes = scores[keep], classes[keep]
    names = ck.class_names or [str(i) for i in range(cfg.head.num_classes)]
    lines = [
        json.dumps({
            "box": [round(float(v), 4) for v in b],
            "class_id": int(c),
            "class_name": names[int(c)],
            "score": round(float(s), 6),
        })
        for b, s, c in zip(boxes, scores, classes)
    ]
    text = "".join(line + "\n" for line in lines)
    if args.output:
        ckpt_io.atomic_write_text(args.output, text)
    sys.stdout.write(text)
    if args.annotated:
        draw_detections(args.annotated, image, boxes, classes, scores, names)
    return EXIT_OK


def cmd_gen_data(args) -> int:
    if args.count < 1 or args.image_size < 8:
        raise UsageError("--count must be >= 1 and --image-size >= 8")
    manifest = generate_synthetic(args.count, args.image_size, args.seed, split=args.split)
    out = Path(args.out)
    save_coco_json(manifest, out / "annotations.json", out / "images")
    log.info("wrote %d images to %s", len(manifest), out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_loss_suite, run_op_suite

    start = time.perf_counter()
    results = run_op_suite(args.instances, args.seed)
    failed = False
    rows = []
    for tol, group in ((1e-4, results), (1e-3, [] if args.ops_only else run_loss_suite(args.instances, args.seed))):
        worst: dict[str, tuple[float, int]] = {}
        for r in group:
            err, n = worst.get(r.name, (0.0, 0))
            worst[r.name] = (max(err, r.max_rel_error), n + 1)
        for name, (err, n) in sorted(worst.items()):
            ok = err < tol
            failed |= not ok
            rows.append(f"{name:<18} n={n:<3} max_rel_err={err:.2e} tol={tol:.0e} {'ok' if ok else 'FAIL'}")
    print("\n".join(rows))
    print(f"{'FAILED' if failed else 'passed'} in {time.perf_counter() - start:.1f}s")
    return EXIT_RUNTIME if failed else EXIT_OK


# ------------------------------------------------------------------ outputs
def draw_detections(path, image, boxes, classes, scores, names, gt_boxes=None) -> None:
    from PIL import Image, ImageDraw

    im = Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8))
    draw = ImageDraw.Draw(im)
    for b in [] if gt_boxes is None else gt_boxes:
        draw.rectangle([float(v) for v in b], outline=(0, 255, 0))
    for b, c, s in zip(boxes, classes, scores):
        x0, y0, x1, y1 = (float(v) for v in b)
        draw.rectangle([x0, y0, x1, y1], outline=(255, 0, 0))
        draw.text((x0 + 1, y0 + 1), f"{names[int(c)]} {s:.2f}", fill=(255, 255, 0))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    im.save(path)


def write_pr_curve(path, dets, manifest: DatasetManifest, iou_thresh: float = 0.5) -> None:
    """Per-class precision/recall at one IoU threshold, as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from .metrics import _normalise_dets

    norm = {k: _normalise_dets(v) for k, v in dets.items()}
    gts = {s.image_id: (s.boxes, s.classes) for s in manifest.samples}
    plt.rcParams["svg.hashsalt"] = "dettrans"
    fig, ax = plt.subplots(figsize=(5, 4))
    for c, name in enumerate(manifest.class_names):
        flags, _, n_gt = class_pr(norm, gts, c, iou_thresh)
        if n_gt == 0 or len(flags) == 0:
            continue
        tp = np.cumsum(flags)
        ax.plot(tp / n_gt, tp / np.arange(1, len(flags) + 1), label=name)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.set_title(f"IoU {iou_thresh:.2f}")
    ax.legend(loc="lower left")
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dettrans", description="Overlapping-patch transformer detector.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="two-phase training")
    t.add_argument("--config", required=True)
    t.add_argument("--iters-phase1", type=int)
    t.add_argument("--iters-phase2", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--output-dir")
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--stop-at", type=int, help="stop after this many global iterations")
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override any config field")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="COCO-style evaluation of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--annotations", help="COCO JSON; defaults to the checkpoint config's dataset")
    e.add_argument("--images", help="image directory for --annotations")
    e.add_argument("--split", default="val", choices=("train", "val", "test"))
    e.add_argument("--output", help="write the EvalResult JSON here as well as to stdout")
    e.add_argument("--pr-curve", help="SVG precision/recall plot at IoU 0.5")
    e.add_argument("--annotated-dir", help="write annotated PNGs here")
    e.add_argument("--score-threshold", type=float, default=0.5, help="for annotated PNGs only")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("detect", help="detect objects in one image")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("image")
    d.add_argument("--score-threshold", type=float, default=0.5, help="keep scores strictly above this")
    d.add_argument("--output", help="JSON lines file (also printed to stdout)")
    d.add_argument("--annotated", help="annotated image path")
    d.set_defaults(func=cmd_detect)

    g = sub.add_parser("gen-data", help="write a synthetic shapes dataset (PNG + COCO JSON)")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=32)
    g.add_argument("--image-size", type=int, default=96)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split", default="train", choices=("train", "val", "test"))
    g.set_defaults(func=cmd_gen_data)

    c = sub.add_parser("gradcheck", help="finite-difference check of every op and both losses")
    c.add_argument("--instances", type=int, default=20)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--ops-only", action="store_true")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_USAGE
    except (TrainingError, NumericalError, CheckpointError, DataLoadError, EvaluationError, OSError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
