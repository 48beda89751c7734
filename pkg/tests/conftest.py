import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from dettrans.config import RunConfig
from dettrans.metrics import EvalResult, evaluate
from dettrans.model import DetTransNet
from dettrans.train import LossRecord, Trainer

ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@dataclass
class OverfitRun:
    config: RunConfig
    model: DetTransNet
    records: list[LossRecord]
    phase1_final: dict[str, np.ndarray]
    seconds: float
    result: EvalResult


@pytest.fixture(scope="session")
def overfit_run() -> OverfitRun:
    """The desk profile trained on the committed 32-image set, evaluated on its training images.

    Takes several minutes; every test that needs a fully trained model shares it.
    """
    from dettrans.cli import load_dataset, run_detector

    cfg = RunConfig.load(ROOT / "configs" / "desk.toml")
    cfg = cfg.with_overrides({
        "data.annotations": str(ROOT / cfg.data.annotations),
        "data.image_dir": str(ROOT / cfg.data.image_dir),
    })
    data = load_dataset(cfg)
    model = DetTransNet(cfg.model_config(), seed=cfg.seed)
    trainer = Trainer(model, data, cfg.train)
    start = time.perf_counter()
    trainer.run(until=cfg.train.phase1_iters)
    phase1 = {n: p.data.copy() for n, p in model.phase1_parameters()}
    trainer.run()
    seconds = time.perf_counter() - start
    result = evaluate(run_detector(model, data), data, max_detections=cfg.head.max_detections)
    return OverfitRun(cfg, model, list(trainer.records), phase1, seconds, result)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records one PASS/FAIL line and asserts ``ok``."""

    def report(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
