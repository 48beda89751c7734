"""Central finite-difference checks for the autodiff engine.

Relative error is measured as ``max|analytic - numeric| / max(max|analytic|,
max|numeric|)``, i.e. relative to the gradient's scale rather than per element,
so entries that are zero up to rounding do not dominate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad, precision

STEP = 1e-5


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, h: float = STEP, coords=None) -> np.ndarray:
    """Central-difference gradient of the scalar ``fn()`` with respect to ``t``.

    ``coords`` optionally restricts the probe to a subset of flat indices; other
    entries are returned as NaN.
    """
    flat = t.data.reshape(-1)
    grad = np.full(flat.shape, np.nan) if coords is not None else np.zeros(flat.shape)
    for i in range(flat.size) if coords is None else coords:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn().data.sum())
        flat[i] = orig - h
        fm = float(fn().data.sum())
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(t.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    mask = ~np.isnan(numeric)
    a, n = analytic[mask], numeric[mask]
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-8)
    return float(np.abs(a - n).max(initial=0.0) / scale)


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    per_input: dict[str, float]

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def check_gradients(
    name: str,
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = STEP,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckResult:
    """Compare backprop gradients of the scalar ``fn()`` against central differences.

    All ``inputs`` must be float64 leaves with ``requires_grad`` set. When
    ``max_coords`` is given only that many randomly chosen entries per input are
    probed (for large end-to-end checks).
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError(f"gradient checks need float64 inputs, {name} got {t.dtype}")
        t.zero_grad()
    out = fn()
    out.backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]
    per_input = {}
    for k, (t, a) in enumerate(zip(inputs, analytic)):
        coords = None
        if max_coords is not None and t.size > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = rng.choice(t.size, size=max_coords, replace=False)
        num = numerical_grad(fn, t, h, coords)
        per_input[t.name or f"input{k}"] = relative_error(a, num)
    return GradCheckResult(name, max(per_input.values(), default=0.0), per_input)


def run_op_suite(instances: int = 20, seed: int = 0) -> list[GradCheckResult]:
    """Finite-difference check of every differentiable primitive on random small shapes."""
    from . import tensor as T

    rng = np.random.default_rng(seed)
    results = []

    def leaf(shape, name, low=None):
        data = rng.standard_normal(shape)
        if low is not None:
            data = np.abs(data) + low
        return Tensor(data, requires_grad=True, name=name)

    def dims(lo=1, hi=5):
        return int(rng.integers(lo, hi + 1))

    with precision(np.float64):
        for _ in range(instances):
            r, k, c = dims(), dims(), dims()
            a, b = leaf((r, k), "a"), leaf((k, c), "b")
            proj = rng.standard_normal((r, c))
            # weighted sums so every output entry contributes a distinct weight
            results.append(check_gradients("matmul", lambda: (T.matmul(a, b) * Tensor(proj)).sum(), [a, b]))

            bt, k = dims(1, 3), dims()
            a3, b3 = leaf((bt, r, k), "a"), leaf((bt, k, c), "b")
            p3 = rng.standard_normal((bt, r, c))
            results.append(check_gradients("batched_matmul", lambda: (T.matmul(a3, b3) * Tensor(p3)).sum(), [a3, b3]))

            shape = (dims(), dims())
            x, y = leaf(shape, "x"), leaf(shape, "y")
            w = Tensor(rng.standard_normal(shape))
            unary = {
                "relu": T.relu,
                "gelu": T.gelu,
                "sigmoid": T.sigmoid,
                "exp": T.exp,
                "softmax": lambda v: T.softmax(v, axis=-1),
                "softmax_axis0": lambda v: T.softmax(v, axis=0),
                "log_softmax": lambda v: T.log_softmax(v, axis=-1),
                "transpose": lambda v: T.transpose(v) * Tensor(w.data.T),
                "reshape": lambda v: T.reshape(v, (-1,)) * Tensor(w.data.reshape(-1)),
                "sum_axis": lambda v: T.sum_(v * w, axis=0),
                "mean": lambda v: T.mean(v * w, axis=1),
                "slice": lambda v: v[:, : max(1, v.shape[1] // 2)] * Tensor(w.data[:, : max(1, v.shape[1] // 2)]),
                "take": lambda v: T.take(v, [0, v.shape[0] - 1, 0], axis=0),
                "bce_with_logits": lambda v: T.bce_with_logits(v, (w.data > 0).astype(float)),
                "smooth_l1": lambda v: T.smooth_l1(v, w, beta=1.0),
            }
            for op, f in unary.items():
                ow = rng.standard_normal(f(x.detach()).shape)
                results.append(check_gradients(op, lambda f=f, ow=ow: (f(x) * Tensor(ow)).sum(), [x]))
            pos = leaf(shape, "x", low=0.5)
            results.append(check_gradients("log", lambda: (T.log(pos) * w).sum(), [pos]))
            results.append(check_gradients("add", lambda: ((x + y) * w).sum(), [x, y]))
            results.append(check_gradients("mul", lambda: ((x * y) * w).sum(), [x, y]))
            yd = leaf(shape, "y", low=0.5)
            results.append(check_gradients("div", lambda: ((x / yd) * w).sum(), [x, yd]))
            results.append(check_gradients("concat", lambda: (T.concat([x, y], axis=1) * Tensor(
                np.concatenate([w.data, w.data], axis=1))).sum(), [x, y]))
            bias = leaf((shape[1],), "bias")
            results.append(check_gradients("add_bias", lambda: (T.add_bias(x, bias) * w).sum(), [x, bias]))

            d = dims(2, 6)
            row = leaf((dims(1, 3), d), "x")
            gamma, beta = leaf((d,), "gamma"), leaf((d,), "beta")
            ow = rng.standard_normal(row.shape)
            results.append(check_gradients(
                "layernorm", lambda: (T.layernorm(row, gamma, beta, 1e-5) * Tensor(ow)).sum(), [row, gamma, beta]
            ))

            h, wd, cin, cout = dims(2, 5), dims(2, 5), dims(1, 3), dims(1, 3)
            ksz = int(rng.choice([1, 3]))
            img = leaf((h, wd, cin), "x")
            ker = leaf((ksz, ksz, cin, cout), "weight")
            cb = leaf((cout,), "bias")
            ow = rng.standard_normal((h, wd, cout))
            results.append(check_gradients("conv2d", lambda: (T.conv2d(img, ker, cb) * Tensor(ow)).sum(), [img, ker, cb]))
    return results


def run_loss_suite(instances: int = 20, seed: int = 0, max_coords: int = 2) -> list[GradCheckResult]:
    """End-to-end checks of both training losses through a small detector.

    Each instance builds a fresh randomly initialised model and synthetic image;
    ``max_coords`` random entries of every parameter are probed.
    """
    from .backbone import EncoderConfig, PatchConfig
    from .boxes import AnchorSpec
    from .data import generate_synthetic, normalize
    from .detector import HeadConfig, RPNConfig
    from .model import DetTransNet, ModelConfig
    from .train import roi_loss, rpn_loss, sample_rois

    cfg = ModelConfig(
        PatchConfig(32, 32, 3, 8, 4),
        EncoderConfig(8, 1, 2),
        RPNConfig(hidden_dim=8, anchor_spec=AnchorSpec((6.0, 12.0)), pre_nms_top=40, post_nms_top=10),
        HeadConfig(num_classes=3, pool_size=2, hidden_dim=8),
        residual_blocks=1,
    )
    results = []
    data = generate_synthetic(instances, image_size=32, seed=seed, min_extent=8, max_extent=16, max_objects=2)
    with precision(np.float64):
        for k, sample in enumerate(data.samples):
            rng = np.random.default_rng([seed, k])
            model = DetTransNet(cfg, seed=int(rng.integers(2**31)))
            for name, p in model.named_parameters():
                # zero-initialised biases put pre-activations exactly on relu
                # kinks, where central differences are meaningless
                p.data = p.data + rng.normal(0.0, 0.05, p.shape)
                p.name = name
            image = Tensor(normalize(sample.image).astype(np.float64))
            params = model.parameters()

            def rpn_objective():
                obj, deltas = model.rpn(model.features(image))
                return rpn_loss(obj, deltas, model.anchors, sample.boxes, np.random.default_rng(k), batch=32)[0]

            phase1 = [p for n, p in model.phase1_parameters()]
            results.append(check_gradients("rpn_loss", rpn_objective, phase1, max_coords=max_coords, rng=rng))

            with no_grad():
                rois, _ = model.proposals(model.features(image))
            picked = sample_rois(rois, sample.boxes, sample.classes, 3, 12, rng=np.random.default_rng(k))

            def roi_objective():
                logits, deltas = model.roi_head(model.features(image), picked.boxes)
                return roi_loss(logits, deltas, picked, sample.boxes, box_weights=cfg.head.box_weights)[0]

            results.append(check_gradients("roi_loss", roi_objective, params, max_coords=max_coords, rng=rng))
    return results
