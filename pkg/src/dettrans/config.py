"""Run configuration: one TOML document holding every knob of a run.

Sections mirror the component configs (``patch``, ``encoder``, ``rpn``,
``head``, ``train``, ``data``) plus ``run`` for the seed and output location.
Everything is validated when the file is loaded, before any compute.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

import tomli_w

from .backbone import ConfigError, EncoderConfig, PatchConfig
from .boxes import AnchorSpec
from .detector import HeadConfig, RPNConfig
from .model import ModelConfig
from .train import TrainSchedule


@dataclass(frozen=True)
class DataConfig:
    mode: str = "synthetic"  # "synthetic" or "coco"
    annotations: str = ""
    image_dir: str = ""
    count: int = 32
    image_size: int = 96
    synthetic_seed: int = 0
    resize_target: int = 96

    def __post_init__(self):
        if self.mode not in ("synthetic", "coco"):
            raise ConfigError(f"data.mode must be 'synthetic' or 'coco', got {self.mode!r}")
        if self.mode == "coco" and not (self.annotations and self.image_dir):
            raise ConfigError("data.annotations and data.image_dir are required when data.mode = 'coco'")
        if self.count < 1 or self.image_size < 8 or self.resize_target < 1:
            raise ConfigError("data.count >= 1, data.image_size >= 8 and data.resize_target >= 1 required")


@dataclass(frozen=True)
class RunConfig:
    patch: PatchConfig = field(default_factory=lambda: PatchConfig(96, 96, 3, 16, 8))
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    residual_blocks: int = 2
    rpn: RPNConfig = field(default_factory=RPNConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    train: TrainSchedule = field(default_factory=TrainSchedule)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs/default"
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.residual_blocks < 0:
            raise ConfigError(f"encoder.residual_blocks must be >= 0, got {self.residual_blocks}")
        if self.checkpoint_every < 1:
            raise ConfigError(f"train.checkpoint_every must be >= 1, got {self.checkpoint_every}")
        H, W = self.patch.image_height, self.patch.image_width
        if H == W and self.data.resize_target != H:
            raise ConfigError(
                f"data.resize_target={self.data.resize_target} must equal the model input size "
                f"(H={H}, W={W}, P={self.patch.patch_size}, m={self.patch.overlap})"
            )

    @property
    def seed(self) -> int:
        return self.train.seed

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.patch, self.encoder, self.rpn, self.head, self.residual_blocks)

    # ------------------------------------------------------------ serialise
    def to_dict(self) -> dict:
        p, e, r, h, t, d = self.patch, self.encoder, self.rpn, self.head, self.train, self.data
        train = dataclasses.asdict(t)
        seed = train.pop("seed")
        return {
            "run": {"seed": seed, "output_dir": self.output_dir},
            "patch": dataclasses.asdict(p),
            "encoder": {**dataclasses.asdict(e), "residual_blocks": self.residual_blocks},
            "rpn": {
                "kernel_size": r.kernel_size,
                "hidden_dim": r.hidden_dim,
                "anchor_scales": list(r.anchor_spec.scales),
                "anchor_ratios": list(r.anchor_spec.aspect_ratios),
                "nms_iou": r.nms_iou,
                "pre_nms_top": r.pre_nms_top,
                "post_nms_top": r.post_nms_top,
            },
            "head": {**dataclasses.asdict(h), "box_weights": list(h.box_weights)},
            "train": {**train, "checkpoint_every": self.checkpoint_every},
            "data": dataclasses.asdict(d),
        }

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def save(self, path) -> None:
        Path(path).write_text(self.to_toml())

    @classmethod
    def from_dict(cls, doc: dict) -> RunConfig:
        if not all(isinstance(v, dict) for v in doc.values()):
            raise ConfigError("config must contain only [section] tables")
        doc = {k: dict(v) for k, v in doc.items()}
        known = {"run", "patch", "encoder", "rpn", "head", "train", "data"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        run = doc.get("run", {})
        enc = doc.get("encoder", {})
        rpn = doc.get("rpn", {})
        train = doc.get("train", {})
        _check_keys("run", run, {"seed", "output_dir"})
        blocks = enc.pop("residual_blocks", 2)
        scales = rpn.pop("anchor_scales", None)
        ratios = rpn.pop("anchor_ratios", None)
        every = train.pop("checkpoint_every", 500)
        if "seed" in run:
            train["seed"] = run["seed"]
        default_anchor = AnchorSpec()
        anchor = _build(
            "rpn",
            AnchorSpec,
            {
                "scales": tuple(scales) if scales is not None else default_anchor.scales,
                "aspect_ratios": tuple(ratios) if ratios is not None else default_anchor.aspect_ratios,
            },
        )
        head = doc.get("head", {})
        if "box_weights" in head:
            head["box_weights"] = tuple(head["box_weights"])
        try:
            return cls(
                patch=_build("patch", PatchConfig, doc.get("patch", {}), PatchConfig(96, 96, 3, 16, 8)),
                encoder=_build("encoder", EncoderConfig, enc),
                residual_blocks=_typed("encoder.residual_blocks", blocks, int),
                rpn=_build("rpn", RPNConfig, {**rpn, "anchor_spec": anchor}),
                head=_build("head", HeadConfig, head),
                train=_build("train", TrainSchedule, train),
                data=_build("data", DataConfig, doc.get("data", {})),
                output_dir=_typed("run.output_dir", run.get("output_dir", "runs/default"), str),
                checkpoint_every=_typed("train.checkpoint_every", every, int),
            )
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_toml(cls, text: str) -> RunConfig:
        try:
            doc = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config is not valid TOML: {exc}") from exc
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path) -> RunConfig:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_toml(path.read_text())

    def with_overrides(self, overrides: dict[str, object]) -> RunConfig:
        """Apply ``{"section.key": value}`` overrides and re-validate."""
        doc = self.to_dict()
        for dotted, value in overrides.items():
            section, _, key = dotted.partition(".")
            if section not in doc or not key:
                raise ConfigError(f"override {dotted!r} must look like section.key")
            if key not in doc[section]:
                raise ConfigError(f"unknown config field {dotted!r}")
            doc[section][key] = value
        return RunConfig.from_dict(doc)


def _check_keys(section: str, values: dict, allowed) -> None:
    extra = set(values) - set(allowed)
    if extra:
        raise ConfigError(f"unknown field(s) in [{section}]: {sorted(extra)}")


def _typed(name: str, value, kind):
    if kind is int and isinstance(value, bool) or not isinstance(value, kind):
        raise ConfigError(f"{name} must be {kind.__name__}, got {value!r}")
    return value


def _build(section: str, cls, values: dict, default=None):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    _check_keys(section, values, fields)
    base = default if default is not None else cls()
    kwargs = {}
    for name, value in values.items():
        current = getattr(base, name)
        if isinstance(current, bool):
            ok = isinstance(value, bool)
        elif isinstance(current, int):
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif isinstance(current, float):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            value = float(value) if ok else value
        elif isinstance(current, str):
            ok = isinstance(value, str)
        else:
            ok = True
        if not ok:
            raise ConfigError(f"{section}.{name} must be {type(current).__name__}, got {value!r}")
        kwargs[name] = value
    try:
        return dataclasses.replace(base, **kwargs)
    except ConfigError as exc:
        raise ConfigError(f"[{section}] {exc}") from exc
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


DESK = RunConfig()
