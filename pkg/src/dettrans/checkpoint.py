"""Checkpoint files.

Layout::

    b"DTCKPT" | version (u16 LE) | header length (u64 LE) | header (UTF-8 JSON)
    | tensor blobs (little-endian float32, in header order) | sha256 of all preceding bytes

The header holds the run config (TOML text), the iteration counter, the loss
records so far, optimiser scalars, and a ``tensors`` index of
``{name, shape, offset}`` entries. Parameters are named ``param/<name>`` and
Adam moments ``opt<phase>/m/<name>`` / ``opt<phase>/v/<name>``. Files are
written to a temporary path and renamed into place.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .model import DetTransNet
from .train import LossRecord, OptimizerState

MAGIC = b"DTCKPT"
VERSION = 1
_PREFIX = struct.Struct("<6sHQ")


class CheckpointError(RuntimeError):
    """A checkpoint is corrupt, from an unknown version, or does not fit the model."""


@dataclass
class Checkpoint:
    config: RunConfig
    iteration: int
    params: dict[str, np.ndarray]
    optimizers: dict[int, OptimizerState] = field(default_factory=dict)
    records: list[LossRecord] = field(default_factory=list)
    class_names: list[str] = field(default_factory=list)


def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        os.chmod(tmp, 0o666 & ~_umask())  # mkstemp creates 0600
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    _atomic_write(Path(path), text.encode())


def encode(ckpt: Checkpoint) -> bytes:
    tensors: list[tuple[str, np.ndarray]] = [(f"param/{n}", a) for n, a in ckpt.params.items()]
    opt_meta = {}
    for phase, st in sorted(ckpt.optimizers.items()):
        opt_meta[str(phase)] = {
            "lr": st.lr, "weight_decay": st.weight_decay, "beta1": st.beta1,
            "beta2": st.beta2, "eps": st.eps, "step": st.step,
        }
        tensors += [(f"opt{phase}/m/{n}", a) for n, a in st.m.items()]
        tensors += [(f"opt{phase}/v/{n}", a) for n, a in st.v.items()]
    index, blobs, offset = [], [], 0
    for name, arr in tensors:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "class_names": list(ckpt.class_names),
        "config": ckpt.config.to_toml(),
        "iteration": ckpt.iteration,
        "optimizers": opt_meta,
        "records": [[r.iteration, r.phase, r.loss, r.components] for r in ckpt.records],
        "tensors": index,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = _PREFIX.pack(MAGIC, VERSION, len(head)) + head + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def decode(payload: bytes) -> Checkpoint:
    if len(payload) < _PREFIX.size + 32:
        raise CheckpointError("checkpoint truncated")
    body, digest = payload[:-32], payload[-32:]
    magic, version, head_len = _PREFIX.unpack_from(body)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch (file corrupt)")
    start = _PREFIX.size
    header = json.loads(body[start : start + head_len])
    blob_base = start + head_len
    arrays = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=blob_base + entry["offset"])
        arrays[entry["name"]] = arr.reshape(shape).astype(np.float32)
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    optimizers = {}
    for phase, meta in header["optimizers"].items():
        st = OptimizerState(meta["lr"], meta["weight_decay"], meta["beta1"], meta["beta2"], meta["eps"], meta["step"])
        for kind, store in (("m", st.m), ("v", st.v)):
            prefix = f"opt{phase}/{kind}/"
            store.update({k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)})
        optimizers[int(phase)] = st
    records = [LossRecord(int(i), int(p), float(l), dict(c)) for i, p, l, c in header["records"]]
    return Checkpoint(
        RunConfig.from_toml(header["config"]), int(header["iteration"]), params, optimizers, records,
        list(header["class_names"]),
    )


def save(path, ckpt: Checkpoint) -> None:
    _atomic_write(Path(path), encode(ckpt))


def load(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode(path.read_bytes())


def from_model(
    config: RunConfig, model: DetTransNet, iteration: int = 0, optimizers=None, records=(), class_names=()
) -> Checkpoint:
    """Snapshot a model. The output directory is blanked in the stored config
    so that identical runs written to different places produce identical bytes."""
    config = dataclasses.replace(config, output_dir="")
    params = {n: p.data.copy() for n, p in model.named_parameters()}
    return Checkpoint(config, iteration, params, dict(optimizers or {}), list(records), list(class_names))


def build_model(ckpt: Checkpoint) -> DetTransNet:
    """Instantiate the checkpoint's model and load its weights (shapes are checked)."""
    model = DetTransNet(ckpt.config.model_config(), seed=ckpt.config.seed)
    try:
        model.load_state_dict(ckpt.params)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint does not fit its model config: {exc}") from exc
    return model
