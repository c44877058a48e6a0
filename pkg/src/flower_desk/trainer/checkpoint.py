"""FLWR checkpoints: a JSON manifest followed by named little-endian f32 tensors.

Layout::

    b"FLWR" | u32 version | u64 manifest length | manifest (UTF-8 JSON)
    u32 tensor count
    per tensor: u16 name length | name | u8 ndim | u32 dims... | f32 data
    b"END!"

The whole file is parsed and validated before anything is written into a
model, so a damaged file never leaves a half-loaded model behind.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..action_spaces import ActionSpaceDescriptor, NormalizationStats
from ..context import ContextEncoderConfig
from ..errors import FormatError, IntegrityError
from ..flow_transformer import FlowModel, FlowTransformerConfig
from ..numerics import SeededRng

MAGIC = b"FLWR"
TRAILER = b"END!"
VERSION = 1


@dataclass
class Checkpoint:
    manifest: dict
    tensors: dict[str, np.ndarray]

    @property
    def step(self) -> int:
        return int(self.manifest.get("step", 0))

    def model_tensors(self) -> dict[str, np.ndarray]:
        return {k[len("model/"):]: v for k, v in self.tensors.items() if k.startswith("model/")}

    def build_model(self) -> FlowModel:
        man = self.manifest
        cfg = FlowTransformerConfig(**man["flow_config"])
        enc = ContextEncoderConfig(**man["encoder_config"])
        model = FlowModel(cfg, enc, seed=int(man["model_seed"]))
        for entry in man["registry"]:
            entry = dict(entry)
            stats = entry.pop("stats", None)
            model.register(ActionSpaceDescriptor(**entry),
                           NormalizationStats.from_dict(stats) if stats else None)
        load_into(model, self)
        return model


def _model_manifest(model: FlowModel) -> dict:
    enc = asdict(model.enc_cfg)
    return {
        "flow_config": model.cfg.to_dict(),
        "encoder_config": enc,
        "model_seed": int(model._seed),
        "registry": model.registry.manifest(),
        "dropout_rng": model.dropout_rng.state(),
    }


def save_checkpoint(path, model: FlowModel, trainer=None, extra: dict | None = None) -> Path:
    path = Path(path)
    man = {"format": "FLWR", "version": VERSION}
    man.update(_model_manifest(model))
    tensors: list[tuple[str, np.ndarray]] = [(f"model/{n}", p.data) for n, p in model.named_parameters()]
    man["step"] = 0
    if trainer is not None:
        man["step"] = trainer.step
        man["train_config"] = trainer.cfg.to_dict()
        man["optimizer_config"] = trainer.opt_cfg.to_dict()
        man["optimizer_step"] = trainer.optimizer.step_count
        man["batch_rng"] = trainer.rng.state()
        opt = trainer.optimizer
        for n, p in model.named_parameters():
            tensors.append((f"adam_m/{n}", opt.m[id(p)]))
            tensors.append((f"adam_v/{n}", opt.v[id(p)]))
    if extra:
        man["extra"] = extra
    man["tensor_count"] = len(tensors)
    blob = json.dumps(man, sort_keys=True, indent=1).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(blob)), blob,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        nb = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    parts.append(TRAILER)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError(f"{path}: not a FLWR checkpoint")
    if len(data) < 16:
        raise IntegrityError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (ml,) = struct.unpack_from("<Q", data, 8)
    off = 16 + ml
    if off + 4 > len(data):
        raise IntegrityError(f"{path}: truncated manifest")
    try:
        man = json.loads(data[16:off].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: manifest is not valid JSON ({exc})") from None
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    if count != man.get("tensor_count"):
        raise IntegrityError(f"{path}: tensor count {count} disagrees with manifest")
    tensors = {}
    try:
        for _ in range(count):
            (nl,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + nl].decode("utf-8")
            off += nl
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            n = int(np.prod(shape, dtype=np.int64))
            if off + 4 * n > len(data):
                raise IntegrityError(f"{path}: tensor {name!r} is truncated")
            tensors[name] = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
            off += 4 * n
    except struct.error:
        raise IntegrityError(f"{path}: truncated tensor table") from None
    if data[off:] != TRAILER:
        raise IntegrityError(f"{path}: missing or damaged trailer")
    return Checkpoint(man, tensors)


def load_into(model: FlowModel, ckpt: Checkpoint) -> None:
    """Copy model tensors after checking every name and shape first."""
    state = ckpt.model_tensors()
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(state))
    unexpected = sorted(set(state) - set(params))
    if missing or unexpected:
        raise IntegrityError(f"checkpoint/model mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
    for name, p in params.items():
        if tuple(state[name].shape) != tuple(p.shape):
            raise IntegrityError(f"shape mismatch for {name}: checkpoint {state[name].shape}, model {p.shape}")
    for name, p in params.items():
        p.set_value(state[name].astype(p.data.dtype))
    if "dropout_rng" in ckpt.manifest:
        model.set_dropout_rng(SeededRng.from_state(ckpt.manifest["dropout_rng"]))
    for entry in ckpt.manifest.get("registry", []):
        if entry.get("stats") and entry["name"] in model.registry:
            model.registry.set_stats(entry["name"], NormalizationStats.from_dict(entry["stats"]))


def restore_trainer(trainer, ckpt: Checkpoint) -> None:
    """Resume optimizer moments, step counters and the batch stream."""
    load_into(trainer.model, ckpt)
    man = ckpt.manifest
    if "optimizer_step" not in man:
        raise IntegrityError("checkpoint carries no optimizer state")
    opt = trainer.optimizer
    for name, p in trainer.model.named_parameters():
        m = ckpt.tensors.get(f"adam_m/{name}")
        v = ckpt.tensors.get(f"adam_v/{name}")
        if m is None or v is None:
            raise IntegrityError(f"optimizer moments for {name} are missing")
        opt.m[id(p)] = m.astype(p.data.dtype).copy()
        opt.v[id(p)] = v.astype(p.data.dtype).copy()
    opt.step_count = int(man["optimizer_step"])
    trainer.step = int(man["step"])
    trainer.rng.set_state(man["batch_rng"])
