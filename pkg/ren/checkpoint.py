"""
Binary checkpoint container.

Layout (little-endian):
    b"RENCKPT1"
    u32 config length, config JSON (utf-8, sorted keys)
    u32 record count, then per record:
        u32 name length, name (utf-8), u32 rank, u64 extent × rank, f64 × product(extents)

Record names are prefixed `param/`, `alpha/` or `optim/<group>/`.
"""
import json
import struct
from dataclasses import dataclass
from typing import Any, BinaryIO, Dict, Optional

import numpy as np

from ren.autodiff import Adam
from ren.logger import get_logger
from ren.models import ModelConfig
from ren.networks import RenModel, build_model
from ren.utils import CheckpointError, ren_error

logger = get_logger()

MAGIC = b"RENCKPT1"


@dataclass
class Checkpoint:
    config: Dict[str, Any]
    arrays: Dict[str, np.ndarray]

    def params(self) -> Dict[str, np.ndarray]:
        return {k[len("param/"):]: v for k, v in self.arrays.items() if k.startswith("param/")}

    def optimizer_state(self, group: str) -> Dict[str, np.ndarray]:
        prefix = f"optim/{group}/"
        return {k[len(prefix):]: v for k, v in self.arrays.items() if k.startswith(prefix)}

    @property
    def alpha(self) -> np.ndarray:
        return self.arrays["alpha/current"]


def _write_record(f: BinaryIO, name: str, value: np.ndarray):
    encoded = name.encode("utf-8")
    value = np.asarray(value, dtype="<f8")
    f.write(struct.pack("<I", len(encoded)))
    f.write(encoded)
    f.write(struct.pack("<I", value.ndim))
    for extent in value.shape:
        f.write(struct.pack("<Q", extent))
    f.write(value.tobytes(order="C"))


def model_echo(model: RenModel, seed: int, extra: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    echo = {"family": model.family, "model": model.config.model_dump(), "seed": seed}
    if extra:
        echo.update(extra)
    return echo


def save_checkpoint(path: str, model: RenModel, config: Dict[str, Any],
                    optimizers: Optional[Dict[str, Adam]] = None) -> str:
    records: Dict[str, np.ndarray] = {}
    for name, p in model.named_parameters().items():
        records[f"param/{name}"] = p.data
    records["alpha/current"] = model.current_alpha
    for group, optimizer in (optimizers or {}).items():
        for key, value in optimizer.state_dict().items():
            records[f"optim/{group}/{key}"] = value

    config_bytes = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(config_bytes)))
        f.write(config_bytes)
        f.write(struct.pack("<I", len(records)))
        for name, value in records.items():
            _write_record(f, name, value)
    logger.info(f"Saved checkpoint: {path} ({len(records)} records)")
    return path


class _Reader:
    def __init__(self, payload: bytes, path: str):
        self.payload = payload
        self.offset = 0
        self.path = path

    def take(self, count: int) -> bytes:
        if self.offset + count > len(self.payload):
            raise ren_error(CheckpointError, f"{self.path}: truncated at byte {self.offset} "
                                             f"(needed {count}, have {len(self.payload) - self.offset})",
                            offset=self.offset)
        chunk = self.payload[self.offset: self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            payload = f.read()
    except OSError as exc:
        raise ren_error(CheckpointError, f"cannot read checkpoint {path}: {exc}") from None
    reader = _Reader(payload, path)
    magic = reader.take(len(MAGIC))
    if magic != MAGIC:
        raise ren_error(CheckpointError, f"{path}: bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    config_len = reader.unpack("<I")
    try:
        config = json.loads(reader.take(config_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ren_error(CheckpointError, f"{path}: corrupt config echo: {exc}", offset=len(MAGIC) + 4) from None
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(reader.unpack("<I")):
        name_offset = reader.offset
        try:
            name = reader.take(reader.unpack("<I")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ren_error(CheckpointError, f"{path}: corrupt record name at byte {name_offset}: {exc}",
                            offset=name_offset) from None
        rank = reader.unpack("<I")
        shape = tuple(reader.unpack("<Q") for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(reader.take(8 * count), dtype="<f8").astype(np.float64)
        arrays[name] = values.reshape(shape)
    return Checkpoint(config=config, arrays=arrays)


def restore_model(checkpoint: Checkpoint) -> RenModel:
    config = checkpoint.config
    model = build_model(config["family"], ModelConfig(**config["model"]), config.get("seed", 42))
    stored = checkpoint.params()
    params = model.named_parameters()
    missing = sorted(set(params) - set(stored))
    if missing:
        raise ren_error(CheckpointError, f"checkpoint lacks parameters: {missing[:5]}")
    for name, p in params.items():
        if stored[name].shape != p.shape:
            raise ren_error(CheckpointError, f"parameter {name}: stored shape {stored[name].shape}, "
                                             f"model expects {p.shape}")
        p.data = stored[name].copy()
    model.current_alpha = checkpoint.alpha.copy()
    return model
