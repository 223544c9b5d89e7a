"""Self-describing binary checkpoint container.

Layout (all integers little-endian uint32 unless noted):

    magic   4 bytes  b"RSEG"
    version u32      format version, currently 1
    count   u32      number of entries
    entry*  count times:
        name_len u32, name UTF-8 bytes
        tag      u32   1 = float32 array, 2 = UTF-8 text
        arrays:  rank u32, dims u32 * rank, data float32 little-endian
        text:    byte_len u32, UTF-8 bytes

A model checkpoint stores the model configuration as a text entry named
"config" (flat key=value lines), every model array under its state name,
and optionally the optimizer state under the "opt/" prefix, so a file can
be restored without any out-of-band information.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .model import Model, ModelConfig, model_config_from_kv, model_config_to_kv
from .optim import Lamb

MAGIC = b"RSEG"
VERSION = 1
_TAG_ARRAY = 1
_TAG_TEXT = 2


class CheckpointError(ValueError):
    """Raised for malformed or incompatible checkpoint files."""


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    texts: dict[str, str] = field(default_factory=dict)

    @property
    def model_arrays(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.arrays.items() if not k.startswith("opt/")}

    @property
    def optimizer_arrays(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.arrays.items() if k.startswith("opt/")}

    def model_config(self) -> ModelConfig:
        if "config" not in self.texts:
            raise CheckpointError("checkpoint has no embedded model config")
        return model_config_from_kv(_parse_kv(self.texts["config"]))


def _parse_kv(text: str) -> dict[str, str]:
    kv: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CheckpointError(f"malformed config line {lineno}: {raw!r}")
        key, value = line.split("=", 1)
        kv[key.strip()] = value.strip()
    return kv


def _format_kv(kv: dict[str, str]) -> str:
    return "".join(f"{k}={v}\n" for k, v in kv.items())


def write_checkpoint(path: str | Path, arrays: dict[str, np.ndarray],
                     texts: dict[str, str]) -> None:
    names = list(texts) + list(arrays)
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate entry names across texts and arrays")
    chunks: list[bytes] = [MAGIC, struct.pack("<II", VERSION, len(names))]
    for name, text in texts.items():
        nb = name.encode("utf-8")
        tb = text.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)) + nb)
        chunks.append(struct.pack("<II", _TAG_TEXT, len(tb)) + tb)
    for name, arr in arrays.items():
        nb = name.encode("utf-8")
        data = np.ascontiguousarray(arr, dtype="<f4")
        chunks.append(struct.pack("<I", len(nb)) + nb)
        chunks.append(struct.pack("<II", _TAG_ARRAY, data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(
                f"truncated checkpoint: wanted {n} bytes at offset {self.pos}, "
                f"file has {len(self.blob)}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint file not found: {path}")
    r = _Reader(path.read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path.name!r} is not a checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    count = r.u32()
    ckpt = Checkpoint()
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        if name in ckpt.arrays or name in ckpt.texts:
            raise CheckpointError(f"duplicate checkpoint entry {name!r}")
        tag = r.u32()
        if tag == _TAG_TEXT:
            ckpt.texts[name] = r.take(r.u32()).decode("utf-8")
        elif tag == _TAG_ARRAY:
            rank = r.u32()
            dims = tuple(r.u32() for _ in range(rank))
            n = int(np.prod(dims, dtype=np.int64)) if rank else 1
            data = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims)
            ckpt.arrays[name] = np.ascontiguousarray(data, dtype=np.float32)
        else:
            raise CheckpointError(f"unknown entry tag {tag} for {name!r}")
    if r.pos != len(r.blob):
        raise CheckpointError(
            f"{len(r.blob) - r.pos} trailing bytes after the last entry")
    return ckpt


def save_model(path: str | Path, model: Model,
               optimizer: Optional[Lamb] = None,
               extra_texts: Optional[dict[str, str]] = None) -> None:
    """Write model weights/buffers (+ optional optimizer state) with the
    model configuration embedded."""
    arrays = dict(model.state_arrays())
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
    texts = {"config": _format_kv(model_config_to_kv(model.cfg))}
    if extra_texts:
        texts.update(extra_texts)
    write_checkpoint(path, arrays, texts)


def load_model(path: str | Path) -> tuple[Model, Checkpoint]:
    """Rebuild a model from a checkpoint's embedded config and weights."""
    ckpt = read_checkpoint(path)
    model = Model(ckpt.model_config())
    model.load_state_arrays(ckpt.model_arrays)
    return model, ckpt


def resume_optimizer(ckpt: Checkpoint, optimizer: Lamb) -> None:
    opt_arrays = ckpt.optimizer_arrays
    if not opt_arrays:
        raise CheckpointError("checkpoint holds no optimizer state")
    missing = [f"opt/{p.name}.m" for p in optimizer.params
               if f"opt/{p.name}.m" not in opt_arrays]
    if missing or "opt/t" not in opt_arrays:
        raise CheckpointError(f"optimizer state incomplete; missing {missing or ['opt/t']}")
    optimizer.load_state_arrays(opt_arrays)
