"""Binary file formats: checkpoints and sample records.

Checkpoint (little-endian)::

    b"DMOECKPT" | u32 version | u64 header_len | header (UTF-8 JSON) | payload

The header holds the model/train configs, step counter, thresholds (flat,
layer-major) and a tensor table ``{section, name, dtype, shape, offset, nbytes}``
locating each array in the payload.  Sections: ``params``, ``ema``, ``adam_m``,
``adam_v``.

Sample file (little-endian)::

    b"DMOESMPL" | u32 version | u32 element_width (4 or 8) | u32 ndim | u64 * ndim shape | data
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CKPT_MAGIC = b"DMOECKPT"
CKPT_VERSION = 1
SAMPLE_MAGIC = b"DMOESMPL"
SAMPLE_VERSION = 1
SECTIONS = ("params", "ema", "adam_m", "adam_v")


class FormatError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_config: dict
    train_config: dict
    step: int
    params: dict[str, np.ndarray]
    ema: dict[str, np.ndarray] = field(default_factory=dict)
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    thresholds: dict | None = None  # {"values": [...], "shape": [L, N], "mode": str, "alpha": float}
    extra: dict = field(default_factory=dict)


def _le(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<"))


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    table, chunks, offset = [], [], 0
    for section in SECTIONS:
        for name, arr in getattr(ckpt, section).items():
            arr = _le(np.asarray(arr))
            raw = arr.tobytes()
            table.append({"section": section, "name": name, "dtype": arr.dtype.str,
                          "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
    header = {
        "format_version": CKPT_VERSION,
        "model_config": ckpt.model_config,
        "train_config": ckpt.train_config,
        "step": int(ckpt.step),
        "thresholds": ckpt.thresholds,
        "extra": ckpt.extra,
        "tensors": table,
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<IQ", CKPT_VERSION, len(hb)))
        f.write(hb)
        for c in chunks:
            f.write(c)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(data[start:start + hlen].decode("utf-8"))
    payload = memoryview(data)[start + hlen:]
    sections: dict[str, dict[str, np.ndarray]] = {s: {} for s in SECTIONS}
    for entry in header["tensors"]:
        buf = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(buf, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
        sections[entry["section"]][entry["name"]] = arr
    return Checkpoint(header["model_config"], header["train_config"], header["step"],
                      sections["params"], sections["ema"], sections["adam_m"], sections["adam_v"],
                      header.get("thresholds"), header.get("extra", {}))


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_samples(path: str | Path, x: np.ndarray, element_width: int = 8) -> None:
    if element_width not in (4, 8):
        raise ValueError("element width must be 4 or 8 bytes")
    dtype = np.dtype("<f4" if element_width == 4 else "<f8")
    arr = np.ascontiguousarray(x, dtype=dtype)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(SAMPLE_MAGIC)
        f.write(struct.pack("<III", SAMPLE_VERSION, element_width, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(arr.tobytes())


def read_samples(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != SAMPLE_MAGIC:
        raise FormatError(f"{path}: not a sample file")
    version, width, ndim = struct.unpack_from("<III", data, 8)
    if version != SAMPLE_VERSION:
        raise FormatError(f"{path}: unsupported sample version {version}")
    off = 8 + 12
    shape = struct.unpack_from(f"<{ndim}Q", data, off)
    off += 8 * ndim
    dtype = np.dtype("<f4" if width == 4 else "<f8")
    expected = int(np.prod(shape)) * width
    if len(data) - off != expected:
        raise FormatError(f"{path}: payload has {len(data) - off} bytes, header implies {expected}")
    return np.frombuffer(data[off:], dtype=dtype).reshape(shape).copy()
