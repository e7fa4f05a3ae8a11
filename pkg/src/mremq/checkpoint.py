"""Binary checkpoint format ("MRMQ").

Layout, all integers little-endian::

    b"MRMQ"  u32 version  u32 tensor_count
    per tensor: u32 name_len, utf-8 name, u32 rank, u64 dims[rank], u8 dtype (0 = f32), raw values

Step sizes are stored under the ``qspec/`` prefix; run metadata (model shape,
bit-widths) under ``meta/`` as small f32 vectors.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict

import numpy as np

from .model import Bits, Encoder, ModelConfig, QuantizedModel

MAGIC = b"MRMQ"
VERSION = 1
DTYPE_F32 = 0

_META_MODEL = ("layers", "d_model", "heads", "d_ff", "vocab", "max_seq_len", "num_classes")


class CheckpointError(IOError):
    pass


def save_tensors(path, tensors: Dict[str, np.ndarray]) -> None:
    buf = bytearray(MAGIC)
    buf += struct.pack("<II", VERSION, len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise CheckpointError(f"{name}: only float32 tensors are storable, got {arr.dtype}")
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += struct.pack("<B", DTYPE_F32)
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(bytes(buf))


def load_tensors(path) -> Dict[str, np.ndarray]:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 12
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off:off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<I", data, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}Q", data, off)
            off += 8 * rank
            (tag,) = struct.unpack_from("<B", data, off)
            off += 1
            if tag != DTYPE_F32:
                raise CheckpointError(f"{path}: unknown dtype tag {tag} for {name}")
            size = int(np.prod(dims, dtype=np.int64))
            out[name] = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(dims).astype(np.float32)
            off += 4 * size
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: truncated or corrupt ({e})") from None
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    return out


def _bits_vec(bits: Bits) -> np.ndarray:
    return np.array([0 if b is None else b for b in (bits.weight, bits.embed, bits.act)], dtype=np.float32)


def model_tensors(model: Encoder) -> Dict[str, np.ndarray]:
    cfg = model.cfg
    out = {"meta/model": np.array([getattr(cfg, k) for k in _META_MODEL], dtype=np.float32)}
    if isinstance(model, QuantizedModel):
        out["meta/bits"] = _bits_vec(model.bits)
        out["meta/pcq"] = np.array([float(model.pcq)], dtype=np.float32)
    for k, t in model.params.items():
        out[k] = t.data.astype(np.float32)
    if isinstance(model, QuantizedModel):
        for k, t in model.step_tensors().items():
            out[k] = t.data.astype(np.float32)
    return out


def save_model(path, model: Encoder) -> None:
    save_tensors(path, model_tensors(model))


def load_model(path) -> Encoder:
    """Rebuild an :class:`Encoder` or :class:`QuantizedModel` from a checkpoint."""
    t = load_tensors(path)
    if "meta/model" not in t:
        raise CheckpointError(f"{path}: missing meta/model")
    cfg = ModelConfig(**{k: int(v) for k, v in zip(_META_MODEL, t["meta/model"])})
    params = {k: v for k, v in t.items() if not k.startswith(("meta/", "qspec/"))}
    if "meta/bits" not in t:
        return Encoder(cfg, params)
    bits = Bits(*[None if v == 0 else int(v) for v in t["meta/bits"]])
    q = QuantizedModel(cfg, params, bits, pcq=bool(t["meta/pcq"][0]))
    for k, st in q.step_tensors().items():
        if k not in t:
            raise CheckpointError(f"{path}: missing step size {k}")
        st.data[...] = t[k]
    q._uninit.clear()
    return q
