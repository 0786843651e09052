"""SMAE checkpoint files.

Layout, little endian::

    b"SMAE" | version u32 | count u32 |
    count x [name_len u16 | name utf-8 | rank u8 | dims u32 x rank | float32 payload]

JSON metadata (model config, feature conventions, training step) rides along
as a rank-1 tensor named ``__meta__`` whose entries are the UTF-8 bytes.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import FormatError
from .model import ANCHOR, ModelConfig, ModelParams

MAGIC = b"SMAE"
VERSION = 1
META_NAME = "__meta__"


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def decode_tensors(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise FormatError(f"bad checkpoint magic {bytes(buf[:4])!r}", 0)
    if len(buf) < 12:
        raise FormatError("truncated checkpoint header", len(buf))
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    pos, tensors = 12, {}
    for _ in range(count):
        try:
            (n,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2 : pos + 2 + n].decode("utf-8")
            pos += 2 + n
            (rank,) = struct.unpack_from("<B", buf, pos)
            dims = struct.unpack_from(f"<{rank}I", buf, pos + 1)
            pos += 1 + 4 * rank
        except (struct.error, UnicodeDecodeError) as exc:
            raise FormatError(f"corrupt tensor record ({exc})", pos) from exc
        size = int(np.prod(dims)) if rank else 1
        if pos + 4 * size > len(buf):
            raise FormatError(f"truncated payload for tensor {name!r}", pos)
        tensors[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).astype(np.float32).reshape(dims)
        pos += 4 * size
    if pos != len(buf):
        raise FormatError("trailing bytes after last tensor", pos)
    return tensors


def _meta_array(meta: dict) -> np.ndarray:
    return np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8).astype(np.float32)


def save_checkpoint(path, params: ModelParams, config: ModelConfig, **meta) -> None:
    """Write all parameters plus metadata; the file appears atomically."""
    info = {
        "model": config.to_dict(),
        "frozen_prefixes": [ANCHOR],
        "alignment_features": "post_final_norm",
        **meta,
    }
    tensors = {META_NAME: _meta_array(info)}
    tensors.update((k, t.data) for k, t in params.items())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_tensors(tensors))
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig, dict]:
    tensors = decode_tensors(Path(path).read_bytes())
    if META_NAME not in tensors:
        raise FormatError(f"checkpoint {path} has no metadata record")
    meta = json.loads(tensors.pop(META_NAME).astype(np.uint8).tobytes().decode("utf-8"))
    config = ModelConfig.from_dict(meta["model"])
    frozen = tuple(p + "." for p in meta.get("frozen_prefixes", [ANCHOR]))
    params = ModelParams(
        (k, Tensor(v, requires_grad=not k.startswith(frozen), name=k)) for k, v in tensors.items()
    )
    return params, config, meta
