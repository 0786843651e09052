"""Image files: lossless SIMG float container and 8-bit PNG export.

SIMG layout (little endian)::

    b"SIMG" | version u32 | H u32 | W u32 | C u32 | H*W*C float32 pixels
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import FormatError
from .masking import as_image

SIMG_MAGIC = b"SIMG"
SIMG_VERSION = 1
_HEADER = struct.Struct("<4sIIII")
PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def encode_simg(img) -> bytes:
    x = as_image(img)
    h, w, c = x.shape
    return _HEADER.pack(SIMG_MAGIC, SIMG_VERSION, h, w, c) + x.astype("<f4").tobytes()


def decode_simg(buf: bytes) -> np.ndarray:
    if len(buf) < 4 or buf[:4] != SIMG_MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected {SIMG_MAGIC!r}", 0)
    if len(buf) < _HEADER.size:
        raise FormatError("truncated SIMG header", len(buf))
    _, version, h, w, c = _HEADER.unpack_from(buf)
    if version != SIMG_VERSION:
        raise FormatError(f"unsupported SIMG version {version}", 4)
    if c not in (1, 3) or h == 0 or w == 0:
        raise FormatError(f"invalid SIMG dims {h}x{w}x{c}", 8)
    need = _HEADER.size + 4 * h * w * c
    if len(buf) < need:
        raise FormatError(f"truncated SIMG payload, need {need} bytes, have {len(buf)}", len(buf))
    if len(buf) > need:
        raise FormatError("trailing bytes after SIMG payload", need)
    return np.frombuffer(buf, dtype="<f4", count=h * w * c, offset=_HEADER.size).astype(np.float32).reshape(h, w, c)


def quantize(img) -> np.ndarray:
    """[0, 1] intensities to uint8 with round-half-up."""
    x = np.clip(as_image(img).astype(np.float64), 0.0, 1.0)
    return np.floor(x * 255.0 + 0.5).astype(np.uint8)


def write_image(path, img) -> None:
    """Write ``img`` as SIMG, or as an 8-bit PNG when the suffix is ``.png``."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        q = quantize(img)
        mode_img = PILImage.fromarray(q[:, :, 0], mode="L") if q.shape[2] == 1 else PILImage.fromarray(q, mode="RGB")
        _atomic_write(path, lambda f: mode_img.save(f, format="PNG"))
    else:
        data = encode_simg(img)
        _atomic_write(path, lambda f: f.write(data))


def read_image(path) -> np.ndarray:
    """Read a SIMG file; ``.png`` paths are decoded to [0, 1] intensities."""
    path = Path(path)
    buf = path.read_bytes()
    if path.suffix.lower() == ".png":
        if not buf.startswith(PNG_SIGNATURE):
            raise FormatError("not a PNG file", 0)
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("L") if im.mode not in ("L", "RGB") else im)
        return as_image(arr.astype(np.float32) / 255.0)
    return decode_simg(buf)


def _atomic_write(path: Path, writer) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        writer(f)
    os.replace(tmp, path)
