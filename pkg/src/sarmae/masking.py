"""Patch decomposition and random masking."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ParameterError, ShapeError
from .rng import RandomSource


def as_image(img) -> np.ndarray:
    """View ``img`` as an (H, W, C) float32 array."""
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ShapeError(f"image must be (H, W) or (H, W, 1|3), got {arr.shape}")
    return arr


@dataclass
class PatchSequence:
    patches: np.ndarray  # (N, p*p*C), raster order
    patch_size: int
    grid: tuple[int, int]
    channels: int

    @property
    def count(self) -> int:
        return self.patches.shape[0]


def patchify(img, p: int) -> PatchSequence:
    x = as_image(img)
    h, w, c = x.shape
    if p <= 0 or h % p or w % p:
        raise ShapeError(f"patch size {p} does not divide image dims {h}x{w}")
    gh, gw = h // p, w // p
    patches = x.reshape(gh, p, gw, p, c).transpose(0, 2, 1, 3, 4).reshape(gh * gw, p * p * c)
    return PatchSequence(np.ascontiguousarray(patches), p, (gh, gw), c)


def unpatchify(seq: PatchSequence) -> np.ndarray:
    gh, gw = seq.grid
    p, c = seq.patch_size, seq.channels
    if seq.patches.shape != (gh * gw, p * p * c):
        raise ShapeError(
            f"patch matrix {seq.patches.shape} inconsistent with grid {seq.grid}, p={p}, C={c}"
        )
    x = seq.patches.reshape(gh, gw, p, p, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(x.reshape(gh * p, gw * p, c))


def visible_count(n: int, ratio: float) -> int:
    # round half away from zero; the argument is nonnegative
    return int(math.floor(n * (1.0 - ratio) + 0.5))


@dataclass(frozen=True)
class MaskPlan:
    visible: np.ndarray
    masked: np.ndarray
    ratio: float

    @property
    def n(self) -> int:
        return len(self.visible) + len(self.masked)

    def to_dict(self) -> dict:
        return {"visible": self.visible.tolist(), "masked": self.masked.tolist(), "ratio": self.ratio}


def random_mask(n: int, ratio: float, rng: RandomSource) -> MaskPlan:
    if not 0.0 <= ratio < 1.0:
        raise ParameterError(f"mask ratio must lie in [0, 1), got {ratio}")
    keep = visible_count(n, ratio)
    if keep < 1:
        raise ParameterError(f"mask ratio {ratio} leaves no visible patch out of {n}")
    perm = rng.permutation(n)
    return MaskPlan(np.sort(perm[:keep]), np.sort(perm[keep:]), float(ratio))


def gather_visible(seq: PatchSequence, plan: MaskPlan) -> tuple[np.ndarray, np.ndarray]:
    """Visible patch rows in ascending index order, with their indices."""
    idx = np.asarray(plan.visible, dtype=np.int64)
    if plan.n != seq.count or (idx.size and (idx.min() < 0 or idx.max() >= seq.count)):
        raise ContractError(f"mask plan over {plan.n} patches does not fit a sequence of {seq.count}")
    return seq.patches[idx], idx


def scatter_full(visible_rows: np.ndarray, plan: MaskPlan, fill: np.ndarray) -> np.ndarray:
    """Inverse of ``gather_visible``: full-length rows with ``fill`` at masked positions."""
    out = np.empty((plan.n, visible_rows.shape[1]), dtype=visible_rows.dtype)
    out[plan.visible] = visible_rows
    out[plan.masked] = fill
    return out
