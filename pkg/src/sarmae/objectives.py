"""Pretraining losses: masked denoising reconstruction, anchor alignment, and their sum."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ParameterError, ShapeError
from .masking import MaskPlan

log = logging.getLogger(__name__)

NORM_FLOOR = 1e-12


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _index_rows(idx, batch: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    return np.broadcast_to(idx, (batch, idx.shape[-1])) if idx.ndim == 1 else idx


def sare_per_sample(pred, target, masked_index) -> Tensor:
    """Per-sample reconstruction loss ``[B]``: mean over masked patches of the squared L2 error.

    ``target`` holds the clean (uncorrupted) patches.  Rows outside
    ``masked_index`` do not enter the computation at all.
    """
    pred, target = _lift(pred), _lift(target)
    if pred.shape != target.shape or pred.ndim != 3:
        raise ShapeError(f"prediction {pred.dims} and target {target.dims} must both be [B, N, P]")
    idx = _index_rows(masked_index, pred.shape[0])
    if idx.shape[1] < 1:
        raise ContractError("reconstruction loss needs at least one masked patch")
    diff = ad.gather_rows(pred, idx) - ad.gather_rows(target, idx)
    return (diff * diff).sum(axis=(1, 2)) * (1.0 / idx.shape[1])


def sarc_per_sample(f_sar, f_opt, visible_index) -> Tensor:
    """Per-sample mean cosine distance ``[B]`` between visible SAR embeddings and anchors.

    ``f_sar`` is ``[B, V, D]`` aligned to ``visible_index``; ``f_opt`` is the
    full anchor sequence ``[B, N, D]`` and is paired by grid index.
    """
    f_sar, f_opt = _lift(f_sar), _lift(f_opt)
    if f_sar.ndim != 3 or f_opt.ndim != 3 or f_sar.shape[-1] != f_opt.shape[-1]:
        raise ShapeError(f"embedding dims disagree: {f_sar.dims} vs {f_opt.dims}")
    idx = _index_rows(visible_index, f_sar.shape[0])
    if idx.shape[1] < 1 or idx.shape != f_sar.shape[:2]:
        raise ContractError("alignment loss needs visible embeddings matching the visible index")
    anchor = ad.gather_rows(f_opt, idx)
    dot = (f_sar * anchor).sum(axis=-1)
    n_sar = ad.sqrt((f_sar * f_sar).sum(axis=-1))
    n_opt = ad.sqrt((anchor * anchor).sum(axis=-1))
    if np.any(n_sar.data < NORM_FLOOR) or np.any(n_opt.data < NORM_FLOOR):
        log.warning("zero-norm embedding in alignment loss; norms floored at %g", NORM_FLOOR)
        n_sar, n_opt = ad.clamp_min(n_sar, NORM_FLOOR), ad.clamp_min(n_opt, NORM_FLOOR)
    cos = dot / (n_sar * n_opt)
    return (1.0 - cos).mean(axis=1)


def loss_sare(pred, target_clean, plan: MaskPlan) -> Tensor:
    """Single-sample reconstruction loss over the masked set of ``plan``."""
    pred, target = _lift(pred), _lift(target_clean)
    if pred.ndim == 2:
        pred, target = pred.reshape(1, *pred.shape), target.reshape(1, *target.shape)
    return sare_per_sample(pred, target, plan.masked).reshape(())


def loss_sarc(f_sar, f_opt, plan: MaskPlan) -> Tensor:
    """Single-sample alignment loss over the visible set of ``plan``."""
    f_sar, f_opt = _lift(f_sar), _lift(f_opt)
    if f_sar.ndim == 2:
        f_sar, f_opt = f_sar.reshape(1, *f_sar.shape), f_opt.reshape(1, *f_opt.shape)
    return sarc_per_sample(f_sar, f_opt, plan.visible).reshape(())


@dataclass(frozen=True)
class LossBreakdown:
    sare: float
    sarc: float | None
    total: float
    lam: float


def combine(sare, sarc, lam: float):
    """``sare + lam * sarc``, or ``sare`` alone for an unpaired sample; works on tensors too."""
    if lam < 0:
        raise ParameterError(f"lambda must be nonnegative, got {lam}")
    return sare if sarc is None else sare + sarc * lam


def loss_total(sare: float, sarc: float | None, lam: float) -> LossBreakdown:
    total = combine(float(sare), None if sarc is None else float(sarc), lam)
    return LossBreakdown(float(sare), None if sarc is None else float(sarc), float(total), float(lam))
