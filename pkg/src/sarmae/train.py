"""Pretraining loop, linear-probe evaluation and reconstruction export.

One pretraining step: corrupt each sample with the noise policy, patchify,
mask, encode the visible patches, decode every patch, score the masked
predictions against the *clean* patches, add the anchor alignment term for
paired samples, and take an AdamW step.  The batch loss is the mean over
samples of the per-sample totals, so an unpaired sample contributes only its
reconstruction term.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ProbeConfig, TrainConfig
from .data import NUM_CLASSES, Corpus, load_corpus
from .errors import ConfigError, ContractError, EvaluationError
from .masking import MaskPlan, patchify, random_mask, unpatchify
from .model import (
    ENCODER,
    EncoderConfig,
    ModelConfig,
    ModelParams,
    anchor_forward,
    attention_map,
    decode_full,
    encode_visible,
    init_params,
    load_anchor_weights,
    pooled_features,
    prepare_image,
)
from .objectives import combine, sare_per_sample, sarc_per_sample
from .optim import AdamW, lr_at
from .rng import RandomSource, derive_seed
from .speckle import AugmentationRecord, NoisePolicy, augment

log = logging.getLogger(__name__)

METRICS_HEADER = ("step", "loss_total", "loss_sare", "loss_sarc", "lr", "frac_aug", "wall_ms")


@dataclass
class TrainRecord:
    step: int
    loss_total: float
    loss_sare: float
    loss_sarc: float | None
    lr: float
    frac_aug: float
    wall_ms: float | None

    def row(self) -> list[str]:
        return [
            str(self.step),
            repr(self.loss_total),
            repr(self.loss_sare),
            "" if self.loss_sarc is None else repr(self.loss_sarc),
            repr(self.lr),
            repr(self.frac_aug),
            "" if self.wall_ms is None else f"{self.wall_ms:.3f}",
        ]


@dataclass
class Batch:
    corrupted: np.ndarray  # [B, N, P] corrupted patches
    clean: np.ndarray  # [B, N, P] clean target patches
    plans: list[MaskPlan]
    paired: np.ndarray  # [B] bool
    optical: np.ndarray | None  # [n_paired, N, P]
    records: list[AugmentationRecord]

    @property
    def visible(self) -> np.ndarray:
        return np.stack([p.visible for p in self.plans])

    @property
    def masked(self) -> np.ndarray:
        return np.stack([p.masked for p in self.plans])


@dataclass
class StepOutput:
    loss: ad.Tensor
    sare: np.ndarray
    sarc: np.ndarray | None
    tokens_attended: int


@dataclass
class TrainResult:
    params: ModelParams
    records: list[TrainRecord] = field(default_factory=list)
    checkpoint: Path | None = None
    metrics: Path | None = None


class BatchSampler:
    """Epoch-wise shuffled index stream, reproducible from the seed."""

    def __init__(self, n: int, seed: int):
        self.n = n
        self.seed = seed
        self.epoch = 0
        self.queue: list[int] = []

    def take(self, k: int) -> np.ndarray:
        while len(self.queue) < k:
            perm = RandomSource(derive_seed(self.seed, 0xDA7A, self.epoch)).permutation(self.n)
            self.queue.extend(int(i) for i in perm)
            self.epoch += 1
        out, self.queue = self.queue[:k], self.queue[k:]
        return np.array(out, dtype=np.int64)


def make_batch(
    corpus: Corpus,
    indices: np.ndarray,
    policy: NoisePolicy,
    mask_ratio: float,
    patch_size: int,
    channels: int,
    seed: int,
    step: int,
) -> Batch:
    corrupted, clean, plans, records, optical, paired = [], [], [], [], [], []
    for slot, i in enumerate(indices):
        x = prepare_image(corpus.sar[i], channels)
        noisy, rec = augment(x, policy, RandomSource(derive_seed(seed, step, slot, 0)))
        seq_clean = patchify(x, patch_size)
        corrupted.append(patchify(noisy, patch_size).patches)
        clean.append(seq_clean.patches)
        plans.append(random_mask(seq_clean.count, mask_ratio, RandomSource(derive_seed(seed, step, slot, 1))))
        records.append(rec)
        is_paired = corpus.optical[i] is not None
        paired.append(is_paired)
        if is_paired:
            optical.append(patchify(prepare_image(corpus.optical[i], channels), patch_size).patches)
    return Batch(
        np.stack(corrupted),
        np.stack(clean),
        plans,
        np.array(paired, dtype=bool),
        np.stack(optical) if optical else None,
        records,
    )


def forward_batch(params: ModelParams, cfg: ModelConfig, batch: Batch, lam: float) -> StepOutput:
    vis = batch.visible
    visible_patches = np.take_along_axis(batch.corrupted, vis[..., None], axis=1)
    enc = encode_visible(params, cfg.encoder, visible_patches, vis)
    pred = decode_full(params, cfg, enc, batch.plans)
    sare = sare_per_sample(pred, batch.clean, batch.masked)
    b = len(batch.plans)
    total = sare.sum()
    sarc_values = None
    if batch.optical is not None:
        anchors = anchor_forward(params, cfg.encoder, batch.optical).patches.data
        rows = np.flatnonzero(batch.paired)
        sarc = sarc_per_sample(enc.patches[rows], anchors, vis[rows])
        sarc_values = sarc.data.astype(np.float64)
        if lam > 0:
            total = combine(total, sarc.sum(), lam)
    return StepOutput(total * (1.0 / b), sare.data.astype(np.float64), sarc_values, enc.tokens_attended)


def _open_metrics(path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    return open(path, "w", encoding="utf-8", newline="")


def build_params(config: TrainConfig) -> ModelParams:
    params = init_params(config.model)
    if config.init_checkpoint is not None:
        src, src_cfg, _ = load_checkpoint(config.init_checkpoint)
        if src_cfg.encoder != config.model.encoder:
            raise ConfigError("init checkpoint encoder config differs from the run config")
        for k, t in src.items():
            if k.startswith(ENCODER + ".") and k in params:
                params[k].data = t.data.copy()
    if config.anchor_checkpoint is not None:
        src, _, _ = load_checkpoint(config.anchor_checkpoint)
        load_anchor_weights(params, {k: t.data for k, t in src.items()})
    return params


def pretrain(config: TrainConfig, corpus: Corpus | None = None, params: ModelParams | None = None) -> TrainResult:
    """Run the configured number of steps and write metrics plus the final checkpoint."""
    if corpus is None:
        if config.manifest is None:
            raise ConfigError("no corpus manifest configured")
        corpus = load_corpus(config.manifest)
    enc_cfg = config.model.encoder
    if corpus.sar.shape[1] != enc_cfg.image_size or corpus.sar.shape[2] != enc_cfg.image_size:
        raise ConfigError(f"corpus images are {corpus.sar.shape[1:3]}, model expects {enc_cfg.image_size}")
    params = build_params(config) if params is None else params
    opt = AdamW(params.trainable(), config.betas, config.eps, config.weight_decay)
    sampler = BatchSampler(len(corpus), derive_seed(config.seed, 1))
    result = TrainResult(params, checkpoint=config.checkpoint, metrics=config.metrics)
    meta = {"steps": config.steps, "lambda": config.lam, "mask_ratio": config.mask_ratio, "seed": config.seed}
    last_plans: list[MaskPlan] = []
    with _open_metrics(config.metrics) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for step in range(1, config.steps + 1):
            t0 = time.perf_counter()
            idx = sampler.take(config.batch_size)
            batch = make_batch(
                corpus, idx, config.policy, config.mask_ratio, enc_cfg.patch_size, enc_cfg.channels, config.seed, step
            )
            out = forward_batch(params, config.model, batch, config.lam)
            loss = out.loss.item()
            if not np.isfinite(loss):
                fh.flush()
                raise EvaluationError(f"non-finite loss at step {step}; last good checkpoint left in place")
            opt.zero_grad()
            ad.backward(out.loss)
            lr = lr_at(step, config.steps, config.lr, config.warmup)
            opt.step(lr)
            # logged columns share one float64 reduction so total == sare (+ lam * sarc) holds exactly
            sare_mean = float(out.sare.mean())
            total = sare_mean if out.sarc is None else sare_mean + config.lam * float(out.sarc.sum()) / len(idx)
            rec = TrainRecord(
                step,
                total,
                sare_mean,
                None if out.sarc is None else float(out.sarc.mean()),
                lr,
                float(np.mean([r.applied for r in batch.records])),
                (time.perf_counter() - t0) * 1e3 if config.timing else None,
            )
            writer.writerow(rec.row())
            result.records.append(rec)
            last_plans = batch.plans
            if config.checkpoint_every and step % config.checkpoint_every == 0 and step != config.steps:
                save_checkpoint(config.checkpoint, params, config.model, step=step, **meta,
                                mask_plans=[p.to_dict() for p in last_plans])
    save_checkpoint(config.checkpoint, params, config.model, step=config.steps, **meta,
                    mask_plans=[p.to_dict() for p in last_plans])
    return result


def read_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


# -- linear probe -------------------------------------------------------------

@dataclass
class ProbeResult:
    accuracy: float
    train_accuracy: float
    n_train: int
    n_test: int
    head: dict


def stratified_split(labels: np.ndarray, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    train, test = [], []
    for c in range(NUM_CLASSES):
        members = np.flatnonzero(labels == c)
        if members.size == 0:
            continue
        perm = members[RandomSource(derive_seed(seed, 0x5B1, c)).permutation(members.size)]
        k = int(np.floor(fraction * members.size + 0.5))
        if k == 0:
            raise ContractError(f"class {c} is absent from the probe train split")
        train.append(perm[:k])
        test.append(perm[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def linear_probe(params: ModelParams, enc_cfg: EncoderConfig, corpus: Corpus, probe: ProbeConfig) -> ProbeResult:
    """Frozen-encoder evaluation: pooled features -> linear classifier trained with AdamW.

    Features are standardised with train-split statistics before the head.
    """
    patches = np.stack(
        [patchify(prepare_image(x, enc_cfg.channels), enc_cfg.patch_size).patches for x in corpus.sar]
    )
    feats = pooled_features(params, enc_cfg, patches).astype(np.float32)
    labels = corpus.labels
    train, test = stratified_split(labels, probe.train_fraction, probe.seed)
    present = set(np.unique(labels).tolist())
    if present - set(np.unique(labels[train]).tolist()):
        raise ContractError("a class present in the corpus is absent from the probe train split")
    mu = feats[train].mean(axis=0)
    sd = feats[train].std(axis=0) + 1e-6
    z = (feats - mu) / sd
    rng = RandomSource(derive_seed(probe.seed, 0x9E4D))
    d = z.shape[1]
    w = ad.Tensor(0.01 * rng.normal((d, NUM_CLASSES)), requires_grad=True, name="probe.weight")
    b = ad.Tensor(np.zeros(NUM_CLASSES), requires_grad=True, name="probe.bias")
    opt = AdamW([("probe.weight", w), ("probe.bias", b)], (0.9, 0.999), 1e-8, probe.weight_decay)
    onehot = np.eye(NUM_CLASSES, dtype=np.float32)[labels[train]]
    x_train = ad.Tensor(z[train])
    for step in range(1, probe.steps + 1):
        logp = ad.log_softmax_rows(x_train @ w + b)
        loss = (logp * onehot).sum() * (-1.0 / len(train))
        opt.zero_grad()
        ad.backward(loss)
        opt.step(lr_at(step, probe.steps, probe.lr, 0))
    logits = z @ w.data + b.data
    pred = logits.argmax(axis=1)
    return ProbeResult(
        float((pred[test] == labels[test]).mean()),
        float((pred[train] == labels[train]).mean()),
        len(train),
        len(test),
        {"probe.weight": w.data, "probe.bias": b.data, "probe.feature_mean": mu, "probe.feature_std": sd},
    )


# -- reconstruction export ----------------------------------------------------

def reconstruct(
    params: ModelParams,
    cfg: ModelConfig,
    image: np.ndarray,
    seed: int,
    mask_ratio: float = 0.75,
    policy: NoisePolicy | None = None,
) -> dict:
    """One corrupt-mask-reconstruct pass on a clean image.

    The composite keeps the corrupted input on visible patches and the
    prediction on masked ones.
    """
    enc = cfg.encoder
    x = prepare_image(image, enc.channels)
    if x.shape[0] != enc.image_size or x.shape[1] != enc.image_size:
        raise ConfigError(f"image is {x.shape[0]}x{x.shape[1]}, checkpoint expects {enc.image_size}")
    policy = policy or NoisePolicy(apply_probability=1.0)
    noisy, rec = augment(x, policy, RandomSource(derive_seed(seed, 0)))
    seq_noisy = patchify(noisy, enc.patch_size)
    plan = random_mask(seq_noisy.count, mask_ratio, RandomSource(derive_seed(seed, 1)))
    with ad.no_grad():
        latents = encode_visible(params, enc, seq_noisy.patches[plan.visible][None], plan.visible[None])
        pred = decode_full(params, cfg, latents, [plan]).data[0]
    composite = pred.copy()
    composite[plan.visible] = seq_noisy.patches[plan.visible]
    shaped = type(seq_noisy)
    return {
        "corrupted": noisy,
        "reconstruction": unpatchify(shaped(composite.astype(np.float32), enc.patch_size, seq_noisy.grid, seq_noisy.channels)),
        "prediction": unpatchify(shaped(pred.astype(np.float32), enc.patch_size, seq_noisy.grid, seq_noisy.channels)),
        "target": x,
        "attention": attention_map(params, enc, noisy)[:, :, None],
        "plan": plan,
        "record": rec,
    }


def save_probe_head(path, params: ModelParams, cfg: ModelConfig, result: ProbeResult, **meta) -> None:
    full = ModelParams(params)
    for k, v in result.head.items():
        full[k] = ad.Tensor(v, name=k)
    save_checkpoint(path, full, cfg, probe_accuracy=result.accuracy, **meta)
