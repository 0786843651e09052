"""Run configuration files.

The format is INI-style UTF-8 text parsed by :mod:`configparser`: flat
``[section]`` headers followed by ``key = value`` lines; ``#`` or ``;``
start comments; lists are comma separated.  Relative paths resolve against
the directory of the config file.  Sections and keys::

    [data]    manifest
    [train]   steps, batch_size, lr, weight_decay, beta1, beta2, eps,
              warmup_steps, lambda, mask_ratio, seed, checkpoint_every,
              init_checkpoint, anchor_checkpoint
    [noise]   apply_probability, family_weights, lsyn_choices,
              sigma_range, alpha_range, clip
    [model]   embed_dim, depth, heads, mlp_ratio, patch_size, image_size,
              channels, decoder_embed_dim, decoder_depth, decoder_heads,
              decoder_mlp_ratio, anchor_seed
    [probe]   steps, lr, weight_decay, train_fraction, seed
    [output]  checkpoint, metrics, timing (on|off)

Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ConfigError, ParameterError, ShapeError
from .model import DecoderConfig, EncoderConfig, ModelConfig
from .speckle import NoisePolicy


@dataclass(frozen=True)
class ProbeConfig:
    steps: int = 300
    lr: float = 0.01
    weight_decay: float = 0.0
    train_fraction: float = 0.7
    seed: int = 0


@dataclass(frozen=True)
class TrainConfig:
    manifest: Path | None = None
    steps: int = 200
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    warmup_steps: int | None = None  # None -> 5% of steps
    lam: float = 0.1
    mask_ratio: float = 0.75
    seed: int = 0
    checkpoint_every: int = 0
    init_checkpoint: Path | None = None
    anchor_checkpoint: Path | None = None
    policy: NoisePolicy = field(default_factory=NoisePolicy)
    model: ModelConfig = field(default_factory=ModelConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    checkpoint: Path = Path("checkpoint.smae")
    metrics: Path = Path("metrics.csv")
    timing: bool = True

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if self.lr <= 0 or self.weight_decay < 0 or self.eps <= 0:
            raise ConfigError("lr and eps must be positive, weight_decay nonnegative")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError("betas must lie in [0, 1)")
        if self.lam < 0:
            raise ConfigError("lambda must be nonnegative")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError("mask_ratio must lie in [0, 1)")
        if self.warmup_steps is not None and self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be nonnegative")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be nonnegative")
        if not 0.0 < self.probe.train_fraction < 1.0 or self.probe.steps < 1 or self.probe.lr <= 0:
            raise ConfigError("probe needs steps >= 1, lr > 0 and train_fraction in (0, 1)")

    @property
    def warmup(self) -> int:
        if self.warmup_steps is not None:
            return min(self.warmup_steps, self.steps)
        return int(math.floor(0.05 * self.steps + 0.5))

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


_KEYS = {
    "data": {"manifest"},
    "train": {
        "steps", "batch_size", "lr", "weight_decay", "beta1", "beta2", "eps", "warmup_steps",
        "lambda", "mask_ratio", "seed", "checkpoint_every", "init_checkpoint", "anchor_checkpoint",
    },
    "noise": {"apply_probability", "family_weights", "lsyn_choices", "sigma_range", "alpha_range", "clip"},
    "model": {
        "embed_dim", "depth", "heads", "mlp_ratio", "patch_size", "image_size", "channels",
        "decoder_embed_dim", "decoder_depth", "decoder_heads", "decoder_mlp_ratio", "anchor_seed",
    },
    "probe": {"steps", "lr", "weight_decay", "train_fraction", "seed"},
    "output": {"checkpoint", "metrics", "timing"},
}


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def parse_config(text: str, base_dir: Path | str = ".") -> TrainConfig:
    base = Path(base_dir)
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unparseable config: {exc}") from exc
    for section in cp.sections():
        if section not in _KEYS:
            raise ConfigError(f"unknown config section [{section}]")
        unknown = set(cp[section]) - _KEYS[section]
        if unknown:
            raise ConfigError(f"unknown keys in [{section}]: {', '.join(sorted(unknown))}")

    def get(section, key, conv, default):
        if not cp.has_option(section, key):
            return default
        raw = cp.get(section, key).strip()
        try:
            return conv(raw)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc

    def path(raw: str) -> Path:
        p = Path(raw).expanduser()
        return p if p.is_absolute() else base / p

    def boolean(raw: str) -> bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError("expected a boolean")

    d = TrainConfig()
    try:
        policy = NoisePolicy(
            apply_probability=get("noise", "apply_probability", float, d.policy.apply_probability),
            family_weights=get("noise", "family_weights", _floats, d.policy.family_weights),
            lsyn_choices=get("noise", "lsyn_choices", lambda s: tuple(int(v) for v in s.split(",")), d.policy.lsyn_choices),
            sigma_range=get("noise", "sigma_range", _floats, d.policy.sigma_range),
            alpha_range=get("noise", "alpha_range", _floats, d.policy.alpha_range),
            clip_to_unit=get("noise", "clip", boolean, d.policy.clip_to_unit),
        )
        e, dd = d.model.encoder, d.model.decoder
        model = ModelConfig(
            EncoderConfig(
                embed_dim=get("model", "embed_dim", int, e.embed_dim),
                depth=get("model", "depth", int, e.depth),
                heads=get("model", "heads", int, e.heads),
                mlp_ratio=get("model", "mlp_ratio", int, e.mlp_ratio),
                patch_size=get("model", "patch_size", int, e.patch_size),
                image_size=get("model", "image_size", int, e.image_size),
                channels=get("model", "channels", int, e.channels),
            ),
            DecoderConfig(
                embed_dim=get("model", "decoder_embed_dim", int, dd.embed_dim),
                depth=get("model", "decoder_depth", int, dd.depth),
                heads=get("model", "decoder_heads", int, dd.heads),
                mlp_ratio=get("model", "decoder_mlp_ratio", int, dd.mlp_ratio),
            ),
            seed=get("train", "seed", int, d.seed),
            anchor_seed=get("model", "anchor_seed", int, d.model.anchor_seed),
        )
        probe = ProbeConfig(
            steps=get("probe", "steps", int, d.probe.steps),
            lr=get("probe", "lr", float, d.probe.lr),
            weight_decay=get("probe", "weight_decay", float, d.probe.weight_decay),
            train_fraction=get("probe", "train_fraction", float, d.probe.train_fraction),
            seed=get("probe", "seed", int, d.probe.seed),
        )
        return TrainConfig(
            manifest=get("data", "manifest", path, None),
            steps=get("train", "steps", int, d.steps),
            batch_size=get("train", "batch_size", int, d.batch_size),
            lr=get("train", "lr", float, d.lr),
            weight_decay=get("train", "weight_decay", float, d.weight_decay),
            betas=(get("train", "beta1", float, d.betas[0]), get("train", "beta2", float, d.betas[1])),
            eps=get("train", "eps", float, d.eps),
            warmup_steps=get("train", "warmup_steps", int, d.warmup_steps),
            lam=get("train", "lambda", float, d.lam),
            mask_ratio=get("train", "mask_ratio", float, d.mask_ratio),
            seed=get("train", "seed", int, d.seed),
            checkpoint_every=get("train", "checkpoint_every", int, d.checkpoint_every),
            init_checkpoint=get("train", "init_checkpoint", path, None),
            anchor_checkpoint=get("train", "anchor_checkpoint", path, None),
            policy=policy,
            model=model,
            probe=probe,
            checkpoint=get("output", "checkpoint", path, base / d.checkpoint),
            metrics=get("output", "metrics", path, base / d.metrics),
            timing=get("output", "timing", boolean, d.timing),
        )
    except (ParameterError, ShapeError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> TrainConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, path.parent)
