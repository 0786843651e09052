"""Two-branch masked autoencoder: SAR encoder, light decoder, frozen anchor encoder.

Parameters live in a flat ``ModelParams`` mapping of dotted names to
tensors.  The forward functions are plain functions over that mapping and
operate on batches: patches ``[B, T, P]`` with per-sample integer indices
``[B, T]`` into the full patch grid.  Every sample in a batch shares the same
visible count, which the fixed-ratio masking guarantees.
"""

from __future__ import annotations

import functools
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError
from .masking import MaskPlan
from .rng import RandomSource

ENCODER = "encoder"
ANCHOR = "anchor"
DECODER = "decoder"
PROBE = "probe"


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    patch_size: int = 4
    image_size: int = 32
    channels: int = 1
    use_class_token: bool = True

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ShapeError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.embed_dim % 4:
            raise ShapeError("2-D sinusoidal positions need embed_dim divisible by 4")
        if self.image_size % self.patch_size:
            raise ShapeError(f"patch_size {self.patch_size} does not divide image_size {self.image_size}")
        if self.channels not in (1, 3):
            raise ShapeError("channels must be 1 or 3")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass(frozen=True)
class DecoderConfig:
    embed_dim: int = 32
    depth: int = 2
    heads: int = 2
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.embed_dim % self.heads or self.embed_dim % 4:
            raise ShapeError(f"decoder embed_dim {self.embed_dim} incompatible with heads/positions")


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    seed: int = 0
    anchor_seed: int = 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            EncoderConfig(**d["encoder"]),
            DecoderConfig(**d["decoder"]),
            int(d.get("seed", 0)),
            int(d.get("anchor_seed", 1)),
        )


class ModelParams(dict):
    """Ordered name -> Tensor mapping; ``anchor.*`` tensors are frozen."""

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(k, t) for k, t in self.items() if t.requires_grad]

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def freeze(self, prefix: str) -> None:
        for k, t in self.items():
            if k.startswith(prefix + "."):
                t.requires_grad = False

    def is_frozen(self, name: str) -> bool:
        return not self[name].requires_grad

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.items() if k.startswith(prefix + ".")}


# -- initialisation -------------------------------------------------------

@functools.lru_cache(maxsize=None)
def sincos_2d(dim: int, grid: int) -> np.ndarray:
    """Fixed 2-D sine-cosine position table, (grid*grid, dim), raster order."""
    half = dim // 2
    omega = 1.0 / 10000 ** (np.arange(half // 2, dtype=np.float64) / (half / 2.0))
    ys, xs = np.meshgrid(np.arange(grid, dtype=np.float64), np.arange(grid, dtype=np.float64), indexing="ij")

    def encode(pos):
        out = np.outer(pos.reshape(-1), omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    table = np.concatenate([encode(ys), encode(xs)], axis=1).astype(np.float32)
    table.setflags(write=False)
    return table


def _xavier(rng: RandomSource, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, (fan_in, fan_out)).astype(np.float32)


def _linear(p: dict, name: str, rng: RandomSource, n_in: int, n_out: int) -> None:
    p[f"{name}.weight"] = _xavier(rng, n_in, n_out)
    p[f"{name}.bias"] = np.zeros(n_out, dtype=np.float32)


def _norm(p: dict, name: str, dim: int) -> None:
    p[f"{name}.gain"] = np.ones(dim, dtype=np.float32)
    p[f"{name}.bias"] = np.zeros(dim, dtype=np.float32)


def _blocks(p: dict, prefix: str, rng: RandomSource, dim: int, depth: int, mlp_ratio: int) -> None:
    for i in range(depth):
        b = f"{prefix}.blocks.{i}"
        _norm(p, f"{b}.norm1", dim)
        for proj in ("q", "k", "v", "out"):
            _linear(p, f"{b}.attn.{proj}", rng, dim, dim)
        # a key bias shifts every score in a row equally and cannot change the softmax
        del p[f"{b}.attn.k.bias"]
        _norm(p, f"{b}.norm2", dim)
        _linear(p, f"{b}.mlp.fc1", rng, dim, dim * mlp_ratio)
        _linear(p, f"{b}.mlp.fc2", rng, dim * mlp_ratio, dim)


def _encoder_arrays(prefix: str, cfg: EncoderConfig, rng: RandomSource) -> dict:
    p: dict[str, np.ndarray] = {}
    _linear(p, f"{prefix}.patch_embed", rng, cfg.patch_dim, cfg.embed_dim)
    if cfg.use_class_token:
        p[f"{prefix}.cls_token"] = (0.02 * rng.normal(cfg.embed_dim)).astype(np.float32)
    _blocks(p, prefix, rng, cfg.embed_dim, cfg.depth, cfg.mlp_ratio)
    _norm(p, f"{prefix}.norm", cfg.embed_dim)
    return p


def init_params(cfg: ModelConfig) -> ModelParams:
    """Seeded initialisation of the SAR encoder, decoder and frozen anchor."""
    enc, dec = cfg.encoder, cfg.decoder
    rng = RandomSource(cfg.seed, stream=1)
    arrays = _encoder_arrays(ENCODER, enc, rng)
    _linear(arrays, f"{DECODER}.embed", rng, enc.embed_dim, dec.embed_dim)
    arrays[f"{DECODER}.mask_token"] = (0.02 * rng.normal(dec.embed_dim)).astype(np.float32)
    _blocks(arrays, DECODER, rng, dec.embed_dim, dec.depth, dec.mlp_ratio)
    _norm(arrays, f"{DECODER}.norm", dec.embed_dim)
    _linear(arrays, f"{DECODER}.pred", rng, dec.embed_dim, enc.patch_dim)
    arrays.update(_encoder_arrays(ANCHOR, enc, RandomSource(cfg.anchor_seed, stream=2)))
    params = ModelParams((k, Tensor(v, requires_grad=True, name=k)) for k, v in arrays.items())
    params.freeze(ANCHOR)
    return params


def load_anchor_weights(params: ModelParams, source: dict[str, np.ndarray], prefix: str = ENCODER) -> None:
    """Replace the anchor branch with externally produced encoder weights.

    ``source`` uses the ``encoder.*`` naming (or ``prefix``) of this package's
    checkpoints; shapes must match the configured architecture.
    """
    for name in [k for k in params if k.startswith(ANCHOR + ".")]:
        src_name = prefix + name[len(ANCHOR):]
        if src_name not in source:
            raise ContractError(f"anchor weight {src_name} missing from source")
        arr = np.asarray(source[src_name], dtype=np.float32)
        if arr.shape != params[name].shape:
            raise ShapeError(f"anchor weight {src_name} has dims {list(arr.shape)}, expected {params[name].dims}")
        params[name] = Tensor(arr, requires_grad=False, name=name)


# -- layers -----------------------------------------------------------------

def _lin(params: ModelParams, name: str, x: Tensor) -> Tensor:
    y = x @ params[f"{name}.weight"]
    bias = params.get(f"{name}.bias")
    return y if bias is None else y + bias


def _ln(params: ModelParams, name: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, params[f"{name}.gain"], params[f"{name}.bias"], 1e-6)


def _attention(params: ModelParams, name: str, x: Tensor, heads: int) -> tuple[Tensor, np.ndarray]:
    b, t, d = x.shape
    dh = d // heads

    def split(proj):
        return _lin(params, f"{name}.{proj}", x).reshape(b, t, heads, dh).transpose(0, 2, 1, 3)

    q, k, v = split("q"), split("k"), split("v")
    weights = ad.softmax_rows((q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh)))
    ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
    return _lin(params, f"{name}.out", ctx), weights.data


def _block(params: ModelParams, name: str, x: Tensor, heads: int) -> tuple[Tensor, np.ndarray]:
    h, weights = _attention(params, f"{name}.attn", _ln(params, f"{name}.norm1", x), heads)
    x = x + h
    h = ad.gelu(_lin(params, f"{name}.mlp.fc1", _ln(params, f"{name}.norm2", x)))
    return x + _lin(params, f"{name}.mlp.fc2", h), weights


def _depth(params: ModelParams, prefix: str) -> int:
    n = 0
    while f"{prefix}.blocks.{n}.norm1.gain" in params:
        n += 1
    return n


# -- branches ----------------------------------------------------------------

@dataclass
class EncoderOutput:
    patches: Tensor  # [B, T, D] after the final layer norm, aligned to ``index``
    cls: Tensor | None  # [B, D]
    index: np.ndarray  # [B, T] source patch indices
    attention: np.ndarray  # final-block weights [B, heads, T(+1), T(+1)]
    tokens_attended: int


def encode(params: ModelParams, cfg: EncoderConfig, patches, index, prefix: str = ENCODER) -> EncoderOutput:
    """Embed patches at their grid positions and run the transformer.

    ``patches`` is ``[B, T, P]`` (or ``[T, P]`` for a single sample) and
    ``index`` holds the grid index of every row, used to look up the fixed
    positional embedding.  Only these T tokens (plus the class token) are
    attended; masked patches never enter the encoder.
    """
    x = patches if isinstance(patches, Tensor) else Tensor(patches)
    index = np.asarray(index, dtype=np.int64)
    if x.ndim == 2:
        x, index = x.reshape(1, *x.shape), index[None, :]
    if x.shape[-1] != cfg.patch_dim:
        raise ShapeError(f"patch vectors of length {x.shape[-1]}, model expects {cfg.patch_dim}")
    if index.shape != x.shape[:2]:
        raise ShapeError(f"index dims {list(index.shape)} do not match patches {x.dims}")
    b = x.shape[0]
    pos = sincos_2d(cfg.embed_dim, cfg.grid)[index]
    h = _lin(params, f"{prefix}.patch_embed", x) + pos
    has_cls = f"{prefix}.cls_token" in params
    if has_cls:
        cls = ad.broadcast_to(params[f"{prefix}.cls_token"].reshape(1, 1, cfg.embed_dim), (b, 1, cfg.embed_dim))
        h = ad.concat([cls, h], axis=1)
    weights = None
    for i in range(_depth(params, prefix)):
        h, weights = _block(params, f"{prefix}.blocks.{i}", h, cfg.heads)
    h = _ln(params, f"{prefix}.norm", h)
    if has_cls:
        return EncoderOutput(h[:, 1:, :], h[:, 0, :], index, weights, h.shape[1])
    return EncoderOutput(h, None, index, weights, h.shape[1])


def encode_visible(params: ModelParams, cfg: EncoderConfig, visible_patches, visible_index) -> EncoderOutput:
    return encode(params, cfg, visible_patches, visible_index, ENCODER)


def _plan_arrays(plans) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(plans, MaskPlan):
        plans = [plans]
    vis = np.stack([np.asarray(p.visible, dtype=np.int64) for p in plans])
    msk = np.stack([np.asarray(p.masked, dtype=np.int64) for p in plans])
    return vis, msk


def decoder_input(params: ModelParams, latents: EncoderOutput, plans) -> Tensor:
    """Full-length decoder sequence before positional embeddings are added.

    Visible rows hold projected latents, masked rows the shared mask token.
    """
    vis, msk = _plan_arrays(plans)
    if not np.array_equal(vis, latents.index):
        raise ContractError("latent indices do not match the visible set of the mask plan")
    b = vis.shape[0]
    x = _lin(params, f"{DECODER}.embed", latents.patches)
    parts = [x]
    token = params[f"{DECODER}.mask_token"]
    if msk.shape[1]:
        parts.append(ad.broadcast_to(token.reshape(1, 1, -1), (b, msk.shape[1], token.shape[0])))
    seq = ad.concat(parts, axis=1) if len(parts) > 1 else x
    restore = np.argsort(np.concatenate([vis, msk], axis=1), axis=1, kind="stable")
    return ad.gather_rows(seq, restore)


def decode_full(params: ModelParams, cfg: ModelConfig, latents: EncoderOutput, plans) -> Tensor:
    """Predict every patch ``[B, N, p*p*C]`` from the visible latents."""
    x = decoder_input(params, latents, plans)
    x = x + sincos_2d(cfg.decoder.embed_dim, cfg.encoder.grid)
    for i in range(cfg.decoder.depth):
        x, _ = _block(params, f"{DECODER}.blocks.{i}", x, cfg.decoder.heads)
    x = _ln(params, f"{DECODER}.norm", x)
    return _lin(params, f"{DECODER}.pred", x)


def full_index(batch: int, n: int) -> np.ndarray:
    return np.broadcast_to(np.arange(n, dtype=np.int64), (batch, n))


def anchor_forward(params: ModelParams, cfg: EncoderConfig, patches) -> EncoderOutput:
    """Frozen anchor encoding of complete (unmasked) patch sequences; no graph is recorded."""
    if any(t.requires_grad for k, t in params.items() if k.startswith(ANCHOR + ".")):
        raise ContractError("anchor parameters must be frozen")
    arr = np.asarray(patches.data if isinstance(patches, Tensor) else patches, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.shape[1] != cfg.num_patches:
        raise ShapeError(f"anchor expects the full sequence of {cfg.num_patches} patches, got {arr.shape[1]}")
    with ad.no_grad():
        return encode(params, cfg, arr, full_index(arr.shape[0], arr.shape[1]), ANCHOR)


def pooled_features(params: ModelParams, cfg: EncoderConfig, patches, batch: int = 64) -> np.ndarray:
    """Global-average-pooled final-layer patch embeddings of the SAR encoder, no masking."""
    arr = np.asarray(patches, dtype=np.float32)
    out = []
    with ad.no_grad():
        for s in range(0, arr.shape[0], batch):
            chunk = arr[s : s + batch]
            enc = encode(params, cfg, chunk, full_index(chunk.shape[0], chunk.shape[1]), ENCODER)
            out.append(enc.patches.data.mean(axis=1))
    return np.concatenate(out, axis=0)


def attention_map(params: ModelParams, cfg: EncoderConfig, img, upsample: bool = True) -> np.ndarray:
    """Class-token attention over patch tokens in the final block, min-max normalised.

    Returns the (grid, grid) map, or a (H, W) map with each cell repeated
    ``patch_size`` times when ``upsample`` is set.
    """
    from .masking import patchify

    seq = patchify(prepare_image(img, cfg.channels), cfg.patch_size)
    with ad.no_grad():
        enc = encode(params, cfg, seq.patches, np.arange(seq.count), ENCODER)
    if enc.cls is None:
        raise ContractError("attention maps need a class token")
    raw = enc.attention[0, :, 0, 1:].mean(axis=0).astype(np.float64)
    lo, hi = raw.min(), raw.max()
    heat = (raw - lo) / (hi - lo) if hi > lo else np.zeros_like(raw)
    heat = heat.reshape(seq.grid).astype(np.float32)
    if upsample:
        heat = np.repeat(np.repeat(heat, cfg.patch_size, axis=0), cfg.patch_size, axis=1)
    return heat


def expand_channels(img) -> np.ndarray:
    """Replicate a single-channel image into three identical channels."""
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.shape[-1] == 3:
        warnings.warn("image already has three channels; left unchanged", stacklevel=2)
        return arr
    if arr.shape[-1] != 1:
        raise ShapeError(f"expected 1 channel, got {arr.shape[-1]}")
    return np.repeat(arr, 3, axis=-1)


def prepare_image(img, channels: int) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if channels == 3 and arr.shape[-1] == 1:
        return expand_channels(arr)
    return arr
