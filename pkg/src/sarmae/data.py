"""Synthetic paired SAR/optical scenes and on-disk corpora.

A scene is a constant background with a few bright rectangles or ellipses.
The clean rendering doubles as the optical image; the SAR image is an
``L_data``-look speckled version of it.  The class label combines the kind of
the dominant (largest) shape with its size bucket.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError, ParameterError
from .image_io import read_image, write_image
from .rng import RandomSource, derive_seed
from .speckle import simulate_multilook

SHAPE_KINDS = ("rectangle", "ellipse")
NUM_CLASSES = 4


@dataclass(frozen=True)
class SceneSpec:
    """Scene generator settings.

    Each scene has one dominant shape whose half-extents (as fractions of the
    image size) come from ``small_extent`` or ``large_extent``, plus
    ``shape_count - 1`` smaller distractors drawn from ``distractor_extent``.
    """

    image_size: int = 32
    shape_count: tuple[int, int] = (1, 3)
    shape_kinds: tuple[str, ...] = SHAPE_KINDS
    small_extent: tuple[float, float] = (0.12, 0.18)
    large_extent: tuple[float, float] = (0.26, 0.36)
    distractor_extent: tuple[float, float] = (0.04, 0.09)
    background: tuple[float, float] = (0.05, 0.35)
    foreground: tuple[float, float] = (0.5, 1.0)
    sar_looks: int = 8
    paired_fraction: float = 0.5

    def __post_init__(self):
        for name in ("background", "foreground"):
            lo, hi = getattr(self, name)
            if not 0.0 < lo <= hi <= 1.0:
                raise ParameterError(f"{name} intensity range must lie in (0, 1]")
        if not (self.background[1] < self.foreground[0] or self.foreground[1] < self.background[0]):
            raise ParameterError("foreground and background intensity ranges overlap")
        if not 0.0 <= self.paired_fraction <= 1.0:
            raise ParameterError("paired_fraction must lie in [0, 1]")
        if not 1 <= self.shape_count[0] <= self.shape_count[1]:
            raise ParameterError("shape_count must be an ordered range starting at 1 or more")
        if any(k not in SHAPE_KINDS for k in self.shape_kinds) or not self.shape_kinds:
            raise ParameterError(f"shape kinds must be drawn from {SHAPE_KINDS}")
        for name in ("small_extent", "large_extent", "distractor_extent"):
            lo, hi = getattr(self, name)
            if not 0.0 < lo <= hi <= 0.5:
                raise ParameterError(f"{name} must be an ordered range within (0, 0.5]")
        if not (self.distractor_extent[1] < self.small_extent[0] and self.small_extent[1] < self.large_extent[0]):
            raise ParameterError("distractor, small and large extents must be increasing and disjoint")
        if self.sar_looks < 1 or self.image_size < 4:
            raise ParameterError("sar_looks must be >= 1 and image_size >= 4")


@dataclass
class Sample:
    sar: np.ndarray
    optical: np.ndarray | None
    label: int
    id: int
    seed: int
    truth: np.ndarray | None = None

    @property
    def paired(self) -> bool:
        return self.optical is not None


def label_for(kind: str, large: bool) -> int:
    """Class id: rectangle-small 0, rectangle-large 1, ellipse-small 2, ellipse-large 3."""
    return 2 * SHAPE_KINDS.index(kind) + int(large)


def _paint(truth, yy, xx, kind, center, half, value) -> None:
    (cy, cx), (hy, hx) = center, half
    if kind == "rectangle":
        inside = (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
    else:
        inside = ((yy - cy) / hy) ** 2 + ((xx - cx) / hx) ** 2 <= 1.0
    truth[inside] = value


def render_truth(spec: SceneSpec, rng: RandomSource) -> tuple[np.ndarray, int]:
    """Clean intensity scene (H, W, 1) and its class label."""
    s = spec.image_size
    yy, xx = np.mgrid[0:s, 0:s] + 0.5
    truth = np.full((s, s), rng.uniform(*spec.background), dtype=np.float64)
    kinds = spec.shape_kinds
    kind = kinds[int(rng.integers(len(kinds)))]
    large = bool(rng.integers(2))
    half = rng.uniform(*(spec.large_extent if large else spec.small_extent), size=2) * s
    center = rng.uniform(0.5 * half.max(), s - 0.5 * half.max(), size=2)
    value = rng.uniform(*spec.foreground)
    # distractors go underneath so the dominant shape stays whole
    n_extra = int(rng.integers(spec.shape_count[0], spec.shape_count[1] + 1)) - 1
    for _ in range(n_extra):
        d_kind = kinds[int(rng.integers(len(kinds)))]
        d_half = rng.uniform(*spec.distractor_extent, size=2) * s
        _paint(truth, yy, xx, d_kind, rng.uniform(0.0, s, size=2), d_half, rng.uniform(*spec.foreground))
    _paint(truth, yy, xx, kind, center, half, value)
    return truth.astype(np.float32)[:, :, None], label_for(kind, large)


def generate_scene(spec: SceneSpec, rng: RandomSource, sample_id: int = 0) -> Sample:
    truth, label = render_truth(spec, rng)
    paired = bool(rng.random() < spec.paired_fraction)
    sar = simulate_multilook(truth, spec.sar_looks, rng.child(1))
    return Sample(sar, truth if paired else None, label, int(sample_id), int(rng.seed), truth)


# -- corpus on disk ---------------------------------------------------------

@dataclass
class ManifestRecord:
    id: int
    sar: str
    optical: str | None
    label: int
    paired: bool
    seed: int


class Manifest(list):
    """Records of a corpus; paths are relative to ``root``."""

    def __init__(self, records=(), root: Path | str = "."):
        super().__init__(records)
        self.root = Path(root)

    def write(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w", encoding="utf-8") as f:
            for r in self:
                f.write(json.dumps(asdict(r), sort_keys=True) + "\n")
        os.replace(tmp, path)

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        records, seen = [], set()
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    rec = ManifestRecord(**json.loads(line))
                except (json.JSONDecodeError, TypeError) as exc:
                    raise FormatError(f"{path}:{lineno}: bad manifest record ({exc})") from exc
                if rec.id in seen:
                    raise FormatError(f"{path}:{lineno}: duplicate id {rec.id}")
                seen.add(rec.id)
                records.append(rec)
        return cls(records, path.parent)

    def check_files(self) -> None:
        for r in self:
            for rel in (r.sar, r.optical) if r.paired else (r.sar,):
                if rel is None or not (self.root / rel).is_file():
                    raise FileNotFoundError(f"corpus file for sample {r.id} missing: {self.root / str(rel)}")


def build_corpus(spec: SceneSpec, count: int, out_dir, seed: int) -> Manifest:
    """Generate ``count`` samples into ``out_dir`` and write ``manifest.jsonl``."""
    if count < 1:
        raise ParameterError("corpus count must be at least 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(count):
        sample = generate_scene(spec, RandomSource(derive_seed(seed, i)), i)
        sar_name = f"{i:06d}_sar.simg"
        write_image(out / sar_name, sample.sar)
        opt_name = None
        if sample.paired:
            opt_name = f"{i:06d}_opt.simg"
            write_image(out / opt_name, sample.optical)
        records.append(ManifestRecord(i, sar_name, opt_name, sample.label, sample.paired, sample.seed))
    manifest = Manifest(records, out)
    manifest.write(out / "manifest.jsonl")
    with open(out / "scene_spec.json", "w", encoding="utf-8") as f:
        json.dump(asdict(spec), f, sort_keys=True)
    return manifest


@dataclass
class Corpus:
    """A manifest loaded into memory; optical images only for paired records."""

    sar: np.ndarray  # (count, H, W, C)
    optical: list  # per sample array or None
    labels: np.ndarray
    ids: np.ndarray

    @property
    def paired(self) -> np.ndarray:
        return np.array([o is not None for o in self.optical])

    def __len__(self) -> int:
        return len(self.labels)


def load_corpus(manifest_path) -> Corpus:
    manifest = Manifest.read(manifest_path)
    if not manifest:
        raise ContractError(f"manifest {manifest_path} is empty")
    manifest.check_files()
    sar = [read_image(manifest.root / r.sar) for r in manifest]
    if len({a.shape for a in sar}) != 1:
        raise FormatError("corpus images do not share one shape")
    optical = [read_image(manifest.root / r.optical) if r.paired else None for r in manifest]
    return Corpus(
        np.stack(sar),
        optical,
        np.array([r.label for r in manifest], dtype=np.int64),
        np.array([r.id for r in manifest], dtype=np.int64),
    )
