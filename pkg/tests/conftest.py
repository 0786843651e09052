import numpy as np
import pytest

from sarmae.data import SceneSpec, build_corpus, load_corpus
from sarmae.model import DecoderConfig, EncoderConfig, ModelConfig

TINY_MODEL = ModelConfig(
    EncoderConfig(embed_dim=16, depth=1, heads=2, mlp_ratio=2, patch_size=4, image_size=16),
    DecoderConfig(embed_dim=8, depth=1, heads=2, mlp_ratio=2),
)


@pytest.fixture(scope="session")
def tiny_corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_corpus")
    build_corpus(SceneSpec(image_size=16), 64, out, seed=5)
    return out


@pytest.fixture(scope="session")
def tiny_corpus(tiny_corpus_dir):
    return load_corpus(tiny_corpus_dir / "manifest.jsonl")


@pytest.fixture
def rng():
    return np.random.default_rng(0)
