import numpy as np
import pytest

from sarmae.errors import ContractError, ParameterError, ShapeError
from sarmae.masking import (
    MaskPlan,
    PatchSequence,
    gather_visible,
    patchify,
    random_mask,
    scatter_full,
    unpatchify,
    visible_count,
)
from sarmae.rng import RandomSource


def test_patch_counts():
    seq = patchify(np.zeros((8, 8)), 4)
    assert seq.count == 4 and seq.patches.shape == (4, 16)
    assert patchify(np.zeros((32, 32, 1)), 4).count == 64
    assert patchify(np.zeros((8, 8, 3)), 4).patches.shape == (4, 48)


def test_patch_raster_order():
    img = np.arange(16, dtype=np.float32).reshape(4, 4)
    seq = patchify(img, 2)
    np.testing.assert_array_equal(seq.patches[0], [0, 1, 4, 5])
    np.testing.assert_array_equal(seq.patches[1], [2, 3, 6, 7])
    np.testing.assert_array_equal(seq.patches[2], [8, 9, 12, 13])


def test_patchify_rejects_non_divisible():
    with pytest.raises(ShapeError):
        patchify(np.zeros((10, 8)), 4)


def test_unpatchify_rejects_inconsistent_dims():
    with pytest.raises(ShapeError):
        unpatchify(PatchSequence(np.zeros((3, 16), dtype=np.float32), 4, (2, 2), 1))


@pytest.mark.parametrize("channels", [1, 3])
def test_round_trip_bitwise(channels):
    rng = np.random.default_rng(channels)
    for _ in range(20):
        img = rng.uniform(size=(16, 24, channels)).astype(np.float32)
        assert np.array_equal(unpatchify(patchify(img, 4)), img)


def test_mask_counts():
    plan = random_mask(64, 0.75, RandomSource(0))
    assert len(plan.visible) == 16 and len(plan.masked) == 48
    plan = random_mask(64, 0.0, RandomSource(0))
    np.testing.assert_array_equal(plan.visible, np.arange(64))
    assert plan.masked.size == 0
    assert visible_count(10, 0.75) == 3  # 2.5 rounds away from zero
    with pytest.raises(ParameterError):
        random_mask(2, 0.9, RandomSource(0))
    with pytest.raises(ParameterError):
        random_mask(4, 1.0, RandomSource(0))


def test_mask_partition_and_determinism():
    for s in range(200):
        plan = random_mask(49, 0.6, RandomSource(s))
        both = np.concatenate([plan.visible, plan.masked])
        assert np.array_equal(np.sort(both), np.arange(49))
        assert len(np.intersect1d(plan.visible, plan.masked)) == 0
    a, b = random_mask(64, 0.75, RandomSource(9)), random_mask(64, 0.75, RandomSource(9))
    np.testing.assert_array_equal(a.visible, b.visible)


def test_gather_examples():
    seq = patchify(np.arange(16, dtype=np.float32).reshape(4, 4), 2)
    rows, idx = gather_visible(seq, MaskPlan(np.array([1, 3]), np.array([0, 2]), 0.5))
    np.testing.assert_array_equal(idx, [1, 3])
    np.testing.assert_array_equal(rows, seq.patches[[1, 3]])
    rows, _ = gather_visible(seq, random_mask(4, 0.0, RandomSource(0)))
    np.testing.assert_array_equal(rows, seq.patches)
    with pytest.raises(ContractError):
        gather_visible(seq, MaskPlan(np.array([1, 7]), np.array([0, 2]), 0.5))


def test_scatter_inverts_gather():
    seq = patchify(np.random.default_rng(0).uniform(size=(8, 8)), 2)
    plan = random_mask(seq.count, 0.5, RandomSource(3))
    rows, _ = gather_visible(seq, plan)
    full = scatter_full(rows, plan, np.full(4, -1.0, dtype=np.float32))
    np.testing.assert_array_equal(full[plan.visible], seq.patches[plan.visible])
    assert np.all(full[plan.masked] == -1.0)
