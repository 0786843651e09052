import logging

import numpy as np
import pytest

from sarmae import autodiff as ad
from sarmae.errors import ContractError, ParameterError
from sarmae.masking import MaskPlan, random_mask
from sarmae.objectives import combine, loss_sarc, loss_sare, loss_total, sarc_per_sample, sare_per_sample
from sarmae.rng import RandomSource


def brute_sare(pred, target, masked):
    total = 0.0
    for p in masked:
        s = 0.0
        for j in range(pred.shape[1]):
            s += (float(pred[p, j]) - float(target[p, j])) ** 2
        total += s
    return total / len(masked)


def brute_sarc(f_sar, f_opt, visible):
    total = 0.0
    for row, i in enumerate(visible):
        dot = na = nb = 0.0
        for j in range(f_sar.shape[1]):
            a, b = float(f_sar[row, j]), float(f_opt[i, j])
            dot += a * b
            na += a * a
            nb += b * b
        total += 1.0 - dot / (np.sqrt(na) * np.sqrt(nb))
    return total / len(visible)


def test_sare_examples():
    plan = MaskPlan(np.array([2]), np.array([0, 1]), 0.66)
    pred = np.array([[1.0, 1.0], [0.0, 0.0], [5.0, 5.0]])
    target = np.zeros((3, 2))
    assert loss_sare(pred, target, plan).item() == pytest.approx(1.0)
    assert loss_sare(target, target, plan).item() == 0.0
    with pytest.raises(ContractError):
        loss_sare(pred, target, MaskPlan(np.arange(3), np.array([], dtype=int), 0.0))


def test_sarc_examples():
    plan = MaskPlan(np.array([0]), np.array([1]), 0.5)
    e0, e1 = np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])
    full = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert loss_sarc(e0, full, plan).item() == pytest.approx(0.0, abs=1e-7)
    assert loss_sarc(e1, full, plan).item() == pytest.approx(1.0)
    assert loss_sarc(-e0, full, plan).item() == pytest.approx(2.0)


def test_total_examples():
    assert loss_total(1.0, 0.5, 0.1).total == pytest.approx(1.05)
    unpaired = loss_total(1.0, None, 0.1)
    assert unpaired.total == 1.0 and unpaired.sarc is None
    assert loss_total(1.0, 0.7, 0.0).total == 1.0
    with pytest.raises(ParameterError):
        combine(1.0, 0.5, -0.1)


def test_losses_match_brute_force_oracles():
    rng = np.random.default_rng(0)
    for k in range(100):
        n, d = int(rng.integers(2, 10)), int(rng.integers(1, 6))
        plan = random_mask(n, float(rng.choice([0.25, 0.5, 0.75])), RandomSource(k))
        if plan.masked.size == 0:
            continue
        pred, target = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        with ad.precision(np.float64):
            sare = loss_sare(pred, target, plan).item()
            f_sar = rng.normal(size=(len(plan.visible), d))
            f_opt = rng.normal(size=(n, d))
            sarc = loss_sarc(f_sar, f_opt, plan).item()
        assert abs(sare - brute_sare(pred, target, plan.masked)) < 1e-6
        assert abs(sarc - brute_sarc(f_sar, f_opt, plan.visible)) < 1e-6
        assert 0.0 <= sarc <= 2.0 and sare >= 0.0


def test_sare_ignores_visible_rows_bitwise():
    rng = np.random.default_rng(1)
    plan = random_mask(16, 0.75, RandomSource(2))
    pred, target = rng.normal(size=(16, 8)), rng.normal(size=(16, 8))
    base = loss_sare(pred, target, plan).data
    p2, t2 = pred.copy(), target.copy()
    p2[plan.visible] = rng.normal(size=(len(plan.visible), 8)) * 100
    t2[plan.visible] = 1e6
    assert loss_sare(p2, t2, plan).data.tobytes() == base.tobytes()


def test_sarc_scale_invariance():
    rng = np.random.default_rng(2)
    plan = random_mask(9, 0.5, RandomSource(0))
    f_sar, f_opt = rng.normal(size=(len(plan.visible), 5)), rng.normal(size=(9, 5))
    base = loss_sarc(f_sar, f_opt, plan).item()
    scaled = loss_sarc(f_sar * rng.uniform(0.1, 10, size=(len(plan.visible), 1)), f_opt * 3.7, plan).item()
    assert abs(base - scaled) < 1e-6


def test_sarc_zero_norm_is_floored_with_warning(caplog):
    plan = MaskPlan(np.array([0]), np.array([1]), 0.5)
    with caplog.at_level(logging.WARNING):
        value = loss_sarc(np.zeros((1, 3)), np.ones((2, 3)), plan).item()
    assert np.isfinite(value) and value == pytest.approx(1.0)
    assert "floored" in caplog.text


def test_loss_gradients():
    rng = np.random.default_rng(3)
    target = rng.normal(size=(2, 6, 4))
    masked = np.array([[1, 2, 5], [0, 3, 4]])
    assert ad.check_gradient(lambda t: sare_per_sample(t, target, masked).sum(), rng.normal(size=(2, 6, 4))) < 1e-3
    f_opt = rng.normal(size=(2, 6, 4))
    vis = np.array([[0, 3, 4], [1, 2, 5]])
    assert ad.check_gradient(lambda t: sarc_per_sample(t, f_opt, vis).sum(), rng.normal(size=(2, 3, 4))) < 1e-3


def test_batched_matches_single_sample_forms():
    rng = np.random.default_rng(4)
    plans = [random_mask(8, 0.75, RandomSource(s)) for s in range(3)]
    pred, target = rng.normal(size=(3, 8, 4)), rng.normal(size=(3, 8, 4))
    with ad.precision(np.float64):
        batched = sare_per_sample(pred, target, np.stack([p.masked for p in plans])).data
        single = [loss_sare(pred[i], target[i], p).item() for i, p in enumerate(plans)]
    np.testing.assert_allclose(batched, single, rtol=1e-12)
