"""Acceptance checks, one test per criterion.

Each test prints a single ``[criterion N] PASS|FAIL ...`` line to the
terminal (bypassing capture) and then asserts the same condition.
"""

import math
import time

import numpy as np
import pytest
from scipy import stats

from sarmae import gradcheck
from sarmae.autodiff import precision
from sarmae.checkpoint import decode_tensors, encode_tensors, load_checkpoint
from sarmae.config import ProbeConfig, TrainConfig
from sarmae.data import Corpus, SceneSpec, build_corpus, load_corpus
from sarmae.image_io import decode_simg, encode_simg
from sarmae.masking import patchify, random_mask, unpatchify
from sarmae.model import ModelConfig
from sarmae.objectives import loss_sarc, loss_sare
from sarmae.rng import RandomSource
from sarmae.speckle import FAMILIES, NoisePolicy, augment, sample_gamma_speckle
from sarmae.train import build_params, linear_probe, pretrain, read_metrics

ABLATION_SEEDS = (0, 1, 2)
ABLATION_STEPS = 1000
ABLATION_CORPUS = 2048


def report(capsys, n, ok, detail):
    line = f"[criterion {n}] {'PASS' if ok else 'FAIL'} {detail}"
    with capsys.disabled():
        print("\n" + line)
    return ok


@pytest.fixture(scope="module")
def corpus512(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus512")
    build_corpus(SceneSpec(), 512, out, seed=0)
    return load_corpus(out / "manifest.jsonl")


# 1 -------------------------------------------------------------------------

def test_criterion_1_speckle_physics(capsys):
    t0 = time.perf_counter()
    rows, ok = [], True
    for looks in (1, 2, 3, 4, 8):
        z = sample_gamma_speckle(np.full(10**5, 0.5, np.float32), looks, RandomSource(looks)).astype(np.float64)
        mean_err = abs(z.mean() / 0.5 - 1.0)
        var_err = abs(z.var() / (0.25 / looks) - 1.0)
        ks = stats.kstest(z, stats.gamma(a=looks, scale=0.5 / looks).cdf).statistic
        ok &= mean_err < 0.01 and var_err < 0.05 and ks < 0.005
        rows.append(f"L={looks}: mean err {mean_err:.4f} var err {var_err:.4f} KS {ks:.4f}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 5.0
    report(capsys, 1, ok, f"({elapsed:.2f} s) " + "; ".join(rows))
    assert ok


# 2 -------------------------------------------------------------------------

def test_criterion_2_policy_statistics(capsys):
    t0 = time.perf_counter()
    policy = NoisePolicy()
    rng = RandomSource(2024)
    x = np.full((2, 2, 1), 0.5, np.float32)
    n = 10**5
    applied, fam, lsyn = 0, {f: 0 for f in FAMILIES}, set()
    for _ in range(n):
        _, rec = augment(x, policy, rng)
        if rec.applied:
            applied += 1
            fam[rec.family] += 1
            if "L_syn" in rec.parameters:
                lsyn.add(rec.parameters["L_syn"])
    elapsed = time.perf_counter() - t0
    frac = applied / n
    fracs = {f.value: c / n for f, c in fam.items()}
    ok = abs(frac - 0.5) <= 0.01 and all(abs(v - 0.125) <= 0.01 for v in fracs.values())
    ok &= lsyn <= {1, 2, 3, 4} and elapsed < 10.0
    detail = f"({elapsed:.2f} s) applied {frac:.4f}, per family " + ", ".join(f"{k} {v:.4f}" for k, v in fracs.items())
    report(capsys, 2, ok, detail + f", L_syn drawn {sorted(lsyn)}")
    assert ok


# 3 -------------------------------------------------------------------------

def test_criterion_3_gradient_suite(capsys):
    t0 = time.perf_counter()
    suite = gradcheck.run_suite(instances=10, seed=0, include_model=True)
    elapsed = time.perf_counter() - t0
    worst = max(suite.results, key=lambda r: r.worst)
    ok = suite.passed and elapsed < 60.0
    report(capsys, 3, ok, f"({elapsed:.1f} s) {len(suite.results)} checks, worst {worst.name} rel. err {worst.worst:.2e}")
    with capsys.disabled():
        for line in suite.lines():
            print("    " + line)
    assert ok


# 4 -------------------------------------------------------------------------

def _brute(pred, target, f_sar, f_opt, plan):
    sare = 0.0
    for p in plan.masked:
        sare += sum((float(pred[p, j]) - float(target[p, j])) ** 2 for j in range(pred.shape[1]))
    sare /= len(plan.masked)
    sarc = 0.0
    for row, i in enumerate(plan.visible):
        a, b = f_sar[row].astype(np.float64), f_opt[i].astype(np.float64)
        dot = sum(float(a[j]) * float(b[j]) for j in range(a.size))
        sarc += 1.0 - dot / (math.sqrt(sum(float(v) ** 2 for v in a)) * math.sqrt(sum(float(v) ** 2 for v in b)))
    return sare, sarc / len(plan.visible)


def test_criterion_4_loss_oracles(capsys):
    rng = np.random.default_rng(4)
    worst_sare = worst_sarc = 0.0
    in_range = bitwise = True
    for k in range(100):
        n, d = int(rng.integers(4, 12)), int(rng.integers(2, 8))
        plan = random_mask(n, 0.5, RandomSource(k))
        pred, target = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        f_sar, f_opt = rng.normal(size=(len(plan.visible), d)), rng.normal(size=(n, d))
        with precision(np.float64):
            sare = loss_sare(pred, target, plan)
            sarc = loss_sarc(f_sar, f_opt, plan).item()
        ref_sare, ref_sarc = _brute(pred, target, f_sar, f_opt, plan)
        worst_sare = max(worst_sare, abs(sare.item() - ref_sare))
        worst_sarc = max(worst_sarc, abs(sarc - ref_sarc))
        in_range &= 0.0 <= sarc <= 2.0
        p2, t2 = pred.copy(), target.copy()
        p2[plan.visible] += rng.normal(size=(len(plan.visible), d))
        t2[plan.visible] -= 3.0
        with precision(np.float64):
            bitwise &= loss_sare(p2, t2, plan).data.tobytes() == sare.data.tobytes()
    ok = worst_sare < 1e-6 and worst_sarc < 1e-6 and in_range and bitwise
    report(capsys, 4, ok, f"max |sare - oracle| {worst_sare:.1e}, max |sarc - oracle| {worst_sarc:.1e}, "
                          f"sarc in [0,2]: {in_range}, visible-row invariance bitwise: {bitwise}")
    assert ok


# 5 -------------------------------------------------------------------------

def test_criterion_5_masking(capsys):
    plan = random_mask(64, 0.75, RandomSource(0))
    count_ok = len(plan.visible) == 16 and len(plan.masked) == 48
    trials = 10**4
    hits = np.zeros(64)
    for s in range(trials):
        hits[random_mask(64, 0.75, RandomSource(s, stream=5)).visible] += 1
    p = 16 / 64
    sigma = math.sqrt(trials * p * (1 - p))
    dev = np.abs(hits - trials * p) / sigma
    uniform_ok = bool(dev.max() <= 3.0)
    rng = np.random.default_rng(5)
    trip_ok = True
    for _ in range(100):
        c = int(rng.choice([1, 3]))
        img = rng.uniform(size=(32, 32, c)).astype(np.float32)
        trip_ok &= unpatchify(patchify(img, 4)).tobytes() == img.tobytes()
    ok = count_ok and uniform_ok and trip_ok
    report(capsys, 5, ok, f"|V|={len(plan.visible)}, max visibility deviation {dev.max():.2f} sigma over "
                          f"{trials} plans, 100 round trips bitwise: {trip_ok}")
    assert ok


# 6 -------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_6_training_descent(capsys, corpus512, tmp_path):
    cfg = TrainConfig(seed=0, checkpoint=tmp_path / "c6.smae", metrics=tmp_path / "c6.csv")
    t0 = time.perf_counter()
    result = pretrain(cfg, corpus512)
    elapsed = time.perf_counter() - t0
    total = np.array([r.loss_total for r in result.records])
    sarc = np.array([np.nan if r.loss_sarc is None else r.loss_sarc for r in result.records])
    ratio = total[-1] / total[:10].mean()
    windows = [float(np.nanmean(sarc[i : i + 20])) for i in range(0, len(sarc), 20)]
    rises = [(i + 1, a, b) for i, (a, b) in enumerate(zip(windows, windows[1:])) if b > a]
    descent_ok = ratio <= 0.5
    monotone_ok = not rises
    ok = descent_ok and monotone_ok and elapsed < 600
    detail = (f"({elapsed:.0f} s) loss_total step 200 / mean(steps 1-10) = {ratio:.3f} (need <= 0.5: "
              f"{'ok' if descent_ok else 'no'}); loss_sarc 20-step window means "
              f"{[round(w, 4) for w in windows]}; monotone: {'ok' if monotone_ok else 'no'}")
    if rises:
        detail += "; rises after window(s) " + ", ".join(f"{i} ({a:.4f} -> {b:.4f})" for i, a, b in rises)
    report(capsys, 6, ok, detail)
    assert ok


# 7 -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def ablation_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("ablation_corpus")
    build_corpus(SceneSpec(), ABLATION_CORPUS, out, seed=7)
    return load_corpus(out / "manifest.jsonl")


@pytest.mark.slow
def test_criterion_7_ablation_ordering(capsys, ablation_corpus, tmp_path):
    t0 = time.perf_counter()
    table = {}
    for seed in ABLATION_SEEDS:
        base = TrainConfig(
            steps=ABLATION_STEPS,
            seed=seed,
            model=ModelConfig(seed=seed),
            probe=ProbeConfig(seed=seed),
            checkpoint=tmp_path / f"s{seed}.smae",
            metrics=tmp_path / f"s{seed}.csv",
            timing=False,
        )
        variants = {
            "clean": base.with_(policy=NoisePolicy(apply_probability=0.0), lam=0.0),
            "sare": base.with_(lam=0.0),
            "sarc": base,
        }
        acc = {"random": linear_probe(build_params(base), base.model.encoder, ablation_corpus, base.probe).accuracy}
        for name, cfg in variants.items():
            params = pretrain(cfg, ablation_corpus).params
            acc[name] = linear_probe(params, cfg.model.encoder, ablation_corpus, cfg.probe).accuracy
        table[seed] = acc
        with capsys.disabled():
            print(f"\n    seed {seed}: " + ", ".join(f"{k} {v:.3f}" for k, v in acc.items()))
    elapsed = time.perf_counter() - t0
    first_link = all(a["random"] < a["clean"] for a in table.values())
    inversions = sum((a["clean"] > a["sare"]) + (a["sare"] > a["sarc"]) for a in table.values())
    margins = [a["sarc"] - a["random"] for a in table.values()]
    end_ok = all(m >= 0.10 for m in margins)
    ok = first_link and inversions <= 1 and end_ok and elapsed < 1800
    report(capsys, 7, ok, f"({elapsed / 60:.1f} min) random < clean on all seeds: {first_link}; "
                          f"middle inversions {inversions} (<= 1 allowed); SARE+SARC minus random "
                          f"{[round(m, 3) for m in margins]} (need >= 0.10 each)")
    assert ok


# 8 -------------------------------------------------------------------------

def test_criterion_8_reproducibility(capsys, corpus512, tmp_path):
    runs = []
    for tag in ("a", "b"):
        cfg = TrainConfig(steps=30, seed=3, checkpoint=tmp_path / tag / "c.smae", metrics=tmp_path / tag / "m.csv",
                          timing=False)
        pretrain(cfg, corpus512)
        runs.append((cfg.metrics.read_bytes(), cfg.checkpoint.read_bytes()))
    same_metrics = runs[0][0] == runs[1][0]
    same_ckpt = runs[0][1] == runs[1][1]
    rng = np.random.default_rng(8)
    simg_ok = all(
        decode_simg(encode_simg(img)).tobytes() == img.tobytes()
        for img in (rng.uniform(size=(7, 5, c)).astype(np.float32) for c in (1, 3, 1, 3))
    )
    tensors = decode_tensors(runs[0][1])
    ckpt_ok = encode_tensors(tensors) == runs[0][1]
    params, cfg_loaded, _ = load_checkpoint(tmp_path / "a" / "c.smae")
    ckpt_ok &= all(params[k].data.tobytes() == v.tobytes() for k, v in tensors.items() if k in params)
    ok = same_metrics and same_ckpt and simg_ok and ckpt_ok
    report(capsys, 8, ok, f"metrics identical: {same_metrics}, checkpoint identical: {same_ckpt}, "
                          f"SIMG round trip: {simg_ok}, checkpoint round trip: {ckpt_ok}")
    assert ok


# 9 -------------------------------------------------------------------------

def test_criterion_9_frozen_anchor(capsys, corpus512, tmp_path):
    cfg = TrainConfig(steps=25, seed=9, checkpoint=tmp_path / "c.smae", metrics=tmp_path / "m.csv", timing=False)
    params = build_params(cfg)
    before = {k: t.data.tobytes() for k, t in params.items() if k.startswith("anchor.")}
    pretrain(cfg, corpus512, params)
    anchor_ok = all(params[k].data.tobytes() == v for k, v in before.items())
    saved, _, _ = load_checkpoint(cfg.checkpoint)
    anchor_ok &= all(saved[k].data.tobytes() == v for k, v in before.items())

    idx = np.flatnonzero(~corpus512.paired)
    unpaired = Corpus(corpus512.sar[idx], [None] * len(idx), corpus512.labels[idx], corpus512.ids[idx])
    cfg_u = cfg.with_(steps=10, metrics=tmp_path / "u.csv", checkpoint=tmp_path / "u.smae")
    pretrain(cfg_u, unpaired)
    rows = read_metrics(cfg_u.metrics)
    rows_ok = all(r["loss_sarc"] == "" and r["loss_total"] == r["loss_sare"] for r in rows)
    ok = anchor_ok and rows_ok
    report(capsys, 9, ok, f"{len(before)} anchor tensors bitwise unchanged after 25 steps: {anchor_ok}; "
                          f"{len(rows)} unpaired rows with empty sarc and total == sare: {rows_ok}")
    assert ok
