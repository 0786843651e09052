"""Finite-difference verification of every differentiable primitive and of the full pretraining loss.

Each case builds a scalar function of one tensor and a random evaluation
point; the function projects the op output onto a fixed random weight so no
gradient coordinate is structurally zero.  Ops are looked up on the
``autodiff`` module at call time, which lets tests patch in a faulty adjoint
and confirm the suite catches it.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .masking import MaskPlan
from .model import DecoderConfig, EncoderConfig, ModelConfig, init_params
from .objectives import combine, sare_per_sample, sarc_per_sample

TOLERANCE = 1e-3
STEP = 1e-5


@dataclass
class CaseResult:
    name: str
    worst: float
    coordinate: tuple = ()
    instances: int = 0

    @property
    def passed(self) -> bool:
        return self.worst < TOLERANCE


@dataclass
class SuiteReport:
    results: list[CaseResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def lines(self) -> list[str]:
        out = []
        for r in self.results:
            status = "PASS" if r.passed else "FAIL"
            where = "" if r.passed else f" at coordinate {r.coordinate}"
            out.append(f"{status} {r.name:<24} worst rel. err {r.worst:.3e} over {r.instances} instance(s){where}")
        return out


def _proj(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.uniform(0.5, 1.5, shape) * rng.choice([-1.0, 1.0], shape)


def _weighted(out: ad.Tensor, w: np.ndarray) -> ad.Tensor:
    return (out * w).sum()


# -- primitive cases ---------------------------------------------------------
# each builder returns a list of (label, f, point)

def _matmul(rng):
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    w = _proj(rng, (5, 3))
    return [
        ("a", lambda x: _weighted(ad.matmul(x, ad.Tensor(b)), w), a),
        ("b", lambda x: _weighted(ad.matmul(ad.Tensor(a), x), w), b),
    ]


def _matmul_batched(rng):
    a, b = rng.normal(size=(2, 3, 4, 5)), rng.normal(size=(5, 2))
    w = _proj(rng, (2, 3, 4, 2))
    return [
        ("a", lambda x: _weighted(ad.matmul(x, ad.Tensor(b)), w), a),
        ("b", lambda x: _weighted(ad.matmul(ad.Tensor(a), x), w), b),
    ]


def _layer_norm(rng):
    x, g, b = rng.normal(size=(3, 4, 6)), rng.normal(size=6), rng.normal(size=6)
    w = _proj(rng, (3, 4, 6))
    return [
        ("x", lambda t: _weighted(ad.layer_norm(t, ad.Tensor(g), ad.Tensor(b), 1e-5), w), x),
        ("gain", lambda t: _weighted(ad.layer_norm(ad.Tensor(x), t, ad.Tensor(b), 1e-5), w), g),
        ("bias", lambda t: _weighted(ad.layer_norm(ad.Tensor(x), ad.Tensor(g), t, 1e-5), w), b),
    ]


def _softmax(rng):
    x, w = rng.normal(size=(4, 5)) * 2.0, _proj(rng, (4, 5))
    return [("x", lambda t: _weighted(ad.softmax_rows(t), w), x)]


def _log_softmax(rng):
    x, w = rng.normal(size=(4, 5)) * 2.0, _proj(rng, (4, 5))
    return [("x", lambda t: _weighted(ad.log_softmax_rows(t), w), x)]


def _gelu(rng):
    x = np.concatenate([[-2.0, -0.5, 0.5, 2.0], rng.normal(size=6) * 2.0])
    w = _proj(rng, x.shape)
    return [("x", lambda t: _weighted(ad.gelu(t), w), x)]


def _elementwise(rng):
    x = rng.uniform(0.5, 2.0, size=(3, 4))
    c = rng.normal(size=(4,))
    w = _proj(rng, (3, 4))
    return [
        ("add_broadcast", lambda t: _weighted(t + ad.Tensor(c), w), x),
        ("add_broadcast_rhs", lambda t: _weighted(ad.Tensor(x) + t, w), c),
        ("sub", lambda t: _weighted(ad.Tensor(c) - t, w), x),
        ("mul", lambda t: _weighted(t * ad.Tensor(c) * t, w), x),
        ("div", lambda t: _weighted(ad.Tensor(c) / t, w), x),
        ("pow", lambda t: _weighted(t**3, w), x),
        ("exp", lambda t: _weighted(ad.exp(t), w), x),
        ("log", lambda t: _weighted(ad.log(t), w), x),
        ("sqrt", lambda t: _weighted(ad.sqrt(t), w), x),
        ("clamp_min", lambda t: _weighted(ad.clamp_min(t, 1.0), w), np.where(np.abs(x - 1.0) < 0.05, x + 0.1, x)),
    ]


def _shape_ops(rng):
    x = rng.normal(size=(2, 3, 4))
    idx = rng.integers(0, 3, size=(2, 5))
    return [
        ("sum_axis", lambda t: _weighted(t.sum(axis=1), _proj(np.random.default_rng(1), (2, 4))), x),
        ("mean_keepdims", lambda t: _weighted(t.mean(axis=-1, keepdims=True), _proj(np.random.default_rng(2), (2, 3, 1))), x),
        ("reshape_transpose", lambda t: _weighted(t.reshape(6, 4).transpose(1, 0), _proj(np.random.default_rng(3), (4, 6))), x),
        ("getitem", lambda t: _weighted(t[:, 1:, ::2], _proj(np.random.default_rng(4), (2, 2, 2))), x),
        ("gather_rows", lambda t: _weighted(ad.gather_rows(t, idx), _proj(np.random.default_rng(5), (2, 5, 4))), x),
        ("concat", lambda t: _weighted(ad.concat([t, t * 2.0], axis=1), _proj(np.random.default_rng(6), (2, 6, 4))), x),
        ("broadcast_to", lambda t: _weighted(ad.broadcast_to(t[:, :1, :], (2, 3, 4)), _proj(np.random.default_rng(7), (2, 3, 4))), x),
    ]


PRIMITIVES: dict[str, Callable] = {
    "matmul": _matmul,
    "matmul_batched": _matmul_batched,
    "layer_norm": _layer_norm,
    "softmax_rows": _softmax,
    "log_softmax_rows": _log_softmax,
    "gelu": _gelu,
    "elementwise": _elementwise,
    "shape_ops": _shape_ops,
}


FAULTABLE = ("matmul", "layer_norm", "softmax_rows", "log_softmax_rows", "gelu", "exp", "log", "sqrt",
             "clamp_min", "gather_rows", "concat", "broadcast_to")


@contextlib.contextmanager
def inject_fault(op: str):
    """Temporarily negate the adjoint of ``autodiff.<op>`` (forward unchanged)."""
    if op not in FAULTABLE:
        raise KeyError(f"cannot inject a fault into {op!r}; choose from {', '.join(FAULTABLE)}")
    original = getattr(ad, op)

    def faulty(*args, **kwargs):
        return ad.flip_adjoint(original(*args, **kwargs))

    setattr(ad, op, faulty)
    try:
        yield
    finally:
        setattr(ad, op, original)


# -- end-to-end toy graph ------------------------------------------------------

TOY = ModelConfig(
    EncoderConfig(embed_dim=8, depth=2, heads=2, mlp_ratio=2, patch_size=2, image_size=4),
    DecoderConfig(embed_dim=8, depth=1, heads=2, mlp_ratio=2),
    seed=3,
    anchor_seed=4,
)


def toy_problem(seed: int = 0, lam: float = 0.1):
    """A 4-patch, 2-sample pretraining graph (one paired, one unpaired sample).

    Returns ``(params, loss_fn)`` where ``loss_fn(params)`` evaluates the
    batch loss (mean of per-sample reconstruction + lam * alignment totals).
    """
    rng = np.random.default_rng(seed)
    with ad.precision(np.float64):
        params = init_params(TOY)
    n, p = TOY.encoder.num_patches, TOY.encoder.patch_dim
    clean = rng.uniform(0.1, 1.0, size=(2, n, p))
    noisy = clean * rng.gamma(2.0, 0.5, size=clean.shape)
    optical = clean[:1]
    plans = [MaskPlan(np.array([0, 2]), np.array([1, 3]), 0.5), MaskPlan(np.array([1, 2]), np.array([0, 3]), 0.5)]
    vis = np.stack([pl.visible for pl in plans])
    msk = np.stack([pl.masked for pl in plans])

    def loss_fn(prm):
        from .model import anchor_forward, decode_full, encode_visible

        enc = encode_visible(prm, TOY.encoder, np.take_along_axis(noisy, vis[..., None], axis=1), vis)
        pred = decode_full(prm, TOY, enc, plans)
        sare = sare_per_sample(pred, clean, msk)
        anchors = anchor_forward(prm, TOY.encoder, optical).patches.data
        sarc = sarc_per_sample(enc.patches[np.array([0])], anchors, vis[:1])
        return combine(sare.sum(), sarc.sum(), lam) * 0.5

    return params, loss_fn


def check_model(params, loss_fn, names=None, step: float = STEP) -> list[CaseResult]:
    out = []
    for name, t in params.trainable():
        if names is not None and name not in names:
            continue

        def f(x, name=name):
            swapped = type(params)(params)
            swapped[name] = x
            return loss_fn(swapped)

        errors, _, _ = ad.gradient_errors(f, t.data, step)
        worst = int(np.argmax(errors))
        out.append(CaseResult(f"toy:{name}", float(errors.max()), np.unravel_index(worst, errors.shape), 1))
    return out


def run_suite(instances: int = 10, seed: int = 0, include_model: bool = True) -> SuiteReport:
    report = SuiteReport()
    for op, builder in PRIMITIVES.items():
        worst: dict[str, CaseResult] = {}
        for k in range(instances):
            rng = np.random.default_rng([seed, k, len(op)])
            for label, f, point in builder(rng):
                errors, _, _ = ad.gradient_errors(f, point, STEP)
                name = f"{op}:{label}"
                cur = worst.setdefault(name, CaseResult(name, 0.0, (), 0))
                cur.instances += 1
                if errors.max() >= cur.worst:
                    cur.worst = float(errors.max())
                    cur.coordinate = tuple(int(i) for i in np.unravel_index(int(np.argmax(errors)), errors.shape))
        report.results.extend(worst.values())
    if include_model:
        params, loss_fn = toy_problem(seed)
        model_results = check_model(params, loss_fn)
        top = max(model_results, key=lambda r: r.worst)
        report.results.append(
            CaseResult("end_to_end_loss", top.worst, (top.name, *top.coordinate), len(model_results))
        )
    return report
