"""Command-line entry point: ``sarmae <command> ...``.

Exit codes: 0 success, 2 configuration or usage error, 3 numeric failure
(non-finite loss, failed gradient check), 4 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import gradcheck
from .checkpoint import load_checkpoint
from .config import load_config
from .data import SceneSpec, build_corpus, load_corpus
from .errors import (
    ConfigError,
    ContractError,
    EstimatorError,
    EvaluationError,
    FormatError,
    ParameterError,
    ShapeError,
)
from .image_io import read_image, write_image
from .masking import as_image
from .rng import RandomSource
from .speckle import ADDITIVE, AugmentationRecord, NoiseFamily, NoisePolicy, apply_family

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("sarmae")


def _cmd_pretrain(args) -> int:
    from .train import pretrain

    cfg = load_config(args.config)
    if args.steps is not None:
        cfg = cfg.with_(steps=args.steps)
    result = pretrain(cfg)
    last = result.records[-1] if result.records else None
    summary = {"steps": cfg.steps, "checkpoint": str(result.checkpoint), "metrics": str(result.metrics)}
    if last is not None:
        summary.update(loss_total=last.loss_total, loss_sare=last.loss_sare, loss_sarc=last.loss_sarc)
    print(json.dumps(summary))
    return EXIT_OK


def _cmd_probe(args) -> int:
    from .train import linear_probe, save_probe_head

    cfg = load_config(args.config)
    if cfg.manifest is None:
        raise ConfigError("the probe needs [data] manifest")
    params, model_cfg, _ = load_checkpoint(args.ckpt)
    corpus = load_corpus(cfg.manifest)
    result = linear_probe(params, model_cfg.encoder, corpus, cfg.probe)
    if args.out:
        save_probe_head(args.out, params, model_cfg, result)
    print(json.dumps({
        "accuracy": result.accuracy,
        "train_accuracy": result.train_accuracy,
        "n_train": result.n_train,
        "n_test": result.n_test,
    }))
    return EXIT_OK


def _cmd_grad_check(args) -> int:
    if args.inject_fault:
        with gradcheck.inject_fault(args.inject_fault):
            report = gradcheck.run_suite(args.instances, args.seed, include_model=not args.skip_model)
    else:
        report = gradcheck.run_suite(args.instances, args.seed, include_model=not args.skip_model)
    for line in report.lines():
        print(line)
    failed = [r.name for r in report.results if not r.passed]
    print(f"{len(report.results) - len(failed)}/{len(report.results)} checks passed (tolerance {gradcheck.TOLERANCE:g})")
    return EXIT_OK if not failed else EXIT_NUMERIC


def heat_rgb(heat: np.ndarray) -> np.ndarray:
    """Map a [0, 1] field to a black-red-yellow-white ramp."""
    h = np.clip(np.asarray(heat, dtype=np.float32), 0.0, 1.0)
    if h.ndim == 3:
        h = h[..., 0]
    r = np.clip(3.0 * h, 0.0, 1.0)
    g = np.clip(3.0 * h - 1.0, 0.0, 1.0)
    b = np.clip(3.0 * h - 2.0, 0.0, 1.0)
    return np.stack([r, g, b], axis=-1)


def _cmd_reconstruct(args) -> int:
    from .train import reconstruct

    params, cfg, _ = load_checkpoint(args.ckpt)
    image = read_image(args.input)
    out = reconstruct(params, cfg, image, args.seed, args.mask_ratio)
    dest = Path(args.out)
    dest.mkdir(parents=True, exist_ok=True)
    panels = [out["corrupted"], out["reconstruction"], out["target"]]
    gap = np.ones((panels[0].shape[0], 2, panels[0].shape[2]), dtype=np.float32)
    triptych = np.concatenate([panels[0], gap, panels[1], gap, panels[2]], axis=1)
    write_image(dest / "triptych.png", triptych)
    for name in ("corrupted", "reconstruction", "prediction", "target"):
        write_image(dest / f"{name}.png", out[name])
    write_image(dest / "attention.png", heat_rgb(out["attention"]))
    with open(dest / "reconstruction.json", "w", encoding="utf-8") as f:
        json.dump({"seed": args.seed, "plan": out["plan"].to_dict(), "augmentation": out["record"].to_dict()},
                  f, sort_keys=True, indent=1)
    print(json.dumps({"out": str(dest), "visible": int(out["plan"].visible.size), "masked": int(out["plan"].masked.size)}))
    return EXIT_OK


def _cmd_gen_corpus(args) -> int:
    spec = SceneSpec(image_size=args.image_size, sar_looks=args.looks, paired_fraction=args.paired_fraction)
    manifest = build_corpus(spec, args.count, args.out, args.seed)
    paired = sum(r.paired for r in manifest)
    print(json.dumps({"count": len(manifest), "paired": paired, "manifest": str(Path(args.out) / "manifest.jsonl")}))
    return EXIT_OK


_PARAM_KEY = {
    NoiseFamily.GAMMA: "L_syn",
    NoiseFamily.RAYLEIGH: "sigma",
    NoiseFamily.GAUSSIAN: "sigma",
    NoiseFamily.UNIFORM: "alpha",
}


def _cmd_noise_demo(args) -> int:
    family = NoiseFamily(args.family)
    key = _PARAM_KEY[family]
    value = args.param
    if family is NoiseFamily.GAMMA:
        if value != int(value) or value < 1:
            raise ParameterError("gamma speckle needs an integer look count >= 1")
        value = int(value)
    elif value < 0:
        raise ParameterError(f"{key} must be nonnegative")
    params = {key: value}
    x = as_image(read_image(args.input))
    rng = RandomSource(args.seed)
    token = rng.state_token()
    y = apply_family(x, family, params, rng)
    clipped = family in ADDITIVE and not args.no_clip
    if clipped:
        y = np.clip(y, 0.0, 1.0)
    write_image(args.out, y)
    record = AugmentationRecord(True, family, params, clipped, token)
    sidecar = Path(args.out).with_suffix(".json")
    with open(sidecar, "w", encoding="utf-8") as f:
        json.dump(record.to_dict(), f, sort_keys=True, indent=1)
    print(json.dumps({"out": str(args.out), "record": str(sidecar)}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sarmae", description="Speckle-aware masked autoencoder pretraining toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="run pretraining from a config file")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--steps", type=int, help="override [train] steps")
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("probe", help="linear-probe a checkpoint's frozen encoder")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--out", type=Path, help="write encoder plus probe head to this checkpoint")
    p.set_defaults(func=_cmd_probe)

    p = sub.add_parser("grad-check", help="finite-difference check of every differentiable op")
    p.add_argument("--instances", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--skip-model", action="store_true", help="skip the end-to-end loss graph")
    p.add_argument("--inject-fault", metavar="OP", choices=gradcheck.FAULTABLE,
                   help="negate one op's adjoint to confirm the check catches it")
    p.set_defaults(func=_cmd_grad_check)

    p = sub.add_parser("reconstruct", help="export corrupted / reconstructed / clean panels and attention")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--in", dest="input", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mask-ratio", type=float, default=0.75)
    p.add_argument("--out", type=Path, default=Path("reconstruction"))
    p.set_defaults(func=_cmd_reconstruct)

    p = sub.add_parser("gen-corpus", help="generate a synthetic paired scene corpus")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--paired-fraction", type=float, default=0.5)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--looks", type=int, default=8)
    p.set_defaults(func=_cmd_gen_corpus)

    p = sub.add_parser("noise-demo", help="apply one noise family to an image")
    p.add_argument("--family", required=True, choices=[f.value for f in NoiseFamily])
    p.add_argument("--param", type=float, required=True, help="L_syn for gamma, sigma or alpha otherwise")
    p.add_argument("--in", dest="input", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-clip", action="store_true", help="keep additive noise outside [0, 1]")
    p.set_defaults(func=_cmd_noise_demo)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ParameterError, ShapeError, ContractError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EvaluationError, EstimatorError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
