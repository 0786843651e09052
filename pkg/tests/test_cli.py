import json

import numpy as np
import pytest
from PIL import Image

from sarmae.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OK, main
from sarmae.image_io import read_image, write_image

CONFIG = """\
[data]
manifest = {manifest}
[train]
steps = 3
batch_size = 4
[model]
embed_dim = 16
depth = 1
heads = 2
mlp_ratio = 2
image_size = 16
decoder_embed_dim = 8
decoder_depth = 1
decoder_heads = 2
decoder_mlp_ratio = 2
[probe]
steps = 20
[output]
checkpoint = out/ckpt.smae
metrics = out/metrics.csv
timing = off
"""


@pytest.fixture
def workdir(tmp_path, tiny_corpus_dir):
    (tmp_path / "run.ini").write_text(CONFIG.format(manifest=tiny_corpus_dir / "manifest.jsonl"))
    return tmp_path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_gen_corpus(tmp_path, capsys):
    code, out, _ = run(capsys, "gen-corpus", "--count", 12, "--out", tmp_path / "c", "--seed", 2,
                       "--paired-fraction", 1.0, "--image-size", 16)
    assert code == EXIT_OK
    info = json.loads(out)
    assert info["count"] == 12 and info["paired"] == 12
    assert len(list((tmp_path / "c").glob("*_opt.simg"))) == 12


def test_pretrain_probe_reconstruct(workdir, tiny_corpus_dir, capsys):
    code, out, _ = run(capsys, "pretrain", "--config", workdir / "run.ini")
    assert code == EXIT_OK and json.loads(out)["steps"] == 3
    ckpt = workdir / "out" / "ckpt.smae"
    assert ckpt.is_file()
    assert (workdir / "out" / "metrics.csv").read_text().startswith("step,loss_total,loss_sare,loss_sarc,lr,frac_aug,wall_ms\n")

    code, out, _ = run(capsys, "probe", "--ckpt", ckpt, "--config", workdir / "run.ini", "--out", workdir / "head.smae")
    assert code == EXIT_OK and 0.0 <= json.loads(out)["accuracy"] <= 1.0
    assert (workdir / "head.smae").is_file()

    img = tiny_corpus_dir / "000000_sar.simg"
    code, _, _ = run(capsys, "reconstruct", "--ckpt", ckpt, "--in", img, "--seed", 5, "--out", workdir / "r1")
    assert code == EXIT_OK
    run(capsys, "reconstruct", "--ckpt", ckpt, "--in", img, "--seed", 5, "--out", workdir / "r2")
    for name in ("triptych.png", "corrupted.png", "reconstruction.png", "target.png", "attention.png"):
        assert (workdir / "r1" / name).read_bytes() == (workdir / "r2" / name).read_bytes()
    with Image.open(workdir / "r1" / "reconstruction.png") as im:
        assert im.size == (16, 16)
    with Image.open(workdir / "r1" / "triptych.png") as im:
        assert im.size == (3 * 16 + 4, 16)
    with Image.open(workdir / "r1" / "attention.png") as im:
        assert im.mode == "RGB" and im.size == (16, 16)


def test_reconstruct_size_mismatch_is_config_error(workdir, tmp_path, capsys):
    run(capsys, "pretrain", "--config", workdir / "run.ini")
    write_image(tmp_path / "big.simg", np.zeros((32, 32), np.float32))
    code, _, err = run(capsys, "reconstruct", "--ckpt", workdir / "out" / "ckpt.smae", "--in", tmp_path / "big.simg")
    assert code == EXIT_CONFIG and "expects" in err


def test_noise_demo_writes_record(tmp_path, capsys):
    write_image(tmp_path / "in.simg", np.full((8, 8), 0.5, np.float32))
    code, _, _ = run(capsys, "noise-demo", "--family", "gamma", "--param", 2, "--in", tmp_path / "in.simg",
                     "--out", tmp_path / "out.simg", "--seed", 4)
    assert code == EXIT_OK
    rec = json.loads((tmp_path / "out.json").read_text())
    assert rec["family"] == "gamma" and rec["parameters"] == {"L_syn": 2} and rec["applied"]
    first = read_image(tmp_path / "out.simg")
    run(capsys, "noise-demo", "--family", "gamma", "--param", 2, "--in", tmp_path / "in.simg",
        "--out", tmp_path / "again.simg", "--seed", 4)
    assert read_image(tmp_path / "again.simg").tobytes() == first.tobytes()
    code, _, _ = run(capsys, "noise-demo", "--family", "gaussian", "--param", 0.3, "--in", tmp_path / "in.simg",
                     "--out", tmp_path / "g.png")
    assert code == EXIT_OK and json.loads((tmp_path / "g.json").read_text())["clipped"] is True


def test_grad_check_command(capsys):
    code, out, _ = run(capsys, "grad-check", "--instances", 1, "--skip-model")
    assert code == EXIT_OK and "checks passed" in out
    code, out, _ = run(capsys, "grad-check", "--instances", 1, "--skip-model", "--inject-fault", "gelu")
    assert code == EXIT_NUMERIC
    assert any(line.startswith("FAIL gelu") and "coordinate" in line for line in out.splitlines())


def test_exit_codes(tmp_path, workdir, capsys):
    (tmp_path / "bad.ini").write_text("[train]\nsteps = lots\n")
    assert run(capsys, "pretrain", "--config", tmp_path / "bad.ini")[0] == EXIT_CONFIG
    assert run(capsys, "pretrain", "--config", tmp_path / "none.ini")[0] == EXIT_CONFIG
    assert run(capsys, "probe", "--ckpt", tmp_path / "none.smae", "--config", workdir / "run.ini")[0] == EXIT_IO
    (tmp_path / "junk.smae").write_bytes(b"SMAE\x01")
    assert run(capsys, "probe", "--ckpt", tmp_path / "junk.smae", "--config", workdir / "run.ini")[0] == EXIT_IO
    write_image(tmp_path / "in.simg", np.full((4, 4), 0.5, np.float32))
    code = run(capsys, "noise-demo", "--family", "gamma", "--param", 1.5, "--in", tmp_path / "in.simg",
               "--out", tmp_path / "o.simg")[0]
    assert code == EXIT_CONFIG


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_training_exits_numeric(tmp_path, tiny_corpus_dir, capsys):
    text = CONFIG.format(manifest=tiny_corpus_dir / "manifest.jsonl").replace("steps = 3", "steps = 3\nlr = 1e30")
    (tmp_path / "hot.ini").write_text(text)
    code, _, err = run(capsys, "pretrain", "--config", tmp_path / "hot.ini")
    assert code == EXIT_NUMERIC and "non-finite" in err
