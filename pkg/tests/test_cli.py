import csv

import numpy as np
import pytest

from gcmc import codec
from gcmc.cli import EXIT_ARGS, EXIT_CORRUPT, EXIT_HASH, EXIT_OK, UsageError, build_configs, main, read_config
from gcmc.codec import CodecModel, ModelConfig, save_checkpoint
from gcmc.data import make_dataset, synthetic_image
from gcmc.imageio import load_image, save_image, to_uint8


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    model = CodecModel(ModelConfig.desk(), seed=0)
    model.enc[-1].weight.data *= 25.0
    ck = save_checkpoint(root / "ck", model, {"lam": 32})
    img = root / "img.ppm"
    save_image(img, synthetic_image(np.random.default_rng(0)))
    return root, ck, img


def test_encode_decode_roundtrip(workspace, capsys):
    root, ck, img = workspace
    gcm = root / "img.gcm"
    assert main(["encode", str(img), "--model", str(ck), "--out", str(gcm)]) == EXIT_OK
    out = capsys.readouterr().out
    n = gcm.stat().st_size
    assert f"{n} bytes, {8 * n / 4096:.4f} bpp" in out
    assert gcm.read_bytes()[17] == codec.LAMBDA_PRESETS.index(32)
    dec = root / "dec.ppm"
    assert main(["decode", str(gcm), "--model", str(ck), "--out", str(dec), "--original", str(img)]) == EXIT_OK
    assert "MS-SSIM" in capsys.readouterr().out
    state = codec.load_state(ck)
    ref = codec.decompress(gcm.read_bytes(), state)
    np.testing.assert_array_equal(load_image(dec), to_uint8(ref).transpose(2, 0, 1) / 255.0)


def test_exit_codes(workspace, tmp_path):
    root, ck, img = workspace
    gcm = tmp_path / "a.gcm"
    assert main(["encode", str(img), "--model", str(ck), "--out", str(gcm)]) == EXIT_OK
    assert main(["encode", str(tmp_path / "nope.ppm"), "--model", str(ck)]) == EXIT_ARGS
    assert main(["encode", str(img), "--model", str(tmp_path / "nope")]) == EXIT_ARGS
    assert main(["encode", str(img), "--model", str(ck), "--lambda", "-1"]) == EXIT_ARGS
    assert main(["frobnicate"]) == EXIT_ARGS
    bad = tmp_path / "bad.gcm"
    bad.write_bytes(gcm.read_bytes()[:-1])
    assert main(["decode", str(bad), "--model", str(ck), "--out", str(tmp_path / "x.ppm")]) == EXIT_CORRUPT
    assert not (tmp_path / "x.ppm").exists()
    other = save_checkpoint(tmp_path / "other", CodecModel(ModelConfig.desk(), seed=7))
    assert main(["decode", str(gcm), "--model", str(other), "--out", str(tmp_path / "y.ppm")]) == EXIT_HASH


def test_inspect_header_and_coverage(workspace, tmp_path, capsys):
    root, ck, img = workspace
    gcm = tmp_path / "a.gcm"
    main(["encode", str(img), "--model", str(ck), "--out", str(gcm)])
    capsys.readouterr()
    cov = tmp_path / "cov.csv"
    assert main(["inspect", str(gcm), "--model", str(ck), "--out", str(cov), "--shape", "2,3,3"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "width      64" in out and "lambda     32" in out
    assert "0 non-causal leaks" in out
    with open(cov) as f:
        rows = list(csv.reader(f))
    assert len(rows) == 19 and len(rows[0]) == 19
    assert main(["inspect"]) == EXIT_ARGS
    assert main(["inspect", "--model", str(ck), "--shape", "2,3"]) == EXIT_ARGS


def test_eval_rows(workspace, tmp_path):
    root, ck, img = workspace
    make_dataset(tmp_path / "data", 2, 64, seed=3)
    ck2 = save_checkpoint(tmp_path / "ck2", CodecModel(ModelConfig.desk(), seed=1), {"lam": 384})
    out = tmp_path / "rd.csv"
    assert main(["eval", str(tmp_path / "data"), "--model", str(ck), "--model", str(ck2), "--out", str(out)]) == 0
    with open(out) as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 4
    assert sorted({float(r["lambda"]) for r in rows}) == [32.0, 384.0]
    assert main(["eval", str(tmp_path / "data"), "--model", str(ck), "--lambda", "2", "--lambda", "3"]) == EXIT_ARGS


def test_train_smoke(tmp_path, capsys):
    make_dataset(tmp_path / "data", 2, 64, seed=0)
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("batch = 1  # tiny\nmodel.N = 8\n")
    rc = main(["train", str(tmp_path / "data"), "--out", str(tmp_path / "run"), "--lambda", "2",
               "--steps", "2", "--config", str(cfg)])
    assert rc == EXIT_OK
    assert (tmp_path / "run" / "loss.csv").is_file() and (tmp_path / "run" / "rd.csv").is_file()
    assert codec.load_state(tmp_path / "run" / "checkpoint").model.cfg.N == 8
    assert "trained 2 steps" in capsys.readouterr().out


def test_train_missing_dataset(tmp_path):
    assert main(["train", str(tmp_path / "none"), "--out", str(tmp_path / "run")]) == EXIT_ARGS


def test_config_parsing(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("lam = 384\ndistortion = mse\ncontext.layers = 2\n\n# comment\n")
    assert read_config(p) == {"lam": 384, "distortion": "mse", "context.layers": 2}
    cfg = build_configs(read_config(p))
    assert cfg.lam == 384 and cfg.distortion == "mse" and cfg.model.context.layers == 2
    with pytest.raises(UsageError):
        build_configs({"bogus": 1})
    p.write_text("no equals sign\n")
    with pytest.raises(UsageError):
        read_config(p)
