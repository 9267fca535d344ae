import io

import numpy as np
import pytest

from conftest import TINY
from restorevar import checkpoint as ckpt_io
from restorevar.autodiff.io import FormatError
from restorevar.autodiff.ops import ConfigError
from restorevar.cli import main
from restorevar.codec import CodecConfig, ScaleSchedule
from restorevar.config import RunConfig, load_config, parse_lines
from restorevar.refiner import LRTConfig
from restorevar.selftest import CHECKS, run_selftest
from restorevar.transformer import TransformerConfig


def test_config_defaults_and_parsing(tmp_path):
    cfg = RunConfig()
    assert (cfg.w_l1, cfg.w_ssim, cfg.w_percep, cfg.w_adv) == (2.0, 0.4, 0.2, 0.01)
    assert cfg.codec_lr == 1e-3 and cfg.var_lr == 5e-4 and cfg.lrt_lr == 1e-4 and cfg.weight_decay == 0.01
    p = tmp_path / "run.cfg"
    p.write_text("# comment\nseed = 3  # trailing\n\ndepth=2\nschedule=1x1,2x2,4x4,8x8\n")
    cfg = load_config(p, {"dim": "64"})
    assert (cfg.seed, cfg.depth, cfg.dim) == (3, 2, 64)
    assert load_config(None, {"seed": 9}).seed == 9
    text_cfg = parse_lines(cfg.to_text().splitlines())
    assert text_cfg["dim"] == 64


@pytest.mark.parametrize("text", ["bogus=1", "depth=abc", "novalue", "sampling=beam", "image_size=48"])
def test_config_errors(tmp_path, text):
    p = tmp_path / "bad.cfg"
    p.write_text(text + "\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_config_component_conversions():
    cfg = RunConfig()
    assert cfg.transformer_config() == TransformerConfig()
    assert cfg.codec_config() == CodecConfig()
    assert cfg.lrt_config().z_dim == cfg.dim and cfg.lrt_config(False).use_z is False


def test_checkpoint_roundtrip_and_config_echo(tmp_path):
    from restorevar.transformer import ScaleAR
    cfg = TransformerConfig(depth=1, dim=32, heads=2, vocab=16)
    model = ScaleAR(cfg, seed=0)
    path = tmp_path / "m.rva"
    ckpt_io.save(path, "transformer", model, cfg, step=12, seed=4)
    raw = path.read_bytes()
    ck = ckpt_io.load(path, "transformer")
    assert (ck.step, ck.seed, ck.magic) == (12, 4, b"RVA1")
    assert ck.to_bytes() == raw
    assert ckpt_io.parse_dataclass(TransformerConfig, ck.config) == cfg
    lc = LRTConfig(grid=(4, 4), use_z=False)
    assert ckpt_io.parse_dataclass(LRTConfig, {k: ckpt_io.format_value(v) for k, v in vars(lc).items()}) == lc
    with pytest.raises(FormatError):
        ckpt_io.load(path, "codec")
    with pytest.raises(FormatError):
        ckpt_io.read_checkpoint(io.BytesIO(raw[:-3]))
    with pytest.raises(FileNotFoundError):
        ckpt_io.load(tmp_path / "missing.rva", "transformer")


def test_selftest_suite(capsys):
    assert len(CHECKS) >= 12
    assert run_selftest(0)
    first = capsys.readouterr().out
    run_selftest(0)
    assert capsys.readouterr().out == first
    assert main(["selftest"]) == 0


def test_cli_exit_codes(tmp_path, capsys):
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["eval", "--depth", "x"]) == 2
    assert main(["eval", "--data_dir", str(tmp_path / "none"), "--out_dir", str(tmp_path)]) == 3
    err = capsys.readouterr().err.strip().splitlines()
    assert err[-1].startswith("runtime error:")
    assert main(["restore", "--input", str(tmp_path / "x.ppm"), "--output", str(tmp_path / "y.ppm")]) == 3


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    flags = TINY + ["--data_dir", str(root / "data"), "--out_dir", str(root / "ckpt")]
    for cmd in ("gen-data", "train-codec", "train-var", "train-lrt", "finetune-decoder"):
        assert main([cmd] + flags) == 0, cmd
    return root, flags


def test_stage_order_enforced(tmp_path):
    flags = TINY + ["--data_dir", str(tmp_path / "data"), "--out_dir", str(tmp_path / "ckpt")]
    assert main(["gen-data"] + flags) == 0
    assert main(["train-var"] + flags) == 3
    assert main(["train-lrt"] + flags) == 3


def test_tiny_pipeline_restore_and_eval(tiny_run, capsys):
    root, flags = tiny_run
    for name in ("codec.rvc", "var.rva", "lrt.rvl", "decoder.rvd"):
        assert (root / "ckpt" / name).exists()
    src = sorted((root / "data" / "test").glob("*_blur.ppm"))[0]
    capsys.readouterr()
    outs = []
    for i in range(2):
        out = root / f"restored{i}.ppm"
        assert main(["restore", "--input", str(src), "--output", str(out)] + flags) == 0
        outs.append(out.read_bytes())
        steps = [l for l in capsys.readouterr().err.splitlines() if l.startswith("ar step")]
        assert steps == ["ar step 1/4 scale 1x1", "ar step 2/4 scale 2x2", "ar step 3/4 scale 4x4",
                         "ar step 4/4 scale 8x8"]
    assert outs[0] == outs[1]
    report = root / "report.csv"
    assert main(["eval", "--report", str(report)] + flags) == 0
    lines = report.read_text().splitlines()
    assert lines[0] == "kind,count,psnr,ssim" and len(lines) == 6
    assert main(["ablate", "--report", str(root / "abl.csv")] + flags) == 0
    abl = (root / "abl.csv").read_text().splitlines()
    assert [l.split(",")[0] for l in abl] == ["variant", "none", "lrt_noz", "lrt"]


def test_checkpoints_roundtrip_byte_exact(tiny_run):
    root, _ = tiny_run
    for name, kind in (("codec.rvc", "codec"), ("var.rva", "transformer"), ("lrt.rvl", "refiner"),
                       ("decoder.rvd", "decoder")):
        raw = (root / "ckpt" / name).read_bytes()
        assert ckpt_io.load(root / "ckpt" / name, kind).to_bytes() == raw


def test_restore_reports_nonfinite_as_runtime_error(tiny_run, capsys):
    root, flags = tiny_run
    ck = ckpt_io.load(root / "ckpt" / "var.rva", "transformer")
    bad = root / "bad"
    bad.mkdir()
    for name in ("codec.rvc", "lrt.rvl", "decoder.rvd"):
        (bad / name).write_bytes((root / "ckpt" / name).read_bytes())
    ck.tensors["blocks.0.mlp.fc1.weight"] = np.full_like(ck.tensors["blocks.0.mlp.fc1.weight"], np.nan)
    (bad / "var.rva").write_bytes(ck.to_bytes())
    src = sorted((root / "data" / "test").glob("*.ppm"))[0]
    flags = [f if f != str(root / "ckpt") else str(bad) for f in flags]
    assert main(["restore", "--input", str(src), "--output", str(root / "nan.ppm")] + flags) == 3
    assert "NonFiniteError" in capsys.readouterr().err
