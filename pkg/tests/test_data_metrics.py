import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from restorevar.autodiff.ops import ShapeError
from restorevar.data import (KINDS, TASK_STANDINS, DegradationError, DegradationSpec, degrade, generate_clean,
                             load_split, make_pairs, read_manifest, read_ppm, write_dataset, write_ppm)
from restorevar.metrics import evaluate, metric_table, psnr, ssim, table_csv
from restorevar.oracles import psnr64


def test_generate_clean_deterministic_and_in_range():
    a = generate_clean(8, 32, 5)
    b = generate_clean(8, 32, 5)
    assert a.tobytes() == b.tobytes()
    assert a.shape == (8, 3, 32, 32) and a.min() >= 0 and a.max() <= 1
    assert not np.array_equal(a, generate_clean(8, 32, 6))
    assert generate_clean(2, 64, 0).shape == (2, 3, 64, 64)
    with pytest.raises(ValueError):
        generate_clean(1, 48, 0)


def test_corpus_mean_luminance():
    x = generate_clean(256, 32, 0)
    lum = (0.299 * x[:, 0] + 0.587 * x[:, 1] + 0.114 * x[:, 2]).mean()
    assert 0.3 <= lum <= 0.7


def test_degradation_identities():
    x = generate_clean(1, 32, 1)[0]
    assert np.array_equal(degrade(x, DegradationSpec("noise", {"sigma": 0.0}, 3)), x)
    assert np.array_equal(degrade(x, DegradationSpec("darken", {"gamma": 1.0})), x)
    assert np.array_equal(degrade(x, DegradationSpec("blur", {"ksize": 1})), x)
    black = np.zeros((3, 8, 8), np.float32)
    assert np.all(degrade(black, DegradationSpec("haze", {"t": 0.5, "A": 1.0})) == 0.5)


def test_degradation_errors():
    with pytest.raises(DegradationError):
        DegradationSpec("rain", {})
    with pytest.raises(DegradationError):
        DegradationSpec("noise", {"sigma": 2.0})
    with pytest.raises(DegradationError):
        DegradationSpec("blur", {"ksize": 4})
    assert set(TASK_STANDINS) == set(KINDS)


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(KINDS), st.integers(0, 2**31 - 1))
def test_degradations_deterministic_and_clamped(kind, seed):
    from restorevar.data import sample_spec
    spec = sample_spec(kind, np.random.default_rng(seed))
    x = generate_clean(1, 32, seed % 1000)[0]
    a, b = degrade(x, spec), degrade(x, spec)
    assert a.tobytes() == b.tobytes() and a.min() >= 0 and a.max() <= 1
    assert DegradationSpec.from_strings(kind, spec.param_string(), str(spec.seed)) == spec


def test_psnr_cases():
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(3, 16, 16))
    assert psnr(x, x) == 99.0
    y = x + 0.1
    assert psnr(x, y) == pytest.approx(20.0, abs=1e-9)
    z = rng.uniform(size=x.shape)
    assert abs(psnr(x, z) - psnr64(x, z)) <= 1e-4
    assert psnr(x, z) == psnr(z, x)
    with pytest.raises(ShapeError):
        psnr(x, x[:2])


def test_ssim_symmetry():
    rng = np.random.default_rng(1)
    x, y = rng.uniform(size=(2, 3, 16, 16)).astype(np.float32)
    assert abs(ssim(x, y) - ssim(y, x)) <= 1e-7


def test_ppm_roundtrip(tmp_path):
    x = generate_clean(1, 32, 0)[0]
    write_ppm(tmp_path / "a.ppm", x)
    back = read_ppm(tmp_path / "a.ppm")
    assert np.abs(back - x).max() <= 0.5 / 255 + 1e-6
    write_ppm(tmp_path / "b.ppm", back)
    assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()


def test_dataset_manifest_roundtrip(tmp_path):
    splits = {"train": make_pairs(8, 32, 0), "test": make_pairs(4, 32, 99)}
    path = write_dataset(tmp_path / "d", splits)
    entries = read_manifest(path)
    assert len(entries) == 12
    line = path.read_text().splitlines()[0].split("\t")
    assert len(line) == 6 and line[0] == "train" and line[3] == "noise"
    test = load_split(path, "test")
    assert test.kinds == ["noise", "blur", "darken", "haze"]
    assert np.abs(test.clean - splits["test"].clean).max() <= 0.5 / 255 + 1e-6


def test_manifest_errors(tmp_path):
    p = tmp_path / "m.tsv"
    p.write_text("train\ta.ppm\tb.ppm\tnoise\tsigma=0.1\t0\n")
    with pytest.raises(FileNotFoundError):
        read_manifest(p)
    (tmp_path / "a.ppm").write_bytes(b"")
    (tmp_path / "b.ppm").write_bytes(b"")
    p.write_text("train\ta.ppm\tb.ppm\tnoise\tsigma=0.1\t0\ntest\ta.ppm\tb.ppm\tnoise\tsigma=0.1\t0\n")
    with pytest.raises(ValueError, match="both"):
        read_manifest(p)


def test_evaluate_identity_model(tmp_path):
    pairs = make_pairs(8, 32, 0)
    rows = evaluate(lambda x: x, pairs.clean, pairs.clean, pairs.kinds, tmp_path / "r.csv", order=KINDS)
    assert len(rows) == len(KINDS) + 1 and rows[-1]["kind"] == "mean"
    assert all(r["psnr"] == 99.0 and r["ssim"] == 1.0 for r in rows)
    text = (tmp_path / "r.csv").read_text()
    assert text.splitlines()[0] == "kind,count,psnr,ssim"
    assert text == table_csv(rows)


def test_metric_table_regeneration_is_byte_identical():
    pairs = make_pairs(8, 32, 1)
    a = table_csv(metric_table(pairs.degraded, pairs.clean, pairs.kinds, KINDS))
    b = table_csv(metric_table(pairs.degraded, pairs.clean, pairs.kinds, KINDS))
    assert a == b
    rows = metric_table(pairs.degraded, pairs.clean, pairs.kinds, KINDS)
    assert [r["kind"] for r in rows] == list(KINDS) + ["mean"]
    assert rows[-1]["psnr"] < 99
