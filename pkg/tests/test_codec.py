import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import perturbed_codec
from restorevar.autodiff.ops import ConfigError
from restorevar.codec import (TOY_SCHEDULE, Codec, CodecConfig, CodecTrainConfig, ScaleSchedule, codec_loss,
                              multiscale_encode, partial_reconstruct, quantize_nearest, read_index_maps,
                              train_codec, write_index_maps)
from restorevar.data import generate_clean
from restorevar.oracles import msvq_encode


def test_toy_schedule_arithmetic():
    assert TOY_SCHEDULE.K == 4
    assert TOY_SCHEDULE.token_counts == [1, 4, 16, 64]
    assert TOY_SCHEDULE.L == 85
    assert TOY_SCHEDULE.offsets() == [0, 1, 5, 21]
    assert ScaleSchedule.parse(str(TOY_SCHEDULE)) == TOY_SCHEDULE


@pytest.mark.parametrize("sizes", [((2, 2), (1, 1)), ((0, 1),), ()])
def test_schedule_validation(sizes):
    with pytest.raises(ConfigError):
        ScaleSchedule(sizes)


def test_codec_config_rejects_mismatched_schedule():
    with pytest.raises(ConfigError):
        CodecConfig(schedule=ScaleSchedule(((1, 1), (4, 4))))


def test_encode_continuous_shape_and_divisibility(codec):
    x = generate_clean(2, 32, 0)
    assert codec.encode_continuous(x).shape == (2, 16, 8, 8)
    assert codec.encode_continuous(x[0]).shape == (16, 8, 8)
    with pytest.raises(ConfigError):
        codec.encode_continuous(np.zeros((3, 30, 30), np.float32))


def test_phi_is_identity_at_init():
    codec = Codec(CodecConfig(), seed=3)
    x = np.random.default_rng(0).standard_normal((1, 16, 8, 8)).astype(np.float32)
    from restorevar.autodiff.tensor import Tensor
    for phi in codec.quantizer.phis:
        assert np.array_equal(phi(Tensor(x)).data, x)


def test_recurrences_against_oracle(codec):
    rng = np.random.default_rng(1)
    q = codec.quantizer
    for _ in range(5):
        f = rng.standard_normal((16, 8, 8)).astype(np.float32)
        maps, pyr = codec.multiscale_encode(f)
        ref_maps, ref_q, ref_r, ref_h = msvq_encode(f, q.schedule.sizes, q.codebook.weight.data,
                                                    [p.conv.weight.data for p in q.phis],
                                                    [p.conv.bias.data for p in q.phis])
        for k in range(q.schedule.K):
            assert np.array_equal(maps[k], ref_maps[k])
            np.testing.assert_allclose(pyr.h[k], ref_h[k], atol=1e-5)
            np.testing.assert_allclose(pyr.f_quant[k], ref_q[k], atol=1e-5)
            assert np.abs(pyr.f_res[k] - (f - pyr.f_quant[k])).max() <= 1e-6
        assert np.abs(pyr.f_quant[-1] - np.sum(pyr.h, axis=0)).max() <= 1e-6


def test_residual_energy_shrinks_with_data_init():
    codec = perturbed_codec(2)
    rng = np.random.default_rng(0)
    f = rng.standard_normal((4, 16, 8, 8)).astype(np.float32)
    from restorevar.codec import init_codebook_from_data
    init_codebook_from_data(codec.quantizer, f, rng)
    _, pyr = codec.multiscale_encode(f)
    energies = [float(np.mean(r ** 2)) for r in pyr.f_res]
    assert energies[-1] < float(np.mean(f ** 2))


def test_partial_reconstruct_matches_pyramid(codec):
    f = np.random.default_rng(2).standard_normal((2, 16, 8, 8)).astype(np.float32)
    maps, pyr = codec.multiscale_encode(f)
    for k in range(1, 5):
        np.testing.assert_allclose(codec.partial_reconstruct(maps, k), pyr.f_quant[k - 1], atol=1e-6)
    for bad in (0, 5):
        with pytest.raises(ValueError):
            codec.partial_reconstruct(maps, bad)


def test_functional_forms_agree(codec):
    q = codec.quantizer
    f = np.random.default_rng(3).standard_normal((16, 8, 8)).astype(np.float32)
    maps, pyr = multiscale_encode(f, q.schedule, q.codebook, q.phis)
    ref, _ = codec.multiscale_encode(f)
    assert all(np.array_equal(a, b) for a, b in zip(maps, ref))
    np.testing.assert_array_equal(partial_reconstruct(maps, 4, q.codebook, q.phis, q.schedule), pyr.f_quant[-1])


def test_quantize_ties_pick_lowest_index():
    table = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]], np.float32)
    feat = np.array([[[1.0]], [[0.0]]], np.float32)
    assert quantize_nearest(feat, table)[0, 0] == 0


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 6), st.integers(1, 6)), min_size=1, max_size=4), st.integers(0, 2**31 - 1))
def test_index_file_roundtrip(sizes, seed):
    rng = np.random.default_rng(seed)
    maps = [rng.integers(0, 512, s) for s in sizes]
    buf = io.BytesIO()
    write_index_maps(buf, maps)
    raw = buf.getvalue()
    back = read_index_maps(io.BytesIO(raw))
    assert all(np.array_equal(a, b) for a, b in zip(maps, back))
    buf2 = io.BytesIO()
    write_index_maps(buf2, back)
    assert buf2.getvalue() == raw


def test_decode_is_clamped(codec):
    out = codec.decode_image(10 * np.random.default_rng(0).standard_normal((16, 8, 8)).astype(np.float32))
    assert out.shape == (3, 32, 32) and out.min() >= 0 and out.max() <= 1


def test_codec_loss_has_gradients_everywhere():
    codec = Codec(CodecConfig(vocab=64), seed=0)
    total, parts, _, _ = codec_loss(codec, generate_clean(2, 32, 0))
    total.backward()
    missing = [n for n, p in codec.named_parameters() if p.grad is None]
    assert missing == []
    assert set(parts) == {"recon", "commit", "codebook"}


def test_short_codec_training_reduces_loss_and_is_deterministic():
    imgs = generate_clean(16, 32, 0)
    tcfg = CodecTrainConfig(steps=25, batch=8, warmup=2, seed=1)
    c1, curve = train_codec(imgs, CodecConfig(vocab=64), tcfg)
    c2, _ = train_codec(imgs, CodecConfig(vocab=64), tcfg)
    assert np.mean([r["recon"] for r in curve[-5:]]) < curve[0]["recon"]
    assert c1.weight_hash() == c2.weight_hash()
