import numpy as np
import pytest

from conftest import perturbed_codec
from restorevar.autodiff.ops import ShapeError
from restorevar.autodiff.tensor import Tensor, no_grad
from restorevar.data import generate_clean
from restorevar.finetune import (LOG_FIELDS, FinetuneConfig, LossWeights, PatchDiscriminator, finetune_decoder,
                                 format_log, perceptual_loss, softplus)
from restorevar.metrics import ssim
from restorevar.oracles import ssim_direct


def test_default_weights_exact():
    assert LossWeights().as_tuple() == (2.0, 0.4, 0.2, 0.01)
    with pytest.raises(ValueError):
        LossWeights(l1=-1.0)


def test_ssim_identities_and_oracle():
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(3, 32, 32)).astype(np.float32)
    assert ssim(x, x) == 1.0
    checker = (np.indices((32, 32)).sum(0) % 2).astype(np.float32)[None].repeat(3, 0)
    assert ssim(checker, 1 - checker) < 0
    y = rng.uniform(size=(3, 32, 32)).astype(np.float32)
    assert abs(ssim(x, y) - ssim_direct(x, y)) <= 1e-5
    assert abs(ssim(x, y) - ssim(y, x)) <= 1e-7
    with pytest.raises(ShapeError):
        ssim(x, x[:, :16])


def test_perceptual_loss_properties():
    rng = np.random.default_rng(1)
    x = rng.uniform(size=(2, 3, 32, 32)).astype(np.float32)
    y = rng.uniform(size=(2, 3, 32, 32)).astype(np.float32)
    n = rng.standard_normal(x.shape).astype(np.float32)
    with no_grad():
        assert perceptual_loss(x, x).item() == 0.0
        assert abs(perceptual_loss(x, y).item() - perceptual_loss(y, x).item()) <= 1e-7
        vals = [perceptual_loss(x, x + s * n).item() for s in (0.05, 0.1, 0.2)]
    assert vals[0] < vals[1] < vals[2]


def test_softplus_stable():
    v = softplus(Tensor(np.array([-100.0, 0.0, 100.0], np.float32))).data
    np.testing.assert_allclose(v, [0.0, np.log(2.0), 100.0], atol=1e-6)


def test_discriminator_patch_grid():
    d = PatchDiscriminator(np.random.default_rng(0))
    assert d(Tensor(np.zeros((2, 3, 32, 32), np.float32))).shape == (2, 1, 4, 4)


def _run(weights, steps=4, seed=0):
    codec = perturbed_codec(0, vocab=64)
    imgs = generate_clean(8, 32, 3)
    enc = codec.encoder.weight_hash()
    quant = codec.quantizer.weight_hash()
    disc = PatchDiscriminator(np.random.default_rng(5))
    d0 = disc.weight_hash()
    logs = []
    dec, disc, curve, report = finetune_decoder(codec, imgs, weights, FinetuneConfig(steps=steps, batch=4, seed=seed),
                                                heldout=imgs[:4], disc=disc, log_fn=logs.append)
    return codec, enc, quant, d0, dec, disc, curve, report, logs


def test_finetune_freezes_encoder_and_logs_weighted_total():
    w = LossWeights()
    codec, enc, quant, d0, dec, disc, curve, report, logs = _run(w)
    assert codec.encoder.weight_hash() == enc and codec.quantizer.weight_hash() == quant
    assert disc.weight_hash() != d0
    assert dec.weight_hash() != codec.decoder.weight_hash()
    assert len(logs) == 4
    for r in curve:
        parts = (r["l1"], r["ssim_loss"], r["percep"], r["adv_g"])
        assert abs(r["total"] - sum(a * b for a, b in zip(w.as_tuple(), parts))) <= 1e-6
    assert format_log(curve[0]).split()[0] == "step=0"
    assert [f.split("=")[0] for f in format_log(curve[0]).split()] == list(LOG_FIELDS)
    assert set(report) == {"pre_quant_psnr", "pre_cont_psnr", "post_cont_psnr", "post_quant_psnr"}


def test_adversarial_off_keeps_discriminator_and_is_reproducible():
    w = LossWeights(adv=0.0)
    *_, d0, dec1, disc1, curve1, _, _ = _run(w, steps=3)
    *_, _, dec2, _, curve2, _, _ = _run(w, steps=3)
    assert disc1.weight_hash() == d0
    assert all(r["adv_d"] == 0.0 and r["adv_g"] == 0.0 for r in curve1)
    assert dec1.weight_hash() == dec2.weight_hash()
    assert [r["total"] for r in curve1] == [r["total"] for r in curve2]
