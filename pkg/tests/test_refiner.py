import numpy as np
import pytest

from restorevar.autodiff.ops import ShapeError
from restorevar.refiner import LRT, LRTConfig, LRTTrainConfig, latent_l1, refine, train_lrt
from restorevar.transformer import ScaleAR, TransformerConfig


def _data(seed=0, n=32):
    """Synthetic refinement task: f_cont = f_quant + smooth offset recoverable from z."""
    rng = np.random.default_rng(seed)
    f_quant = rng.standard_normal((n, 16, 8, 8)).astype(np.float32)
    code = rng.standard_normal((n, 1, 8)).astype(np.float32)
    z = np.repeat(code, 86, axis=1) @ rng.standard_normal((8, 32)).astype(np.float32)
    offset = (code[:, 0, :1, None, None] * 0.5).astype(np.float32)
    f_cont = (0.9 * f_quant + offset).astype(np.float32)
    return f_quant, f_cont, z.astype(np.float32)


CFG = LRTConfig(depth=2, dim=32, heads=4, z_dim=32)


def test_identity_at_init():
    f_quant, _, z = _data()
    lrt = LRT(CFG, seed=1)
    assert np.array_equal(refine(lrt, f_quant, z), f_quant)
    assert np.array_equal(refine(lrt, f_quant[0], z[0]), f_quant[0])


def test_refine_is_deterministic():
    f_quant, _, z = _data()
    lrt = LRT(CFG, seed=1)
    lrt.head.weight.data[:] = 0.01
    a = refine(lrt, f_quant, z)
    b = refine(lrt, f_quant, z)
    assert np.array_equal(a, b) and not np.array_equal(a, f_quant)


def test_shape_errors():
    lrt = LRT(CFG)
    with pytest.raises(ShapeError):
        refine(lrt, np.zeros((1, 16, 4, 4), np.float32), np.zeros((1, 86, 32), np.float32))
    with pytest.raises(ShapeError):
        refine(lrt, np.zeros((1, 16, 8, 8), np.float32), np.zeros((1, 86, 7), np.float32))
    with pytest.raises(ValueError):
        refine(lrt, np.zeros((1, 16, 8, 8), np.float32), None)


def test_initial_loss_is_quantization_gap_and_training_decreases():
    f_quant, f_cont, z = _data()
    model, curve = train_lrt(f_quant, f_cont, z, CFG, LRTTrainConfig(steps=60, batch=32, lr=1e-3, warmup=2))
    assert curve[0]["loss"] == pytest.approx(float(np.mean(np.abs(f_quant - f_cont))), rel=1e-5)
    losses = [r["loss"] for r in curve]
    assert losses[-1] < 0.7 * losses[0]
    assert latent_l1(model, f_quant, f_cont, z) < float(np.mean(np.abs(f_quant - f_cont)))


def test_without_z_variant_has_no_cross_attention():
    cfg = LRTConfig(depth=2, dim=32, heads=4, z_dim=32, use_z=False)
    lrt = LRT(cfg)
    assert not any("cross" in n or n.startswith("z_") for n, _ in lrt.named_parameters())
    f_quant, _, _ = _data()
    assert np.array_equal(refine(lrt, f_quant), f_quant)


def test_parameter_budget_against_toy_backbone():
    backbone = ScaleAR(TransformerConfig()).num_parameters()
    lrt = LRT(LRTConfig()).num_parameters()
    assert lrt <= 0.05 * backbone
