"""Invariant suite run by ``restorevar selftest``; prints one line per check."""
from __future__ import annotations

import io
import math
from typing import Callable

import numpy as np

from . import oracles
from .autodiff import gradcheck, ops
from .autodiff.tensor import Tensor, no_grad
from .checkpoint import Checkpoint, read_checkpoint
from .codec import MSVQ, ScaleSchedule
from .data import DegradationSpec, degrade, generate_clean
from .finetune import LossWeights, perceptual_loss
from .layers import rope_angles, rope_apply
from .metrics import psnr, ssim
from .refiner import LRT, LRTConfig, refine
from .transformer import ScaleAR, TransformerConfig, TokenSequence, block_causal_mask

SMALL = ScaleSchedule(((1, 1), (2, 2), (4, 4)))


def _small_model(seed: int, gates: float = 0.0) -> ScaleAR:
    m = ScaleAR(TransformerConfig(depth=2, dim=32, heads=2, vocab=16, cond_dim=4, schedule=SMALL), seed=seed)
    for b in m.blocks:
        b.gate.data[:] = gates
    return m


def _quantizer(seed: int) -> MSVQ:
    rng = np.random.default_rng(seed)
    q = MSVQ(SMALL, 16, 4, rng)
    q.codebook.weight.data = rng.standard_normal((16, 4)).astype(np.float32)
    for phi in q.phis:
        phi.conv.weight.data = (0.1 * rng.standard_normal(phi.conv.weight.shape)).astype(np.float32)
    return q


def check_gradients(seed):
    worst = max(gradcheck.run_suite(seeds=(seed, seed + 1)).values())
    return worst < 1e-3, f"worst relative error {worst:.2e}"


def check_mask(seed):
    ok = np.array_equal(block_causal_mask(SMALL), oracles.block_mask_loops(SMALL.token_counts))
    return ok, "matches double-loop construction"


def check_causality(seed):
    rng = np.random.default_rng(seed)
    m = _small_model(seed, gates=0.5)
    content = rng.standard_normal((1, SMALL.L, 4)).astype(np.float32)
    f_deg = rng.standard_normal((1, 4, 4, 4)).astype(np.float32)
    with no_grad():
        base = m.forward_train(TokenSequence(content, m.embed(content, f_deg)), f_deg).data
        ok = True
        for k in range(1, SMALL.K):
            end = 1 + sum(SMALL.token_counts[:k])
            pert = content.copy()
            pert[:, end - 1:] += rng.standard_normal(pert[:, end - 1:].shape).astype(np.float32)
            out = m.forward_train(TokenSequence(pert, m.embed(pert, f_deg)), f_deg).data
            ok &= np.array_equal(out[:, :end], base[:, :end])
    return ok, "earlier blocks bitwise unchanged"


def check_kv_cache(seed):
    rng = np.random.default_rng(seed)
    m = _small_model(seed, gates=0.5)
    q = _quantizer(seed)
    f_deg = rng.standard_normal((2, 4, 4, 4)).astype(np.float32)
    _, _, a = m.infer(f_deg, q, use_cache=True)
    _, _, b = m.infer(f_deg, q, use_cache=False)
    diff = max(float(np.abs(x - y).max()) for x, y in zip(a, b))
    return diff <= 1e-4, f"max abs logit diff {diff:.2e}"


def check_gate_identity(seed):
    rng = np.random.default_rng(seed)
    m = _small_model(seed)
    content = rng.standard_normal((1, SMALL.L, 4)).astype(np.float32)
    f_deg = rng.standard_normal((1, 4, 4, 4)).astype(np.float32)
    with no_grad():
        tok = TokenSequence(content, m.embed(content, f_deg))
        a = m.forward_train(tok, f_deg, use_cross=True).data
        b = m.forward_train(tok, f_deg, use_cross=False).data
    return np.array_equal(a, b), "zero gates leave logits bitwise unchanged"


def check_telescoping(seed):
    rng = np.random.default_rng(seed)
    q = _quantizer(seed)
    f = rng.standard_normal((3, 4, 4, 4)).astype(np.float32)
    _, pyr, _ = q.encode(f)
    tele = float(np.abs(pyr.f_quant[-1] - np.sum(pyr.h, axis=0)).max())
    res = max(float(np.abs(r - (f - fq)).max()) for r, fq in zip(pyr.f_res, pyr.f_quant))
    return max(tele, res) <= 1e-6, f"sum-of-h err {tele:.1e}, residual err {res:.1e}"


def check_quantizer_oracle(seed):
    rng = np.random.default_rng(seed)
    q = _quantizer(seed)
    f = rng.standard_normal((4, 4, 4)).astype(np.float32)
    maps, _, _ = q.encode(f)
    ref, *_ = oracles.msvq_encode(f, SMALL.sizes, q.codebook.weight.data,
                                  [p.conv.weight.data for p in q.phis], [p.conv.bias.data for p in q.phis])
    return all(np.array_equal(a, b) for a, b in zip(maps, ref)), "index maps equal the loop oracle"


def check_refiner_identity(seed):
    rng = np.random.default_rng(seed)
    lrt = LRT(LRTConfig(depth=1, dim=16, heads=2, channels=4, z_dim=8, grid=(4, 4)), seed=seed)
    f = rng.standard_normal((2, 4, 4, 4)).astype(np.float32)
    z = rng.standard_normal((2, 5, 8)).astype(np.float32)
    return np.array_equal(refine(lrt, f, z), f), "zero-head refiner returns its input"


def check_rope(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 1, 3, 8)).astype(np.float32)
    pos = [(0, 0), (2.0, 5.0), (7.0, 1.0)]
    cos, sin = rope_angles(pos, 8)
    y = rope_apply(Tensor(x), cos, sin).data
    norm = float(np.abs(np.linalg.norm(y, axis=-1) - np.linalg.norm(x, axis=-1)).max())
    ref = max(float(np.abs(oracles.rope_rotate(x[0, 0, i], *p) - y[0, 0, i]).max()) for i, p in enumerate(pos))
    return norm <= 1e-5 and ref <= 1e-5 and np.array_equal(y[0, 0, 0], x[0, 0, 0]), \
        f"norm err {norm:.1e}, oracle err {ref:.1e}"


def check_ssim(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(3, 16, 16)).astype(np.float32)
    y = np.clip(x + 0.1 * rng.standard_normal(x.shape), 0, 1).astype(np.float32)
    same = ssim(x, x)
    err = abs(ssim(x, y) - oracles.ssim_direct(x, y))
    return same == 1.0 and err <= 1e-5, f"ssim(x,x)={same}, oracle err {err:.1e}"


def check_psnr(seed):
    x = generate_clean(1, 32, seed)[0]
    y = x + 0.1 * np.where(np.indices(x.shape).sum(0) % 2 == 0, 1.0, -1.0)
    return psnr(x, x) == 99.0 and abs(psnr(x, y) - 20.0) < 1e-6, "cap 99 dB, MSE 0.01 -> 20 dB"


def check_cross_entropy(seed):
    V = 512
    ce = ops.cross_entropy(Tensor(np.zeros((8, V), np.float32)), np.arange(8)).item()
    return abs(ce - math.log(V)) <= 1e-4, f"uniform CE {ce:.6f} vs ln V {math.log(V):.6f}"


def check_checkpoint(seed):
    rng = np.random.default_rng(seed)
    ck = Checkpoint(b"RVA1", {"depth": "2", "schedule": "1x1,2x2"},
                    {"a.weight": rng.standard_normal((3, 4)).astype(np.float32), "b": np.zeros(2, np.float32)},
                    step=7, seed=seed)
    raw = ck.to_bytes()
    again = read_checkpoint(io.BytesIO(raw)).to_bytes()
    return raw == again, f"{len(raw)} bytes round-trip identically"


def check_loss_weights(seed):
    w = LossWeights()
    return w.as_tuple() == (2.0, 0.4, 0.2, 0.01), f"defaults {w.as_tuple()}"


def check_perceptual(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(1, 3, 16, 16)).astype(np.float32)
    y = rng.uniform(size=(1, 3, 16, 16)).astype(np.float32)
    with no_grad():
        zero = perceptual_loss(x, x).item()
        asym = abs(perceptual_loss(x, y).item() - perceptual_loss(y, x).item())
    return zero == 0.0 and asym <= 1e-7, f"self distance {zero}, asymmetry {asym:.1e}"


def check_degradations(seed):
    x = generate_clean(2, 32, seed)
    ok = np.array_equal(degrade(x[0], DegradationSpec("noise", {"sigma": 0.0}, seed)), x[0])
    ok &= np.array_equal(degrade(x[0], DegradationSpec("darken", {"gamma": 1.0}, seed)), x[0])
    haze = degrade(np.zeros_like(x[0]), DegradationSpec("haze", {"t": 0.5, "A": 1.0}, seed))
    ok &= bool(np.all(haze == 0.5))
    return ok, "noise sigma=0 / gamma=1 identities, haze on black = 0.5"


CHECKS: list[tuple[str, Callable]] = [
    ("gradients", check_gradients),
    ("mask_oracle", check_mask),
    ("block_causality", check_causality),
    ("kv_cache", check_kv_cache),
    ("gate_identity", check_gate_identity),
    ("telescoping", check_telescoping),
    ("quantizer_oracle", check_quantizer_oracle),
    ("refiner_identity", check_refiner_identity),
    ("rope", check_rope),
    ("ssim", check_ssim),
    ("psnr", check_psnr),
    ("cross_entropy", check_cross_entropy),
    ("checkpoint_roundtrip", check_checkpoint),
    ("loss_weights", check_loss_weights),
    ("perceptual", check_perceptual),
    ("degradations", check_degradations),
]


def run_selftest(seed: int = 0, out=print) -> bool:
    """Run every check; returns True when all pass."""
    all_ok = True
    for name, fn in CHECKS:
        try:
            ok, detail = fn(seed)
        except Exception as exc:  # a crash is a failed check, not an aborted suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= bool(ok)
        out(f"{'PASS' if ok else 'FAIL'} {name}: {detail} ")
    out(f"{'all' if all_ok else 'not all'} {len(CHECKS)} checks passed")
    return all_ok
