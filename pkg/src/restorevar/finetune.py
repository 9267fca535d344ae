"""Decoder fine-tuning on continuous latents with a composite loss.

L_dec = w_l1·L1 + w_ssim·(1 − SSIM) + w_percep·L_percep + w_adv·L_adv, where
the perceptual term compares features of a frozen random conv pyramid and the
adversarial term comes from a patch discriminator trained 1:1 with the
decoder using the non-saturating logistic loss. Encoder and quantizer stay
frozen; their weight hashes are checked after training.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import ops
from .autodiff.nn import Conv2d, Module
from .autodiff.optim import AdamW, cosine_lr
from .autodiff.tensor import NonFiniteError, Tensor, no_grad
from .codec import Codec
from .metrics import psnr, ssim_tensor


@dataclass(frozen=True)
class LossWeights:
    l1: float = 2.0
    ssim: float = 0.4
    percep: float = 0.2
    adv: float = 0.01

    def __post_init__(self):
        for name in ("l1", "ssim", "percep", "adv"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.l1, self.ssim, self.percep, self.adv)


def softplus(x) -> Tensor:
    """log(1 + e^x) written to stay finite for large |x|."""
    a = ops.absolute(x)
    return ops.add(ops.mul(ops.add(x, a), 0.5), ops.log(ops.add(ops.exp(ops.neg(a)), 1.0)))


class PerceptualNet(Module):
    """Frozen, seed-fixed random three-stage conv pyramid."""

    def __init__(self, seed: int = 1234, widths=(16, 32, 64)):
        rng = np.random.default_rng(seed)
        c1, c2, c3 = widths
        self.s1 = Conv2d(3, c1, 3, rng)
        self.s2 = Conv2d(c1, c2, 4, rng, stride=2)
        self.s3 = Conv2d(c2, c3, 4, rng, stride=2)
        self.freeze()

    def features(self, x) -> list[Tensor]:
        f1 = ops.leaky_relu(self.s1(x), 0.2)
        f2 = ops.leaky_relu(self.s2(f1), 0.2)
        f3 = ops.leaky_relu(self.s3(f2), 0.2)
        return [f1, f2, f3]


_PERCEPTUAL: dict[int, PerceptualNet] = {}


def perceptual_net(seed: int = 1234) -> PerceptualNet:
    if seed not in _PERCEPTUAL:
        _PERCEPTUAL[seed] = PerceptualNet(seed)
    return _PERCEPTUAL[seed]


def perceptual_loss(x, y, net: Optional[PerceptualNet] = None) -> Tensor:
    """Mean over stages of the L1 distance between pyramid features."""
    net = net or perceptual_net()
    fx = net.features(_batch4(x))
    fy = net.features(_batch4(y))
    terms = [ops.l1_loss(a, b) for a, b in zip(fx, fy)]
    return ops.mul(ops.add(ops.add(terms[0], terms[1]), terms[2]), 1.0 / 3.0)


def _batch4(x):
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, np.float32))
    return ops.reshape(x, (1,) + x.shape) if x.ndim == 3 else x


class PatchDiscriminator(Module):
    """Three stride-2 convs; a 32×32 image maps to a 4×4 grid of logits."""

    def __init__(self, rng: np.random.Generator, width: int = 32):
        self.c1 = Conv2d(3, width, 4, rng, stride=2)
        self.c2 = Conv2d(width, 2 * width, 4, rng, stride=2)
        self.c3 = Conv2d(2 * width, 1, 4, rng, stride=2)

    def forward(self, x):
        h = ops.leaky_relu(self.c1(x), 0.2)
        h = ops.leaky_relu(self.c2(h), 0.2)
        return self.c3(h)


@dataclass
class FinetuneConfig:
    steps: int = 500
    batch: int = 16
    lr: float = 1e-4
    weight_decay: float = 0.01
    warmup: int = 20
    seed: int = 0
    log_every: int = 1


LOG_FIELDS = ("step", "l1", "ssim_loss", "percep", "adv_g", "adv_d", "total")


def format_log(rec: dict) -> str:
    return " ".join(f"{k}={rec[k]}" if k == "step" else f"{k}={rec[k]:.6f}" for k in LOG_FIELDS)


def generator_loss(decoder, disc: Optional[PatchDiscriminator], f_cont: np.ndarray, target: np.ndarray,
                   weights: LossWeights):
    """Weighted decoder loss and its logged components."""
    out = decoder(Tensor(f_cont))
    tgt = Tensor(target)
    l1 = ops.l1_loss(out, tgt)
    ssim_l = ops.sub(1.0, ssim_tensor(out, tgt))
    percep = perceptual_loss(out, tgt)
    terms = [(weights.l1, l1), (weights.ssim, ssim_l), (weights.percep, percep)]
    adv_g = None
    if weights.adv > 0 and disc is not None:
        adv_g = ops.mean(softplus(ops.neg(disc(out))))
        terms.append((weights.adv, adv_g))
    total = None
    for w, t in terms:
        part = ops.mul(t, w)
        total = part if total is None else ops.add(total, part)
    parts = {"l1": l1.item(), "ssim_loss": ssim_l.item(), "percep": percep.item(),
             "adv_g": adv_g.item() if adv_g is not None else 0.0}
    return total, parts, out.data


def discriminator_loss(disc: PatchDiscriminator, real: np.ndarray, fake: np.ndarray) -> Tensor:
    return ops.add(ops.mean(softplus(ops.neg(disc(Tensor(real))))), ops.mean(softplus(disc(Tensor(fake)))))


def reconstruction_psnr(codec: Codec, images: np.ndarray, use_quant: bool, decoder=None, batch: int = 32) -> float:
    """Mean PSNR of decode(f_cont) or decode(f_quant^(K)) against the inputs."""
    decoder = decoder or codec.decoder
    vals = []
    with no_grad():
        for i in range(0, images.shape[0], batch):
            x = images[i:i + batch]
            f = codec.encode_continuous(x)
            if use_quant:
                maps, _ = codec.multiscale_encode(f)
                f = codec.partial_reconstruct(maps, codec.schedule.K)
            out = np.clip(decoder(Tensor(f)).data, 0.0, 1.0)
            vals.extend(psnr(a, b) for a, b in zip(out, x))
    return float(np.mean(vals))


def frozen_hash(codec: Codec) -> str:
    return codec.encoder.weight_hash() + codec.quantizer.weight_hash()


def finetune_decoder(codec: Codec, images: np.ndarray, weights: LossWeights = LossWeights(),
                     tcfg: FinetuneConfig = FinetuneConfig(), heldout: Optional[np.ndarray] = None,
                     disc: Optional[PatchDiscriminator] = None, log_fn=None):
    """Fine-tune a copy of ``codec.decoder`` on f_cont of ``images``.

    Returns (decoder, discriminator, curve, report). ``codec`` itself is not
    modified; the report holds pre/post PSNR on ``heldout`` when given.
    """
    rng = np.random.default_rng(tcfg.seed)
    before = frozen_hash(codec)
    decoder = copy.deepcopy(codec.decoder)
    decoder.unfreeze()
    disc = disc or PatchDiscriminator(np.random.default_rng(tcfg.seed + 7))
    with no_grad():
        f_all = np.concatenate([codec.encode_continuous(images[i:i + 64]) for i in range(0, len(images), 64)])
    g_opt = AdamW(decoder.parameters(), lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    d_opt = AdamW(disc.parameters(), lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    report = {}
    if heldout is not None:
        report["pre_quant_psnr"] = reconstruction_psnr(codec, heldout, use_quant=True)
        report["pre_cont_psnr"] = reconstruction_psnr(codec, heldout, use_quant=False)
    n = images.shape[0]
    curve = []
    for step in range(tcfg.steps):
        idx = rng.choice(n, size=tcfg.batch, replace=False) if n > tcfg.batch else np.arange(n)
        lr = cosine_lr(step, tcfg.steps, tcfg.lr, warmup=tcfg.warmup)
        g_opt.lr = d_opt.lr = lr
        g_opt.zero_grad()
        total, parts, fake = generator_loss(decoder, disc, f_all[idx], images[idx], weights)
        value = total.item()
        if not np.isfinite(value):
            raise NonFiniteError(f"decoder fine-tune loss became {value} at step {step}")
        total.backward()
        g_opt.step()
        adv_d = 0.0
        if weights.adv > 0:
            d_opt.zero_grad()
            d_loss = discriminator_loss(disc, images[idx], fake)
            adv_d = d_loss.item()
            d_loss.backward()
            d_opt.step()
        disc.zero_grad()
        rec = {"step": step, **parts, "adv_d": adv_d, "total": value}
        curve.append(rec)
        if log_fn and (step % tcfg.log_every == 0 or step == tcfg.steps - 1):
            log_fn(rec)
    if frozen_hash(codec) != before:
        raise AssertionError("encoder/quantizer weights changed during decoder fine-tuning")
    if heldout is not None:
        report["post_cont_psnr"] = reconstruction_psnr(codec, heldout, use_quant=False, decoder=decoder)
        report["post_quant_psnr"] = reconstruction_psnr(codec, heldout, use_quant=True, decoder=decoder)
    return decoder, disc, curve, report
