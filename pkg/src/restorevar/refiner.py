"""Latent refinement transformer: discrete latent -> continuous latent residual.

f_hat = f_quant_pred + LRT(f_quant_pred, z). Tokens are the H_K·W_K positions
of f_quant_pred; each block runs self-attention, cross-attention over the
layer-normalized, projected backbone hidden states z, then an MLP. The output
head is zero-initialized so an untrained refiner is the identity.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import ops
from .autodiff.nn import LayerNorm, Linear, Module
from .autodiff.ops import ShapeError
from .autodiff.optim import AdamW, cosine_lr
from .autodiff.tensor import NonFiniteError, Tensor, no_grad
from .layers import CrossAttention, MLP, SelfAttention, rope_angles
from .transformer import flatten_grid


@dataclass
class LRTConfig:
    depth: int = 3
    dim: int = 64
    heads: int = 4
    channels: int = 16
    z_dim: int = 256
    grid: tuple = (8, 8)
    mlp_ratio: float = 4.0
    use_z: bool = True


class LRTBlock(Module):
    def __init__(self, dim: int, heads: int, hidden: int, rng: np.random.Generator, use_z: bool):
        self.ln1 = LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, rng)
        if use_z:
            self.ln2 = LayerNorm(dim)
            self.cross = CrossAttention(dim, heads, rng)
        self.ln3 = LayerNorm(dim)
        self.mlp = MLP(dim, hidden, rng)
        self.use_z = use_z

    def forward(self, x, rope, z_tokens=None):
        x = ops.add(x, self.attn(self.ln1(x), rope=rope))
        if self.use_z:
            x = ops.add(x, self.cross(self.ln2(x), cond=z_tokens))
        return ops.add(x, self.mlp(self.ln3(x)))


class LRT(Module):
    def __init__(self, cfg: LRTConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.inp = Linear(cfg.channels, cfg.dim, rng)
        if cfg.use_z:
            self.z_norm = LayerNorm(cfg.z_dim)
            self.z_proj = Linear(cfg.z_dim, cfg.dim, rng)
        self.blocks = [LRTBlock(cfg.dim, cfg.heads, int(cfg.dim * cfg.mlp_ratio), rng, cfg.use_z)
                       for _ in range(cfg.depth)]
        self.ln_f = LayerNorm(cfg.dim)
        self.head = Linear(cfg.dim, cfg.channels, rng, zero=True)
        h, w = cfg.grid
        self.rope = rope_angles([(r, c) for r in range(h) for c in range(w)], cfg.dim // cfg.heads)

    def forward(self, f_quant, z=None) -> Tensor:
        """Residual-refined latent B×C×H×W; gradients flow to LRT weights only."""
        f = f_quant.data if isinstance(f_quant, Tensor) else np.asarray(f_quant, np.float32)
        B, C, H, W = f.shape
        if (C, H, W) != (self.cfg.channels, *self.cfg.grid):
            raise ShapeError(f"refiner expects latent {(self.cfg.channels, *self.cfg.grid)}, got {(C, H, W)}")
        x = self.inp(Tensor(flatten_grid(f)))
        z_tokens = None
        if self.cfg.use_z:
            if z is None:
                raise ValueError("this refiner was built with z guidance; pass the backbone hidden states")
            z = z.data if isinstance(z, Tensor) else np.asarray(z, np.float32)
            if z.ndim != 3 or z.shape[0] != B or z.shape[2] != self.cfg.z_dim:
                raise ShapeError(f"z must be B×T×{self.cfg.z_dim} with B={B}, got {z.shape}")
            z_tokens = self.z_proj(self.z_norm(Tensor(z)))
        for blk in self.blocks:
            x = blk(x, self.rope, z_tokens)
        delta = self.head(self.ln_f(x))                         # B × HW × C
        delta = ops.reshape(ops.transpose(delta, (0, 2, 1)), (B, C, H, W))
        return ops.add(Tensor(f), delta)


def refine(model: LRT, f_quant_pred: np.ndarray, z: Optional[np.ndarray] = None, batch: int = 64) -> np.ndarray:
    single = np.asarray(f_quant_pred).ndim == 3
    f = np.asarray(f_quant_pred, np.float32)
    f = f[None] if single else f
    if z is not None:
        z = np.asarray(z, np.float32)
        z = z[None] if z.ndim == 2 else z
    outs = []
    with no_grad():
        for i in range(0, f.shape[0], batch):
            outs.append(model(f[i:i + batch], None if z is None else z[i:i + batch]).data)
    out = np.concatenate(outs)
    return out[0] if single else out


@dataclass
class LRTTrainConfig:
    steps: int = 1000
    batch: int = 16
    lr: float = 1e-4
    weight_decay: float = 0.01
    warmup: int = 20
    seed: int = 0
    log_every: int = 100


def train_lrt(f_quant: np.ndarray, f_cont: np.ndarray, z: Optional[np.ndarray], cfg: LRTConfig,
              tcfg: LRTTrainConfig, model: Optional[LRT] = None, log_fn=None) -> tuple[LRT, list[dict]]:
    """Regress f_cont from (f_quant, z) with an L1 objective."""
    model = model or LRT(cfg, seed=tcfg.seed)
    rng = np.random.default_rng(tcfg.seed + 2)
    opt = AdamW(model.parameters(), lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    n = f_quant.shape[0]
    curve = []
    for step in range(tcfg.steps):
        idx = rng.choice(n, size=tcfg.batch, replace=False) if n > tcfg.batch else np.arange(n)
        opt.lr = cosine_lr(step, tcfg.steps, tcfg.lr, warmup=tcfg.warmup)
        opt.zero_grad()
        pred = model(f_quant[idx], None if z is None or not cfg.use_z else z[idx])
        loss = ops.l1_loss(pred, Tensor(f_cont[idx]))
        value = loss.item()
        if not np.isfinite(value):
            raise NonFiniteError(f"refiner loss became {value} at step {step}")
        loss.backward()
        opt.step()
        rec = {"step": step, "loss": value}
        curve.append(rec)
        if log_fn and (step % tcfg.log_every == 0 or step == tcfg.steps - 1):
            log_fn(rec)
    return model, curve


def latent_l1(model: LRT, f_quant: np.ndarray, f_cont: np.ndarray, z: Optional[np.ndarray]) -> float:
    pred = refine(model, f_quant, z if model.cfg.use_z else None)
    return float(np.mean(np.abs(pred.astype(np.float64) - f_cont)))
