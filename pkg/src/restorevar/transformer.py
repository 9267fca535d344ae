"""Next-scale autoregressive transformer conditioned on a degraded latent.

Sequence layout (length 1 + L): position 0 is the SOS token, followed by one
block per scale. Block k's input is the accumulated reconstruction of scales
< k resized to H_k×W_k (zeros for k = 1), and its outputs predict r_k. Each
transformer block is pre-norm self-attention (block-causal mask, 2D RoPE),
then the MLP, then cross-attention on the degraded latent scaled by a
zero-initialized gate.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .autodiff import ops
from .autodiff.nn import Embedding, LayerNorm, Linear, Module, Parameter
from .autodiff.ops import ConfigError
from .autodiff.optim import AdamW, cosine_lr
from .autodiff.tensor import NonFiniteError, Tensor, no_grad
from .codec import MSVQ, ScaleSchedule, TOY_SCHEDULE
from .layers import (CrossAttention, KVCache, LayerCache, MLP, SelfAttention, rope_angles,
                     scale_positions)

log = logging.getLogger(__name__)

SOS_LABEL = 0


@dataclass
class TransformerConfig:
    depth: int = 6
    dim: int = 256
    heads: int = 8
    vocab: int = 512
    cond_dim: int = 16
    schedule: ScaleSchedule = TOY_SCHEDULE
    mlp_ratio: float = 4.0
    rope_base: float = 100.0

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if (self.dim // self.heads) % 4:
            raise ConfigError(f"head dim {self.dim // self.heads} not divisible by 4 (2D rotary pairs)")

    @property
    def seq_len(self) -> int:
        return 1 + self.schedule.L


@dataclass
class TokenSequence:
    """Teacher-forced input: raw C-dim block contents and their embeddings."""
    content: np.ndarray          # B × L × C
    embeddings: Tensor           # B × (1+L) × D
    boundaries: list = field(default_factory=list)   # start of each block, SOS at 0


def block_ids(schedule: ScaleSchedule) -> np.ndarray:
    """Block id per position: 0 for SOS, k for tokens of scale k."""
    ids = [0]
    for k, n in enumerate(schedule.token_counts, start=1):
        ids.extend([k] * n)
    return np.asarray(ids, dtype=np.int64)


def block_causal_mask(schedule: ScaleSchedule) -> np.ndarray:
    """(1+L)×(1+L) boolean mask, True where query row may attend key column."""
    ids = block_ids(schedule)
    return ids[None, :] <= ids[:, None]


def block_boundaries(schedule: ScaleSchedule) -> list[int]:
    return [0] + [1 + o for o in schedule.offsets()]


def flatten_grid(x: np.ndarray) -> np.ndarray:
    """B×C×h×w -> B×(h·w)×C in row-major token order."""
    B, C = x.shape[:2]
    return x.reshape(B, C, -1).transpose(0, 2, 1)


def teacher_content(maps: list, quantizer: MSVQ) -> np.ndarray:
    """B × L × C block contents for teacher forcing from ground-truth maps."""
    sched = quantizer.schedule
    B = np.asarray(maps[0]).shape[0]
    C = quantizer.codebook.weight.shape[1]
    chunks = [np.zeros((B, sched.token_counts[0], C), np.float32)]
    f_quant = None
    with no_grad():
        for k in range(1, sched.K):
            h = quantizer.scale_output(k - 1, np.asarray(maps[k - 1])).data
            f_quant = h if f_quant is None else f_quant + h
            hk, wk = sched.sizes[k]
            chunks.append(flatten_grid(ops.resize_bilinear(Tensor(f_quant), hk, wk).data))
    return np.concatenate(chunks, axis=1).astype(np.float32)


def targets_from_maps(maps: list) -> np.ndarray:
    """B × L concatenated index targets."""
    return np.concatenate([np.asarray(r).reshape(np.asarray(r).shape[0], -1) for r in maps], axis=1)


# ------------------------------------------------------------------- blocks
class Block(Module):
    def __init__(self, dim: int, heads: int, mlp_hidden: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.mlp = MLP(dim, mlp_hidden, rng)
        self.ln3 = LayerNorm(dim)
        self.cross = CrossAttention(dim, heads, rng)
        self.gate = Parameter(np.zeros(1, np.float32))

    def forward(self, x, mask, rope, cond_kv=None, cache: Optional[LayerCache] = None):
        x = ops.add(x, self.attn(self.ln1(x), mask=mask, rope=rope, cache=cache))
        x = ops.add(x, self.mlp(self.ln2(x)))
        if cond_kv is not None:
            x = ops.add(x, ops.mul(self.gate, self.cross(self.ln3(x), kv=cond_kv)))
        return x


class ScaleAR(Module):
    def __init__(self, cfg: TransformerConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        D = cfg.dim
        self.word_embed = Linear(cfg.cond_dim, D, rng)
        self.label_embed = Embedding(1, D, rng)
        self.ctx_proj = Linear(cfg.cond_dim, D, rng, zero=True)
        self.level_embed = Embedding(cfg.schedule.K + 1, D, rng)
        self.cond_proj = Linear(cfg.cond_dim, D, rng)
        self.blocks = [Block(D, cfg.heads, int(D * cfg.mlp_ratio), rng) for _ in range(cfg.depth)]
        self.ln_f = LayerNorm(D)
        self.head = Linear(D, cfg.vocab, rng)

        sched = cfg.schedule
        self.mask = block_causal_mask(sched)
        self.levels = block_ids(sched)
        self.positions = scale_positions(sched)
        self.rope_cos, self.rope_sin = rope_angles(self.positions, D // cfg.heads, cfg.rope_base)
        self.bounds = block_boundaries(sched) + [cfg.seq_len]

    @property
    def gates(self) -> np.ndarray:
        return np.array([float(b.gate.data[0]) for b in self.blocks])

    # ------------------------------------------------------------ embedding
    def sos(self, f_deg: np.ndarray) -> Tensor:
        """B×1×D: fixed label embedding plus projected global context."""
        B = f_deg.shape[0]
        ctx = Tensor(f_deg.mean(axis=(2, 3)))
        label = self.label_embed(np.full(B, SOS_LABEL))
        return ops.reshape(ops.add(label, self.ctx_proj(ctx)), (B, 1, self.cfg.dim))

    def cond_tokens(self, f_deg: np.ndarray) -> Tensor:
        return self.cond_proj(Tensor(flatten_grid(f_deg)))

    def embed(self, content: np.ndarray, f_deg: np.ndarray, start: int = 0) -> Tensor:
        """Embed positions [start, start + n) where ``content`` covers positions
        max(start, 1) onward; SOS is prepended when ``start`` is 0."""
        words = self.word_embed(Tensor(content))
        if start == 0:
            words = ops.concat([self.sos(f_deg), words], axis=1)
        n = words.shape[1]
        return ops.add(words, self.level_embed(self.levels[start:start + n]))

    def build_teacher_input(self, maps: list, f_deg: np.ndarray, quantizer: MSVQ) -> TokenSequence:
        f_deg = _batch(f_deg)
        if list(quantizer.schedule.sizes) != list(self.cfg.schedule.sizes):
            raise ConfigError("codec schedule does not match transformer schedule")
        maps = [np.asarray(r)[None] if np.asarray(r).ndim == 2 else np.asarray(r) for r in maps]
        content = teacher_content(maps, quantizer)
        return TokenSequence(content, self.embed(content, f_deg), block_boundaries(self.cfg.schedule))

    # -------------------------------------------------------------- forward
    def cond_kv(self, f_deg: np.ndarray) -> list:
        cond = self.cond_tokens(f_deg)
        return [blk.cross.project_kv(cond) for blk in self.blocks]

    def run_blocks(self, x: Tensor, rows: slice, f_deg: Optional[np.ndarray], use_cross: bool = True,
                   cache: Optional[KVCache] = None, kv: Optional[list] = None, mask_cols: Optional[int] = None):
        """Blocks over token rows ``rows`` of the full sequence; returns hidden states."""
        if use_cross and kv is None:
            kv = self.cond_kv(f_deg)
        cols = mask_cols if mask_cols is not None else rows.stop
        mask = self.mask[rows, :cols]
        rope = (self.rope_cos[rows], self.rope_sin[rows])
        for i, blk in enumerate(self.blocks):
            x = blk(x, mask, rope, kv[i] if use_cross else None,
                    cache.layers[i] if cache is not None else None)
            if not np.all(np.isfinite(x.data)):
                raise NonFiniteError(f"non-finite activations after transformer block {i}")
        return x

    def logits(self, hidden: Tensor) -> Tensor:
        return self.head(self.ln_f(hidden))

    def forward_train(self, tokens: TokenSequence, f_deg: np.ndarray, use_cross: bool = True,
                      return_hidden: bool = False):
        """Full-sequence logits B×(1+L)×V (and final hidden states)."""
        f_deg = _batch(f_deg)
        T = self.cfg.seq_len
        hidden = self.run_blocks(tokens.embeddings, slice(0, T), f_deg, use_cross=use_cross)
        logits = self.logits(hidden)
        return (logits, hidden) if return_hidden else logits

    def loss(self, tokens: TokenSequence, f_deg: np.ndarray, targets: np.ndarray) -> Tensor:
        """Mean cross-entropy of positions 1..L against the concatenated maps."""
        logits = self.forward_train(tokens, f_deg)
        B, T, V = logits.shape
        pred = ops.getitem(logits, (slice(None), slice(1, T)))
        return ops.cross_entropy(ops.reshape(pred, (B * (T - 1), V)), targets.reshape(-1))

    # ------------------------------------------------------------ inference
    def infer(self, f_deg: np.ndarray, quantizer: MSVQ, sampling: str = "greedy", topk: int = 600,
              temp: float = 1.0, seed: int = 0, use_cache: bool = True, step_log: Optional[Callable] = None):
        """Generate index maps scale by scale.

        Returns (maps, z, per-block logits) where z is the B×(1+L)×D output of
        the final transformer block.
        """
        f_deg = _batch(f_deg)
        sched = self.cfg.schedule
        B = f_deg.shape[0]
        rng = np.random.default_rng(seed)
        cache = KVCache.empty(self.cfg.depth) if use_cache else None
        maps, hidden_chunks, block_logits = [], [], []
        emb_chunks: list[Tensor] = []
        f_quant = None
        C = self.cfg.cond_dim
        with no_grad():
            kv = self.cond_kv(f_deg)
            for k in range(sched.K):
                lo, hi = self.bounds[k + 1], self.bounds[k + 2]
                if k == 0:
                    content = np.zeros((B, sched.token_counts[0], C), np.float32)
                    emb = self.embed(content, f_deg, start=0)
                    start = 0
                else:
                    hk, wk = sched.sizes[k]
                    content = flatten_grid(ops.resize_bilinear(Tensor(f_quant), hk, wk).data)
                    emb = self.embed(content, f_deg, start=lo)
                    start = lo
                if use_cache:
                    if cache.length != start:
                        raise AssertionError(f"KV cache length {cache.length} != sequence offset {start}")
                    h = self.run_blocks(emb, slice(start, hi), None, kv=kv, cache=cache)
                    if cache.length != hi:
                        raise AssertionError(f"KV cache length {cache.length} != {hi} after scale {k + 1}")
                else:
                    emb_chunks.append(emb)
                    full = ops.concat(emb_chunks, axis=1) if len(emb_chunks) > 1 else emb
                    h_all = self.run_blocks(full, slice(0, hi), None, kv=kv)
                    h = ops.getitem(h_all, (slice(None), slice(start, hi)))
                hidden_chunks.append(h.data)
                logit = self.logits(h).data[:, (lo - start):]
                block_logits.append(logit)
                r = sample_indices(logit, sampling, topk, temp, rng).reshape(B, *sched.sizes[k])
                maps.append(r)
                if step_log is not None:
                    step_log(k + 1, sched.sizes[k])
                out = quantizer.scale_output(k, r).data
                f_quant = out if f_quant is None else f_quant + out
        z = np.concatenate(hidden_chunks, axis=1)
        return maps, z, block_logits


def sample_indices(logits: np.ndarray, sampling: str, topk: int, temp: float,
                   rng: np.random.Generator) -> np.ndarray:
    if sampling == "greedy":
        return logits.argmax(axis=-1)
    if sampling != "topk":
        raise ConfigError(f"unknown sampling mode {sampling!r}")
    flat = logits.reshape(-1, logits.shape[-1]).astype(np.float64) / max(temp, 1e-6)
    k = min(topk, flat.shape[1])
    out = np.empty(flat.shape[0], dtype=np.int64)
    for i, row in enumerate(flat):
        keep = np.argpartition(-row, k - 1)[:k]
        p = np.exp(row[keep] - row[keep].max())
        out[i] = keep[rng.choice(k, p=p / p.sum())]
    return out.reshape(logits.shape[:-1])


def _batch(f: np.ndarray) -> np.ndarray:
    f = f.data if isinstance(f, Tensor) else np.asarray(f, np.float32)
    return f[None] if f.ndim == 3 else f


# ----------------------------------------------------------------- training
@dataclass
class VarTrainConfig:
    steps: int = 2000
    batch: int = 16
    lr: float = 1e-4
    weight_decay: float = 0.01
    warmup: int = 50
    seed: int = 0
    log_every: int = 100
    target_loss: Optional[float] = None


@dataclass
class TeacherData:
    """Frozen-codec products for a set of (clean, degraded) pairs."""
    content: np.ndarray      # N × L × C
    targets: np.ndarray      # N × L
    f_deg: np.ndarray        # N × C × H_K × W_K
    maps: list               # K arrays N × H_k × W_k

    def __len__(self) -> int:
        return self.targets.shape[0]

    def subset(self, idx) -> "TeacherData":
        return TeacherData(self.content[idx], self.targets[idx], self.f_deg[idx], [m[idx] for m in self.maps])


def prepare_teacher_data(codec, clean: np.ndarray, degraded: np.ndarray, batch: int = 64) -> TeacherData:
    """Run the frozen codec over clean/degraded pairs."""
    contents, targets, fdegs, maps_all = [], [], [], []
    for i in range(0, clean.shape[0], batch):
        f_gt = codec.encode_continuous(clean[i:i + batch])
        maps, _ = codec.multiscale_encode(f_gt)
        contents.append(teacher_content(maps, codec.quantizer))
        targets.append(targets_from_maps(maps))
        fdegs.append(codec.encode_continuous(degraded[i:i + batch]))
        maps_all.append(maps)
    maps = [np.concatenate([m[k] for m in maps_all]) for k in range(codec.schedule.K)]
    return TeacherData(np.concatenate(contents), np.concatenate(targets), np.concatenate(fdegs), maps)


def train_var(data: TeacherData, cfg: TransformerConfig, tcfg: VarTrainConfig,
              model: Optional[ScaleAR] = None, log_fn=None) -> tuple[ScaleAR, list[dict]]:
    model = model or ScaleAR(cfg, seed=tcfg.seed)
    rng = np.random.default_rng(tcfg.seed + 1)
    opt = AdamW(model.parameters(), lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    curve = []
    n = len(data)
    for step in range(tcfg.steps):
        idx = rng.choice(n, size=min(tcfg.batch, n), replace=False) if n > tcfg.batch else np.arange(n)
        opt.lr = cosine_lr(step, tcfg.steps, tcfg.lr, warmup=tcfg.warmup)
        opt.zero_grad()
        tokens = TokenSequence(data.content[idx], model.embed(data.content[idx], data.f_deg[idx]))
        loss = model.loss(tokens, data.f_deg[idx], data.targets[idx])
        value = loss.item()
        if not np.isfinite(value):
            raise NonFiniteError(f"transformer loss became {value} at step {step}")
        loss.backward()
        opt.step()
        rec = {"step": step, "loss": value}
        curve.append(rec)
        if log_fn and (step % tcfg.log_every == 0 or step == tcfg.steps - 1):
            log_fn(rec)
        if tcfg.target_loss is not None and value < tcfg.target_loss:
            break
    return model, curve
