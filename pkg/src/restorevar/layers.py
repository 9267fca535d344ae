"""Attention building blocks shared by the AR backbone and the latent refiner."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import ops
from .autodiff.nn import LayerNorm, Linear, Module
from .autodiff.tensor import Tensor, as_tensor, make_node


# ---------------------------------------------------------------- 2D rotary
def rope_angles(positions: Sequence[tuple], head_dim: int, base: float = 100.0) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables (T × head_dim/2) for (row, col[, scale]) positions.

    Pairs 0 .. head_dim/4-1 rotate with the row coordinate, the remaining
    pairs with the column coordinate.
    """
    if head_dim % 4:
        raise ValueError(f"2D rotary embedding needs head_dim divisible by 4, got {head_dim}")
    quarter = head_dim // 4
    freqs = base ** (-np.arange(quarter, dtype=np.float64) / quarter)
    pos = np.asarray([(p[0], p[1]) for p in positions], dtype=np.float64).reshape(-1, 2)
    ang = np.concatenate([pos[:, :1] * freqs, pos[:, 1:2] * freqs], axis=1)
    return np.cos(ang).astype(np.float32), np.sin(ang).astype(np.float32)


def rope_apply(x, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate adjacent channel pairs of x (..., T, head_dim) by the given angles."""
    x = as_tensor(x)
    shape = x.shape
    xp = x.data.reshape(shape[:-1] + (shape[-1] // 2, 2))
    a, b = xp[..., 0], xp[..., 1]
    out = np.empty_like(xp)
    out[..., 0] = a * cos - b * sin
    out[..., 1] = a * sin + b * cos

    def bw(g):
        gp = g.reshape(xp.shape)
        ga, gb = gp[..., 0], gp[..., 1]
        back = np.empty_like(gp)
        back[..., 0] = ga * cos + gb * sin
        back[..., 1] = -ga * sin + gb * cos
        return (back.reshape(shape),)

    return make_node(out.reshape(shape), (x,), bw, "rope")


def scale_positions(schedule, with_sos: bool = True) -> list[tuple[float, float, int]]:
    """(row, col, scale) per token, rows/cols stretched onto the final grid."""
    HK, WK = schedule.final
    out = [(0.0, 0.0, 0)] if with_sos else []
    for k, (h, w) in enumerate(schedule.sizes, start=1):
        for r in range(h):
            for c in range(w):
                out.append((r * HK / h, c * WK / w, k))
    return out


# ---------------------------------------------------------------- attention
def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, T, D = x.shape
    return ops.transpose(ops.reshape(x, (B, T, heads, D // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, h, T, dh = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (B, T, h * dh))


@dataclass
class LayerCache:
    k: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None

    @property
    def length(self) -> int:
        return 0 if self.k is None else self.k.shape[2]

    def append(self, k: np.ndarray, v: np.ndarray) -> None:
        self.k = k if self.k is None else np.concatenate([self.k, k], axis=2)
        self.v = v if self.v is None else np.concatenate([self.v, v], axis=2)


@dataclass
class KVCache:
    layers: list = field(default_factory=list)

    @classmethod
    def empty(cls, depth: int) -> "KVCache":
        return cls([LayerCache() for _ in range(depth)])

    @property
    def length(self) -> int:
        return self.layers[0].length if self.layers else 0


class SelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.proj = Linear(dim, dim, rng)

    def forward(self, x, mask: Optional[np.ndarray] = None, rope=None, cache: Optional[LayerCache] = None):
        """``rope`` is a (cos, sin) pair for the rows of ``x``; with ``cache`` the
        new keys/values are appended and queries attend to the whole cache."""
        q = _split_heads(self.q(x), self.heads)
        k = _split_heads(self.k(x), self.heads)
        v = _split_heads(self.v(x), self.heads)
        if rope is not None:
            q = rope_apply(q, *rope)
            k = rope_apply(k, *rope)
        if cache is not None:
            cache.append(k.data, v.data)
            k, v = Tensor(cache.k), Tensor(cache.v)
        dh = q.shape[-1]
        scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        att = ops.softmax(scores, mask=mask)
        return self.proj(_merge_heads(ops.matmul(att, v)))


class CrossAttention(Module):
    """Queries from the token stream, keys/values from a conditioning set."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, kv_dim: Optional[int] = None):
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(kv_dim or dim, dim, rng)
        self.v = Linear(kv_dim or dim, dim, rng)
        self.proj = Linear(dim, dim, rng)

    def project_kv(self, cond) -> tuple[Tensor, Tensor]:
        return _split_heads(self.k(cond), self.heads), _split_heads(self.v(cond), self.heads)

    def forward(self, x, cond=None, kv=None, q_rope=None, k_rope=None):
        k, v = kv if kv is not None else self.project_kv(cond)
        q = _split_heads(self.q(x), self.heads)
        if q_rope is not None:
            q = rope_apply(q, *q_rope)
        if k_rope is not None:
            k = rope_apply(k, *k_rope)
        dh = q.shape[-1]
        scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        return self.proj(_merge_heads(ops.matmul(ops.softmax(scores), v)))


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x):
        return self.fc2(ops.gelu(self.fc1(x)))


__all__ = [
    "CrossAttention", "KVCache", "LayerCache", "LayerNorm", "MLP", "SelfAttention",
    "rope_angles", "rope_apply", "scale_positions",
]
