"""Central finite-difference checks for registered ops."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import ops
from .tensor import Tensor, float64_mode


def numeric_grad(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], which: int,
                 eps: float = 1e-3) -> np.ndarray:
    """Central differences of scalar ``fn`` w.r.t. input ``which``, in float64."""
    base = [np.array(a, dtype=np.float64) for a in inputs]
    x = base[which]
    g = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    with float64_mode():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(fn(*[Tensor(a) for a in base]).data)
            flat[i] = orig - eps
            fm = float(fn(*[Tensor(a) for a in base]).data)
            flat[i] = orig
            g.reshape(-1)[i] = (fp - fm) / (2 * eps)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error, guarded against all-zero gradients."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


def check_op(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-3,
             rng: np.random.Generator | None = None) -> float:
    """Worst relative error over all inputs of ``fn``.

    Non-scalar outputs are contracted with a fixed random weight so every
    output element contributes to the checked scalar.
    """
    rng = rng or np.random.default_rng(0)
    probe = fn(*[Tensor(a) for a in inputs])
    weight = None if probe.size == 1 else rng.standard_normal(probe.shape)

    def scalar(*ts):
        out = fn(*ts)
        return out if weight is None else ops.sum(ops.mul(out, weight))

    worst = 0.0
    for k in range(len(inputs)):
        leaves = [Tensor(a, requires_grad=(i == k)) for i, a in enumerate(inputs)]
        scalar(*leaves).backward()
        analytic = leaves[k].grad
        numeric = numeric_grad(scalar, inputs, k, eps)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def _pos(rng, *shape):
    return rng.uniform(0.5, 2.0, shape).astype(np.float32)


def _away_from_zero(rng, *shape):
    x = rng.uniform(0.2, 1.5, shape) * rng.choice([-1.0, 1.0], shape)
    return x.astype(np.float32)


def _std(rng, *shape):
    return rng.standard_normal(shape).astype(np.float32)


_MASK = np.tril(np.ones((4, 4), dtype=bool))

# name -> (function of Tensors, input factory). Inputs are kept away from
# kinks (abs, L1, leaky relu) so central differences are well-defined.
OP_CASES: dict[str, tuple[Callable, Callable]] = {
    "add": (lambda a, b: ops.add(a, b), lambda r: [_std(r, 3, 4), _std(r, 1, 4)]),
    "sub": (lambda a, b: ops.sub(a, b), lambda r: [_std(r, 3, 4), _std(r, 3, 1)]),
    "mul": (lambda a, b: ops.mul(a, b), lambda r: [_std(r, 3, 4), _std(r, 3, 4)]),
    "div": (lambda a, b: ops.div(a, b), lambda r: [_std(r, 3, 4), _pos(r, 3, 4)]),
    "pow": (lambda a: ops.power(a, 3.0), lambda r: [_std(r, 5)]),
    "exp": (lambda a: ops.exp(a), lambda r: [_std(r, 2, 3)]),
    "log": (lambda a: ops.log(a), lambda r: [_pos(r, 2, 3)]),
    "sqrt": (lambda a: ops.sqrt(a), lambda r: [_pos(r, 2, 3)]),
    "abs": (lambda a: ops.absolute(a), lambda r: [_away_from_zero(r, 2, 3)]),
    "sigmoid": (lambda a: ops.sigmoid(a), lambda r: [_std(r, 2, 5)]),
    "tanh": (lambda a: ops.tanh(a), lambda r: [_std(r, 2, 5)]),
    "gelu": (lambda a: ops.gelu(a), lambda r: [_std(r, 2, 5)]),
    "leaky_relu": (lambda a: ops.leaky_relu(a, 0.2), lambda r: [_away_from_zero(r, 2, 5)]),
    "sum": (lambda a: ops.sum(a, axis=1), lambda r: [_std(r, 3, 4)]),
    "mean": (lambda a: ops.mean(a, axis=(0, 2), keepdims=True), lambda r: [_std(r, 2, 3, 4)]),
    "reshape_transpose": (lambda a: ops.transpose(ops.reshape(a, (4, 3, 2)), (2, 0, 1)),
                          lambda r: [_std(r, 2, 3, 4)]),
    "getitem": (lambda a: ops.getitem(a, (slice(1, 3), [0, 2, 2])), lambda r: [_std(r, 4, 3)]),
    "concat": (lambda a, b: ops.concat([a, b], axis=1), lambda r: [_std(r, 2, 3), _std(r, 2, 2)]),
    "matmul": (lambda a, b: ops.matmul(a, b), lambda r: [_std(r, 3, 4), _std(r, 4, 2)]),
    "matmul_batched": (lambda a, b: ops.matmul(a, b), lambda r: [_std(r, 2, 3, 4), _std(r, 4, 5)]),
    "linear": (lambda x, w, b: ops.linear(x, w, b),
               lambda r: [_std(r, 2, 3, 4), _std(r, 4, 5), _std(r, 5)]),
    "embedding": (lambda w: ops.embedding(w, [[0, 3], [3, 1]]), lambda r: [_std(r, 4, 3)]),
    "conv2d": (lambda x, w, b: ops.conv2d(x, w, b, stride=1, pad=1),
               lambda r: [_std(r, 2, 2, 5, 5), _std(r, 3, 2, 3, 3), _std(r, 3)]),
    "conv2d_stride2": (lambda x, w, b: ops.conv2d(x, w, b, stride=2, pad=1),
                       lambda r: [_std(r, 1, 2, 6, 6), _std(r, 2, 2, 4, 4), _std(r, 2)]),
    "resize_up": (lambda x: ops.resize_bilinear(x, 5, 7), lambda r: [_std(r, 1, 2, 3, 4)]),
    "resize_down": (lambda x: ops.resize_bilinear(x, 2, 3), lambda r: [_std(r, 1, 2, 6, 5)]),
    "softmax": (lambda x: ops.softmax(x), lambda r: [_std(r, 3, 6)]),
    "masked_softmax": (lambda x: ops.softmax(x, mask=_MASK), lambda r: [_std(r, 2, 4, 4)]),
    "log_softmax": (lambda x: ops.log_softmax(x), lambda r: [_std(r, 3, 6)]),
    "cross_entropy": (lambda x: ops.cross_entropy(x, [1, 0, 4]), lambda r: [_std(r, 3, 5)]),
    "l1_loss": (lambda a, b: ops.l1_loss(a, b),
                lambda r: [_std(r, 3, 4), _std(r, 3, 4) + 3.0 * np.sign(_std(r, 3, 4))]),
    "mse_loss": (lambda a, b: ops.mse_loss(a, b), lambda r: [_std(r, 3, 4), _std(r, 3, 4)]),
    "layernorm": (lambda x, w, b: ops.layernorm(x, w, b),
                  lambda r: [_std(r, 3, 6), _pos(r, 6), _std(r, 6)]),
}


def run_suite(seeds: Sequence[int] = (0, 1, 2, 3, 4), eps: float = 1e-3) -> dict[str, float]:
    """Worst relative error per registered op across ``seeds``."""
    worst: dict[str, float] = {}
    for name, (fn, make) in OP_CASES.items():
        for seed in seeds:
            rng = np.random.default_rng(seed)
            err = check_op(fn, make(rng), eps=eps, rng=rng)
            worst[name] = max(worst.get(name, 0.0), err)
    return worst
