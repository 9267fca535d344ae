"""Multi-scale residual vector-quantized autoencoder.

Latents are channels-first: ``f_cont`` is B×C×H_K×W_K (a single image may be
passed as C×H_K×W_K). Quantization walks the scale schedule coarse to fine:

    r_k      = quantize(resize(f_res[k-1] -> H_k×W_k))
    h_k      = phi_k(resize(e(r_k) -> H_K×W_K))
    f_quant[k] = f_quant[k-1] + h_k
    f_res[k]   = f_cont - f_quant[k]

with ``f_res[0] = f_cont`` and ``f_quant[0] = 0``.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Optional, Sequence

import numpy as np

from .autodiff import ops
from .autodiff.nn import Conv2d, Module, Parameter
from .autodiff.ops import ConfigError
from .autodiff.optim import AdamW, cosine_lr
from .autodiff.tensor import NonFiniteError, Tensor, no_grad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScaleSchedule:
    sizes: tuple

    def __post_init__(self):
        sizes = tuple((int(h), int(w)) for h, w in self.sizes)
        object.__setattr__(self, "sizes", sizes)
        if not sizes:
            raise ConfigError("scale schedule needs at least one scale")
        for (h0, w0), (h1, w1) in zip(sizes, sizes[1:]):
            if h1 < h0 or w1 < w0:
                raise ConfigError(f"scale sizes must be non-decreasing, got {sizes}")
        if any(h < 1 or w < 1 for h, w in sizes):
            raise ConfigError(f"scale sizes must be positive, got {sizes}")

    @property
    def K(self) -> int:
        return len(self.sizes)

    @property
    def final(self) -> tuple[int, int]:
        return self.sizes[-1]

    @property
    def token_counts(self) -> list[int]:
        return [h * w for h, w in self.sizes]

    @property
    def L(self) -> int:
        return sum(self.token_counts)

    def offsets(self) -> list[int]:
        """Start offset of every scale block inside the flattened L tokens."""
        out, acc = [], 0
        for n in self.token_counts:
            out.append(acc)
            acc += n
        return out

    @classmethod
    def parse(cls, text: str) -> "ScaleSchedule":
        sizes = []
        for part in text.split(","):
            h, _, w = part.strip().partition("x")
            sizes.append((int(h), int(w or h)))
        return cls(tuple(sizes))

    def __str__(self) -> str:
        return ",".join(f"{h}x{w}" for h, w in self.sizes)


TOY_SCHEDULE = ScaleSchedule(((1, 1), (2, 2), (4, 4), (8, 8)))


@dataclass
class CodecConfig:
    vocab: int = 512
    channels: int = 16
    factor: int = 4
    image_size: int = 32
    width: int = 32
    schedule: ScaleSchedule = TOY_SCHEDULE
    beta: float = 0.25
    revive_after: int = 200

    def __post_init__(self):
        if self.image_size % self.factor:
            raise ConfigError(f"image size {self.image_size} not divisible by factor {self.factor}")
        side = self.image_size // self.factor
        if self.schedule.final != (side, side):
            raise ConfigError(f"final scale {self.schedule.final} != latent grid {(side, side)}")


@dataclass
class LatentPyramid:
    """Per-scale quantities for one batch; every array is B×C×H_K×W_K."""
    f_cont: np.ndarray
    f_quant: list = field(default_factory=list)
    f_res: list = field(default_factory=list)
    h: list = field(default_factory=list)


# --------------------------------------------------------------------- nets
@dataclass(frozen=True)
class ConvSpec:
    c_in: int
    c_out: int
    k: int = 3
    stride: int = 1
    upsample: int = 1
    act: Optional[str] = "gelu"
    zero: bool = False


def _activate(x, act):
    if act is None:
        return x
    if act == "gelu":
        return ops.gelu(x)
    if act == "sigmoid":
        return ops.sigmoid(x)
    if act == "leaky":
        return ops.leaky_relu(x, 0.2)
    raise ConfigError(f"unknown activation {act!r}")


class ConvStack(Module):
    def __init__(self, specs: Sequence[ConvSpec], rng: np.random.Generator):
        self.specs = tuple(specs)
        self.layers = [Conv2d(s.c_in, s.c_out, s.k, rng, stride=s.stride, zero=s.zero) for s in self.specs]

    @property
    def scale(self) -> float:
        s = 1.0
        for spec in self.specs:
            s = s * spec.stride / spec.upsample
        return s

    def forward(self, x):
        for spec, conv in zip(self.specs, self.layers):
            if spec.upsample > 1:
                x = ops.resize_bilinear(x, x.shape[-2] * spec.upsample, x.shape[-1] * spec.upsample)
            x = _activate(conv(x), spec.act)
        return x


class EncoderNet(ConvStack):
    @classmethod
    def default(cls, channels: int, width: int, rng: np.random.Generator) -> "EncoderNet":
        return cls([
            ConvSpec(3, width),
            ConvSpec(width, 2 * width, k=4, stride=2),
            ConvSpec(2 * width, 2 * width, k=4, stride=2),
            ConvSpec(2 * width, channels, act=None),
        ], rng)


class DecoderNet(ConvStack):
    @classmethod
    def default(cls, channels: int, width: int, rng: np.random.Generator) -> "DecoderNet":
        return cls([
            ConvSpec(channels, 2 * width),
            ConvSpec(2 * width, width, upsample=2),
            ConvSpec(width, width, upsample=2),
            ConvSpec(width, 3, act="sigmoid"),
        ], rng)


class Codebook(Module):
    def __init__(self, vocab: int, channels: int, rng: np.random.Generator):
        if vocab < 1:
            raise ConfigError("codebook needs at least one entry")
        self.weight = Parameter(rng.uniform(-1.0 / vocab, 1.0 / vocab, (vocab, channels)).astype(np.float32))

    @property
    def V(self) -> int:
        return self.weight.shape[0]

    def lookup(self, idx) -> Tensor:
        return ops.embedding(self.weight, idx)


class Phi(Module):
    """x + conv3x3(x); the conv starts at zero so phi starts as the identity."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv = Conv2d(channels, channels, 3, rng, zero=True)

    def forward(self, x):
        return ops.add(x, self.conv(x))


# ------------------------------------------------------------- quantization
def quantize_nearest(feat, codebook) -> np.ndarray:
    """Nearest codebook row per spatial position, lowest index on ties.

    ``feat`` is C×h×w or B×C×h×w; returns h×w or B×h×w int64 indices.
    """
    f = feat.data if isinstance(feat, Tensor) else np.asarray(feat)
    table = codebook.weight.data if isinstance(codebook, Codebook) else np.asarray(codebook)
    single = f.ndim == 3
    if single:
        f = f[None]
    B, C, h, w = f.shape
    vecs = f.transpose(0, 2, 3, 1).reshape(-1, C).astype(np.float64)
    e = table.astype(np.float64)
    # float64 expansion of |v - e|^2; argmin returns the first minimum
    d = (vecs * vecs).sum(axis=1, keepdims=True) - 2.0 * (vecs @ e.T) + (e * e).sum(axis=1)
    out = d.argmin(axis=1).reshape(B, h, w)
    return out[0] if single else out


def _embed_map(codebook: Codebook, r: np.ndarray) -> Tensor:
    """B×h×w indices -> B×C×h×w embeddings."""
    emb = codebook.lookup(r)  # B×h×w×C
    return ops.transpose(emb, (0, 3, 1, 2))


class MSVQ(Module):
    """Shared codebook plus one phi per scale."""

    def __init__(self, schedule: ScaleSchedule, vocab: int, channels: int, rng: np.random.Generator):
        self.schedule = schedule
        self.codebook = Codebook(vocab, channels, rng)
        self.phis = [Phi(channels, rng) for _ in range(schedule.K)]

    def scale_output(self, k: int, r: np.ndarray) -> Tensor:
        """h_k for 0-based scale ``k`` from its B×H_k×W_k index map."""
        HK, WK = self.schedule.final
        up = ops.resize_bilinear(_embed_map(self.codebook, r), HK, WK)
        return self.phis[k](up)

    def encode(self, f_cont, keep_graph: bool = False):
        """Run the residual recurrences. Returns (maps, pyramid, f_quant tensors).

        With ``keep_graph`` the returned per-scale f_quant tensors stay linked to
        the codebook and phi parameters; index selection never carries gradient.
        """
        f = f_cont.data if isinstance(f_cont, Tensor) else np.asarray(f_cont, np.float32)
        single = f.ndim == 3
        if single:
            f = f[None]
        if tuple(f.shape[-2:]) != self.schedule.final:
            raise ConfigError(f"latent grid {f.shape[-2:]} != final scale {self.schedule.final}")
        maps: list[np.ndarray] = []
        pyr = LatentPyramid(f_cont=f.copy())
        quant_tensors: list[Tensor] = []
        f_quant: Optional[Tensor] = None
        residual = f
        for k, (hk, wk) in enumerate(self.schedule.sizes):
            with no_grad():
                down = ops.resize_bilinear(Tensor(residual), hk, wk)
            r = quantize_nearest(down, self.codebook)
            maps.append(r)
            if keep_graph:
                h = self.scale_output(k, r)
            else:
                with no_grad():
                    h = self.scale_output(k, r)
            f_quant = h if f_quant is None else ops.add(f_quant, h)
            residual = f - f_quant.data
            quant_tensors.append(f_quant)
            pyr.h.append(h.data)
            pyr.f_quant.append(f_quant.data)
            pyr.f_res.append(residual)
        if single:
            maps = [m[0] for m in maps]
            pyr = LatentPyramid(pyr.f_cont[0], [a[0] for a in pyr.f_quant],
                                [a[0] for a in pyr.f_res], [a[0] for a in pyr.h])
        return maps, pyr, quant_tensors

    def partial_reconstruct(self, maps: Sequence[np.ndarray], upto_k: int) -> np.ndarray:
        """Sum of the first ``upto_k`` (1-based) scale outputs, from indices alone."""
        if not 1 <= upto_k <= self.schedule.K:
            raise ValueError(f"upto_k must be in [1, {self.schedule.K}], got {upto_k}")
        single = np.asarray(maps[0]).ndim == 2
        total = None
        with no_grad():
            for k in range(upto_k):
                r = np.asarray(maps[k])
                r = r[None] if single else r
                if r.shape[-2:] != self.schedule.sizes[k]:
                    raise ConfigError(f"index map {k} has shape {r.shape[-2:]}, expected {self.schedule.sizes[k]}")
                h = self.scale_output(k, r).data
                total = h if total is None else total + h
        return total[0] if single else total


# -------------------------------------------------------------------- codec
class Codec(Module):
    def __init__(self, cfg: CodecConfig, seed: int = 0, encoder: Optional[EncoderNet] = None,
                 decoder: Optional[DecoderNet] = None):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = encoder or EncoderNet.default(cfg.channels, cfg.width, rng)
        self.quantizer = MSVQ(cfg.schedule, cfg.vocab, cfg.channels, rng)
        self.decoder = decoder or DecoderNet.default(cfg.channels, cfg.width, rng)

    @property
    def schedule(self) -> ScaleSchedule:
        return self.cfg.schedule

    def encode_continuous(self, image) -> np.ndarray:
        return encode_continuous(self.encoder, image, self.cfg.factor)

    def multiscale_encode(self, f_cont):
        maps, pyr, _ = self.quantizer.encode(f_cont)
        return maps, pyr

    def partial_reconstruct(self, maps, upto_k: int) -> np.ndarray:
        return self.quantizer.partial_reconstruct(maps, upto_k)

    def decode_image(self, latent) -> np.ndarray:
        return decode_image(self.decoder, latent)


def _batched(x) -> tuple[np.ndarray, bool]:
    a = x.data if isinstance(x, Tensor) else np.asarray(x, np.float32)
    return (a[None], True) if a.ndim == 3 else (a, False)


def encode_continuous(encoder: EncoderNet, image, factor: int) -> np.ndarray:
    """Encoder forward for a 3×H×W image (or a batch); returns the continuous latent."""
    x, single = _batched(image)
    H, W = x.shape[-2:]
    if H % factor or W % factor:
        raise ConfigError(f"image {H}x{W} not divisible by spatial factor {factor}")
    with no_grad():
        out = encoder(Tensor(x)).data
    return out[0] if single else out


def decode_image(decoder: DecoderNet, latent) -> np.ndarray:
    """Decoder forward, clamped to [0, 1]."""
    z, single = _batched(latent)
    with no_grad():
        out = np.clip(decoder(Tensor(z)).data, 0.0, 1.0)
    return out[0] if single else out


def multiscale_encode(f_cont, schedule: ScaleSchedule, cb: Codebook, phi: Sequence[Phi]):
    """Functional form over explicit codebook/phi objects."""
    q = MSVQ.__new__(MSVQ)
    q.schedule, q.codebook, q.phis = schedule, cb, list(phi)
    maps, pyr, _ = q.encode(f_cont)
    return maps, pyr


def partial_reconstruct(maps, upto_k: int, cb: Codebook, phi: Sequence[Phi], schedule: ScaleSchedule):
    q = MSVQ.__new__(MSVQ)
    q.schedule, q.codebook, q.phis = schedule, cb, list(phi)
    return q.partial_reconstruct(maps, upto_k)


# -------------------------------------------------------------- index files
INDEX_MAGIC = b"RVI1"


def write_index_maps(fh: BinaryIO, maps: Sequence[np.ndarray]) -> None:
    """RVI1: magic, u8 K, then per scale u16 H_k, u16 W_k and u32 LE indices."""
    fh.write(INDEX_MAGIC + struct.pack("<B", len(maps)))
    for r in maps:
        r = np.asarray(r)
        h, w = r.shape
        fh.write(struct.pack("<HH", h, w))
        fh.write(np.ascontiguousarray(r, dtype="<u4").tobytes())


def read_index_maps(fh: BinaryIO) -> list[np.ndarray]:
    if fh.read(4) != INDEX_MAGIC:
        raise ValueError("not an RVI1 index file")
    (K,) = struct.unpack("<B", fh.read(1))
    maps = []
    for _ in range(K):
        h, w = struct.unpack("<HH", fh.read(4))
        maps.append(np.frombuffer(fh.read(4 * h * w), dtype="<u4").astype(np.int64).reshape(h, w))
    return maps


# ----------------------------------------------------------------- training
@dataclass
class CodecTrainConfig:
    steps: int = 2000
    batch: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.01
    warmup: int = 50
    seed: int = 0
    log_every: int = 100


def quantizer_inputs(quantizer: MSVQ, f_cont: np.ndarray) -> list[np.ndarray]:
    """Per-scale downsampled residuals (N_k × C vectors) seen by the quantizer."""
    _, pyr, _ = quantizer.encode(f_cont)
    res = [pyr.f_cont] + pyr.f_res[:-1]
    out = []
    with no_grad():
        for r, (hk, wk) in zip(res, quantizer.schedule.sizes):
            d = ops.resize_bilinear(Tensor(r), hk, wk).data
            out.append(d.transpose(0, 2, 3, 1).reshape(-1, d.shape[1]))
    return out


def init_codebook_from_data(quantizer: MSVQ, f_cont: np.ndarray, rng: np.random.Generator) -> None:
    """Seed the shared codebook scale by scale from actual quantizer inputs.

    Codes are split evenly across scales; scale k's share is drawn from the
    residual left after quantizing scales < k with the codes seeded so far.
    """
    table = quantizer.codebook.weight.data
    V = table.shape[0]
    K = quantizer.schedule.K
    bounds = np.linspace(0, V, K + 1).astype(int)
    for k in range(K):
        pool = quantizer_inputs(quantizer, f_cont)[k]
        lo, hi = bounds[k], bounds[k + 1]
        pick = rng.choice(pool.shape[0], size=hi - lo, replace=pool.shape[0] < hi - lo)
        jitter = 0.01 * np.std(pool) * rng.standard_normal((hi - lo, table.shape[1]))
        table[lo:hi] = pool[pick] + jitter.astype(np.float32)


def codec_loss(codec: Codec, images: np.ndarray):
    """Reconstruction + commitment + codebook terms for one batch.

    The decoder sees f_cont + sg(f_quant - f_cont) (straight-through); the
    codebook and phi modules learn from the per-scale codebook term.
    """
    cfg = codec.cfg
    x = Tensor(images)
    f_cont = codec.encoder(x)
    maps, _, quants = codec.quantizer.encode(f_cont, keep_graph=True)
    f_sg = Tensor(f_cont.data)
    codebook_term = ops.mean(ops.stack([ops.mse_loss(q, f_sg) for q in quants]))
    commit = ops.mse_loss(f_cont, Tensor(quants[-1].data))
    st = ops.add(f_cont, Tensor(quants[-1].data - f_cont.data))
    recon = ops.mse_loss(codec.decoder(st), x)
    total = recon + cfg.beta * commit + codebook_term
    parts = {"recon": recon.item(), "commit": commit.item(), "codebook": codebook_term.item()}
    return total, parts, maps, f_cont.data


def train_codec(images: np.ndarray, cfg: CodecConfig, tcfg: CodecTrainConfig,
                codec: Optional[Codec] = None, log_fn=None) -> tuple[Codec, list[dict]]:
    """Train the codec on clean N×3×H×W images; returns the model and loss curve."""
    fresh = codec is None
    codec = codec or Codec(cfg, seed=tcfg.seed)
    rng = np.random.default_rng(tcfg.seed + 1)
    if fresh:
        probe = images[rng.choice(images.shape[0], size=min(64, images.shape[0]), replace=False)]
        init_codebook_from_data(codec.quantizer, encode_continuous(codec.encoder, probe, cfg.factor), rng)
    opt = AdamW(codec.parameters(), lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    last_used = np.zeros(cfg.vocab, dtype=np.int64)
    curve = []
    n = images.shape[0]
    for step in range(tcfg.steps):
        idx = rng.choice(n, size=min(tcfg.batch, n), replace=False)
        opt.lr = cosine_lr(step, tcfg.steps, tcfg.lr, warmup=tcfg.warmup)
        opt.zero_grad()
        total, parts, maps, f_cont = codec_loss(codec, images[idx])
        loss = total.item()
        if not np.isfinite(loss):
            raise NonFiniteError(f"codec loss became {loss} at step {step}: {parts}")
        total.backward()
        opt.step()
        for r in maps:
            last_used[np.unique(r)] = step
        dead = np.nonzero(step - last_used >= cfg.revive_after)[0]
        if dead.size:
            pool = np.concatenate(quantizer_inputs(codec.quantizer, f_cont))
            pick = rng.choice(pool.shape[0], size=dead.size, replace=pool.shape[0] < dead.size)
            codec.quantizer.codebook.weight.data[dead] = pool[pick]
            last_used[dead] = step
        rec = {"step": step, "loss": loss, **parts, "revived": int(dead.size)}
        curve.append(rec)
        if log_fn and (step % tcfg.log_every == 0 or step == tcfg.steps - 1):
            log_fn(rec)
    return codec, curve
