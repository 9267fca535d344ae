"""Procedural clean scenes, synthetic degradations, PPM and manifest I/O.

The four synthetic degradations stand in for the five restoration tasks of
the full-scale benchmark (see ``TASK_STANDINS``).
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

KINDS = ("noise", "blur", "darken", "haze")

TASK_STANDINS = {
    "haze": "dehazing (atmospheric scattering model)",
    "darken": "low-light enhancement (gamma darkening)",
    "blur": "deblurring, both defocus and motion (Gaussian kernel)",
    "noise": "deraining / desnowing (additive per-pixel corruption)",
}

# Documented parameter ranges: (lo, hi) per parameter.
PARAM_RANGES = {
    "noise": {"sigma": (0.0, 0.5)},
    "blur": {"ksize": (1, 15)},
    "darken": {"gamma": (1.0, 5.0)},
    "haze": {"t": (0.0, 1.0), "A": (0.0, 1.0)},
}

# Ranges used when sampling benchmark pairs.
SAMPLE_RANGES = {
    "noise": {"sigma": (0.06, 0.14)},
    "blur": {"ksize": (3, 5)},
    "darken": {"gamma": (1.8, 2.6)},
    "haze": {"t": (0.45, 0.7), "A": (0.75, 1.0)},
}


class DegradationError(ValueError):
    pass


@dataclass(frozen=True)
class DegradationSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PARAM_RANGES:
            raise DegradationError(f"unknown degradation kind {self.kind!r}; expected one of {KINDS}")
        ranges = PARAM_RANGES[self.kind]
        for key, value in self.params.items():
            if key not in ranges:
                raise DegradationError(f"{self.kind}: unknown parameter {key!r}")
            lo, hi = ranges[key]
            if not lo <= value <= hi:
                raise DegradationError(f"{self.kind}: {key}={value} outside [{lo}, {hi}]")
        if self.kind == "blur" and int(self.params.get("ksize", 1)) % 2 == 0:
            raise DegradationError("blur ksize must be odd")

    def param_string(self) -> str:
        return ",".join(f"{k}={_fmt(v)}" for k, v in sorted(self.params.items()))

    @classmethod
    def from_strings(cls, kind: str, params: str, seed: str | int) -> "DegradationSpec":
        parsed = {}
        for item in filter(None, params.split(",")):
            k, _, v = item.partition("=")
            parsed[k.strip()] = float(v)
        if kind == "blur" and "ksize" in parsed:
            parsed["ksize"] = int(parsed["ksize"])
        return cls(kind, parsed, int(seed))


def _fmt(v) -> str:
    return str(int(v)) if isinstance(v, (int, np.integer)) else repr(float(v))


# ------------------------------------------------------------- clean scenes
def _supersampled_mask(shape_fn, size: int, ss: int = 4) -> np.ndarray:
    coords = (np.arange(size * ss) + 0.5) / (size * ss)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    m = shape_fn(yy, xx).astype(np.float64)
    return m.reshape(size, ss, size, ss).mean(axis=(1, 3))


def _scene(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.meshgrid((np.arange(size) + 0.5) / size, (np.arange(size) + 0.5) / size, indexing="ij")
    c0, c1 = rng.uniform(0.15, 0.85, 3), rng.uniform(0.15, 0.85, 3)
    theta = rng.uniform(0, 2 * math.pi)
    ramp = np.clip(0.5 + (np.cos(theta) * (xx - 0.5) + np.sin(theta) * (yy - 0.5)), 0, 1)
    img = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp

    for _ in range(rng.integers(1, 4)):
        color = rng.uniform(0.05, 0.95, 3)
        cy, cx = rng.uniform(0.2, 0.8, 2)
        if rng.random() < 0.5:
            rad = rng.uniform(0.1, 0.3)
            mask = _supersampled_mask(lambda y, x: (y - cy) ** 2 + (x - cx) ** 2 < rad ** 2, size)
        else:
            hh, hw = rng.uniform(0.08, 0.25, 2)
            mask = _supersampled_mask(lambda y, x: (np.abs(y - cy) < hh) & (np.abs(x - cx) < hw), size)
        img = img * (1 - mask) + color[:, None, None] * mask

    # band-limited texture: coarse noise upsampled bilinearly
    coarse = rng.standard_normal((3, 5, 5))
    tex = _bilinear_up(coarse, size)
    img = img + rng.uniform(0.02, 0.06) * tex
    return np.clip(img, 0.0, 1.0)


def _bilinear_up(a: np.ndarray, size: int) -> np.ndarray:
    n = a.shape[-1]
    src = np.clip((np.arange(size) + 0.5) * n / size - 0.5, 0, n - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    lam = src - i0
    rows = a[:, i0, :] * (1 - lam)[None, :, None] + a[:, i1, :] * lam[None, :, None]
    return rows[:, :, i0] * (1 - lam) + rows[:, :, i1] * lam


def generate_clean(n: int, size: int = 32, seed: int = 0) -> np.ndarray:
    """``n`` procedural RGB scenes as an n×3×size×size float32 array in [0, 1]."""
    if size not in (32, 64):
        raise ValueError(f"size must be 32 or 64, got {size}")
    rng = np.random.default_rng(seed)
    return np.stack([_scene(rng, size) for _ in range(n)]).astype(np.float32)


# -------------------------------------------------------------- degradation
def _gaussian_kernel(ksize: int) -> np.ndarray:
    sigma = 0.3 * ((ksize - 1) * 0.5 - 1) + 0.8
    ax = np.arange(ksize) - (ksize - 1) / 2
    k = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    return k / k.sum()


def _separable_blur(img: np.ndarray, ksize: int) -> np.ndarray:
    if ksize <= 1:
        return img.copy()
    k = _gaussian_kernel(ksize)
    r = ksize // 2
    p = np.pad(img, ((0, 0), (r, r), (r, r)), mode="reflect")
    H, W = img.shape[1:]
    tmp = sum(k[i] * p[:, i:i + H, :] for i in range(ksize))
    return sum(k[j] * tmp[:, :, j:j + W] for j in range(ksize))


def degrade(clean: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    """Apply ``spec`` to a 3×H×W image; output clamped to [0, 1]."""
    x = np.asarray(clean, dtype=np.float64)
    p = spec.params
    if spec.kind == "noise":
        sigma = float(p.get("sigma", 0.1))
        if sigma == 0.0:
            out = x
        else:
            out = x + sigma * np.random.default_rng(spec.seed).standard_normal(x.shape)
    elif spec.kind == "blur":
        out = _separable_blur(x, int(p.get("ksize", 3)))
    elif spec.kind == "darken":
        out = x ** float(p.get("gamma", 2.0))
    elif spec.kind == "haze":
        t, A = float(p.get("t", 0.6)), float(p.get("A", 0.9))
        out = t * x + (1.0 - t) * A
    else:  # guarded by DegradationSpec, kept for direct construction bypasses
        raise DegradationError(f"unknown degradation kind {spec.kind!r}")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def sample_spec(kind: str, rng: np.random.Generator) -> DegradationSpec:
    params = {}
    for key, (lo, hi) in SAMPLE_RANGES[kind].items():
        if key == "ksize":
            params[key] = int(rng.choice(np.arange(lo, hi + 1, 2)))
        else:
            params[key] = round(float(rng.uniform(lo, hi)), 4)
    return DegradationSpec(kind, params, int(rng.integers(0, 2 ** 31 - 1)))


@dataclass
class PairSet:
    clean: np.ndarray          # N×3×H×W
    degraded: np.ndarray       # N×3×H×W
    specs: list

    def __len__(self) -> int:
        return self.clean.shape[0]

    @property
    def kinds(self) -> list[str]:
        return [s.kind for s in self.specs]

    def subset(self, idx) -> "PairSet":
        idx = list(idx)
        return PairSet(self.clean[idx], self.degraded[idx], [self.specs[i] for i in idx])


def make_pairs(n: int, size: int = 32, seed: int = 0, kinds: Iterable[str] = KINDS) -> PairSet:
    """``n`` clean/degraded pairs; kinds cycle so every kind is equally present."""
    kinds = tuple(kinds)
    clean = generate_clean(n, size, seed)
    rng = np.random.default_rng(seed + 7919)
    specs = [sample_spec(kinds[i % len(kinds)], rng) for i in range(n)]
    degraded = np.stack([degrade(c, s) for c, s in zip(clean, specs)])
    return PairSet(clean, degraded, specs)


# ---------------------------------------------------------------------- I/O
def write_ppm(path, img: np.ndarray) -> None:
    """Binary P6, maxval 255, from a 3×H×W float image in [0, 1]."""
    a = np.asarray(img)
    _, H, W = a.shape
    px = np.clip(np.round(a.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        fh.write(px.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    W, H, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: maxval {maxval} unsupported")
    pos += 1
    px = np.frombuffer(raw[pos:pos + 3 * W * H], dtype=np.uint8).reshape(H, W, 3)
    return (px.transpose(2, 0, 1).astype(np.float32) / 255.0)


@dataclass
class ManifestEntry:
    split: str
    clean_path: str
    deg_path: str
    spec: DegradationSpec

    def line(self) -> str:
        return "\t".join([self.split, self.clean_path, self.deg_path, self.spec.kind,
                          self.spec.param_string(), str(self.spec.seed)])


SPLITS = ("train", "val", "test")


def write_manifest(path, entries: list[ManifestEntry]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(e.line() + "\n")


def read_manifest(path, check_files: bool = True) -> list[ManifestEntry]:
    base = Path(path).parent
    entries = []
    seen: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            raw = raw.rstrip("\n")
            if not raw:
                continue
            parts = raw.split("\t")
            if len(parts) != 6:
                raise ValueError(f"{path}:{lineno}: expected 6 tab-separated fields, got {len(parts)}")
            split, clean, deg, kind, params, seed = parts
            if split not in SPLITS:
                raise ValueError(f"{path}:{lineno}: unknown split {split!r}")
            if seen.setdefault(clean, split) != split:
                raise ValueError(f"{path}:{lineno}: {clean} appears in both {seen[clean]} and {split}")
            if check_files:
                for p in (clean, deg):
                    if not (base / p).exists() and not os.path.exists(p):
                        raise FileNotFoundError(f"{path}:{lineno}: missing file {p}")
            entries.append(ManifestEntry(split, clean, deg, DegradationSpec.from_strings(kind, params, seed)))
    return entries


def resolve(manifest_path, p: str) -> Path:
    cand = Path(manifest_path).parent / p
    return cand if cand.exists() else Path(p)


def load_split(manifest_path, split: str, entries: Optional[list] = None) -> PairSet:
    entries = entries if entries is not None else read_manifest(manifest_path)
    sel = [e for e in entries if e.split == split]
    if not sel:
        raise ValueError(f"manifest {manifest_path} has no {split!r} entries")
    clean = np.stack([read_ppm(resolve(manifest_path, e.clean_path)) for e in sel])
    deg = np.stack([read_ppm(resolve(manifest_path, e.deg_path)) for e in sel])
    return PairSet(clean, deg, [e.spec for e in sel])


def write_dataset(out_dir, splits: dict[str, PairSet]) -> Path:
    """Write PPMs plus ``manifest.tsv`` under ``out_dir``; returns the manifest path."""
    out = Path(out_dir)
    entries = []
    for split, pairs in splits.items():
        d = out / split
        d.mkdir(parents=True, exist_ok=True)
        for i in range(len(pairs)):
            c = f"{split}/{i:05d}_clean.ppm"
            g = f"{split}/{i:05d}_{pairs.specs[i].kind}.ppm"
            write_ppm(out / c, pairs.clean[i])
            write_ppm(out / g, pairs.degraded[i])
            entries.append(ManifestEntry(split, c, g, pairs.specs[i]))
    manifest = out / "manifest.tsv"
    write_manifest(manifest, entries)
    return manifest
