"""Straight-line reference implementations used to cross-check the engine.

Everything here is plain float64 numpy with explicit loops and shares no code
with the autodiff engine, so agreement is meaningful evidence.
"""
from __future__ import annotations

import math

import numpy as np


def resize_pixel(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize (align_corners=False, edge-clamped) of C×H×W, per pixel."""
    C, H, W = x.shape
    if (H, W) == (out_h, out_w):
        return x.astype(np.float64).copy()
    out = np.zeros((C, out_h, out_w))

    def taps(i, n_in, n_out):
        src = max((i + 0.5) * n_in / n_out - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        return i0, min(i0 + 1, n_in - 1), src - i0

    for i in range(out_h):
        y0, y1, ly = taps(i, H, out_h)
        for j in range(out_w):
            x0, x1, lx = taps(j, W, out_w)
            out[:, i, j] = ((1 - ly) * ((1 - lx) * x[:, y0, x0] + lx * x[:, y0, x1])
                            + ly * ((1 - lx) * x[:, y1, x0] + lx * x[:, y1, x1]))
    return out


def conv2d_direct(x: np.ndarray, w: np.ndarray, b: np.ndarray, pad: int) -> np.ndarray:
    """Stride-1 zero-padded cross-correlation of C×H×W by O×C×k×k, explicit offsets."""
    C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.zeros((C, H + 2 * pad, W + 2 * pad))
    xp[:, pad:pad + H, pad:pad + W] = x
    Ho, Wo = H + 2 * pad - kh + 1, W + 2 * pad - kw + 1
    out = np.zeros((O, Ho, Wo)) + np.asarray(b, np.float64)[:, None, None]
    for o in range(O):
        for c in range(C):
            for di in range(kh):
                for dj in range(kw):
                    out[o] += w[o, c, di, dj] * xp[c, di:di + Ho, dj:dj + Wo]
    return out


def nearest_code(vec: np.ndarray, table: np.ndarray) -> int:
    """Brute-force squared distance to every code; first minimum wins."""
    d = ((table - vec[None, :]) ** 2).sum(axis=1)
    return int(np.flatnonzero(d == d.min())[0])


def msvq_encode(f_cont: np.ndarray, sizes, table: np.ndarray, phi_weights, phi_biases):
    """Residual multi-scale quantization of one C×H×W latent.

    Returns (maps, f_quant per scale, f_res per scale, h per scale).
    """
    f = f_cont.astype(np.float64)
    C, H, W = f.shape
    table = table.astype(np.float64)
    f_quant = np.zeros_like(f)
    maps, quants, residuals, hs = [], [], [], []
    for k, (hk, wk) in enumerate(sizes):
        down = resize_pixel(f - f_quant, hk, wk)
        r = np.zeros((hk, wk), dtype=np.int64)
        for i in range(hk):
            for j in range(wk):
                r[i, j] = nearest_code(down[:, i, j], table)
        emb = table[r].transpose(2, 0, 1)
        up = resize_pixel(emb, H, W)
        wk_ = np.asarray(phi_weights[k], np.float64)
        h = up + conv2d_direct(up, wk_, phi_biases[k], pad=(wk_.shape[-1] - 1) // 2)
        f_quant = f_quant + h
        maps.append(r)
        hs.append(h)
        quants.append(f_quant.copy())
        residuals.append(f - f_quant)
    return maps, quants, residuals, hs


def block_mask_loops(token_counts) -> np.ndarray:
    ids = [0]
    for k, n in enumerate(token_counts, start=1):
        ids += [k] * n
    T = len(ids)
    m = np.zeros((T, T), dtype=bool)
    for q in range(T):
        for kk in range(T):
            if ids[q] == 0:
                m[q, kk] = kk == q
            else:
                m[q, kk] = ids[kk] <= ids[q]
    return m


def rope_rotate(v: np.ndarray, row: float, col: float, base: float = 100.0) -> np.ndarray:
    """Rotate one head vector: first quarter of pairs by row, rest by column."""
    d = v.shape[0]
    quarter = d // 4
    out = np.array(v, dtype=np.float64)
    for p in range(d // 2):
        freq = base ** (-(p % quarter) / quarter)
        ang = (row if p < quarter else col) * freq
        a, b = v[2 * p], v[2 * p + 1]
        out[2 * p] = a * math.cos(ang) - b * math.sin(ang)
        out[2 * p + 1] = a * math.sin(ang) + b * math.cos(ang)
    return out


def gaussian_1d(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-ax ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def ssim_direct(x: np.ndarray, y: np.ndarray, size: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over channels and valid window positions, explicit window sums."""
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    g = gaussian_1d(size, sigma)
    win = np.outer(g, g)
    C, H, W = x.shape
    vals = []
    for c in range(C):
        a, b = x[c].astype(np.float64), y[c].astype(np.float64)
        for i in range(H - size + 1):
            for j in range(W - size + 1):
                pa, pb = a[i:i + size, j:j + size], b[i:i + size, j:j + size]
                mx, my = (win * pa).sum(), (win * pb).sum()
                vx = (win * pa * pa).sum() - mx * mx
                vy = (win * pb * pb).sum() - my * my
                cxy = (win * pa * pb).sum() - mx * my
                vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def psnr64(x: np.ndarray, y: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(x, np.float64) - np.asarray(y, np.float64)) ** 2))
    return 99.0 if mse == 0 else min(99.0, -10.0 * math.log10(mse))


def cross_entropy64(logits: np.ndarray, targets: np.ndarray) -> float:
    total = 0.0
    for row, t in zip(np.asarray(logits, np.float64), targets):
        m = row.max()
        total += m + math.log(np.exp(row - m).sum()) - row[t]
    return total / len(targets)
