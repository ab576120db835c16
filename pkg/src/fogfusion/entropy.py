"""Local measurement entropy of 8-bit quantized sensor streams."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

diagnostics: Counter = Counter()


@dataclass(frozen=True)
class EntropyConfig:
    patch_m: int = 16
    patch_n: int = 16
    bins: int = 256
    # "mean" averages channels before one histogram; "per_channel" averages per-channel entropies
    channel_mode: str = "mean"


def quantize8(stream: np.ndarray) -> np.ndarray:
    """Map a ``[C, H, W]`` (or ``[H, W]``) stream in [0, 1] to integers 0..255, shape ``[1, H, W]``.

    Channels are averaged first. Out-of-range values are clamped and counted.
    """
    x = np.asarray(stream, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    x = x.mean(axis=0, keepdims=True) if x.shape[0] > 1 else x
    n_bad = int(np.count_nonzero((x < 0) | (x > 1)))
    if n_bad:
        diagnostics["quantize_clamped"] += n_bad
    x = np.clip(x, 0.0, 1.0)
    return np.floor(x * 255.0 + 0.5).astype(np.uint8)


def _patch_entropy(q: np.ndarray, cfg: EntropyConfig) -> np.ndarray:
    """Per-patch Shannon entropy (bits) of an integer image ``[H, W]``; returns ``[H/M, W/N]``."""
    H, W = q.shape
    M, N = cfg.patch_m, cfg.patch_n
    ph, pw = -(-H // M), -(-W // N)
    if ph * M != H or pw * N != W:
        # pad by edge replication up to a whole number of patches
        q = np.pad(q, ((0, ph * M - H), (0, pw * N - W)), mode="edge")
    patches = q.reshape(ph, M, pw, N).transpose(0, 2, 1, 3).reshape(ph * pw, M * N).astype(np.int64)
    offs = (np.arange(ph * pw, dtype=np.int64) * cfg.bins)[:, None]
    counts = np.bincount((patches + offs).ravel(), minlength=ph * pw * cfg.bins).reshape(ph * pw, cfg.bins)
    p = counts / float(M * N)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log2(p), 0.0)
    return (-terms.sum(axis=1)).reshape(ph, pw)


def patch_entropy_grid(stream: np.ndarray, cfg: EntropyConfig | None = None) -> np.ndarray:
    """Entropy per patch (bits), shape ``[ceil(H/M), ceil(W/N)]``."""
    cfg = cfg or EntropyConfig()
    x = np.asarray(stream)
    if x.ndim == 2:
        x = x[None]
    if cfg.channel_mode == "per_channel" and x.shape[0] > 1 and x.dtype != np.uint8:
        grids = [_patch_entropy(quantize8(x[c])[0], cfg) for c in range(x.shape[0])]
        return np.mean(grids, axis=0)
    q = x[0] if x.dtype == np.uint8 and x.shape[0] == 1 else quantize8(x)[0]
    return _patch_entropy(q, cfg)


def entropy_map(stream: np.ndarray, cfg: EntropyConfig | None = None) -> np.ndarray:
    """Per-patch entropy broadcast to pixel resolution, ``[1, H, W]`` in bits (0..8).

    ``stream`` may be a float stream in [0, 1] or an already quantized ``uint8`` map.
    """
    cfg = cfg or EntropyConfig()
    x = np.asarray(stream)
    H, W = x.shape[-2:]
    grid = patch_entropy_grid(x, cfg)
    full = np.repeat(np.repeat(grid, cfg.patch_m, axis=0), cfg.patch_n, axis=1)[:H, :W]
    return full[None].astype(np.float32)


def mean_entropy(stream: np.ndarray, cfg: EntropyConfig | None = None) -> float:
    return float(entropy_map(stream, cfg).mean())


def normalized_entropy(stream: np.ndarray, clear_reference: np.ndarray, cfg: EntropyConfig | None = None) -> float:
    """Mean entropy of ``stream`` relative to the mean entropy of the clear reference."""
    if np.shape(stream) != np.shape(clear_reference):
        raise ValueError(f"shape mismatch: {np.shape(stream)} vs {np.shape(clear_reference)}")
    ref = mean_entropy(clear_reference, cfg)
    if ref <= 0:
        raise ValueError("clear reference has zero entropy")
    return mean_entropy(stream, cfg) / ref


def downsample_mean(img: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Area-average ``img[..., H, W]`` to ``shape``; cells cover ``[floor(i*H/h), ceil((i+1)*H/h))``."""
    H, W = img.shape[-2:]
    h, w = shape
    if (H, W) == (h, w):
        return img.copy()
    if H % h == 0 and W % w == 0:
        fh, fw = H // h, W // w
        lead = img.shape[:-2]
        return img.reshape(*lead, h, fh, w, fw).mean(axis=(-3, -1))
    r0 = (np.arange(h) * H) // h
    r1 = -((-(np.arange(1, h + 1)) * H) // h)
    c0 = (np.arange(w) * W) // w
    c1 = -((-(np.arange(1, w + 1)) * W) // w)
    ii = np.zeros((h, H))
    for i in range(h):
        ii[i, r0[i] : r1[i]] = 1.0 / (r1[i] - r0[i])
    jj = np.zeros((w, W))
    for j in range(w):
        jj[j, c0[j] : c1[j]] = 1.0 / (c1[j] - c0[j])
    return np.einsum("hH,...HW,wW->...hw", ii, img, jj).astype(img.dtype)
