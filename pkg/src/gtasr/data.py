"""Synthetic HR images and a simplified blur / downsample / noise degradation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np
from scipy import ndimage

KINDS = ("grf", "checker", "shapes")
SPLITS = {"train": 0, "val": 1}
VAL_OFFSET = 1 << 40


@dataclass(frozen=True)
class DegradeParams:
    blur_sigma: float = 1.0
    scale: int = 4
    noise_sigma: float = 0.0


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def _normalize(img: np.ndarray) -> np.ndarray:
    lo, hi = img.min(), img.max()
    if hi - lo < 1e-12:
        return np.full_like(img, 0.5)
    return (img - lo) / (hi - lo)


def gen_hr(seed: int, size: int = 32, kind: str = "grf", period: int | None = None) -> np.ndarray:
    """Deterministic ``size x size`` float32 image in [0, 1]."""
    if size not in (16, 32, 64):
        raise ValueError(f"size must be 16, 32 or 64, got {size}")
    if kind not in KINDS:
        raise ValueError(f"unknown image kind {kind!r}")
    rng = _rng(seed, KINDS.index(kind), size)
    if kind == "grf":
        field = rng.standard_normal((size, size))
        img = _normalize(ndimage.gaussian_filter(field, rng.uniform(1.0, 3.0), mode="wrap"))
    elif kind == "checker":
        p = period if period is not None else int(rng.choice([2, 4, 8, 16]))
        cell = max(p // 2, 1)
        oy, ox = rng.integers(0, p, size=2)
        yy, xx = np.mgrid[0:size, 0:size]
        img = (((yy + oy) // cell + (xx + ox) // cell) % 2).astype(np.float64)
        lo, hi = sorted(rng.uniform(0.0, 1.0, size=2))
        img = lo + (hi - lo) * img if hi - lo > 0.2 else img
    else:
        img = _shapes(rng, size)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _shapes(rng: np.random.Generator, size: int, supersample: int = 4) -> np.ndarray:
    n = size * supersample
    yy, xx = (np.mgrid[0:n, 0:n] + 0.5) / supersample
    gy, gx = rng.uniform(-1, 1, size=2)
    base = rng.uniform(0.2, 0.8)
    img = base + 0.3 * (gy * (yy / size - 0.5) + gx * (xx / size - 0.5))
    for _ in range(rng.integers(2, 6)):
        val = rng.uniform(0.0, 1.0)
        if rng.random() < 0.5:
            y0, x0 = rng.uniform(0, size * 0.8, size=2)
            hh, ww = rng.uniform(size * 0.15, size * 0.5, size=2)
            mask = (yy >= y0) & (yy < y0 + hh) & (xx >= x0) & (xx < x0 + ww)
        else:
            cy, cx = rng.uniform(0, size, size=2)
            r = rng.uniform(size * 0.1, size * 0.35)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        img = np.where(mask, val, img)
    # box-filter the supersampled canvas for anti-aliased edges
    return img.reshape(size, supersample, size, supersample).mean(axis=(1, 3))


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with radius ``ceil(3 sigma)`` and reflect borders."""
    if sigma <= 0:
        return img.copy()
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    k /= k.sum()
    out = ndimage.correlate1d(img.astype(np.float64), k, axis=-1, mode="reflect")
    return ndimage.correlate1d(out, k, axis=-2, mode="reflect")


def _cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    return np.where(
        x <= 1,
        (a + 2) * x**3 - (a + 3) * x**2 + 1,
        np.where(x < 2, a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a, 0.0),
    )


def _bicubic_matrix(n_in: int, scale: int) -> np.ndarray:
    """(n_in*scale, n_in) interpolation matrix, half-pixel centres, clamped edges."""
    n_out = n_in * scale
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = (i + 0.5) / scale - 0.5
        base = math.floor(src)
        for tap in range(base - 1, base + 3):
            m[i, min(max(tap, 0), n_in - 1)] += _cubic(np.array(src - tap))
    return m


def bicubic_upsample(img: np.ndarray, scale: int) -> np.ndarray:
    if scale == 1:
        return img.astype(np.float64).copy()
    h, w = img.shape[-2:]
    mh, mw = _bicubic_matrix(h, scale), _bicubic_matrix(w, scale)
    return mh @ img.astype(np.float64) @ mw.T


def degrade_lr(hr: np.ndarray, p: DegradeParams, seed: int = 0) -> np.ndarray:
    """Blur, average-pool by ``p.scale`` and add clipped Gaussian noise (low resolution)."""
    h, w = hr.shape[-2:]
    if h % p.scale or w % p.scale:
        raise ValueError(f"scale {p.scale} does not divide {h}x{w}")
    img = gaussian_blur(hr, p.blur_sigma)
    s = p.scale
    lr = img.reshape(*img.shape[:-2], h // s, s, w // s, s).mean(axis=(-3, -1))
    if p.noise_sigma > 0:
        lr = lr + _rng(seed, 7919).standard_normal(lr.shape) * p.noise_sigma
    return np.clip(lr, 0.0, 1.0)


def degrade(hr: np.ndarray, p: DegradeParams, seed: int = 0) -> np.ndarray:
    """Degraded image brought back to HR resolution (bicubic), float32 in [0, 1]."""
    lr = degrade_lr(hr, p, seed)
    return np.clip(bicubic_upsample(lr, p.scale), 0.0, 1.0).astype(np.float32)


def sample_params(rng: np.random.Generator, scale: int, blur=(0.5, 1.5), noise=(0.01, 0.05)) -> DegradeParams:
    return DegradeParams(float(rng.uniform(*blur)), scale, float(rng.uniform(*noise)))


def sample_seed(global_seed: int, split: str, index: int) -> int:
    """Per-sample seed from (global seed, split, index)."""
    ss = np.random.SeedSequence([int(global_seed), SPLITS[split], int(index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def make_example(global_seed: int, split: str, index: int, cfg) -> dict:
    """Images for one sample (``hr``, ``lr``, ``y0``) together with the degradation provenance."""
    seed = sample_seed(global_seed, split, index)
    rng = _rng(seed, 1)
    kinds = cfg.get_list("data.kinds")
    kind = kinds[int(rng.integers(len(kinds)))]
    hr = gen_hr(seed, cfg.get_int("data.size"), kind)
    p = sample_params(
        rng,
        cfg.get_int("data.scale"),
        (cfg.get_float("data.blur_min"), cfg.get_float("data.blur_max")),
        (cfg.get_float("data.noise_min"), cfg.get_float("data.noise_max")),
    )
    lr = degrade_lr(hr, p, seed)
    y0 = np.clip(bicubic_upsample(lr, p.scale), 0.0, 1.0).astype(np.float32)
    return {"seed": seed, "kind": kind, "params": p, "hr": hr, "lr": lr.astype(np.float32), "y0": y0}


def make_pair(global_seed: int, split: str, index: int, cfg) -> tuple[np.ndarray, np.ndarray]:
    ex = make_example(global_seed, split, index, cfg)
    return ex["hr"], ex["y0"]


def split_indices(cfg, split: str) -> range:
    if split == "train":
        return range(0, VAL_OFFSET)
    if split == "val":
        return range(VAL_OFFSET, VAL_OFFSET + cfg.get_int("data.val_count"))
    raise ValueError(f"unknown split {split!r}")


def batch_stream(cfg, split: str, start: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(x0, y0)`` batches of shape (B, 1, S, S).

    The train split is unbounded; the val split covers ``data.val_count``
    samples once (the last batch may be short).
    """
    bs = cfg.get_int("train.batch_size")
    seed = cfg.get_int("seed")
    idx = split_indices(cfg, split)
    pos = idx.start + start
    while pos < idx.stop:
        stop = min(pos + bs, idx.stop)
        pairs = [make_pair(seed, split, i, cfg) for i in range(pos, stop)]
        x0 = np.stack([p[0] for p in pairs])[:, None]
        y0 = np.stack([p[1] for p in pairs])[:, None]
        yield x0, y0
        pos = stop
