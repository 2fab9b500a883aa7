"""Image I/O, bicubic degradation, Y-channel metrics and patch sampling.

Images are float arrays ``(3, H, W)`` in ``[0, 1]`` unless stated otherwise.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

from .tensor import Tensor

# ---------------------------------------------------------------------------
# I/O


def load_png(path) -> np.ndarray:
    """RGB PNG to ``(3, H, W)`` float64 with values ``byte / 255`` exactly."""
    path = Path(path)
    if path.suffix.lower() != ".png":
        raise ValueError(f"only PNG images are supported: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def to_bytes(img: np.ndarray) -> np.ndarray:
    """Clamp to ``[0, 1]`` and round half away from zero to uint8 ``(H, W, 3)``."""
    clamped = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.floor(clamped * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)


def save_png(img: np.ndarray, path) -> None:
    Image.fromarray(to_bytes(img), mode="RGB").save(path, format="PNG")


def list_pngs(directory) -> List[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() == ".png")


# ---------------------------------------------------------------------------
# bicubic resampling


def cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    near = (a + 2) * ax3 - (a + 3) * ax2 + 1
    far = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax < 2, far, 0.0))


def resize_matrix(n_in: int, n_out: int, antialias: bool = True, a: float = -0.5) -> np.ndarray:
    """``(n_out, n_in)`` matrix of cubic weights, half-pixel centres, edge-clamped taps.

    When shrinking with ``antialias`` the kernel is stretched by the inverse
    scale. Every row sums to one.
    """
    if n_in <= 0 or n_out <= 0:
        raise ValueError(f"extents must be positive, got {n_in} -> {n_out}")
    scale = n_out / n_in
    stretch = 1.0 / scale if (antialias and scale < 1) else 1.0
    support = 2.0 * stretch
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        centre = (i + 0.5) / scale - 0.5
        first = int(np.floor(centre - support)) + 1
        taps = np.arange(first, first + int(np.ceil(2 * support)) + 1)
        weights = cubic((centre - taps) / stretch, a)
        weights /= weights.sum()
        np.add.at(m[i], np.clip(taps, 0, n_in - 1), weights)
    return m


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int, antialias: bool = True) -> np.ndarray:
    """Separable cubic convolution (a = -0.5) over the last two axes."""
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"target extents must be positive, got {out_h}x{out_w}")
    img = np.asarray(img, dtype=np.float64)
    mh = resize_matrix(img.shape[-2], out_h, antialias)
    mw = resize_matrix(img.shape[-1], out_w, antialias)
    return np.matmul(np.matmul(mh, img), mw.T)


def downscale(hr: np.ndarray, scale: int) -> np.ndarray:
    h, w = hr.shape[-2] // scale, hr.shape[-1] // scale
    return bicubic_resize(hr[..., : h * scale, : w * scale], h, w)


# ---------------------------------------------------------------------------
# metrics


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """BT.601 luma of a ``[0, 1]`` RGB image, on the 16..235 studio scale divided by 255."""
    r, g, b = np.asarray(img, dtype=np.float64)
    return (16.0 + 65.481 * r + 128.553 * g + 24.966 * b) / 255.0


def _shave(a: np.ndarray, border: int) -> np.ndarray:
    if border <= 0:
        return a
    return a[..., border:-border, border:-border]


def psnr(a: np.ndarray, b: np.ndarray, shave: int = 0) -> float:
    """``10 log10(1 / MSE)``; identical inputs give ``inf``."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    d = _shave(a, shave) - _shave(b, shave)
    mse = float(np.mean(d * d))
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    k = win.size
    rows = sliding_window_view(img, k, axis=0) @ win
    return sliding_window_view(rows, k, axis=1) @ win


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean SSIM over the valid (unpadded) region of two single-channel images."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"ssim needs two equal 2-D images, got {a.shape} and {b.shape}")
    if min(a.shape) < window:
        raise ValueError(f"image {a.shape} smaller than the {window}x{window} window")
    win = gaussian_window(window, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, win), _filter_valid(b, win)
    var_a = _filter_valid(a * a, win) - mu_a * mu_a
    var_b = _filter_valid(b * b, win) - mu_b * mu_b
    cov = _filter_valid(a * b, win) - mu_a * mu_b
    num = (2 * (mu_a * mu_b) + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def evaluate_pair(sr: np.ndarray, hr: np.ndarray, shave: int) -> Tuple[float, float]:
    """Y-channel PSNR and SSIM after shaving ``shave`` border pixels."""
    ys, yh = rgb_to_y(sr), rgb_to_y(hr)
    return psnr(ys, yh, shave), ssim(_shave(ys, shave), _shave(yh, shave))


# ---------------------------------------------------------------------------
# augmentation and patches


def augment(img: np.ndarray, rotation: int, hflip: bool) -> np.ndarray:
    """Horizontal flip (optional) followed by a counter-clockwise rotation."""
    if rotation not in (0, 90, 180, 270):
        raise ValueError(f"rotation must be a multiple of 90, got {rotation}")
    out = img[..., ::-1] if hflip else img
    return np.ascontiguousarray(np.rot90(out, rotation // 90, axes=(-2, -1)))


def invert_augment(img: np.ndarray, rotation: int, hflip: bool) -> np.ndarray:
    out = np.rot90(img, -(rotation // 90), axes=(-2, -1))
    return np.ascontiguousarray(out[..., ::-1] if hflip else out)


@dataclass
class PatchSample:
    lr_patch: Tensor
    hr_patch: Tensor
    rotation: int
    hflip: bool
    top: int
    left: int


def sample_patch(pair: Tuple[np.ndarray, np.ndarray], p: int, scale: int,
                 rng: np.random.Generator, do_augment: bool = True, dtype=np.float32) -> PatchSample:
    lr, hr = pair
    _, h, w = lr.shape
    if h < p or w < p:
        raise ValueError(f"LR image {h}x{w} smaller than patch {p}")
    if hr.shape[1] < h * scale or hr.shape[2] < w * scale:
        raise ValueError(f"HR image {hr.shape[1:]} does not cover LR {h}x{w} at x{scale}")
    top = int(rng.integers(0, h - p + 1))
    left = int(rng.integers(0, w - p + 1))
    rotation, hflip = 0, False
    if do_augment:
        rotation = int(rng.integers(0, 4)) * 90
        hflip = bool(rng.integers(0, 2))
    lr_p = lr[:, top:top + p, left:left + p]
    hr_p = hr[:, top * scale:(top + p) * scale, left * scale:(left + p) * scale]
    lr_p, hr_p = augment(lr_p, rotation, hflip), augment(hr_p, rotation, hflip)
    return PatchSample(
        Tensor(lr_p[None].astype(dtype)), Tensor(hr_p[None].astype(dtype)), rotation, hflip, top, left
    )


# ---------------------------------------------------------------------------
# datasets: each exposes batch(step) -> (lr (B,3,p,p), hr) as float arrays


def load_pairs(hr_dir, lr_dir=None, scale: int = 2, synthesize: bool = False):
    """Match same-named PNGs; with ``synthesize`` the LR side is bicubic-downscaled HR.

    Returns ``(names, pairs, unmatched)``.
    """
    hr_files = list_pngs(hr_dir)
    names, pairs, unmatched = [], [], []
    lr_index = {p.name: p for p in list_pngs(lr_dir)} if lr_dir and not synthesize else {}
    for hp in hr_files:
        hr = load_png(hp)
        if synthesize:
            h, w = hr.shape[1] // scale * scale, hr.shape[2] // scale * scale
            hr = hr[:, :h, :w]
            lr = downscale(hr, scale)
        elif hp.name in lr_index:
            lr = load_png(lr_index.pop(hp.name))
        else:
            unmatched.append(hp.name)
            continue
        names.append(hp.name)
        pairs.append((lr, hr))
    unmatched.extend(sorted(lr_index))
    return names, pairs, unmatched


class PatchDataset:
    """Random augmented patches; batch contents are a pure function of (seed, step)."""

    def __init__(self, pairs: Sequence[Tuple[np.ndarray, np.ndarray]], scale: int, patch: int = 64,
                 batch_size: int = 16, seed: int = 0, do_augment: bool = True, dtype=np.float32):
        if not pairs:
            raise ValueError("dataset is empty")
        self.pairs, self.scale, self.patch = list(pairs), scale, patch
        self.batch_size, self.seed, self.do_augment, self.dtype = batch_size, seed, do_augment, dtype

    def batch(self, step: int):
        rng = np.random.default_rng([self.seed, step])
        lrs, hrs = [], []
        for _ in range(self.batch_size):
            pair = self.pairs[int(rng.integers(0, len(self.pairs)))]
            s = sample_patch(pair, self.patch, self.scale, rng, self.do_augment, self.dtype)
            lrs.append(s.lr_patch.data)
            hrs.append(s.hr_patch.data)
        return np.concatenate(lrs), np.concatenate(hrs)


class FixedBatch:
    """The same batch every step (overfitting runs)."""

    def __init__(self, lr: np.ndarray, hr: np.ndarray):
        if len(lr) == 0:
            raise ValueError("dataset is empty")
        self.lr, self.hr = np.ascontiguousarray(lr), np.ascontiguousarray(hr)
        self.batch_size = len(lr)

    def batch(self, step: int):
        return self.lr, self.hr


# ---------------------------------------------------------------------------
# synthetic scenes for desk-scale runs


def synthetic_image(rng: np.random.Generator, h: int, w: int, shapes: int = 12) -> np.ndarray:
    """Piecewise-smooth RGB scene: a colour ramp plus hard-edged rectangles, discs and stripes."""
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    base = rng.uniform(0.2, 0.8, size=(3, 1, 1))
    tilt = rng.uniform(-0.3, 0.3, size=(3, 2, 1, 1))
    img = base + tilt[:, 0] * yy + tilt[:, 1] * xx
    for _ in range(shapes):
        colour = rng.uniform(0, 1, size=(3, 1, 1))
        kind = rng.integers(0, 3)
        if kind == 0:
            y0, x0 = rng.uniform(-0.1, 0.9, size=2)
            hh, ww = rng.uniform(0.05, 0.4, size=2)
            mask = (yy >= y0) & (yy < y0 + hh) & (xx >= x0) & (xx < x0 + ww)
        elif kind == 1:
            cy, cx = rng.uniform(0, 1, size=2)
            r = rng.uniform(0.04, 0.25)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        else:
            theta = rng.uniform(0, np.pi)
            period = rng.uniform(0.08, 0.2)
            phase = (np.cos(theta) * yy + np.sin(theta) * xx) / period
            cy, cx = rng.uniform(0, 1, size=2)
            r = rng.uniform(0.1, 0.35)
            mask = (np.floor(phase) % 2 == 0) & ((yy - cy) ** 2 + (xx - cx) ** 2 < r * r)
        img = np.where(mask[None], colour, img)
    return np.clip(img, 0.0, 1.0)


def synthetic_pairs(n: int, lr_size: int, scale: int, seed: int = 0):
    """``n`` synthetic HR scenes of side ``lr_size * scale`` with their bicubic LR."""
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        hr = synthetic_image(rng, lr_size * scale, lr_size * scale)
        pairs.append((downscale(hr, scale), hr))
    return pairs


def write_dataset(pairs, hr_dir, lr_dir: Optional[str] = None, prefix: str = "img") -> List[str]:
    os.makedirs(hr_dir, exist_ok=True)
    if lr_dir:
        os.makedirs(lr_dir, exist_ok=True)
    names = []
    for i, (lr, hr) in enumerate(pairs):
        name = f"{prefix}{i:03d}.png"
        save_png(hr, Path(hr_dir) / name)
        if lr_dir:
            save_png(lr, Path(lr_dir) / name)
        names.append(name)
    return names
