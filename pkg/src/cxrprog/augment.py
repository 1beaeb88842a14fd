"""Stochastic augmentations for grayscale radiographs.

Images are 2-d float arrays of nonnegative intensities. Every random
transform takes an explicit ``numpy.random.Generator`` so a sample's output
is fixed by ``sample_rng(seed, epoch, index)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ContractError


@dataclass(frozen=True)
class AugmentConfig:
    target_size: int = 64
    p_crop: float = 0.5
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_blur: float = 0.5
    p_noise: float = 0.5
    p_affine: float = 0.5
    crop_scale: tuple[float, float] = (0.2, 1.0)
    crop_aspect: tuple[float, float] = (3 / 4, 4 / 3)
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    noise_snr: tuple[float, float] = (4.0, 8.0)
    rotation_deg: float = 15.0
    shear_deg: float = 10.0
    translate: float = 0.1
    out_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        for name in ("p_crop", "p_hflip", "p_vflip", "p_blur", "p_noise", "p_affine"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1]")
        for name in ("crop_scale", "crop_aspect", "blur_sigma", "noise_snr", "out_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ContractError(f"{name} range is empty: {lo} > {hi}")
        if self.out_range[0] == self.out_range[1]:
            raise ContractError("out_range must have hi > lo")
        if self.target_size < 1:
            raise ContractError("target_size must be positive")


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample generator derived from (global seed, epoch, sample index)."""
    return np.random.default_rng([int(seed), int(epoch), int(index)])


def resize(img: np.ndarray, size: int | tuple[int, int]) -> np.ndarray:
    """Bilinear resize with corner pixel centres aligned (corners preserved)."""
    return _resample_region(img, 0.0, 0.0, img.shape[0] - 1.0, img.shape[1] - 1.0, size)


def _resample_region(img, y0, x0, y1, x1, size):
    th, tw = (size, size) if np.isscalar(size) else size
    if img.shape == (th, tw) and (y0, x0, y1, x1) == (0, 0, th - 1, tw - 1):
        return img.astype(np.float64, copy=True)
    ys = np.linspace(y0, y1, th) if th > 1 else np.array([(y0 + y1) / 2])
    xs = np.linspace(x0, x1, tw) if tw > 1 else np.array([(x0 + x1) / 2])
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(img.astype(np.float64), [yy, xx], order=1, mode="nearest")


def random_resized_crop(img: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    H, W = img.shape
    area = rng.uniform(*cfg.crop_scale) * H * W
    aspect = rng.uniform(*cfg.crop_aspect)
    w = int(round(math.sqrt(area * aspect)))
    h = int(round(math.sqrt(area / aspect)))
    w = min(max(w, 1), W)
    h = min(max(h, 1), H)
    top = int(rng.integers(0, H - h + 1))
    left = int(rng.integers(0, W - w + 1))
    return _resample_region(img, top, left, top + h - 1, left + w - 1, cfg.target_size)


def flip(img: np.ndarray, axis: str) -> np.ndarray:
    if axis == "horizontal":
        return img[:, ::-1].copy()
    if axis == "vertical":
        return img[::-1, :].copy()
    raise ContractError(f"unknown flip axis {axis!r}")


def random_flip(img: np.ndarray, rng: np.random.Generator, axis: str, p: float) -> np.ndarray:
    if rng.random() < p:
        return flip(img, axis)
    return img


def gaussian_kernel(sigma: float) -> np.ndarray:
    """2-d Gaussian on a (2*ceil(3 sigma)+1)^2 grid, normalised to sum 1."""
    if sigma <= 0:
        raise ContractError("blur sigma must be positive")
    r = int(math.ceil(3 * sigma))
    ax = np.arange(-r, r + 1, dtype=np.float64)
    xx, yy = np.meshgrid(ax, ax)
    k = np.exp(-0.5 * (xx ** 2 + yy ** 2) / sigma ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    return ndimage.correlate(img.astype(np.float64), gaussian_kernel(sigma), mode="reflect")


def noise_sigma(img: np.ndarray, snr: float) -> float:
    if snr <= 0:
        raise ContractError("snr must be positive")
    return float(img.mean()) / snr


def add_gaussian_noise(img: np.ndarray, rng: np.random.Generator, snr: float) -> np.ndarray:
    sigma = noise_sigma(img, snr)
    if sigma == 0.0:
        return img.astype(np.float64, copy=True)
    return np.maximum(img + rng.normal(0.0, sigma, size=img.shape), 0.0)


def histogram_normalize(img: np.ndarray, out_range=(0.0, 1.0)) -> np.ndarray:
    """Histogram equalisation through the exact empirical CDF.

    Each pixel maps to the fraction of pixels at or below it, shifted so the
    minimum lands on ``lo`` and the maximum on ``hi``. Distinct values keep
    their order, tied values stay tied, and the map is idempotent. It only
    depends on the multiset of pixel values, so it commutes with flips.
    """
    lo, hi = out_range
    if not hi > lo:
        raise ContractError("histogram_normalize needs hi > lo")
    flat = np.asarray(img, dtype=np.float64).ravel()
    vmin, vmax = flat.min(), flat.max()
    if vmax == vmin:
        return np.full(img.shape, (lo + hi) / 2.0)
    ordered = np.sort(flat)
    at_or_below = np.searchsorted(ordered, flat, side="right").astype(np.float64)
    n_min = np.searchsorted(ordered, vmin, side="right")
    mapped = (at_or_below - n_min) / (flat.size - n_min)
    return (lo + (hi - lo) * mapped).reshape(img.shape)


def _affine_matrix(rotation_deg, shear_x_deg, shear_y_deg):
    """Forward map in (row, col) coordinates: rotation after x/y shears."""
    th = math.radians(rotation_deg)
    c, s = math.cos(th), math.sin(th)
    rot = np.array([[c, -s], [s, c]])
    # (row, col) ordering: x-shear moves columns in proportion to rows
    shx = np.array([[1.0, 0.0], [math.tan(math.radians(shear_x_deg)), 1.0]])
    shy = np.array([[1.0, math.tan(math.radians(shear_y_deg))], [0.0, 1.0]])
    return rot @ shx @ shy


def affine(img: np.ndarray, rotation_deg=0.0, shear_x_deg=0.0, shear_y_deg=0.0, shift=(0.0, 0.0)) -> np.ndarray:
    """Apply an affine map about the image centre; ``shift`` is in pixels (rows, cols)."""
    H, W = img.shape
    A = _affine_matrix(rotation_deg, shear_x_deg, shear_y_deg)
    centre = np.array([(H - 1) / 2.0, (W - 1) / 2.0])
    yy, xx = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    out_pts = np.stack([yy.ravel(), xx.ravel()]) - (centre + np.asarray(shift, dtype=np.float64))[:, None]
    src = np.linalg.solve(A, out_pts) + centre[:, None]
    src = np.round(src, 9)
    res = ndimage.map_coordinates(img.astype(np.float64), src, order=1, mode="constant", cval=0.0)
    return res.reshape(H, W)


def random_affine(img: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    rot = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)
    shx = rng.uniform(-cfg.shear_deg, cfg.shear_deg)
    shy = rng.uniform(-cfg.shear_deg, cfg.shear_deg)
    H, W = img.shape
    ty = rng.uniform(-cfg.translate, cfg.translate) * H
    tx = rng.uniform(-cfg.translate, cfg.translate) * W
    return affine(img, rot, shx, shy, (ty, tx))


def pretrain_view(img: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    """One draw of the contrastive pipeline: crop, h-flip, v-flip, blur, noise, normalise."""
    if rng.random() < cfg.p_crop:
        out = random_resized_crop(img, rng, cfg)
    else:
        out = resize(img, cfg.target_size)
    out = random_flip(out, rng, "horizontal", cfg.p_hflip)
    out = random_flip(out, rng, "vertical", cfg.p_vflip)
    if rng.random() < cfg.p_blur:
        out = gaussian_blur(out, rng.uniform(*cfg.blur_sigma))
    if rng.random() < cfg.p_noise:
        out = add_gaussian_noise(out, rng, rng.uniform(*cfg.noise_snr))
    return histogram_normalize(out, cfg.out_range)


def make_query_key_pair(img: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig):
    return pretrain_view(img, rng, cfg), pretrain_view(img, rng, cfg)


def finetune_view(img: np.ndarray, rng: np.random.Generator | None, cfg: AugmentConfig,
                  affine_aug: bool = False) -> np.ndarray:
    """Resize, random flips (plus affine for FT_RA), then normalise.

    ``rng=None`` gives the deterministic evaluation view.
    """
    out = resize(img, cfg.target_size)
    if rng is not None:
        out = random_flip(out, rng, "horizontal", cfg.p_hflip)
        out = random_flip(out, rng, "vertical", cfg.p_vflip)
        if affine_aug and rng.random() < cfg.p_affine:
            out = random_affine(out, rng, cfg)
    return histogram_normalize(out, cfg.out_range)
