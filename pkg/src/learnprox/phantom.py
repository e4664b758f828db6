"""Synthetic ground truth: ellipse phantoms, coil sensitivities, datasets."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .numerics import ParameterError, is_power_of_two
from .rng import substream


@dataclass
class Dataset:
    images: list[np.ndarray]
    split: str
    seed: int

    def __len__(self) -> int:
        return len(self.images)

    def stack(self) -> np.ndarray:
        return np.stack(self.images)


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    # pixel centers in [-1, 1], row index -> y
    c = (np.arange(size) + 0.5) / size * 2 - 1
    yy, xx = np.meshgrid(c, c, indexing="ij")
    return yy, xx


def normalize_peak(x: np.ndarray) -> np.ndarray:
    """Scale so that ``max |x| == 1.0`` holds bit-exactly."""
    x = x / np.abs(x).max()
    over = np.abs(x) > 1.0
    x[over] /= np.abs(x[over])
    # rounding can leave the peak an ulp off; search nearby representable values
    idx = np.unravel_index(np.argmax(np.abs(x)), x.shape)
    z = x[idx]
    if np.abs(z) != 1.0:
        steps = np.arange(-8, 9)
        re = z.real + steps * np.spacing(z.real)
        im = z.imag + steps * np.spacing(z.imag)
        cand = re[:, None] + 1j * im[None, :]
        hits = np.argwhere(np.abs(cand) == 1.0)
        if len(hits):
            best = hits[np.argmin(np.abs(hits - 8).sum(axis=1))]
            z = cand[best[0], best[1]]
        else:
            z = complex(np.sign(z.real) or 1.0, 0.0)
    x[idx] = z
    return x


def generate_phantom(seed: int, size: int = 64) -> np.ndarray:
    """Random ellipse phantom with smooth phase, peak magnitude 1."""
    if size < 16:
        raise ParameterError(f"phantom size must be >= 16, got {size}")
    if not is_power_of_two(size):
        raise ParameterError(f"phantom size must be a power of two, got {size}")
    rng = substream(seed, "phantom")
    yy, xx = _grid(size)
    n_ellipses = int(rng.integers(5, 13))

    mag = np.zeros((size, size))
    for k in range(n_ellipses):
        if k == 0:
            # outer "body" ellipse keeps the others mostly inside the FOV
            cy, cx = rng.uniform(-0.08, 0.08, size=2)
            ay, ax = rng.uniform(0.6, 0.85, size=2)
            value = rng.uniform(0.3, 0.6)
        else:
            cy, cx = rng.uniform(-0.5, 0.5, size=2)
            ay, ax = rng.uniform(0.06, 0.35, size=2)
            value = rng.uniform(0.1, 0.6)
        theta = rng.uniform(0, np.pi)
        ct, st = np.cos(theta), np.sin(theta)
        u = (xx - cx) * ct + (yy - cy) * st
        v = -(xx - cx) * st + (yy - cy) * ct
        mag += value * ((u / ax) ** 2 + (v / ay) ** 2 <= 1.0)

    mag = gaussian_filter(mag, sigma=0.7, mode="constant", truncate=3.0)
    # low-order polynomial phase
    c = rng.uniform(-1, 1, size=6) * np.array([np.pi, 1.0, 1.0, 0.5, 0.5, 0.5])
    phase = c[0] + c[1] * xx + c[2] * yy + c[3] * xx**2 + c[4] * xx * yy + c[5] * yy**2
    return normalize_peak(mag * np.exp(1j * phase))


def generate_coil_maps(seed: int, coils: int, size: int = 64) -> np.ndarray:
    """``(C, H, W)`` smooth complex sensitivities with unit root-sum-of-squares."""
    if coils < 1:
        raise ParameterError(f"coils must be >= 1, got {coils}")
    if not is_power_of_two(size):
        raise ParameterError(f"size must be a power of two, got {size}")
    rng = substream(seed, "coils")
    yy, xx = _grid(size)
    offset = rng.uniform(0, 2 * np.pi)
    maps = np.empty((coils, size, size), dtype=np.complex128)
    for c in range(coils):
        angle = offset + 2 * np.pi * c / coils + rng.uniform(-0.2, 0.2)
        radius = rng.uniform(1.0, 1.3)
        cy, cx = radius * np.sin(angle), radius * np.cos(angle)
        width = rng.uniform(0.9, 1.3)
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
        gy, gx = rng.uniform(-1.0, 1.0, size=2)
        maps[c] = bump * np.exp(1j * (rng.uniform(0, 2 * np.pi) + gx * xx + gy * yy))
    sos = np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))
    return maps / sos


def add_gaussian_noise(img: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    """Independent N(0, sigma^2) on real and imaginary parts."""
    if sigma < 0:
        raise ParameterError(f"sigma must be nonnegative, got {sigma}")
    img = np.asarray(img, dtype=np.complex128)
    if sigma == 0:
        return img.copy()
    rng = substream(seed, "image-noise")
    noise = rng.standard_normal((2,) + img.shape)
    return img + sigma * (noise[0] + 1j * noise[1])


def _image_seed(seed: int, split: str, index: int) -> int:
    return int(substream(seed, f"dataset-{split}", index).integers(0, 2**63))


def build_dataset(seed: int, n_train: int, n_test: int, size: int = 64) -> tuple[Dataset, Dataset]:
    """Train and test phantoms drawn from disjoint seed streams."""
    if n_train < 1 or n_test < 1:
        raise ParameterError("n_train and n_test must both be >= 1")
    train = [generate_phantom(_image_seed(seed, "train", i), size) for i in range(n_train)]
    test = [generate_phantom(_image_seed(seed, "test", i), size) for i in range(n_test)]
    return Dataset(train, "train", seed), Dataset(test, "test", seed)
