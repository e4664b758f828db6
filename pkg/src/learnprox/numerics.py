"""Complex-grid arithmetic shared by every other module.

Conventions fixed here and used everywhere:

* images are ``complex128`` arrays of shape ``(H, W)`` with power-of-two sides;
* the 2-D FFT is orthonormal and *centered*: the DC sample sits at
  ``(H // 2, W // 2)`` in k-space (``fftshift`` on both axes), and sampling
  masks live in that same frame;
* the Haar transform is the orthonormal one, so energy is preserved.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class DimensionError(ValueError):
    """Array shape violates a size contract (power of two, level count, ...)."""


class ParameterError(ValueError):
    """A scalar parameter is outside its admissible range."""


def is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def check_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    """Coerce to complex128 and enforce the power-of-two, finite contract."""
    arr = np.asarray(img, dtype=np.complex128)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    h, w = arr.shape
    if not (is_power_of_two(h) and is_power_of_two(w)):
        raise DimensionError(f"{name} sides must be powers of two, got {h}x{w}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite samples")
    return arr


def _check_grid(x: np.ndarray) -> np.ndarray:
    arr = np.asarray(x, dtype=np.complex128)
    if arr.ndim < 2:
        raise DimensionError(f"expected at least 2-D array, got shape {arr.shape}")
    h, w = arr.shape[-2:]
    if not (is_power_of_two(h) and is_power_of_two(w)):
        raise DimensionError(f"grid sides must be powers of two, got {h}x{w}")
    return arr


def fft2_centered(x: np.ndarray) -> np.ndarray:
    """Unitary centered 2-D DFT over the last two axes.

    Leading axes (e.g. coils) are batched.
    """
    x = _check_grid(x)
    axes = (-2, -1)
    return np.fft.fftshift(
        np.fft.fft2(np.fft.ifftshift(x, axes=axes), norm="ortho"), axes=axes
    )


def ifft2_centered(k: np.ndarray) -> np.ndarray:
    """Inverse (and adjoint) of :func:`fft2_centered`."""
    k = _check_grid(k)
    axes = (-2, -1)
    return np.fft.fftshift(
        np.fft.ifft2(np.fft.ifftshift(k, axes=axes), norm="ortho"), axes=axes
    )


def inner(a: np.ndarray, b: np.ndarray) -> complex:
    """Complex inner product ``<a, b> = sum(a * conj(b))``."""
    return complex(np.vdot(b, a))


# --------------------------------------------------------------------------
# Haar wavelet


@dataclass
class WaveletCoeffs:
    """Multi-level orthonormal Haar decomposition.

    ``details[0]`` is the finest level; each entry holds the
    ``(horizontal, vertical, diagonal)`` detail sub-grids.
    """

    approx: np.ndarray
    details: list[tuple[np.ndarray, np.ndarray, np.ndarray]]

    @property
    def levels(self) -> int:
        return len(self.details)

    def bands(self) -> list[np.ndarray]:
        out = [self.approx]
        for band in self.details:
            out.extend(band)
        return out

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "WaveletCoeffs":
        return WaveletCoeffs(
            fn(self.approx), [tuple(fn(b) for b in lvl) for lvl in self.details]
        )

    def norm(self) -> float:
        return float(np.sqrt(sum(np.vdot(b, b).real for b in self.bands())))

    def l1(self) -> float:
        return float(sum(np.abs(b).sum() for b in self.bands()))

    def l1_per_item(self) -> np.ndarray:
        """l1 norm per leading index when the transform was batched."""
        return sum(np.abs(b).sum(axis=(-2, -1)) for b in self.bands())

    def size(self) -> int:
        return sum(b.size for b in self.bands())


def max_haar_levels(shape: tuple[int, int]) -> int:
    return int(np.log2(min(shape)))


def haar2_forward(img: np.ndarray, levels: int) -> WaveletCoeffs:
    """Orthonormal 2-D Haar analysis over the last two axes."""
    img = _check_grid(img)
    max_levels = max_haar_levels(img.shape[-2:])
    if levels < 1 or levels > max_levels:
        raise DimensionError(f"levels must be in [1, {max_levels}] for shape {img.shape}")
    details = []
    a = img
    for _ in range(levels):
        p, q = a[..., 0::2, 0::2], a[..., 0::2, 1::2]
        r, s = a[..., 1::2, 0::2], a[..., 1::2, 1::2]
        details.append(
            ((p - q + r - s) / 2, (p + q - r - s) / 2, (p - q - r + s) / 2)
        )
        a = (p + q + r + s) / 2
    return WaveletCoeffs(a, details)


def haar2_inverse(coeffs: WaveletCoeffs) -> np.ndarray:
    a = coeffs.approx
    for h, v, d in reversed(coeffs.details):
        if h.shape != a.shape:
            raise DimensionError("inconsistent wavelet band shapes")
        out = np.empty(a.shape[:-2] + (2 * a.shape[-2], 2 * a.shape[-1]), dtype=np.complex128)
        out[..., 0::2, 0::2] = (a + h + v + d) / 2
        out[..., 0::2, 1::2] = (a - h + v - d) / 2
        out[..., 1::2, 0::2] = (a + h - v - d) / 2
        out[..., 1::2, 1::2] = (a - h - v + d) / 2
        a = out
    return a


# --------------------------------------------------------------------------
# elementwise proximal maps


def soft_threshold_array(v: np.ndarray, tau: float) -> np.ndarray:
    """Complex soft-thresholding ``v * max(|v| - tau, 0) / |v|``."""
    if tau < 0:
        raise ParameterError(f"tau must be nonnegative, got {tau}")
    mag = np.abs(v)
    scale = np.maximum(mag - tau, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(mag > 0, v * (scale / np.where(mag > 0, mag, 1.0)), 0)
    return out.astype(np.complex128)


def soft_threshold(coeffs: WaveletCoeffs, tau: float) -> WaveletCoeffs:
    if tau < 0:
        raise ParameterError(f"tau must be nonnegative, got {tau}")
    return coeffs.map(lambda b: soft_threshold_array(b, tau))


def spectral_norm_estimate(
    apply: Callable[[np.ndarray], np.ndarray],
    shape: tuple[int, ...],
    iters: int = 50,
    seed: int = 0,
) -> float:
    """Largest eigenvalue of a self-adjoint PSD map by power iteration.

    Returns the running maximum of the Rayleigh quotients, which is
    nondecreasing in ``iters`` for a fixed seed.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    nrm = np.linalg.norm(x)
    best = 0.0
    for _ in range(max(iters, 1)):
        x = x / nrm
        ax = apply(x)
        best = max(best, float(np.vdot(x, ax).real))
        nrm = np.linalg.norm(ax)
        if nrm == 0:
            return 0.0
        x = ax
    return best
