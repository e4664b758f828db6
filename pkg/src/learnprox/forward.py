"""The encoding operator ``A = P F S`` and helpers built on it."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal.windows import tukey

from .numerics import DimensionError, ParameterError, fft2_centered, ifft2_centered
from .rng import substream
from .sampling import SamplingMask


class CalibrationError(ValueError):
    """The calibration region is not fully sampled."""


@dataclass(frozen=True, eq=False)
class ForwardModel:
    """Mask (H, W) and coil maps (C, H, W). Immutable once built."""

    mask: np.ndarray
    maps: np.ndarray

    def __post_init__(self):
        mask = self.mask.data if isinstance(self.mask, SamplingMask) else self.mask
        mask = np.asarray(mask).astype(bool)
        maps = np.asarray(self.maps, dtype=np.complex128)
        if maps.ndim == 2:
            maps = maps[None]
        if maps.ndim != 3 or maps.shape[1:] != mask.shape:
            raise DimensionError(f"mask {mask.shape} and maps {maps.shape} disagree")
        mask.setflags(write=False)
        maps.setflags(write=False)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "maps", maps)

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    @property
    def coils(self) -> int:
        return self.maps.shape[0]

    def _check_x(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.complex128)
        if x.shape[-2:] != self.shape:
            raise DimensionError(f"image {x.shape} does not match model {self.shape}")
        return x

    def _check_y(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.complex128)
        if y.shape[-3:] != self.maps.shape:
            raise DimensionError(f"k-space {y.shape} does not match model {self.maps.shape}")
        return y

    def A(self, x: np.ndarray) -> np.ndarray:
        """Image ``(..., H, W)`` to masked coil k-space ``(..., C, H, W)``."""
        x = self._check_x(x)
        return self.mask * fft2_centered(self.maps * x[..., None, :, :])

    def AH(self, y: np.ndarray) -> np.ndarray:
        y = self._check_y(y)
        return np.sum(np.conj(self.maps) * ifft2_centered(self.mask * y), axis=-3)

    def normal(self, x: np.ndarray) -> np.ndarray:
        return self.AH(self.A(x))


def apply_A(model: ForwardModel, x: np.ndarray) -> np.ndarray:
    return model.A(x)


def apply_AH(model: ForwardModel, y: np.ndarray) -> np.ndarray:
    return model.AH(y)


def dc_gradient(model: ForwardModel, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient ``A^H (A x - y)`` of ``0.5 * ||A x - y||^2``."""
    return model.AH(model.A(x) - y)


def simulate_acquisition(
    image: np.ndarray,
    maps: np.ndarray,
    mask: SamplingMask | np.ndarray,
    kspace_sigma: float = 0.0,
    seed: int = 0,
) -> np.ndarray:
    """Noise-free ``A x`` plus optional complex Gaussian noise on sampled entries.

    ``kspace_sigma`` is the standard deviation of each of the real and
    imaginary noise components.
    """
    if kspace_sigma < 0:
        raise ParameterError(f"kspace_sigma must be nonnegative, got {kspace_sigma}")
    model = ForwardModel(mask, maps)
    y = model.A(image)
    if kspace_sigma > 0:
        rng = substream(seed, "kspace-noise")
        noise = rng.standard_normal((2,) + y.shape)
        y = y + model.mask * (kspace_sigma * (noise[0] + 1j * noise[1]))
    return y


def _acs_slices(shape: tuple[int, int], acs_size: int) -> tuple[slice, slice]:
    h, w = shape
    if acs_size < 1 or acs_size > min(h, w):
        raise ParameterError(f"acs_size must be in [1, {min(h, w)}], got {acs_size}")
    y0, x0 = h // 2 - acs_size // 2, w // 2 - acs_size // 2
    return slice(y0, y0 + acs_size), slice(x0, x0 + acs_size)


def estimate_coil_maps(
    calib: np.ndarray,
    acs_size: int,
    mask: SamplingMask | np.ndarray | None = None,
    taper: float = 0.5,
) -> np.ndarray:
    """Low-resolution sensitivity estimate from the central calibration block.

    Each coil's ACS block is windowed by a separable Tukey (raised-cosine)
    taper, transformed to image space and normalized by the root-sum-of-squares.
    Phase is referenced pixelwise to coil 0. Pixels whose SoS falls below
    1e-8 get ``1/sqrt(C)`` in every coil.
    """
    calib = np.asarray(calib, dtype=np.complex128)
    if calib.ndim == 2:
        calib = calib[None]
    n_coils = calib.shape[0]
    sy, sx = _acs_slices(calib.shape[1:], acs_size)
    if mask is not None:
        m = mask.data if isinstance(mask, SamplingMask) else np.asarray(mask)
        sampled = m[sy, sx].astype(bool)
    else:
        sampled = np.any(calib[:, sy, sx] != 0, axis=0)
    if not sampled.all():
        raise CalibrationError(
            f"{acs_size}x{acs_size} calibration block has {int((~sampled).sum())} unsampled entries"
        )
    win = tukey(acs_size, taper, sym=True)
    low = np.zeros_like(calib)
    low[:, sy, sx] = calib[:, sy, sx] * np.outer(win, win)
    imgs = ifft2_centered(low)
    sos = np.sqrt(np.sum(np.abs(imgs) ** 2, axis=0))
    maps = np.empty_like(imgs)
    ok = sos >= 1e-8
    maps[:, ok] = imgs[:, ok] / sos[ok]
    maps[:, ~ok] = 1 / np.sqrt(n_coils)
    ref = maps[0]
    mag = np.abs(ref)
    phase = np.where(mag > 0, np.conj(ref) / np.where(mag > 0, mag, 1.0), 1.0)
    return maps * phase
