"""k-space sampling masks in the centered frame (DC at ``(H // 2, W // 2)``).

Random masks use a variable-density law ``p(k) ∝ (1 - |k| / k_max) ** power``
(``power = 3`` by default). ``k_max`` sits one sample beyond the grid edge so
that every location keeps a nonzero chance of being drawn.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import ParameterError
from .rng import substream

DENSITY_POWER = 3.0


@dataclass(eq=False)
class SamplingMask:
    data: np.ndarray  # bool, (H, W)
    kind: str = "custom"
    meta: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __eq__(self, other: object) -> bool:
        return isinstance(other, SamplingMask) and np.array_equal(self.data, other.data)


def _check_fraction(fraction: float) -> None:
    if not (0 < fraction <= 1):
        raise ParameterError(f"fraction must be in (0, 1], got {fraction}")


def _weighted_pick(rng: np.random.Generator, candidates: np.ndarray, weights: np.ndarray, n: int) -> np.ndarray:
    if n <= 0:
        return candidates[:0]
    p = weights / weights.sum()
    return rng.choice(candidates, size=n, replace=False, p=p)


def cartesian1d_mask(
    h: int,
    w: int,
    fraction: float,
    acs_lines: int = 12,
    seed: int = 0,
    power: float = DENSITY_POWER,
) -> SamplingMask:
    """Full phase-encode rows picked by the variable-density law, center forced on."""
    _check_fraction(fraction)
    if acs_lines < 0 or acs_lines % 2 or acs_lines > h:
        raise ParameterError(f"acs_lines must be even and <= {h}, got {acs_lines}")
    n_rows = int(round(fraction * h))
    if fraction * h < acs_lines:
        raise ParameterError(
            f"fraction*h = {fraction * h:g} is smaller than acs_lines = {acs_lines}"
        )
    rows = np.zeros(h, dtype=bool)
    c = h // 2
    rows[c - acs_lines // 2 : c + acs_lines // 2] = True
    rows[c] = True
    k = np.abs(np.arange(h) - c)
    free = np.flatnonzero(~rows)
    weights = (1 - k[free] / (h / 2 + 1)) ** power
    rng = substream(seed, "mask-cartesian1d")
    rows[_weighted_pick(rng, free, weights, n_rows - rows.sum())] = True
    data = np.repeat(rows[:, None], w, axis=1)
    return SamplingMask(data, "cartesian1d", {"fraction": fraction, "acs": acs_lines, "seed": seed})


def random2d_mask(
    h: int,
    w: int,
    fraction: float,
    acs_size: int = 12,
    seed: int = 0,
    power: float = DENSITY_POWER,
) -> SamplingMask:
    """Pointwise variable-density mask with exactly ``round(fraction*H*W)`` samples."""
    _check_fraction(fraction)
    if acs_size < 0 or acs_size > min(h, w):
        raise ParameterError(f"acs_size must be in [0, {min(h, w)}], got {acs_size}")
    n_total = int(round(fraction * h * w))
    if fraction * h * w < acs_size * acs_size:
        raise ParameterError(
            f"fraction*H*W = {fraction * h * w:g} is smaller than the ACS block ({acs_size}x{acs_size})"
        )
    data = np.zeros((h, w), dtype=bool)
    cy, cx = h // 2, w // 2
    half = acs_size // 2
    data[cy - half : cy - half + acs_size, cx - half : cx - half + acs_size] = True
    data[cy, cx] = True
    ky, kx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    r = np.sqrt((ky / (h / 2)) ** 2 + (kx / (w / 2)) ** 2)
    r_max = np.sqrt(2.0) * (1 + 2 / min(h, w))
    free = np.flatnonzero(~data.ravel())
    weights = (1 - r.ravel()[free] / r_max) ** power
    rng = substream(seed, "mask-random2d")
    data.ravel()[_weighted_pick(rng, free, weights, n_total - data.sum())] = True
    return SamplingMask(data, "random2d", {"fraction": fraction, "acs": acs_size, "seed": seed})


def _round_half_up(v: np.ndarray) -> np.ndarray:
    return np.floor(v + 0.5).astype(int)


def radial_mask(h: int, w: int, n_spokes: int) -> SamplingMask:
    """Pseudo-radial mask: spokes at angles ``i*pi/n`` rasterized through the center.

    Each spoke is a readout of length N: grid points further than N/2 from
    the center (in units normalized per axis) are dropped, so corners of
    k-space stay empty as they would for a true radial acquisition.
    """
    if n_spokes < 1:
        raise ParameterError(f"n_spokes must be >= 1, got {n_spokes}")
    data = np.zeros((h, w), dtype=bool)
    cy, cx = h // 2, w // 2
    for i in range(n_spokes):
        theta = i * np.pi / n_spokes
        s, c = np.sin(theta), np.cos(theta)
        if abs(c) >= abs(s):
            x = np.arange(w)
            y = _round_half_up(cy + (x - cx) * s / c)
        else:
            y = np.arange(h)
            x = _round_half_up(cx + (y - cy) * c / s)
        # fixed readout length: samples beyond radius N/2 are not acquired
        rad2 = ((y - cy) / (h / 2)) ** 2 + ((x - cx) / (w / 2)) ** 2
        keep = (y >= 0) & (y < h) & (x >= 0) & (x < w) & (rad2 <= 1.0)
        data[y[keep], x[keep]] = True
    return SamplingMask(data, "radial", {"spokes": n_spokes})


def mask_fraction(mask: SamplingMask | np.ndarray) -> float:
    data = mask.data if isinstance(mask, SamplingMask) else np.asarray(mask)
    return float(np.count_nonzero(data)) / data.size


# preset name -> (mask family, fraction or spoke count)
PRESET_SPECS = {
    "cartesian30": ("cartesian1d", 0.3),
    "random20": ("random2d", 0.2),
    "radial40": ("radial", 40),
}
PRESETS = tuple(PRESET_SPECS)


def preset_mask(name: str, size: int, acs: int = 12, seed: int = 0) -> SamplingMask:
    """The three acquisition regimes used in the experiments."""
    if name not in PRESET_SPECS:
        raise ParameterError(f"unknown mask preset {name!r}")
    kind, value = PRESET_SPECS[name]
    if kind == "cartesian1d":
        mask = cartesian1d_mask(size, size, value, acs, seed)
    elif kind == "random2d":
        mask = random2d_mask(size, size, value, acs, seed)
    else:
        mask = radial_mask(size, size, value)
    mask.kind = name
    return mask
