"""PSNR and SSIM on magnitude images, plus grouped suite reports."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .numerics import DimensionError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

AGGREGATE_MEAN = "AGGREGATE_MEAN"
AGGREGATE_STD = "AGGREGATE_STD"


def _magnitudes(x: np.ndarray, ref: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x, ref = np.asarray(x), np.asarray(ref)
    if x.shape != ref.shape:
        raise DimensionError(f"shape mismatch: {x.shape} vs {ref.shape}")
    return np.abs(x).astype(np.float64), np.abs(ref).astype(np.float64)


def psnr(x: np.ndarray, ref: np.ndarray) -> float:
    """``10 log10(peak^2 / MSE)`` with peak = max |ref|; ``inf`` when identical."""
    a, b = _magnitudes(x, ref)
    peak = b.max()
    if peak == 0:
        raise ValueError("reference image is all zero")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10 * np.log10(peak**2 / mse))


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    t = np.arange(size) - (size - 1) / 2
    g = np.exp(-(t**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    rows = sliding_window_view(img, g.size, axis=1) @ g
    return sliding_window_view(rows, g.size, axis=0) @ g


def ssim(x: np.ndarray, ref: np.ndarray) -> float:
    """Single-scale SSIM, Gaussian 11x11 window, mean over valid positions.

    The dynamic range ``L`` is the peak magnitude of ``ref``.
    """
    a, b = _magnitudes(x, ref)
    if min(a.shape) < SSIM_WINDOW:
        raise DimensionError(f"image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    L = b.max()
    if L == 0:
        raise ValueError("reference image is all zero")
    c1 = (SSIM_K1 * L) ** 2
    c2 = (SSIM_K2 * L) ** 2
    g = _gaussian_window()
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    if np.array_equal(a, b):
        return 1.0
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    case_id: str
    method: str
    mask_type: str
    fraction: float
    psnr: float
    ssim: float


@dataclass
class Case:
    case_id: str
    reference: np.ndarray
    mask_type: str
    fraction: float
    payload: object = None


def aggregate(rows: Sequence[MetricReport]) -> list[MetricReport]:
    """Mean and (population) standard deviation per ``(method, mask_type)``."""
    groups: dict[tuple[str, str], list[MetricReport]] = {}
    for r in rows:
        groups.setdefault((r.method, r.mask_type), []).append(r)
    out = []
    for (method, mask_type), members in groups.items():
        p = np.array([m.psnr for m in members])
        s = np.array([m.ssim for m in members])
        frac = float(np.mean([m.fraction for m in members]))
        out.append(MetricReport(AGGREGATE_MEAN, method, mask_type, frac, float(p.mean()), float(s.mean())))
        std_p = float(p.std()) if np.all(np.isfinite(p)) else math.nan
        out.append(MetricReport(AGGREGATE_STD, method, mask_type, frac, std_p, float(s.std())))
    return out


def evaluate_suite(
    cases: Iterable[Case],
    methods: Mapping[str, Callable[[Case], np.ndarray]],
) -> list[MetricReport]:
    """Run every method on every case; per-case rows (sorted by case id) then aggregates."""
    if not methods:
        raise ValueError("no methods given")
    rows = []
    for case in sorted(cases, key=lambda c: c.case_id):
        for name, fn in methods.items():
            img = fn(case)
            rows.append(
                MetricReport(case.case_id, name, case.mask_type, case.fraction,
                             psnr(img, case.reference), ssim(img, case.reference))
            )
    if not rows:
        raise ValueError("no cases given")
    return rows + aggregate(rows)
