"""Reconstruction loops: learned-prox gradient descent and its baselines.

All solvers accept a single k-space ``(C, H, W)`` or a batch ``(N, C, H, W)``
sharing one forward model; the image result has the matching leading shape.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .denoiser import DenoiserWeights, proximator_forward
from .forward import ForwardModel
from .metrics import psnr, ssim
from .numerics import ParameterError, haar2_forward, haar2_inverse, soft_threshold, spectral_norm_estimate

METHODS = ("pgd", "sense", "fista", "zerofill")


class DivergenceError(ArithmeticError):
    def __init__(self, iteration: int, method: str = "pgd"):
        super().__init__(f"{method} iterate became non-finite at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class ReconConfig:
    lam: float = 0.1
    step_size: float = 1.0
    iterations: int = 100
    method: str = "pgd"
    trace: bool = False
    l1_lambda: float = 0.005
    wavelet_levels: int = 4

    def __post_init__(self):
        if not 0 <= self.lam <= 1:
            raise ParameterError(f"lambda must lie in [0, 1], got {self.lam}")
        if not 0 < self.step_size < 2:
            raise ParameterError(f"step size must lie in (0, 2), got {self.step_size}")
        if self.iterations < 1:
            raise ParameterError("iterations must be >= 1")
        if self.method not in METHODS:
            raise ParameterError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.l1_lambda < 0:
            raise ParameterError("l1_lambda must be >= 0")


@dataclass
class TraceRow:
    lam: float
    iteration: int
    psnr: float
    ssim: float


def safe_step_size(model: ForwardModel, iters: int = 50, seed: int = 0) -> float:
    """``1 / ||A^H A||`` for maps that are not unit-SoS normalized."""
    norm = spectral_norm_estimate(model.normal, model.shape, iters, seed)
    return 1.0 / norm if norm > 0 else 1.0


def _quality(x: np.ndarray, reference: np.ndarray) -> tuple[float, float]:
    if x.ndim == 2:
        return psnr(x, reference), ssim(x, reference)
    p = [psnr(a, b) for a, b in zip(x, reference)]
    s = [ssim(a, b) for a, b in zip(x, reference)]
    return float(np.mean(p)), float(np.mean(s))


def recon_zero_filled(model: ForwardModel, y: np.ndarray) -> np.ndarray:
    return model.AH(y)


def recon_pgd(
    model: ForwardModel,
    y: np.ndarray,
    weights: DenoiserWeights | None,
    cfg: ReconConfig = ReconConfig(),
    reference: np.ndarray | None = None,
) -> tuple[np.ndarray, list[TraceRow] | None]:
    """Gradient step on the data term, then relax toward the learned prox.

    ``m = x + a A^H (y - A x)``; ``x <- (1 - lam) x + lam r(m)``.
    With ``lam == 0`` the network is never called and ``weights`` may be None.
    Trace rows are recorded when ``cfg.trace`` is set and ``reference`` given.
    """
    lam, alpha = cfg.lam, cfg.step_size
    if lam > 0 and weights is None:
        raise ParameterError("lambda > 0 needs denoiser weights")
    tracing = cfg.trace and reference is not None
    trace: list[TraceRow] | None = [] if tracing else None
    x = model.AH(y)
    for it in range(1, cfg.iterations + 1):
        m = x + alpha * model.AH(y - model.A(x))
        if not np.all(np.isfinite(m)):
            raise DivergenceError(it)
        if lam > 0:
            x = (1 - lam) * x + lam * proximator_forward(weights, m)
        else:
            x = m
        if not np.all(np.isfinite(x)):
            raise DivergenceError(it)
        if tracing:
            trace.append(TraceRow(lam, it, *_quality(x, reference)))
    return x, trace


def recon_sense(
    model: ForwardModel,
    y: np.ndarray,
    cfg: ReconConfig = ReconConfig(),
    reference: np.ndarray | None = None,
) -> tuple[np.ndarray, list[TraceRow] | None]:
    """The ``lam = 0`` limit: plain gradient descent on ``||A x - y||^2``."""
    return recon_pgd(model, y, None, replace(cfg, lam=0.0), reference)


def fista_objective(model: ForwardModel, x: np.ndarray, y: np.ndarray, l1_lambda: float, levels: int) -> np.ndarray:
    r = model.A(x) - y
    data = 0.5 * np.sum(np.abs(r) ** 2, axis=(-3, -2, -1))
    return data + l1_lambda * haar2_forward(x, levels).l1_per_item()


def recon_fista_l1wavelet(
    model: ForwardModel,
    y: np.ndarray,
    l1_lambda: float = 0.005,
    iterations: int = 100,
    levels: int = 4,
    step: float = 1.0,
    return_objective: bool = False,
):
    """FISTA on ``0.5 ||A x - y||^2 + l1_lambda ||W x||_1`` with Haar ``W``.

    Every coefficient, the coarse approximation included, is thresholded.
    The monotone variant is used: a proximal step that would raise the
    objective is not accepted as the iterate, though it still steers the
    momentum. The objective therefore never increases.
    """
    if l1_lambda < 0:
        raise ParameterError("l1_lambda must be >= 0")
    x = model.AH(y)
    f_x = fista_objective(model, x, y, l1_lambda, levels)
    z = x
    t = 1.0
    history = []
    for it in range(1, iterations + 1):
        u = z - step * model.AH(model.A(z) - y)
        cand = haar2_inverse(soft_threshold(haar2_forward(u, levels), l1_lambda * step))
        if not np.all(np.isfinite(cand)):
            raise DivergenceError(it, "fista")
        f_cand = fista_objective(model, cand, y, l1_lambda, levels)
        accept = f_cand <= f_x
        x_new = np.where(np.reshape(accept, np.shape(accept) + (1, 1)), cand, x)
        t_new = (1 + math.sqrt(1 + 4 * t * t)) / 2
        z = x_new + (t / t_new) * (cand - x_new) + ((t - 1) / t_new) * (x_new - x)
        x, t = x_new, t_new
        f_x = np.minimum(f_cand, f_x)
        if return_objective:
            history.append(f_x)
    if return_objective:
        return x, np.array(history)
    return x


def reconstruct(
    model: ForwardModel,
    y: np.ndarray,
    cfg: ReconConfig,
    weights: DenoiserWeights | None = None,
    reference: np.ndarray | None = None,
) -> tuple[np.ndarray, list[TraceRow] | None]:
    """Dispatch on ``cfg.method``."""
    if cfg.method == "zerofill":
        return recon_zero_filled(model, y), None
    if cfg.method == "sense":
        return recon_sense(model, y, cfg, reference)
    if cfg.method == "fista":
        return recon_fista_l1wavelet(model, y, cfg.l1_lambda, cfg.iterations, cfg.wavelet_levels), None
    return recon_pgd(model, y, weights, cfg, reference)


def lambda_sweep(
    model: ForwardModel,
    y: np.ndarray,
    weights: DenoiserWeights | None,
    lambdas: Sequence[float],
    iterations: int,
    reference: np.ndarray,
    step_size: float = 1.0,
) -> list[TraceRow]:
    """PSNR/SSIM after every iteration for each mixing weight (one row per pair)."""
    if reference is None:
        raise ParameterError("lambda_sweep needs a reference image")
    rows: list[TraceRow] = []
    for lam in lambdas:
        cfg = ReconConfig(lam=float(lam), step_size=step_size, iterations=iterations, trace=True)
        _, trace = recon_pgd(model, y, weights, cfg, reference)
        rows.extend(trace)
    return rows
