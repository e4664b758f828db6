"""Learned proximal operator: residual CNN, its unrolled form, and training.

Real arrays use the layout ``(N, H, W, channels)``; a complex image becomes
two channels ``(real, imag)``. Convolutions are 3x3 cross-correlations with
zero padding. Gradients with respect to complex images use the convention
``dL/d(re) + 1j * dL/d(im)``.

Parameter layout (also the order of the WGT1 blob): for each layer in
depth order, the kernel ``(3, 3, c_in, c_out)`` in C order, then the bias
``(c_out,)``.
"""
from __future__ import annotations

import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .formats import FormatError
from .numerics import ParameterError
from .rng import substream

log = logging.getLogger(__name__)

KERNEL = 3


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class NetConfig:
    filters: int = 16
    depth: int = 4
    unroll_steps: int = 3
    inner_alpha: float = 0.5

    def __post_init__(self):
        if self.filters < 1:
            raise ParameterError("filters must be >= 1")
        if self.depth < 2:
            raise ParameterError("depth must be >= 2")
        if self.unroll_steps < 1:
            raise ParameterError("unroll_steps must be >= 1")
        if not 0 < self.inner_alpha < 1:
            raise ParameterError("inner_alpha must lie in (0, 1)")

    def layer_channels(self) -> list[tuple[int, int]]:
        f = self.filters
        return [(2, f)] + [(f, f)] * (self.depth - 2) + [(f, 2)]


@dataclass(frozen=True)
class TrainConfig:
    noise_sigma: float = 0.03
    probes: int = 1
    probe_eps: float = 1e-3
    learning_rate: float = 1e-3
    batch_size: int = 8
    epochs: int = 60
    seed: int = 0
    patch: int = 32  # random square crops; 0 trains on full images
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ParameterError("noise_sigma must be >= 0")
        if self.probe_eps <= 0:
            raise ParameterError("probe_eps must be > 0")
        if self.probes < 1:
            raise ParameterError("probes must be >= 1")
        if self.batch_size < 1 or self.epochs < 1:
            raise ParameterError("batch_size and epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ParameterError("learning_rate must be > 0")
        if self.patch < 0:
            raise ParameterError("patch must be >= 0")

    @property
    def penalty_weight(self) -> float:
        return self.noise_sigma**2


@dataclass(eq=False)
class DenoiserWeights:
    config: NetConfig
    kernels: list[np.ndarray]
    biases: list[np.ndarray]
    meta: dict = field(default_factory=dict)

    def params(self) -> list[np.ndarray]:
        out = []
        for k, b in zip(self.kernels, self.biases):
            out.extend((k, b))
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def copy(self) -> "DenoiserWeights":
        return DenoiserWeights(
            self.config,
            [k.copy() for k in self.kernels],
            [b.copy() for b in self.biases],
            dict(self.meta),
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DenoiserWeights):
            return NotImplemented
        return (
            self.config == other.config
            and self.meta == other.meta
            and all(
                a.shape == b.shape and a.tobytes() == b.tobytes()
                for a, b in zip(self.params(), other.params())
            )
        )


def zero_weights(config: NetConfig) -> DenoiserWeights:
    kernels = [np.zeros((KERNEL, KERNEL, ci, co)) for ci, co in config.layer_channels()]
    biases = [np.zeros(co) for _, co in config.layer_channels()]
    return DenoiserWeights(config, kernels, biases)


def init_weights(config: NetConfig, seed: int = 0) -> DenoiserWeights:
    """He-normal hidden layers; the output layer starts at zero so r = identity."""
    w = zero_weights(config)
    rng = substream(seed, "net-init")
    for i, (ci, co) in enumerate(config.layer_channels()[:-1]):
        w.kernels[i] = rng.standard_normal((KERNEL, KERNEL, ci, co)) * np.sqrt(2.0 / (KERNEL * KERNEL * ci))
    return w


# --------------------------------------------------------------------------
# complex <-> channels


def to_channels(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    return np.stack((img.real, img.imag), axis=-1).astype(np.float64)


def from_channels(x: np.ndarray) -> np.ndarray:
    return x[..., 0] + 1j * x[..., 1]


# --------------------------------------------------------------------------
# convolution
#
# Activations are kept in a "flat padded" layout: each (H, W, C) map is zero
# padded to (H + 2, W + 2), flattened over space, and followed by two spare
# rows of zeros, giving (N, (H + 2) * (W + 2) + 2, C). A 3x3 tap (ky, kx) is
# then the contiguous slice starting at ky * (W + 2) + kx, so a convolution is
# nine BLAS matmuls on views. Outputs come out "extended": (N, H * (W + 2), C)
# with two junk columns per row that are kept at zero.


class _Grid:
    def __init__(self, h: int, w: int):
        self.h, self.w = h, w
        self.wp = w + 2
        self.n_ext = h * self.wp
        self.n_pad = (h + 2) * self.wp + 2
        self.offsets = [ky * self.wp + kx for ky in range(KERNEL) for kx in range(KERNEL)]
        self.valid = (np.arange(self.n_ext) % self.wp < w)[:, None]
        self.start = self.wp + 1  # flat index of pixel (0, 0) in the padded frame

    def pad(self, x: np.ndarray) -> np.ndarray:
        n, h, w, c = x.shape
        out = np.zeros((n, self.n_pad, c))
        out[:, : (h + 2) * self.wp].reshape(n, h + 2, self.wp, c)[:, 1:-1, 1:-1] = x
        return out

    def embed(self, ext: np.ndarray) -> np.ndarray:
        out = np.zeros((ext.shape[0], self.n_pad, ext.shape[2]))
        out[:, self.start : self.start + self.n_ext] = ext
        return out

    def to_ext(self, x: np.ndarray) -> np.ndarray:
        n, h, w, c = x.shape
        return np.pad(x, ((0, 0), (0, 0), (0, 2), (0, 0))).reshape(n, self.n_ext, c)

    def from_ext(self, ext: np.ndarray) -> np.ndarray:
        n, _, c = ext.shape
        return ext.reshape(n, self.h, self.wp, c)[:, :, : self.w]

    def interior(self, padded: np.ndarray) -> np.ndarray:
        n, _, c = padded.shape
        return padded[:, : (self.h + 2) * self.wp].reshape(n, self.h + 2, self.wp, c)[:, 1:-1, 1:-1]


def _conv_flat(grid: _Grid, xp: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    taps = kernel.reshape(KERNEL * KERNEL, *kernel.shape[2:])
    out = np.zeros((xp.shape[0], grid.n_ext, kernel.shape[-1]))
    for off, k in zip(grid.offsets, taps):
        out += xp[:, off : off + grid.n_ext] @ k
    out += bias
    out *= grid.valid
    return out


def _conv_flat_backward(
    grid: _Grid, xp: np.ndarray, kernel: np.ndarray, dz: np.ndarray, need_input: bool
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """``dz`` must be zero on the junk columns."""
    taps = kernel.reshape(KERNEL * KERNEL, *kernel.shape[2:])
    dk = np.empty_like(taps)
    for t, off in enumerate(grid.offsets):
        dk[t] = np.matmul(xp[:, off : off + grid.n_ext].transpose(0, 2, 1), dz).sum(axis=0)
    db = dz.sum(axis=(0, 1))
    dxp = None
    if need_input:
        dxp = np.zeros_like(xp)
        for off, k in zip(grid.offsets, taps):
            dxp[:, off : off + grid.n_ext] += dz @ k.T
    return dk.reshape(kernel.shape), db, dxp


def conv_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """3x3 zero-padded cross-correlation, ``(N, H, W, Ci) -> (N, H, W, Co)``."""
    grid = _Grid(*x.shape[1:3])
    return grid.from_ext(_conv_flat(grid, grid.pad(x), kernel, bias))


def conv_backward(
    x: np.ndarray, kernel: np.ndarray, dout: np.ndarray, need_input: bool = True
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    grid = _Grid(*x.shape[1:3])
    dk, db, dxp = _conv_flat_backward(grid, grid.pad(x), kernel, grid.to_ext(dout), need_input)
    return dk, db, (grid.interior(dxp) if need_input else None)


# --------------------------------------------------------------------------
# Net_phi on channel batches


def net_forward_batch(weights: DenoiserWeights, x: np.ndarray) -> tuple[np.ndarray, tuple]:
    """Residual CNN on ``(N, H, W, 2)``; returns output and a cache for backward."""
    grid = _Grid(*x.shape[1:3])
    a = grid.pad(x)
    inputs = []
    last = len(weights.kernels) - 1
    for i, (k, b) in enumerate(zip(weights.kernels, weights.biases)):
        inputs.append(a)
        z = _conv_flat(grid, a, k, b)
        if i < last:
            a = grid.embed(np.maximum(z, 0.0, out=z))
    return x + grid.from_ext(z), (grid, inputs)


def net_backward_batch(
    weights: DenoiserWeights,
    cache: tuple,
    dout: np.ndarray,
    need_input: bool = True,
) -> tuple[list[np.ndarray], np.ndarray | None]:
    """Reverse pass; grads follow ``weights.params()`` order."""
    grid, inputs = cache
    n_layers = len(weights.kernels)
    grads: list[np.ndarray] = [None] * (2 * n_layers)  # type: ignore[list-item]
    d = grid.to_ext(dout)
    dxp = None
    for i in reversed(range(n_layers)):
        want_dx = need_input or i > 0
        dk, db, dxp = _conv_flat_backward(grid, inputs[i], weights.kernels[i], d, want_dx)
        grads[2 * i], grads[2 * i + 1] = dk, db
        if i > 0:
            span = slice(grid.start, grid.start + grid.n_ext)
            # inputs[i] holds relu(z_{i-1}); its positive entries carry the gradient
            d = dxp[:, span] * (inputs[i][:, span] > 0)
    dx = dout + grid.interior(dxp) if need_input else None
    return grads, dx


def _check_finite(img: np.ndarray) -> None:
    if not np.all(np.isfinite(img)):
        raise ValueError("network input contains non-finite values")


def net_forward(weights: DenoiserWeights, img: np.ndarray) -> np.ndarray:
    """Apply Net_phi to a complex image ``(H, W)`` or a batch ``(N, H, W)``."""
    _check_finite(img)
    img = np.asarray(img)
    x = to_channels(img if img.ndim == 3 else img[None])
    out, _ = net_forward_batch(weights, x)
    out = from_channels(out)
    return out if img.ndim == 3 else out[0]


def net_backward(
    weights: DenoiserWeights, img: np.ndarray, upstream_grad: np.ndarray
) -> tuple[list[np.ndarray], np.ndarray]:
    """Weight gradients and input gradient of ``<upstream, net_forward(img)>_R``."""
    x = to_channels(np.asarray(img)[None])
    _, inputs = net_forward_batch(weights, x)
    grads, dx = net_backward_batch(weights, inputs, to_channels(np.asarray(upstream_grad)[None]))
    return grads, from_channels(dx)[0]


# --------------------------------------------------------------------------
# unrolled proximator r_theta


def proximator_forward_batch(weights: DenoiserWeights, v: np.ndarray) -> tuple[np.ndarray, list]:
    """K steps ``g = x + a (v - x)``, ``x = Net(g)`` from ``x = v``; shared weights."""
    alpha = weights.config.inner_alpha
    x = v
    caches = []
    for _ in range(weights.config.unroll_steps):
        g = x + alpha * (v - x)
        x, inputs = net_forward_batch(weights, g)
        caches.append(inputs)
    return x, caches


def proximator_backward_batch(
    weights: DenoiserWeights, caches: list, dout: np.ndarray, need_input: bool = True
) -> tuple[list[np.ndarray], np.ndarray | None]:
    alpha = weights.config.inner_alpha
    total = [np.zeros_like(p) for p in weights.params()]
    dx = dout
    dv = np.zeros_like(dout) if need_input else None
    for t in reversed(range(len(caches))):
        want = need_input or t > 0
        grads, dg = net_backward_batch(weights, caches[t], dx, need_input=want)
        for acc, g in zip(total, grads):
            acc += g
        if not want:
            break
        dx = (1 - alpha) * dg
        if need_input:
            dv += alpha * dg
    if need_input:
        dv += dx
    return total, dv


def proximator_forward(weights: DenoiserWeights, v: np.ndarray) -> np.ndarray:
    """The learned proximal map on a complex image or a ``(N, H, W)`` batch."""
    _check_finite(v)
    v = np.asarray(v)
    x = to_channels(v if v.ndim == 3 else v[None])
    out, _ = proximator_forward_batch(weights, x)
    out = from_channels(out)
    return out if v.ndim == 3 else out[0]


def proximator_backward(
    weights: DenoiserWeights, v: np.ndarray, upstream_grad: np.ndarray
) -> tuple[list[np.ndarray], np.ndarray]:
    x = to_channels(np.asarray(v)[None])
    _, caches = proximator_forward_batch(weights, x)
    grads, dv = proximator_backward_batch(weights, caches, to_channels(np.asarray(upstream_grad)[None]))
    return grads, from_channels(dv)[0]


# --------------------------------------------------------------------------
# Jacobian penalty


def jacobian_penalty_estimate(
    weights: DenoiserWeights,
    x: np.ndarray,
    eps: float = 1e-3,
    probes: int = 1,
    seed: int = 0,
    fn: Callable[[DenoiserWeights, np.ndarray], np.ndarray] | None = None,
) -> float:
    """Hutchinson estimate of ``||d r(x) / d x||_F^2`` by forward differences.

    ``(1/n) sum_i ||(r(x + eps d_i) - r(x)) / eps||^2`` with standard-normal
    probes over all real components; ``fn`` defaults to the proximator.
    """
    if eps <= 0:
        raise ParameterError("eps must be > 0")
    fn = fn or proximator_forward
    x = np.asarray(x, dtype=np.complex128)
    rng = substream(seed, "jacobian-probe")
    d = rng.standard_normal((probes, 2) + x.shape)
    d = d[:, 0] + 1j * d[:, 1]
    base = fn(weights, x)
    shifted = fn(weights, x[None] + eps * d)
    diff = (shifted - base[None]) / eps
    return float(np.sum(np.abs(diff) ** 2) / probes)


# --------------------------------------------------------------------------
# training


def _sample_loss_and_grads(
    weights: DenoiserWeights,
    clean: np.ndarray,
    noisy: np.ndarray,
    probes_d: np.ndarray,
    cfg: TrainConfig,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Per-sample losses and the gradient of their batch mean.

    ``clean``/``noisy``: ``(B, H, W, 2)``; ``probes_d``: ``(n, B, H, W, 2)``.
    The three proximator evaluations share one stacked forward pass.
    """
    b = clean.shape[0]
    n = probes_d.shape[0]
    eps = cfg.probe_eps
    stacked = np.concatenate([noisy, clean] + [clean + eps * probes_d[i] for i in range(n)])
    out, caches = proximator_forward_batch(weights, stacked)
    r_noisy, r_clean = out[:b], out[b : 2 * b]
    r_probe = out[2 * b :].reshape((n, b) + clean.shape[1:])

    resid = r_noisy - clean
    diffs = (r_probe - r_clean[None]) / eps
    axes = (1, 2, 3)
    data_term = np.sum(resid**2, axis=axes)
    penalty = np.sum(diffs**2, axis=(0,) + tuple(a + 1 for a in axes)) / n
    losses = data_term + cfg.penalty_weight * penalty

    dout = np.empty_like(out)
    dout[:b] = 2 * resid / b
    scale = cfg.penalty_weight * 2 / (eps * n * b)
    dout[b : 2 * b] = -scale * diffs.sum(axis=0)
    dout[2 * b :] = (scale * diffs).reshape((n * b,) + clean.shape[1:])
    grads, _ = proximator_backward_batch(weights, caches, dout, need_input=False)
    return losses, grads


class Adam:
    def __init__(self, params: Sequence[np.ndarray], lr: float, beta1: float, beta2: float, eps: float):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _crop(img: np.ndarray, patch: int, rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape
    if patch <= 0 or patch >= min(h, w):
        return img
    y0 = int(rng.integers(0, h - patch + 1))
    x0 = int(rng.integers(0, w - patch + 1))
    return img[y0 : y0 + patch, x0 : x0 + patch]


def train(
    images: Sequence[np.ndarray],
    net_config: NetConfig = NetConfig(),
    train_config: TrainConfig = TrainConfig(),
    progress: Callable[[int, float], None] | None = None,
) -> DenoiserWeights:
    """Fit the proximator to map noisy images back to clean ones.

    Minimizes the batch mean of ``||r(x + noise) - x||^2 + sigma^2 * P(x)``
    where ``P`` is the Hutchinson Jacobian penalty at the clean image.
    Noise, probes and crops are keyed by ``(seed, epoch, image index)``, so
    the result does not depend on batching order or worker count.
    The per-epoch mean loss is stored in ``weights.meta["loss_trace"]``.
    """
    images = [np.asarray(im, dtype=np.complex128) for im in images]
    if not images:
        raise TrainingError("empty training set")
    cfg = train_config
    weights = init_weights(net_config, cfg.seed)
    params = weights.params()
    opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    n_img = len(images)
    trace: list[float] = []
    t0 = time.perf_counter()

    for epoch in range(cfg.epochs):
        order = substream(cfg.seed, "train-shuffle", epoch).permutation(n_img)
        epoch_losses = []
        for start in range(0, n_img, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            clean, noisy, probes = [], [], []
            for i in idx:
                rng = substream(cfg.seed, "train-sample", epoch, int(i))
                x = to_channels(_crop(images[i], cfg.patch, rng))
                clean.append(x)
                noisy.append(x + cfg.noise_sigma * rng.standard_normal(x.shape))
                probes.append(rng.standard_normal((cfg.probes,) + x.shape))
            probes_d = np.stack(probes, axis=1)
            losses, grads = _sample_loss_and_grads(weights, np.stack(clean), np.stack(noisy), probes_d, cfg)
            if not np.all(np.isfinite(losses)) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingError(f"training diverged (non-finite loss) at epoch {epoch}")
            opt.step(params, grads)
            epoch_losses.append(losses)
        mean_loss = float(np.mean(np.concatenate(epoch_losses)))
        trace.append(mean_loss)
        if progress is not None:
            progress(epoch, mean_loss)
        log.debug("epoch %d loss %.6g (%.1fs)", epoch, mean_loss, time.perf_counter() - t0)

    weights.meta = {
        "noise_sigma": cfg.noise_sigma,
        "epochs": cfg.epochs,
        "seed": cfg.seed,
        "probes": cfg.probes,
        "probe_eps": cfg.probe_eps,
        "learning_rate": cfg.learning_rate,
        "batch_size": cfg.batch_size,
        "patch": cfg.patch,
        "n_train": n_img,
        "loss_trace": trace,
    }
    return weights


# --------------------------------------------------------------------------
# WGT1 serialization

WGT_MAGIC = b"WGT1"
WGT_VERSION = 1


def _header_text(weights: DenoiserWeights) -> str:
    lines = [f"{k}={v!r}" for k, v in asdict(weights.config).items()]
    for k, v in weights.meta.items():
        if isinstance(v, (list, tuple)):
            v = ",".join(repr(float(e)) for e in v)
            lines.append(f"meta.{k}=[{v}]")
        else:
            lines.append(f"meta.{k}={v!r}")
    return "\n".join(lines) + "\n"


def _parse_scalar(text: str):
    if text.startswith("[") and text.endswith("]"):
        body = text[1:-1]
        return [float(e) for e in body.split(",")] if body else []
    if text.startswith(("'", '"')):
        return text[1:-1]
    try:
        return int(text)
    except ValueError:
        return float(text)


def weights_to_bytes(weights: DenoiserWeights) -> bytes:
    header = _header_text(weights).encode("utf-8")
    blob = weights.flat().astype("<f8").tobytes()
    return WGT_MAGIC + struct.pack("<II", WGT_VERSION, len(header)) + header + blob


def weights_from_bytes(raw: bytes) -> DenoiserWeights:
    if len(raw) < 12 or raw[:4] != WGT_MAGIC:
        raise FormatError("not a WGT1 weights file (bad magic)")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != WGT_VERSION:
        raise FormatError(f"unsupported WGT1 version {version}")
    if len(raw) < 12 + hlen:
        raise FormatError("truncated WGT1 header")
    try:
        text = raw[12 : 12 + hlen].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("WGT1 header is not UTF-8") from exc
    cfg_fields, meta = {}, {}
    for line in text.splitlines():
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"malformed WGT1 header line {line!r}")
        if key.startswith("meta."):
            meta[key[5:]] = _parse_scalar(value)
        else:
            cfg_fields[key] = _parse_scalar(value)
    try:
        config = NetConfig(**cfg_fields)
    except (TypeError, ParameterError) as exc:
        raise FormatError(f"invalid architecture in WGT1 header: {exc}") from exc
    template = zero_weights(config)
    expected = sum(p.size for p in template.params())
    payload = raw[12 + hlen :]
    if len(payload) != 8 * expected:
        raise FormatError(
            f"WGT1 payload holds {len(payload)} bytes, header declares {8 * expected}"
        )
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if not np.all(np.isfinite(flat)):
        raise FormatError("WGT1 payload contains non-finite parameters")
    pos = 0
    kernels, biases = [], []
    for k, b in zip(template.kernels, template.biases):
        kernels.append(flat[pos : pos + k.size].reshape(k.shape).copy())
        pos += k.size
        biases.append(flat[pos : pos + b.size].copy())
        pos += b.size
    return DenoiserWeights(config, kernels, biases, meta)


def save_weights(weights: DenoiserWeights, path: str | Path) -> None:
    Path(path).write_bytes(weights_to_bytes(weights))


def load_weights(path: str | Path) -> DenoiserWeights:
    return weights_from_bytes(Path(path).read_bytes())
