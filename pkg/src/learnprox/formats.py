"""Little-endian binary file formats and CSV tables.

======  ==================================================================
CIM1    magic, u32 H, u32 W, H*W complex (f64 re, f64 im), row-major
CMP1    magic, u32 C, u32 H, u32 W, C*H*W complex f64, coil-major
KSP1    magic, u32 C, u32 H, u32 W, C*H*W complex f64
MSK1    magic, u32 H, u32 W, H*W bytes in {0, 1}
======  ==================================================================

PGM previews are binary P5, 8-bit, min-max normalized magnitude.
"""
from __future__ import annotations

import csv
import math
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .metrics import MetricReport


class FormatError(ValueError):
    """A file does not match its declared binary format."""


def _pack_complex(magic: bytes, dims: Sequence[int], data: np.ndarray) -> bytes:
    data = np.ascontiguousarray(data, dtype=np.complex128)
    if data.shape != tuple(dims):
        raise ValueError(f"array shape {data.shape} does not match header {tuple(dims)}")
    return magic + struct.pack(f"<{len(dims)}I", *dims) + data.astype("<c16").tobytes()


def _unpack_complex(raw: bytes, magic: bytes, ndims: int) -> np.ndarray:
    head = 4 + 4 * ndims
    if len(raw) < head or raw[:4] != magic:
        raise FormatError(f"not a {magic.decode()} file (bad magic)")
    dims = struct.unpack(f"<{ndims}I", raw[4:head])
    expected = 16 * int(np.prod(dims))
    if len(raw) - head != expected:
        raise FormatError(
            f"{magic.decode()} payload holds {len(raw) - head} bytes, header declares {expected}"
        )
    return np.frombuffer(raw[head:], dtype="<c16").astype(np.complex128).reshape(dims)


def image_to_bytes(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError("CIM1 holds a single 2-D image")
    return _pack_complex(b"CIM1", img.shape, img)


def image_from_bytes(raw: bytes) -> np.ndarray:
    return _unpack_complex(raw, b"CIM1", 2)


def maps_to_bytes(maps: np.ndarray) -> bytes:
    maps = np.asarray(maps)
    if maps.ndim != 3:
        raise ValueError("CMP1 holds (C, H, W) maps")
    return _pack_complex(b"CMP1", maps.shape, maps)


def maps_from_bytes(raw: bytes) -> np.ndarray:
    return _unpack_complex(raw, b"CMP1", 3)


def kspace_to_bytes(y: np.ndarray) -> bytes:
    y = np.asarray(y)
    if y.ndim != 3:
        raise ValueError("KSP1 holds (C, H, W) k-space")
    return _pack_complex(b"KSP1", y.shape, y)


def kspace_from_bytes(raw: bytes) -> np.ndarray:
    return _unpack_complex(raw, b"KSP1", 3)


def mask_to_bytes(mask: np.ndarray) -> bytes:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError("MSK1 holds a 2-D mask")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask values must be 0 or 1")
    return b"MSK1" + struct.pack("<2I", *mask.shape) + mask.astype(np.uint8).tobytes()


def mask_from_bytes(raw: bytes) -> np.ndarray:
    if len(raw) < 12 or raw[:4] != b"MSK1":
        raise FormatError("not a MSK1 file (bad magic)")
    h, w = struct.unpack("<2I", raw[4:12])
    if len(raw) - 12 != h * w:
        raise FormatError(f"MSK1 payload holds {len(raw) - 12} bytes, header declares {h * w}")
    data = np.frombuffer(raw[12:], dtype=np.uint8).reshape(h, w)
    if data.max(initial=0) > 1:
        raise FormatError("MSK1 values must be 0 or 1")
    return data.astype(bool)


def _writer(to_bytes):
    def write(path: str | Path, value) -> None:
        Path(path).write_bytes(to_bytes(value))
    return write


def _reader(from_bytes):
    def read(path: str | Path):
        return from_bytes(Path(path).read_bytes())
    return read


write_image, read_image = _writer(image_to_bytes), _reader(image_from_bytes)
write_maps, read_maps = _writer(maps_to_bytes), _reader(maps_from_bytes)
write_kspace, read_kspace = _writer(kspace_to_bytes), _reader(kspace_from_bytes)
write_mask, read_mask = _writer(mask_to_bytes), _reader(mask_from_bytes)


def pgm_bytes(img: np.ndarray) -> bytes:
    mag = np.abs(np.asarray(img))
    lo, hi = mag.min(), mag.max()
    scaled = np.zeros_like(mag) if hi == lo else (mag - lo) / (hi - lo)
    pix = np.floor(scaled * 255 + 0.5).astype(np.uint8)
    h, w = pix.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()


def write_pgm(path: str | Path, img: np.ndarray) -> None:
    Path(path).write_bytes(pgm_bytes(img))


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise FormatError("not a binary P5 PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise FormatError("only 8-bit PGM is supported")
    body = parts[4]
    if len(body) != w * h:
        raise FormatError("PGM payload size mismatch")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


# --------------------------------------------------------------------------
# CSV

METRIC_FIELDS = ["case_id", "method", "mask_type", "fraction", "psnr_db", "ssim"]
TRACE_FIELDS = ["lambda", "iter", "psnr_db", "ssim"]


def _fmt(v: float) -> str:
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return repr(float(v))


def write_metrics_csv(path: str | Path, rows: Iterable[MetricReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([r.case_id, r.method, r.mask_type, _fmt(r.fraction), _fmt(r.psnr), _fmt(r.ssim)])


def read_metrics_csv(path: str | Path) -> list[MetricReport]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRIC_FIELDS:
            raise FormatError(f"unexpected metric CSV header {reader.fieldnames}")
        return [
            MetricReport(r["case_id"], r["method"], r["mask_type"], float(r["fraction"]),
                         float(r["psnr_db"]), float(r["ssim"]))
            for r in reader
        ]


def write_trace_csv(path: str | Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_FIELDS)
        for r in rows:
            w.writerow([_fmt(r.lam), r.iteration, _fmt(r.psnr), _fmt(r.ssim)])


def read_trace_csv(path: str | Path):
    from .recon import TraceRow

    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != TRACE_FIELDS:
            raise FormatError(f"unexpected trace CSV header {reader.fieldnames}")
        return [TraceRow(float(r["lambda"]), int(r["iter"]), float(r["psnr_db"]), float(r["ssim"])) for r in reader]
