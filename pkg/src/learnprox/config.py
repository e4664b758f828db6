"""``key=value`` experiment configuration shared by all CLI commands.

One file may hold keys for every stage; each command reads the keys it uses.
Precedence is defaults < config file < command-line flags. Unknown keys are
rejected.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable


class ConfigError(ValueError):
    pass


def _int_list(text: str) -> list[int]:
    return [int(t) for t in str(text).split(",") if t.strip()]


def _float_list(text: str) -> list[float]:
    return [float(t) for t in str(text).split(",") if t.strip()]


def _str_list(text: str) -> list[str]:
    return [t.strip() for t in str(text).split(",") if t.strip()]


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    help: str
    choices: tuple | None = None


def _fmt_value(v: Any) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt_value(e) for e in v)
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


SCHEMA: dict[str, Key] = {
    # data
    "seed": Key(int, 0, "master seed for phantoms and coil maps"),
    "size": Key(int, 64, "image side length (power of two, >= 16)"),
    "coils": Key(int, 4, "number of receive coils"),
    "n_train": Key(int, 200, "training phantoms"),
    "n_test": Key(int, 50, "test phantoms"),
    # masks
    "mask_type": Key(str, "cartesian1d", "mask family", ("cartesian1d", "random2d", "radial")),
    "fraction": Key(float, 0.3, "sampled fraction for random masks"),
    "acs": Key(int, 12, "calibration lines / block size"),
    "spokes": Key(int, 40, "radial spokes"),
    "mask_seed": Key(int, 0, "seed for random masks"),
    "masks": Key(_str_list, ["cartesian30", "random20", "radial40"], "mask presets used by the pipeline"),
    # acquisition
    "kspace_sigma": Key(float, 0.0, "complex k-space noise std per component"),
    "noise_seed": Key(int, 0, "seed for k-space noise"),
    "maps_mode": Key(str, "true", "coil maps used for reconstruction", ("true", "estimated")),
    # network / training
    "filters": Key(int, 16, "conv filters per hidden layer"),
    "depth": Key(int, 4, "conv layers in Net_phi"),
    "unroll": Key(int, 3, "unrolled proximator steps K"),
    "inner_alpha": Key(float, 0.5, "inner relaxation weight in (0, 1)"),
    "noise_sigma": Key(float, 0.03, "training noise level"),
    "probes": Key(int, 1, "Jacobian penalty probes per sample"),
    "probe_eps": Key(float, 1e-3, "finite-difference step of the penalty"),
    "lr": Key(float, 1e-3, "Adam learning rate"),
    "batch": Key(int, 8, "batch size"),
    "epochs": Key(int, 60, "training epochs"),
    "patch": Key(int, 32, "training crop size (0 = full images)"),
    "train_seed": Key(int, 0, "seed for init, noise, probes and crops"),
    # reconstruction
    "method": Key(str, "pgd", "reconstruction method", ("pgd", "sense", "fista", "zerofill")),
    "lambda": Key(float, 0.1, "learned-prox mixing weight in [0, 1]"),
    "step": Key(float, 1.0, "data-consistency step size in (0, 2)"),
    "auto_step": Key(int, 0, "1 = use 1/||A^H A|| from power iteration"),
    "iters": Key(int, 100, "iterations"),
    "l1_lambda": Key(float, 0.005, "FISTA l1-wavelet weight"),
    "wavelet_levels": Key(int, 4, "Haar levels for FISTA"),
    # evaluation
    "methods": Key(_str_list, ["pgd", "sense", "fista", "zerofill"], "methods compared by eval"),
    "n_eval": Key(int, 0, "test cases used by eval (0 = all)"),
    "lambdas": Key(_float_list, [0.0, 0.05, 0.1, 0.2, 0.5], "lambda grid for sweep"),
    "sweep_case": Key(int, 0, "test case index for sweep"),
    # paths
    "data": Key(str, None, "dataset directory (output of phantom)"),
    "image": Key(str, None, "CIM1 image"),
    "reference": Key(str, None, "CIM1 reference image"),
    "maps": Key(str, None, "CMP1 coil maps"),
    "mask": Key(str, None, "MSK1 mask"),
    "kspace": Key(str, None, "KSP1 k-space"),
    "weights": Key(str, None, "WGT1 weights"),
    "estimate_maps": Key(str, None, "write maps estimated from the ACS here (acquire)"),
    "trace": Key(str, None, "write a per-iteration PSNR/SSIM CSV here (recon)"),
    "preview": Key(str, None, "write a PGM magnitude preview here"),
    "out": Key(str, None, "output file or directory"),
}

LIST_KEYS = {"masks", "methods", "lambdas"}


def parse_config_text(text: str) -> dict[str, Any]:
    values: dict[str, Any] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        if key not in SCHEMA:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        values[key] = convert(key, raw)
    return values


def convert(key: str, raw: str) -> Any:
    spec = SCHEMA[key]
    try:
        value = spec.parse(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}: {exc}") from exc
    if spec.choices and value not in spec.choices:
        raise ConfigError(f"{key}: {value!r} not in {spec.choices}")
    return value


def load_config(path: str | Path) -> dict[str, Any]:
    try:
        return parse_config_text(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def resolve(keys: list[str], file_values: dict[str, Any], flag_values: dict[str, Any]) -> dict[str, Any]:
    out = {}
    for k in keys:
        if flag_values.get(k) is not None:
            out[k] = flag_values[k]
        elif k in file_values:
            out[k] = file_values[k]
        else:
            out[k] = SCHEMA[k].default
    return out


def dump_config(values: dict[str, Any]) -> str:
    return "".join(f"{k}={_fmt_value(v)}\n" for k, v in values.items())
