"""Command-line entry point: ``learnprox <command> [flags]``.

Exit codes: 0 success, 2 usage/parameter error, 3 missing or malformed
input file, 4 numeric failure (divergence, non-finite training loss).
Every command writes its resolved configuration next to its output as
``<output>.cfg`` (or ``<dir>/<command>.cfg`` for directory outputs).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import formats
from .config import SCHEMA, ConfigError, convert, dump_config, load_config, resolve
from .denoiser import NetConfig, TrainConfig, TrainingError, load_weights, save_weights, train
from .forward import CalibrationError, ForwardModel, estimate_coil_maps, simulate_acquisition
from .formats import FormatError
from .metrics import Case, evaluate_suite
from .numerics import DimensionError, ParameterError, is_power_of_two
from .phantom import build_dataset, generate_coil_maps
from .recon import DivergenceError, ReconConfig, lambda_sweep, reconstruct, safe_step_size
from .rng import substream
from .sampling import PRESET_SPECS, SamplingMask, cartesian1d_mask, mask_fraction, radial_mask, random2d_mask

log = logging.getLogger("learnprox")

EXIT_USAGE, EXIT_FORMAT, EXIT_NUMERIC = 2, 3, 4


class UsageError(ValueError):
    pass


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if not cfg.get(k)]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _sidecar(path: str | Path, cfg: dict, command: str) -> None:
    Path(str(path) + ".cfg").write_text(f"# learnprox {command}\n" + dump_config(cfg))


def _check_size(size: int) -> None:
    if not is_power_of_two(size) or size < 16:
        raise UsageError(f"--size must be a power of two and >= 16, got {size}")


def _load_mask(path: str) -> SamplingMask:
    data = formats.read_mask(path)
    return SamplingMask(data, Path(path).stem)


def _model(maps_path: str, mask_path: str) -> ForwardModel:
    maps = formats.read_maps(maps_path)
    mask = _load_mask(mask_path)
    if maps.shape[1:] != mask.shape:
        raise DimensionError(f"maps {maps.shape} and mask {mask.shape} disagree")
    return ForwardModel(mask, maps)


def _recon_config(cfg: dict, model: ForwardModel | None = None, **over) -> ReconConfig:
    step = cfg.get("step", 1.0)
    if cfg.get("auto_step") and model is not None:
        step = safe_step_size(model)
    kw = dict(
        lam=cfg.get("lambda", 0.1),
        step_size=step,
        iterations=cfg.get("iters", 100),
        method=cfg.get("method", "pgd"),
        l1_lambda=cfg.get("l1_lambda", 0.005),
        wavelet_levels=cfg.get("wavelet_levels", 4),
    )
    kw.update(over)
    return ReconConfig(**kw)


# --------------------------------------------------------------------------
# commands


def cmd_phantom(cfg: dict) -> None:
    _require(cfg, "out")
    _check_size(cfg["size"])
    out = Path(cfg["out"])
    train_set, test_set = build_dataset(cfg["seed"], cfg["n_train"], cfg["n_test"], cfg["size"])
    maps = generate_coil_maps(cfg["seed"], cfg["coils"], cfg["size"])
    for ds in (train_set, test_set):
        d = out / ds.split
        d.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(ds.images):
            formats.write_image(d / f"{ds.split}_{i:04d}.cim", img)
    formats.write_maps(out / "coils.cmp", maps)
    _sidecar(out / "phantom", cfg, "phantom")
    log.info("wrote %d train + %d test images to %s", len(train_set), len(test_set), out)


def cmd_mask(cfg: dict) -> None:
    _require(cfg, "out")
    _check_size(cfg["size"])
    n, kind = cfg["size"], cfg["mask_type"]
    if kind == "cartesian1d":
        mask = cartesian1d_mask(n, n, cfg["fraction"], cfg["acs"], cfg["mask_seed"])
    elif kind == "random2d":
        mask = random2d_mask(n, n, cfg["fraction"], cfg["acs"], cfg["mask_seed"])
    else:
        mask = radial_mask(n, n, cfg["spokes"])
    formats.write_mask(cfg["out"], mask.data)
    if cfg.get("preview"):
        formats.write_pgm(cfg["preview"], mask.data.astype(float))
    _sidecar(cfg["out"], cfg, "mask")
    log.info("%s mask, sampled fraction %.4f -> %s", kind, mask_fraction(mask), cfg["out"])


def cmd_acquire(cfg: dict) -> None:
    _require(cfg, "image", "maps", "mask", "out")
    image = formats.read_image(cfg["image"])
    model = _model(cfg["maps"], cfg["mask"])
    if image.shape != model.shape:
        raise DimensionError(f"image {image.shape} and mask {model.shape} disagree")
    y = simulate_acquisition(image, model.maps, model.mask, cfg["kspace_sigma"], cfg["noise_seed"])
    formats.write_kspace(cfg["out"], y)
    if cfg.get("estimate_maps"):
        formats.write_maps(cfg["estimate_maps"], estimate_coil_maps(y, cfg["acs"], model.mask))
    _sidecar(cfg["out"], cfg, "acquire")


def _image_files(data: str, split: str) -> list[Path]:
    files = sorted((Path(data) / split).glob(f"{split}_*.cim"))
    if not files:
        raise FileNotFoundError(f"no {split} images under {data}")
    return files


def cmd_train(cfg: dict) -> None:
    _require(cfg, "data", "out")
    images = [formats.read_image(p) for p in _image_files(cfg["data"], "train")]
    net_cfg = NetConfig(cfg["filters"], cfg["depth"], cfg["unroll"], cfg["inner_alpha"])
    train_cfg = TrainConfig(
        noise_sigma=cfg["noise_sigma"], probes=cfg["probes"], probe_eps=cfg["probe_eps"],
        learning_rate=cfg["lr"], batch_size=cfg["batch"], epochs=cfg["epochs"],
        seed=cfg["train_seed"], patch=cfg["patch"],
    )

    def progress(epoch: int, loss: float) -> None:
        log.info("epoch %d/%d loss %.6f", epoch + 1, train_cfg.epochs, loss)

    weights = train(images, net_cfg, train_cfg, progress)
    save_weights(weights, cfg["out"])
    with open(str(cfg["out"]) + ".loss.csv", "w") as fh:
        fh.write("epoch,loss\n")
        for i, v in enumerate(weights.meta["loss_trace"]):
            fh.write(f"{i},{v!r}\n")
    _sidecar(cfg["out"], cfg, "train")


def cmd_recon(cfg: dict) -> None:
    _require(cfg, "kspace", "maps", "mask", "out")
    model = _model(cfg["maps"], cfg["mask"])
    y = formats.read_kspace(cfg["kspace"])
    if y.shape != model.maps.shape:
        raise DimensionError(f"k-space {y.shape} does not match maps {model.maps.shape}")
    rcfg = _recon_config(cfg, model, trace=bool(cfg.get("trace")))
    weights = None
    if rcfg.method == "pgd" and rcfg.lam > 0:
        _require(cfg, "weights")
        weights = load_weights(cfg["weights"])
    reference = formats.read_image(cfg["reference"]) if cfg.get("reference") else None
    if cfg.get("trace") and reference is None:
        raise UsageError("--trace needs --reference")
    x, trace = reconstruct(model, y, rcfg, weights, reference)
    formats.write_image(cfg["out"], x)
    if cfg.get("preview"):
        formats.write_pgm(cfg["preview"], x)
    if trace is not None:
        formats.write_trace_csv(cfg["trace"], trace)
    _sidecar(cfg["out"], cfg, "recon")


def eval_rows(cfg: dict, mask_path: str):
    """Simulate every test case, run each method batched, return metric rows."""
    images = [formats.read_image(p) for p in _image_files(cfg["data"], "test")]
    if cfg.get("n_eval"):
        images = images[: cfg["n_eval"]]
    model = _model(cfg["maps"], mask_path)
    mask_type = Path(mask_path).stem
    frac = mask_fraction(model.mask)
    ys = np.stack([
        simulate_acquisition(img, model.maps, model.mask, cfg["kspace_sigma"],
                             int(substream(cfg["noise_seed"], "eval-case", i).integers(0, 2**63)))
        for i, img in enumerate(images)
    ])
    refs = np.stack(images)
    methods = cfg["methods"]
    weights = None
    if "pgd" in methods and cfg["lambda"] > 0:
        _require(cfg, "weights")
        weights = load_weights(cfg["weights"])

    results: dict[str, np.ndarray] = {}
    if cfg["maps_mode"] == "estimated":
        est = [ForwardModel(model.mask, estimate_coil_maps(y, cfg["acs"], model.mask)) for y in ys]
        for name in methods:
            rcfg = _recon_config(cfg, model, method=name)
            results[name] = np.stack([reconstruct(m, y, rcfg, weights)[0] for m, y in zip(est, ys)])
    else:
        for name in methods:
            rcfg = _recon_config(cfg, model, method=name)
            results[name] = reconstruct(model, ys, rcfg, weights)[0]

    cases = [Case(f"case_{i:04d}", refs[i], mask_type, frac, i) for i in range(len(images))]
    fns = {name: (lambda c, name=name: results[name][c.payload]) for name in methods}
    return evaluate_suite(cases, fns)


def cmd_eval(cfg: dict) -> None:
    _require(cfg, "data", "maps", "mask", "out")
    unknown = [m for m in cfg["methods"] if m not in ("pgd", "sense", "fista", "zerofill")]
    if unknown:
        raise UsageError(f"unknown method(s) {unknown}")
    rows = eval_rows(cfg, cfg["mask"])
    formats.write_metrics_csv(cfg["out"], rows)
    _sidecar(cfg["out"], cfg, "eval")


def cmd_sweep(cfg: dict) -> None:
    _require(cfg, "kspace", "maps", "mask", "reference", "out")
    model = _model(cfg["maps"], cfg["mask"])
    y = formats.read_kspace(cfg["kspace"])
    reference = formats.read_image(cfg["reference"])
    weights = load_weights(cfg["weights"]) if any(l > 0 for l in cfg["lambdas"]) else None
    if weights is None and any(l > 0 for l in cfg["lambdas"]):
        raise UsageError("--weights is required for lambda > 0")
    rows = lambda_sweep(model, y, weights, cfg["lambdas"], cfg["iters"], reference, cfg["step"])
    formats.write_trace_csv(cfg["out"], rows)
    _sidecar(cfg["out"], cfg, "sweep")


def cmd_pipeline(cfg: dict) -> None:
    """phantom -> mask -> acquire -> train -> recon -> eval -> sweep under one directory."""
    _require(cfg, "out")
    out = Path(cfg["out"])
    for sub in ("masks", "acq", "recon", "eval"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    data = out / "data"

    def stage(name: str, **over) -> dict:
        keys = COMMANDS[name][0]
        merged = {k: cfg[k] for k in keys if k in cfg}
        merged.update(over)
        return {k: merged.get(k, SCHEMA[k].default) for k in keys}

    cmd_phantom(stage("phantom", out=str(data)))
    case = cfg["sweep_case"]
    test_image = data / "test" / f"test_{case:04d}.cim"
    masks = {}
    for preset in cfg["masks"]:
        if preset not in PRESET_SPECS:
            raise UsageError(f"unknown mask preset {preset!r}; choose from {sorted(PRESET_SPECS)}")
        kind, value = PRESET_SPECS[preset]
        over = {"mask_type": kind, "out": str(out / "masks" / f"{preset}.msk"),
                "preview": str(out / "masks" / f"{preset}.pgm")}
        over["spokes" if kind == "radial" else "fraction"] = value
        cmd_mask(stage("mask", **over))
        masks[preset] = over["out"]
        cmd_acquire(stage("acquire", image=str(test_image), maps=str(data / "coils.cmp"), mask=over["out"],
                          out=str(out / "acq" / f"{preset}.ksp"),
                          estimate_maps=str(out / "acq" / f"{preset}_est.cmp")))

    weights = str(out / "weights.wgt")
    cmd_train(stage("train", data=str(data), out=weights))

    for preset, mask in masks.items():
        recon_maps = str(data / "coils.cmp") if cfg["maps_mode"] == "true" else str(out / "acq" / f"{preset}_est.cmp")
        for method in cfg["methods"]:
            target = out / "recon" / f"{preset}_{method}.cim"
            cmd_recon(stage("recon", kspace=str(out / "acq" / f"{preset}.ksp"), maps=recon_maps, mask=mask,
                            weights=weights, method=method, out=str(target),
                            preview=str(target.with_suffix(".pgm"))))
        cmd_eval(stage("eval", data=str(data), maps=str(data / "coils.cmp"), mask=mask, weights=weights,
                       out=str(out / "eval" / f"{preset}.csv")))

    sweep_preset = "radial40" if "radial40" in masks else next(iter(masks))
    sweep_maps = str(data / "coils.cmp") if cfg["maps_mode"] == "true" else str(out / "acq" / f"{sweep_preset}_est.cmp")
    cmd_sweep(stage("sweep", kspace=str(out / "acq" / f"{sweep_preset}.ksp"), maps=sweep_maps,
                    mask=masks[sweep_preset], weights=weights, reference=str(test_image),
                    out=str(out / "sweep.csv")))
    _sidecar(out / "pipeline", cfg, "pipeline")


_TRAIN_KEYS = ["filters", "depth", "unroll", "inner_alpha", "noise_sigma", "probes", "probe_eps",
               "lr", "batch", "epochs", "patch", "train_seed"]
_RECON_KEYS = ["lambda", "step", "auto_step", "iters", "l1_lambda", "wavelet_levels"]

COMMANDS: dict[str, tuple[list[str], Callable[[dict], None], str]] = {
    "phantom": (["seed", "size", "coils", "n_train", "n_test", "out"], cmd_phantom,
                "synthesize train/test phantoms and coil maps"),
    "mask": (["mask_type", "size", "fraction", "acs", "spokes", "mask_seed", "preview", "out"], cmd_mask,
             "generate a k-space sampling mask"),
    "acquire": (["image", "maps", "mask", "kspace_sigma", "noise_seed", "acs", "estimate_maps", "out"],
                cmd_acquire, "simulate undersampled multi-coil k-space"),
    "train": (["data"] + _TRAIN_KEYS + ["out"], cmd_train, "train the learned proximal operator"),
    "recon": (["kspace", "maps", "mask", "weights", "method"] + _RECON_KEYS
              + ["reference", "trace", "preview", "out"], cmd_recon, "reconstruct one k-space file"),
    "eval": (["data", "maps", "mask", "weights", "methods", "kspace_sigma", "noise_seed", "maps_mode", "acs",
              "n_eval"] + _RECON_KEYS + ["out"], cmd_eval, "PSNR/SSIM table over the test set"),
    "sweep": (["kspace", "maps", "mask", "weights", "reference", "lambdas", "iters", "step", "out"], cmd_sweep,
              "per-iteration PSNR/SSIM for a grid of lambdas"),
}
COMMANDS["pipeline"] = (
    list(dict.fromkeys(k for keys, _, _ in COMMANDS.values() for k in keys if k not in
                       ("data", "image", "reference", "maps", "mask", "kspace", "weights", "estimate_maps",
                        "trace", "preview", "method", "mask_type", "fraction", "spokes")))
    + ["masks", "sweep_case"],
    cmd_pipeline,
    "run every stage end to end",
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="learnprox", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (keys, _, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="key=value config file; flags override it")
        for key in keys:
            spec = SCHEMA[key]
            default = spec.default
            shown = ",".join(map(str, default)) if isinstance(default, list) else default
            p.add_argument("--" + key.replace("_", "-"), dest=key, type=str, default=None,
                           help=f"{spec.help} (default: {shown})"
                           + (f"; one of {', '.join(spec.choices)}" if spec.choices else ""))
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    keys, fn, _ = COMMANDS[args.command]
    try:
        file_values = load_config(args.config) if args.config else {}
        flags = {k: convert(k, getattr(args, k)) for k in keys if getattr(args, k) is not None}
        cfg = resolve(keys, file_values, flags)
        if args.command == "pipeline":
            cfg.update({k: v for k, v in file_values.items() if k not in cfg})
        fn(cfg)
    except (ConfigError, UsageError, ParameterError) as exc:
        print(f"learnprox {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, DimensionError, CalibrationError, OSError) as exc:
        print(f"learnprox {args.command}: input error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (DivergenceError, TrainingError, FloatingPointError) as exc:
        print(f"learnprox {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
