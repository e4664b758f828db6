"""End-to-end acceptance checks, one test per criterion.

The desk-scale pipeline (200 train / 50 test phantoms at 64x64, four coils,
default network and training settings) runs twice into the same directory.
The second run checks byte-identical regeneration. Criteria 4, 5, 6, 9 and 10
read the artifacts of those runs. Every test prints one PASS/FAIL line.
"""
import time
from pathlib import Path

import numpy as np
import pytest

import learnprox.cli as cli
from learnprox import formats
from learnprox.denoiser import (
    NetConfig,
    load_weights,
    net_backward,
    net_forward,
    proximator_backward,
    proximator_forward,
    jacobian_penalty_estimate,
    weights_from_bytes,
    weights_to_bytes,
    zero_weights,
)
from learnprox.forward import ForwardModel
from learnprox.metrics import AGGREGATE_MEAN, psnr
from learnprox.phantom import add_gaussian_noise, generate_coil_maps, generate_phantom
from learnprox.recon import ReconConfig, recon_fista_l1wavelet, recon_pgd
from learnprox.sampling import PRESETS, preset_mask

from conftest import ACCEPTANCE

PIPELINE_CONFIG = """\
# desk-scale experiment
seed=0
size=64
coils=4
n_train=200
n_test=50
acs=12
noise_sigma=0.03
lambda=0.1
iters=100
methods=pgd,sense,fista,zerofill
masks=cartesian30,random20,radial40
lambdas=0,0.05,0.1,0.2,0.5
"""


def record(number, ok, detail):
    ACCEPTANCE[number] = (bool(ok), detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def snapshot(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    config = root / "experiment.cfg"
    config.write_text(PIPELINE_CONFIG)
    out = root / "run"

    # time the stages by wrapping the command functions the pipeline calls
    timings = {}
    originals = {name: getattr(cli, name) for name in ("cmd_train", "cmd_eval")}

    def timed(name):
        def wrapper(cfg):
            t0 = time.perf_counter()
            originals[name](cfg)
            timings.setdefault(name, []).append(time.perf_counter() - t0)
        return wrapper

    runs = []
    try:
        for name in originals:
            setattr(cli, name, timed(name))
        for _ in range(2):
            timings.clear()
            t0 = time.perf_counter()
            code = cli.main(["pipeline", "--config", str(config), "--out", str(out)])
            total = time.perf_counter() - t0
            runs.append({"code": code, "total": total, "timings": dict(timings), "files": snapshot(out)})
    finally:
        for name, fn in originals.items():
            setattr(cli, name, fn)
    return {"out": out, "runs": runs}


# --------------------------------------------------------------------------


def dense_A(mask, maps):
    c, h, w = maps.shape
    fy = np.exp(-2j * np.pi * np.outer(np.arange(h) - h // 2, np.arange(h) - h // 2) / h) / np.sqrt(h)
    fx = np.exp(-2j * np.pi * np.outer(np.arange(w) - w // 2, np.arange(w) - w // 2) / w) / np.sqrt(w)
    f2 = np.kron(fy, fx)
    return np.vstack([np.diag(mask.ravel().astype(float)) @ f2 @ np.diag(maps[k].ravel()) for k in range(c)])


def test_criterion_1_operator_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(100)
    worst_adj = 0.0
    for preset in PRESETS:
        for coils in (1, 4):
            model = ForwardModel(preset_mask(preset, 64), generate_coil_maps(coils, coils, 64))
            for _ in range(3):
                x, y = crandn(rng, 64, 64), model.mask * crandn(rng, coils, 64, 64)
                ax = model.A(x)
                err = abs(np.vdot(y, ax) - np.vdot(model.AH(y), x)) / (np.linalg.norm(ax) * np.linalg.norm(y))
                worst_adj = max(worst_adj, err)
    worst_dense = 0.0
    for coils in (1, 4):
        mask = rng.random((8, 8)) < 0.5
        maps = crandn(rng, coils, 8, 8)
        model = ForwardModel(mask, maps)
        mat = dense_A(mask, maps)
        x, y = crandn(rng, 8, 8), crandn(rng, coils, 8, 8)
        worst_dense = max(worst_dense,
                          np.abs(model.A(x).ravel() - mat @ x.ravel()).max(),
                          np.abs(model.AH(y).ravel() - mat.conj().T @ y.ravel()).max())
    elapsed = time.perf_counter() - t0
    ok = worst_adj < 1e-10 and worst_dense < 1e-10 and elapsed < 10
    record(1, ok, f"adjoint rel err {worst_adj:.2e}, dense-oracle err {worst_dense:.2e}, {elapsed:.1f}s")
    assert ok


def _fd_relative_errors(fn, back, weights, v, up, rng, h=1e-6, probes=20):
    """Per layer: elementwise and random-direction central differences."""
    def scalar():
        out = fn(weights, v)
        return float(np.sum(up.real * out.real + up.imag * out.imag))

    grads, _ = back(weights, v, up)
    worst = 0.0
    for p, g in zip(weights.params(), grads):
        for j in range(p.size):
            orig = p.flat[j]
            p.flat[j] = orig + h
            fp = scalar()
            p.flat[j] = orig - h
            fm = scalar()
            p.flat[j] = orig
            fd = (fp - fm) / (2 * h)
            worst = max(worst, abs(g.flat[j] - fd) / max(abs(fd), abs(g.flat[j]), 1e-3))
        for _ in range(probes):
            d = rng.standard_normal(p.shape)
            orig = p.copy()
            p += h * d
            fp = scalar()
            p[...] = orig - h * d
            fm = scalar()
            p[...] = orig
            fd = (fp - fm) / (2 * h)
            analytic = float(np.sum(g * d))
            worst = max(worst, abs(analytic - fd) / max(abs(fd), abs(analytic), 1e-3))
    return worst


def test_criterion_2_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(200)
    worst = 0.0
    for config, fn, back in [
        (NetConfig(filters=2, depth=2, unroll_steps=1), net_forward, net_backward),
        (NetConfig(filters=2, depth=2, unroll_steps=3), proximator_forward, proximator_backward),
    ]:
        w = zero_weights(config)
        for p in w.params():
            p[...] = 0.5 * rng.standard_normal(p.shape)
        v, up = crandn(rng, 8, 8), crandn(rng, 8, 8)
        worst = max(worst, _fd_relative_errors(fn, back, w, v, up, rng))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-6 and elapsed < 30
    record(2, ok, f"worst relative gradient error {worst:.2e} (net and 3-step proximator), {elapsed:.1f}s")
    assert ok


def test_criterion_3_penalty_estimator():
    rng = np.random.default_rng(300)
    w = zero_weights(NetConfig(filters=2, depth=2, unroll_steps=3))
    for p in w.params():
        p[...] = 0.5 * rng.standard_normal(p.shape)
    x = crandn(rng, 8, 8)
    # exact squared Frobenius norm: one central-difference Jacobian column per real input component
    h = 1e-6
    exact = 0.0
    for j in range(64):
        for unit in (1.0, 1j):
            e = np.zeros((8, 8), complex)
            e.flat[j] = h * unit
            col = (proximator_forward(w, x + e) - proximator_forward(w, x - e)) / (2 * h)
            exact += float(np.sum(np.abs(col) ** 2))
    est = jacobian_penalty_estimate(w, x, eps=1e-3, probes=256, seed=1)
    ident = jacobian_penalty_estimate(zero_weights(NetConfig(filters=2, depth=2)), x, eps=1e-3, probes=256, seed=2)
    rel_net = abs(est - exact) / exact
    rel_id = abs(ident - 2 * 64) / (2 * 64)
    ok = rel_net < 0.15 and rel_id < 0.15
    record(3, ok, f"tiny net: estimate {est:.2f} vs exact {exact:.2f} ({rel_net:.1%}); "
                  f"identity: {ident:.1f} vs 128 ({rel_id:.1%})")
    assert ok


def test_criterion_4_training_efficacy(pipeline):
    out = pipeline["out"]
    first, second = pipeline["runs"]
    weights = load_weights(out / "weights.wgt")
    test_files = sorted((out / "data" / "test").glob("test_*.cim"))
    clean = np.stack([formats.read_image(p) for p in test_files])
    noisy = np.stack([add_gaussian_noise(x, 0.03, 10_000 + i) for i, x in enumerate(clean)])
    denoised = proximator_forward(weights, noisy)
    gains = [psnr(d, c) - psnr(n, c) for d, n, c in zip(denoised, noisy, clean)]
    gain = float(np.mean(gains))
    identical = first["files"]["weights.wgt"] == second["files"]["weights.wgt"]
    train_time = max(first["timings"]["cmd_train"][0], second["timings"]["cmd_train"][0])
    ok = gain >= 3.0 and identical and train_time < 20 * 60 and len(clean) == 50
    record(4, ok, f"mean denoising gain {gain:.2f} dB on {len(clean)} test images, "
                  f"weights bit-identical on rerun: {identical}, training {train_time / 60:.1f} min")
    assert ok


def _means(csv_path):
    rows = formats.read_metrics_csv(csv_path)
    return {r.method: r for r in rows if r.case_id == AGGREGATE_MEAN}


def test_criterion_5_reconstruction_efficacy(pipeline):
    out = pipeline["out"]
    parts, ok = [], True
    for preset in PRESETS:
        m = _means(out / "eval" / f"{preset}.csv")
        gain = m["pgd"].psnr - m["zerofill"].psnr
        gap = m["pgd"].psnr - m["fista"].psnr
        ok &= gain >= 2.0 and gap >= -0.5
        parts.append(f"{preset}: pgd {m['pgd'].psnr:.2f} / zf {m['zerofill'].psnr:.2f} (gain {gain:+.2f}) / "
                     f"fista {m['fista'].psnr:.2f} (gap {gap:+.2f})")
    eval_time = max(sum(r["timings"]["cmd_eval"]) for r in pipeline["runs"])
    ok &= eval_time < 10 * 60
    record(5, ok, "; ".join(parts) + f"; eval {eval_time / 60:.1f} min")
    assert ok


def test_criterion_6_lambda_behaviour(pipeline):
    rows = formats.read_trace_csv(pipeline["out"] / "sweep.csv")
    last = max(r.iteration for r in rows)
    final = {r.lam: r for r in rows if r.iteration == last}
    best_lam = max((0.05, 0.1, 0.2), key=lambda lam: final[lam].psnr)
    best = final[best_lam]
    beats_sense = best.psnr > final[0.0].psnr
    ssim_drop = best.ssim - final[0.5].ssim
    ok = beats_sense and ssim_drop >= 0.01
    record(6, ok, f"best lambda {best_lam}: {best.psnr:.2f} dB vs lambda 0: {final[0.0].psnr:.2f} dB; "
                  f"SSIM drop at 0.5: {ssim_drop:+.4f}")
    assert ok


def test_criterion_7_limiting_cases():
    x = generate_phantom(7, 64)
    model = ForwardModel(preset_mask("radial40", 64), generate_coil_maps(7, 4, 64))
    y = model.A(x)
    ref = model.AH(y)
    for _ in range(20):
        ref = ref + model.AH(y - model.A(ref))
    pgd0, _ = recon_pgd(model, y, None, ReconConfig(lam=0.0, iterations=20))
    bitwise = pgd0.tobytes() == ref.tobytes()
    full = ForwardModel(np.ones((64, 64)), np.ones((1, 64, 64)))
    one, _ = recon_pgd(full, full.A(x), None, ReconConfig(lam=0.0, iterations=1))
    err_one = np.linalg.norm(one - x) / np.linalg.norm(x)
    fista = recon_fista_l1wavelet(full, full.A(x), 0.0, 100)
    err_fista = np.linalg.norm(fista - x) / np.linalg.norm(x)
    ok = bitwise and err_one < 1e-10 and err_fista < 1e-8
    record(7, ok, f"lambda=0 bitwise equal to gradient iteration: {bitwise}; "
                  f"one-step full-mask err {err_one:.1e}; FISTA full-mask err {err_fista:.1e}")
    assert ok


def test_criterion_8_fista_monotone():
    x = generate_phantom(8, 64)
    maps = generate_coil_maps(8, 4, 64)
    worst = -np.inf
    for preset in PRESETS:
        model = ForwardModel(preset_mask(preset, 64), maps)
        _, hist = recon_fista_l1wavelet(model, model.A(x), 0.005, 100, return_objective=True)
        worst = max(worst, float(np.max(np.diff(hist[4:]))))
    ok = worst <= 1e-9
    record(8, ok, f"largest objective increase after iteration 5: {worst:.2e}")
    assert ok


def test_criterion_9_serialization(pipeline):
    out = pipeline["out"]
    checks = []
    readers = {
        ".cim": (formats.read_image, formats.image_to_bytes, formats.image_from_bytes),
        ".cmp": (formats.read_maps, formats.maps_to_bytes, formats.maps_from_bytes),
        ".ksp": (formats.read_kspace, formats.kspace_to_bytes, formats.kspace_from_bytes),
        ".msk": (formats.read_mask, formats.mask_to_bytes, formats.mask_from_bytes),
    }
    rejected = 0
    for suffix, (read, enc, dec) in readers.items():
        path = next(out.rglob(f"*{suffix}"))
        raw = path.read_bytes()
        checks.append(enc(read(path)) == raw)
        bad = bytearray(raw)
        bad[1] ^= 0x20
        try:
            dec(bytes(bad))
        except formats.FormatError:
            rejected += 1
    raw = (out / "weights.wgt").read_bytes()
    checks.append(weights_to_bytes(weights_from_bytes(raw)) == raw)
    try:
        weights_from_bytes(b"wGT1" + raw[4:])
    except formats.FormatError:
        rejected += 1
    pgm = next(out.rglob("*.pgm"))
    checks.append(formats.pgm_bytes(formats.read_pgm(pgm)) == pgm.read_bytes())
    csv_path = out / "eval" / "radial40.csv"
    tmp = out.parent / "roundtrip.csv"
    formats.write_metrics_csv(tmp, formats.read_metrics_csv(csv_path))
    checks.append(tmp.read_bytes() == csv_path.read_bytes())
    formats.write_trace_csv(tmp, formats.read_trace_csv(out / "sweep.csv"))
    checks.append(tmp.read_bytes() == (out / "sweep.csv").read_bytes())
    ok = all(checks) and rejected == 5
    record(9, ok, f"{sum(checks)}/{len(checks)} formats round-trip bit-exactly; "
                  f"{rejected}/5 corrupted magics rejected")
    assert ok


def test_criterion_10_pipeline(pipeline):
    first, second = pipeline["runs"]
    codes = (first["code"], second["code"])
    same_keys = first["files"].keys() == second["files"].keys()
    differing = [k for k in first["files"] if first["files"][k] != second["files"].get(k)]
    longest = max(first["total"], second["total"])
    ok = codes == (0, 0) and same_keys and not differing and longest < 30 * 60
    record(10, ok, f"exit codes {codes}, {len(first['files'])} files, {len(differing)} differ on rerun, "
                   f"longest run {longest / 60:.1f} min")
    assert ok
