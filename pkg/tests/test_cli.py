import numpy as np
import pytest

from learnprox import formats
from learnprox.cli import COMMANDS, build_parser, main

TINY = """\
size=16
coils=2
n_train=4
n_test=3
acs=4
filters=2
depth=2
unroll=1
epochs=2
batch=2
patch=0
iters=5
"""


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    (root / "tiny.cfg").write_text(TINY)
    assert main(["pipeline", "--config", str(root / "tiny.cfg"), "--out", str(root / "out")]) == 0
    return root


def tree(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def test_phantom_counts_and_rerun(tmp_path):
    args = ["phantom", "--seed", "0", "--n-train", "5", "--n-test", "2", "--size", "16", "--coils", "3"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    files = tree(tmp_path / "a")
    assert sum(k.endswith(".cim") for k in files) == 7
    assert sum(k.endswith(".cmp") for k in files) == 1
    b = tree(tmp_path / "b")
    assert {k: v for k, v in files.items() if not k.endswith(".cfg")} == \
        {k: v for k, v in b.items() if not k.endswith(".cfg")}
    assert formats.read_maps(tmp_path / "a" / "coils.cmp").shape == (3, 16, 16)


def test_bad_size_is_usage_error(tmp_path, capsys):
    assert main(["phantom", "--size", "48", "--out", str(tmp_path)]) == 2
    assert "power of two" in capsys.readouterr().err


def test_unknown_config_key_is_usage_error(tmp_path):
    (tmp_path / "c.cfg").write_text("colour=blue\n")
    assert main(["phantom", "--config", str(tmp_path / "c.cfg"), "--out", str(tmp_path)]) == 2


def test_missing_required_option(capsys):
    assert main(["recon", "--method", "sense"]) == 2
    assert "--kspace" in capsys.readouterr().err


def test_argparse_rejects_unknown_command():
    with pytest.raises(SystemExit) as info:
        main(["explode"])
    assert info.value.code == 2


def test_every_flag_has_help():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for name, (keys, _, _) in COMMANDS.items():
        text = sub.choices[name].format_help()
        assert "--config" in text
        for key in keys:
            assert "--" + key.replace("_", "-") in text
        flags = [a for a in sub.choices[name]._actions if a.dest in keys]
        assert all(a.help and "default:" in a.help for a in flags)


def test_pipeline_layout_and_sidecars(run):
    out = run / "out"
    for preset in ("cartesian30", "random20", "radial40"):
        assert (out / "masks" / f"{preset}.msk").exists()
        assert (out / "masks" / f"{preset}.msk.cfg").exists()
        assert (out / "acq" / f"{preset}.ksp").exists()
        for method in ("pgd", "sense", "fista", "zerofill"):
            assert (out / "recon" / f"{preset}_{method}.cim.cfg").exists()
            assert (out / "recon" / f"{preset}_{method}.pgm").exists()
    assert (out / "weights.wgt.cfg").read_text().startswith("# learnprox train")
    assert (out / "weights.wgt.loss.csv").read_text().splitlines()[0] == "epoch,loss"
    assert (out / "pipeline.cfg").exists()


def test_eval_row_counts(run):
    rows = formats.read_metrics_csv(run / "out" / "eval" / "radial40.csv")
    assert len(rows) == 3 * 4 + 8
    assert [r.case_id for r in rows[-8:]] == ["AGGREGATE_MEAN", "AGGREGATE_STD"] * 4


def test_sweep_row_count(run):
    rows = formats.read_trace_csv(run / "out" / "sweep.csv")
    assert len(rows) == 5 * 5
    assert sorted({r.lam for r in rows}) == [0.0, 0.05, 0.1, 0.2, 0.5]


def test_pipeline_rerun_is_byte_identical(run):
    assert main(["pipeline", "--config", str(run / "tiny.cfg"), "--out", str(run / "again")]) == 0
    first, second = tree(run / "out"), tree(run / "again")
    assert first.keys() == second.keys()
    # sidecars record the output path, everything else must match byte for byte
    diff = [k for k in first if first[k] != second[k] and not k.endswith(".cfg")]
    assert diff == []


def test_recon_sense_equals_pgd_lambda_zero(run, tmp_path):
    out = run / "out"
    common = ["--kspace", str(out / "acq" / "random20.ksp"), "--maps", str(out / "data" / "coils.cmp"),
              "--mask", str(out / "masks" / "random20.msk"), "--iters", "7"]
    assert main(["recon", *common, "--method", "sense", "--out", str(tmp_path / "s.cim")]) == 0
    assert main(["recon", *common, "--method", "pgd", "--lambda", "0", "--out", str(tmp_path / "p.cim")]) == 0
    assert (tmp_path / "s.cim").read_bytes() == (tmp_path / "p.cim").read_bytes()
    cfg = (tmp_path / "p.cim.cfg").read_text()
    assert "lambda=0.0" in cfg and "method=pgd" in cfg


def test_recon_trace_and_flag_overrides_config(run, tmp_path):
    out = run / "out"
    (tmp_path / "r.cfg").write_text("iters=50\nmethod=pgd\n")
    code = main(["recon", "--config", str(tmp_path / "r.cfg"), "--iters", "3",
                 "--kspace", str(out / "acq" / "radial40.ksp"), "--maps", str(out / "data" / "coils.cmp"),
                 "--mask", str(out / "masks" / "radial40.msk"), "--weights", str(out / "weights.wgt"),
                 "--reference", str(out / "data" / "test" / "test_0000.cim"),
                 "--trace", str(tmp_path / "t.csv"), "--out", str(tmp_path / "x.cim")])
    assert code == 0
    assert len(formats.read_trace_csv(tmp_path / "t.csv")) == 3


def test_missing_and_corrupt_inputs_are_format_errors(run, tmp_path):
    out = run / "out"
    common = ["--maps", str(out / "data" / "coils.cmp"), "--mask", str(out / "masks" / "radial40.msk"),
              "--method", "sense", "--out", str(tmp_path / "x.cim")]
    assert main(["recon", "--kspace", str(tmp_path / "nope.ksp"), *common]) == 3
    bad = bytearray((out / "acq" / "radial40.ksp").read_bytes())
    bad[:4] = b"XXXX"
    (tmp_path / "bad.ksp").write_bytes(bad)
    assert main(["recon", "--kspace", str(tmp_path / "bad.ksp"), *common]) == 3


def test_shape_mismatch_is_format_error(run, tmp_path):
    assert main(["mask", "--size", "32", "--mask-type", "radial", "--out", str(tmp_path / "m.msk")]) == 0
    out = run / "out"
    code = main(["recon", "--kspace", str(out / "acq" / "radial40.ksp"), "--maps", str(out / "data" / "coils.cmp"),
                 "--mask", str(tmp_path / "m.msk"), "--method", "sense", "--out", str(tmp_path / "x.cim")])
    assert code == 3


def test_training_divergence_is_numeric_failure(tmp_path):
    (tmp_path / "train").mkdir()
    formats.write_image(tmp_path / "train" / "train_0000.cim", np.full((16, 16), np.nan + 0j))
    code = main(["train", "--data", str(tmp_path), "--epochs", "1", "--filters", "2", "--depth", "2",
                 "--out", str(tmp_path / "w.wgt")])
    assert code == 4


def test_mask_command_and_preview(tmp_path):
    code = main(["mask", "--size", "32", "--mask-type", "cartesian1d", "--fraction", "0.5", "--acs", "8",
                 "--mask-seed", "2", "--out", str(tmp_path / "c.msk"), "--preview", str(tmp_path / "c.pgm")])
    assert code == 0
    m = formats.read_mask(tmp_path / "c.msk")
    assert m.shape == (32, 32) and m.all(axis=1).sum() == 16
    assert formats.read_pgm(tmp_path / "c.pgm").max() == 255


def test_acquire_with_noise_and_estimated_maps(run, tmp_path):
    out = run / "out"
    code = main(["acquire", "--image", str(out / "data" / "test" / "test_0001.cim"),
                 "--maps", str(out / "data" / "coils.cmp"), "--mask", str(out / "masks" / "random20.msk"),
                 "--kspace-sigma", "0.01", "--noise-seed", "4", "--acs", "4",
                 "--estimate-maps", str(tmp_path / "est.cmp"), "--out", str(tmp_path / "y.ksp")])
    assert code == 0
    y = formats.read_kspace(tmp_path / "y.ksp")
    mask = formats.read_mask(out / "masks" / "random20.msk")
    assert np.all(y[:, ~mask] == 0)
    est = formats.read_maps(tmp_path / "est.cmp")
    np.testing.assert_allclose(np.sum(np.abs(est) ** 2, axis=0), 1.0, atol=1e-9)


def test_eval_estimated_maps_mode(run, tmp_path):
    out = run / "out"
    code = main(["eval", "--data", str(out / "data"), "--maps", str(out / "data" / "coils.cmp"),
                 "--mask", str(out / "masks" / "random20.msk"), "--methods", "sense,zerofill",
                 "--maps-mode", "estimated", "--acs", "4", "--iters", "3", "--n-eval", "2",
                 "--out", str(tmp_path / "e.csv")])
    assert code == 0
    assert len(formats.read_metrics_csv(tmp_path / "e.csv")) == 2 * 2 + 4
