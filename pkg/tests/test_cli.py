import csv
import json
import os

import numpy as np
import pytest

from qamw.cli import main
from qamw.formats import file_sha256, read_codebook, read_matrix, write_matrix
from qamw.synth import SynthConfig, excess_kurtosis, generate


def run(*args):
    return main([str(a) for a in args])


def manifest(path):
    with open(str(path) + ".manifest.json") as f:
        return json.load(f)


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def test_synth_gaussian_digest_stable(tmp_path):
    a, b = tmp_path / "a.qwmx", tmp_path / "b.qwmx"
    assert run("synth", "--kind", "gaussian", "--rows", 128, "--cols", 2048, "--seed", 7, "--out", a) == 0
    assert run("synth", "--kind", "gaussian", "--rows", 128, "--cols", 2048, "--seed", 7, "--out", b) == 0
    assert file_sha256(a) == file_sha256(b)
    assert read_matrix(a).shape == (128, 2048)
    m = manifest(a)
    assert m["outputs"]["a.qwmx"] == file_sha256(a)
    assert m["config"]["params"]["seed"] == 7


def test_synth_kinds():
    t = generate(SynthConfig(kind="studentt", rows=128, cols=2048, seed=1, nu=4))
    g = generate(SynthConfig(kind="gaussian", rows=128, cols=2048, seed=1))
    assert excess_kurtosis(t) > 0 and excess_kurtosis(t) > excess_kurtosis(g)
    x = generate(SynthConfig(kind="lognormal-rms-activations", rows=256, cols=2048, seed=2))
    r = np.sqrt(np.mean(x**2, axis=0))
    assert np.percentile(r, 95) / np.percentile(r, 5) >= 4


def test_synth_bad_kind_is_usage_error(tmp_path):
    assert run("synth", "--kind", "uniform", "--out", tmp_path / "x") == 4
    assert run("synth", "--rows", 0, "--out", tmp_path / "x") == 4


# ---------------------------------------------------------------------------
# train / encode / decode
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("synth", "--rows", 64, "--cols", 512, "--seed", 3, "--out", d / "w.qwmx") == 0
    assert run("synth", "--kind", "lognormal-rms-activations", "--rows", 128, "--cols", 512,
               "--seed", 4, "--out", d / "x.qwmx") == 0
    assert run("train-codebook", "--joint", "--bits", 7, "--seed", 1, "--out", d / "cb7.qamc") == 0
    return d


def test_train_joint_b11_count(tmp_path):
    out = tmp_path / "cb11.qamc"
    assert run("train-codebook", "--joint", "--bits", 11, "--seed", 42, "--out", out) == 0
    cb = read_codebook(out)
    assert cb.centroids.shape == (2048, 2)
    assert manifest(out)["summary"]["bits"] == 11


def test_train_polar_and_determinism(tmp_path):
    a, b = tmp_path / "a.qamc", tmp_path / "b.qamc"
    for p in (a, b):
        assert run("train-codebook", "--polar", "--amp-bits", 5, "--phase-bits", 6, "--out", p) == 0
    assert a.read_bytes() == b.read_bytes()
    q = read_codebook(a)
    assert q.amp.n_levels == 32 and q.phase.n_bins == 64
    c, d = tmp_path / "c.qamc", tmp_path / "d.qamc"
    for p in (c, d):
        assert run("train-codebook", "--joint", "--bits", 6, "--seed", 5, "--out", p) == 0
    assert c.read_bytes() == d.read_bytes()


def test_train_usage_errors(tmp_path):
    assert run("train-codebook", "--joint", "--out", tmp_path / "x") == 4
    assert run("train-codebook", "--polar", "--amp-bits", 3, "--out", tmp_path / "x") == 4
    assert run("train-codebook", "--out", tmp_path / "x") == 4
    assert run("train-codebook", "--joint", "--polar", "--bits", 3, "--out", tmp_path / "x") == 4


def test_encode_decode_cycle(workdir, tmp_path):
    enc, dec = tmp_path / "w.qamw", tmp_path / "w_hat.qwmx"
    assert run("encode", "--matrix", workdir / "w.qwmx", "--codebook", workdir / "cb7.qamc", "--out", enc) == 0
    assert run("decode", "--encoded", enc, "--codebook", workdir / "cb7.qamc", "--reference",
               workdir / "w.qwmx", "--max-rel-error", 0.2, "--out", dec) == 0
    s = manifest(dec)["summary"]
    assert 0 < s["rel_frobenius"] < 0.2 and s["passed"]
    assert run("decode", "--encoded", enc, "--codebook", workdir / "cb7.qamc", "--reference",
               workdir / "w.qwmx", "--max-rel-error", 1e-4, "--out", tmp_path / "strict.qwmx") == 3
    m = manifest(enc)
    assert m["inputs"]["w.qwmx"] == file_sha256(workdir / "w.qwmx")
    assert m["summary"]["bpw"] == pytest.approx(3.5 + 16 / 512)


def test_alpha_zero_equals_no_scaling(workdir, tmp_path):
    a, b, c = tmp_path / "a.qamw", tmp_path / "b.qamw", tmp_path / "c.qamw"
    base = ["encode", "--matrix", workdir / "w.qwmx", "--codebook", workdir / "cb7.qamc"]
    assert run(*base, "--out", a) == 0
    assert run(*base, "--alpha", 0, "--activations", workdir / "x.qwmx", "--out", b) == 0
    assert run(*base, "--alpha", 0.3, "--activations", workdir / "x.qwmx", "--out", c) == 0
    assert manifest(a)["summary"]["payload_sha256"] == manifest(b)["summary"]["payload_sha256"]
    assert manifest(a)["summary"]["payload_sha256"] != manifest(c)["summary"]["payload_sha256"]
    assert run(*base, "--alpha", 0.3, "--out", tmp_path / "d.qamw") == 4


def test_zero_row_matrix_decodes_to_zeros(workdir, tmp_path):
    w = read_matrix(workdir / "w.qwmx")
    w[[0, 10]] = 0.0
    write_matrix(tmp_path / "z.qwmx", w)
    assert run("encode", "--matrix", tmp_path / "z.qwmx", "--codebook", workdir / "cb7.qamc",
               "--out", tmp_path / "z.qamw") == 0
    assert run("decode", "--encoded", tmp_path / "z.qamw", "--codebook", workdir / "cb7.qamc",
               "--out", tmp_path / "z_hat.qwmx") == 0
    assert np.all(read_matrix(tmp_path / "z_hat.qwmx")[[0, 10]] == 0.0)


def test_missing_input_and_bad_file(tmp_path, workdir):
    assert run("encode", "--matrix", tmp_path / "nope.qwmx", "--codebook", workdir / "cb7.qamc",
               "--out", tmp_path / "o") == 4
    (tmp_path / "junk.qwmx").write_bytes(b"garbage!" * 4)
    assert run("encode", "--matrix", tmp_path / "junk.qwmx", "--codebook", workdir / "cb7.qamc",
               "--out", tmp_path / "o") == 2


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

def test_verify_identity_suite_passes(tmp_path, capsys):
    out = tmp_path / "v.json"
    assert run("verify", "--json", out) == 0
    res = json.loads(out.read_bytes())
    assert res["passed"] and len(res["checks"]) >= 20
    assert "FAIL" not in capsys.readouterr().out


def test_verify_detects_corruption(workdir, tmp_path, capsys):
    enc = tmp_path / "w.qamw"
    assert run("encode", "--matrix", workdir / "w.qwmx", "--codebook", workdir / "cb7.qamc", "--out", enc) == 0
    assert run("verify", "--skip-identities", enc, workdir / "cb7.qamc", workdir / "w.qwmx") == 0
    buf = bytearray(enc.read_bytes())
    row_bytes = 256 * 7 // 8
    buf[len(buf) - row_bytes * 5 + 3] ^= 0x01  # row 59 of 64
    bad = tmp_path / "bad.qamw"
    bad.write_bytes(bytes(buf))
    capsys.readouterr()
    assert run("verify", "--skip-identities", bad) == 3
    assert "row 59" in capsys.readouterr().out


def test_verify_detects_tampered_bpw(workdir, tmp_path, capsys):
    from qamw.codec import EncodedMatrix

    enc = tmp_path / "w.qamw"
    assert run("encode", "--matrix", workdir / "w.qwmx", "--codebook", workdir / "cb7.qamc", "--out", enc) == 0
    e = EncodedMatrix.from_bytes(enc.read_bytes())
    e.manifest["bpw"] = 3.0
    (tmp_path / "t.qamw").write_bytes(e.to_bytes())
    capsys.readouterr()
    assert run("verify", "--skip-identities", tmp_path / "t.qamw") == 3
    assert "bpw" in capsys.readouterr().out


def test_verify_sidecar_digest_mismatch_and_format_errors(workdir, tmp_path):
    p = tmp_path / "m.qwmx"
    assert run("synth", "--rows", 4, "--cols", 8, "--out", p) == 0
    assert run("verify", "--skip-identities", p) == 0
    write_matrix(p, np.zeros((4, 8)))
    assert run("verify", "--skip-identities", p) == 3
    (tmp_path / "junk").write_bytes(b"not a container")
    assert run("verify", "--skip-identities", tmp_path / "junk") == 2
    assert run("verify", "--skip-identities", tmp_path / "missing") == 2


# ---------------------------------------------------------------------------
# probes and report
# ---------------------------------------------------------------------------

def test_ladder_report(tmp_path):
    runs = tmp_path / "runs"
    assert run("ladder", "--bits", 7, 8, 11, "--out-dir", runs / "ladder") == 0
    assert run("report", runs, "--out-dir", tmp_path / "rep") == 0
    with open(tmp_path / "rep" / "ladder.csv") as f:
        rows = list(csv.DictReader(f))
    assert [int(r["bits"]) for r in rows] == [7, 8, 11]
    bpw = [float(r["bpw"]) for r in rows]
    assert bpw == pytest.approx([3.51, 4.01, 5.51], abs=0.01)
    assert all(float(r["d_b"]) < float(r["polar_best"]) for r in rows)
    first = {f: (tmp_path / "rep" / f).read_bytes() for f in ("ladder.csv", "report.json")}
    assert run("report", runs, "--out-dir", tmp_path / "rep") == 0
    for f, b in first.items():
        assert (tmp_path / "rep" / f).read_bytes() == b


def test_report_empty_dir(tmp_path):
    (tmp_path / "empty").mkdir()
    assert run("report", tmp_path / "empty", "--out-dir", tmp_path / "rep") == 2
    assert run("report", tmp_path / "missing", "--out-dir", tmp_path / "rep") == 4


def test_a1_and_qq_commands(workdir, tmp_path):
    out = tmp_path / "a1"
    assert run("a1-probe", "--matrix", workdir / "w.qwmx", "--activations", workdir / "x.qwmx",
               "--codebook", workdir / "cb7.qamc", "--alphas", 0, 0.5, "--out-dir", out) == 0
    summ = json.loads((out / "a1_summary.json").read_bytes())["summary"]
    assert [s["alpha"] for s in summ] == [0.0, 0.5]
    with open(out / "a1_channels.csv") as f:
        assert sum(1 for _ in f) == 1 + 2 * 512
    assert run("qq", "--matrix", workdir / "w.qwmx", "--pairs", 5000, "--out-dir", tmp_path / "qq") == 0
    assert (tmp_path / "qq" / "qq_quantiles.csv").exists()
    assert run("report", tmp_path, "--out-dir", tmp_path / "rep") == 0
    assert (tmp_path / "rep" / "a1_summary.csv").exists() and (tmp_path / "rep" / "qq_summary.csv").exists()


def test_config_file_defaults(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"rows": 3, "cols": 10, "seed": 11}))
    assert run("--config", cfg, "synth", "--out", tmp_path / "a.qwmx") == 0
    assert read_matrix(tmp_path / "a.qwmx").shape == (3, 10)
    assert manifest(tmp_path / "a.qwmx")["config"]["params"]["seed"] == 11
    # flags override the file
    assert run("--config", cfg, "synth", "--rows", 5, "--out", tmp_path / "b.qwmx") == 0
    assert read_matrix(tmp_path / "b.qwmx").shape == (5, 10)
    cfg.write_text("[1, 2]")
    assert run("--config", cfg, "synth", "--out", tmp_path / "c.qwmx") == 4


def test_usage_errors():
    assert run() == 4
    assert run("frobnicate") == 4
    assert run("encode", "--bogus") == 4


def test_every_output_manifest_validates(workdir):
    for name in os.listdir(workdir):
        if name.endswith(".manifest.json"):
            m = json.loads((workdir / name).read_bytes())
            for out, digest in m["outputs"].items():
                assert file_sha256(workdir / out) == digest
