from __future__ import annotations

import json
import math

import numpy as np
import pytest

from moec import analysis as an
from moec import cli
from moec import model as mdl
from moec import volume as vl

SMALL = ["--synthetic", "two_material_sphere", "--dims", "16,16,16", "--ratio", "1",
         "--steps", "120", "--batch", "512"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def compressed(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("compress", *SMALL, "--out", d / "a.moec") == 0
    return d


def manifest(path):
    return json.loads(path.with_name(path.name + ".manifest.json").read_text())


def test_selftest_passes(capsys):
    assert run("selftest") == 0
    assert "selftest passed" in capsys.readouterr().out


def test_selftest_catches_a_broken_backward(monkeypatch, capsys):
    real = mdl.backward

    def broken(*a, **k):
        grads, lb = real(*a, **k)
        grads.decoder[-1][0][...] *= 1.5
        return grads, lb

    monkeypatch.setattr(mdl, "backward", broken)
    assert run("selftest") != 0
    assert "FAIL model gradients" in capsys.readouterr().out


def test_compress_writes_artifact_manifest_and_log(compressed):
    art = compressed / "a.moec"
    m = manifest(art)
    assert m["artifact"]["bytes"] == art.stat().st_size
    assert m["train"]["steps"] == 120 and m["seed"] == 0
    assert m["baseline"] is False
    assert m["hash"] == cli.manifest_hash({k: v for k, v in m.items() if k != "hash"})
    log = (compressed / "a.moec.log.jsonl").read_text().splitlines()
    assert json.loads(log[-1])["step"] == 119


def test_same_seed_gives_identical_artifact(compressed, tmp_path, capsys):
    assert run("compress", *SMALL, "--out", tmp_path / "b.moec") == 0
    assert (tmp_path / "b.moec").read_bytes() == (compressed / "a.moec").read_bytes()
    assert manifest(tmp_path / "b.moec")["hash"] == manifest(compressed / "a.moec")["hash"]
    assert f"manifest {manifest(compressed / 'a.moec')['hash']}" in capsys.readouterr().out


def test_single_expert_marks_baseline(tmp_path):
    assert run("compress", *SMALL, "--experts", "1", "--steps", "5", "--out", tmp_path / "c.moec") == 0
    assert manifest(tmp_path / "c.moec")["baseline"] is True


def test_decompress_reproduces_reported_psnr(compressed):
    art = compressed / "a.moec"
    out = compressed / "rec.raw"
    assert run("decompress", "--artifact", art, "--out", out) == 0
    rec = vl.load_with_sidecar(out)
    orig = vl.make_synthetic("two_material_sphere", (16, 16, 16))
    assert rec.dims == tuple(manifest(art)["model"]["dims"])
    assert an.psnr(orig, rec, orig.peak) == pytest.approx(manifest(art)["result"]["psnr"], abs=1e-9)


def test_quant_mode_is_smaller_and_scores_its_own_reconstruction(compressed, tmp_path):
    art = tmp_path / "q.moec"
    assert run("compress", *SMALL, "--mode", "quant", "--out", art) == 0
    raw, quant = manifest(compressed / "a.moec"), manifest(art)
    assert quant["artifact"]["payload_bytes"] < raw["artifact"]["payload_bytes"]
    assert run("decompress", "--artifact", art, "--out", tmp_path / "q.raw") == 0
    orig = vl.make_synthetic("two_material_sphere", (16, 16, 16))
    rec = vl.load_with_sidecar(tmp_path / "q.raw")
    assert an.psnr(orig, rec, orig.peak) == pytest.approx(quant["result"]["psnr"], abs=1e-9)


def test_eval_identical_and_scrambled(tmp_path, capsys):
    v = vl.make_synthetic("two_material_sphere", (16, 16, 16))
    vl.save_raw(v, tmp_path / "o.raw")
    rng = np.random.default_rng(0)
    scrambled = vl.Volume(rng.permutation(v.data.ravel()).reshape(v.dims), 8, v.norm)
    vl.save_raw(scrambled, tmp_path / "s.raw")
    assert run("eval", "--original", tmp_path / "o.raw", "--reconstructed", tmp_path / "o.raw",
               "--json", tmp_path / "r.json") == 0
    out = capsys.readouterr().out
    assert "PSNR inf dB SSIM 1.000000" in out
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["psnr_infinite"] and rep["ssim"] == pytest.approx(1.0)
    assert run("eval", "--original", tmp_path / "o.raw", "--reconstructed", tmp_path / "s.raw") == 0
    ssim = float(capsys.readouterr().out.split("SSIM ")[1].split()[0])
    assert ssim < 0.3


def test_eval_dim_mismatch(tmp_path):
    vl.save_raw(vl.make_synthetic("smooth_gradient", (8, 8, 8)), tmp_path / "a.raw")
    vl.save_raw(vl.make_synthetic("smooth_gradient", (8, 8, 9)), tmp_path / "b.raw")
    assert run("eval", "--original", tmp_path / "a.raw", "--reconstructed", tmp_path / "b.raw") == cli.EXIT_DATA


def test_analyze_writes_slices(compressed, capsys):
    assert run("analyze", "--artifact", compressed / "a.moec", "--synthetic", "two_material_sphere",
               "--dims", "16,16,16", "--out-dir", compressed / "pgm") == 0
    assert len(list((compressed / "pgm").glob("*.pgm"))) == 16
    shares = [float(s) for s in capsys.readouterr().out.splitlines()[0].split()[2:]]
    assert sum(shares) == pytest.approx(1.0)


def test_raw_input_with_sidecar(tmp_path):
    vl.save_raw(vl.make_synthetic("smooth_gradient", (16, 16, 16)), tmp_path / "in.raw")
    assert run("compress", "--input", tmp_path / "in.raw", "--ratio", "4", "--steps", "3",
               "--batch", "64", "--out", tmp_path / "o.moec") == 0
    assert manifest(tmp_path / "o.moec")["input"]["path"].endswith("in.raw")


def test_config_file_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train": {"steps": 5, "batch_size": 64, "lr0": 1e-3},
                               "model": {"lambda_balance": 2.5}, "mode": "quant"}))
    assert run("compress", "--synthetic", "smooth_gradient", "--dims", "16,16,16", "--ratio", "4",
               "--config", cfg, "--steps", "7", "--out", tmp_path / "p.moec") == 0
    m = manifest(tmp_path / "p.moec")
    assert m["train"]["steps"] == 7
    assert m["train"]["batch_size"] == 64 and m["train"]["lr0"] == 1e-3
    assert m["model"]["lambda_balance"] == 2.5
    assert m["mode"] == "quant"
    assert m["train"]["freeze_step"] == 5


@pytest.mark.parametrize("argv,code", [
    (["compress", "--synthetic", "smooth_gradient", "--dims", "8,8,8", "--ratio", "1e6", "--out", "x"], cli.EXIT_USAGE),
    (["compress", "--input", "/nonexistent.raw", "--dims", "4,4,4", "--bits", "8", "--out", "x"], cli.EXIT_DATA),
    (["compress", "--synthetic", "granite", "--out", "x"], cli.EXIT_USAGE),
    (["decompress", "--artifact", "/nonexistent.moec", "--out", "x"], cli.EXIT_DATA),
    (["frobnicate"], cli.EXIT_USAGE),
    ([], cli.EXIT_USAGE),
])
def test_exit_codes(argv, code, capsys):
    assert cli.main(argv) == code


def test_corrupt_artifact_exit_code(compressed, tmp_path):
    blob = bytearray((compressed / "a.moec").read_bytes())
    blob[30] ^= 0x55
    (tmp_path / "bad.moec").write_bytes(bytes(blob))
    assert run("decompress", "--artifact", tmp_path / "bad.moec", "--out", tmp_path / "r.raw") == cli.EXIT_CORRUPT


def test_divergence_exit_code(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train": {"divergence_factor": 1.0001, "divergence_patience": 3}}))
    code = run("compress", "--synthetic", "smooth_gradient", "--dims", "8,8,8", "--ratio", "1",
               "--steps", "200", "--batch", "32", "--lr", "5", "--config", cfg, "--out", tmp_path / "d.moec")
    assert code == cli.EXIT_NUMERIC


def test_checkpoint_and_resume_match_straight_run(compressed, tmp_path):
    ck = tmp_path / "run.ckpt"
    assert run("compress", *SMALL, "--checkpoint", ck, "--checkpoint-every", "50",
               "--out", tmp_path / "c1.moec") == 0
    assert ck.exists()
    assert (tmp_path / "c1.moec").read_bytes() == (compressed / "a.moec").read_bytes()
    assert run("compress", *SMALL, "--resume", ck, "--out", tmp_path / "c2.moec") == 0
    assert (tmp_path / "c2.moec").read_bytes() == (compressed / "a.moec").read_bytes()
    assert run("compress", *SMALL, "--seed", "3", "--resume", ck, "--out", tmp_path / "c3.moec") == cli.EXIT_CORRUPT


def test_sweep_is_resumable(tmp_path, capsys):
    args = ["sweep", "--synthetic", "two_material_sphere", "--dims", "16,16,16", "--ratios", "16,4",
            "--experts-list", "1,2", "--steps", "20", "--batch", "128", "--out-dir", tmp_path / "sw"]
    assert run(*args) == 0
    lines = (tmp_path / "sw" / "results.jsonl").read_text().splitlines()
    assert len(lines) == 4
    table = an.load_rd_csv(tmp_path / "sw" / "rate_distortion.csv")
    assert [r["ratio"] for r in table.rows] == [4, 4, 16, 16]
    assert run(*args) == 0
    assert (tmp_path / "sw" / "results.jsonl").read_text().splitlines() == lines
    assert "PSNR spread" in capsys.readouterr().out


def test_sweep_marks_failed_cells(tmp_path):
    code = run("sweep", "--synthetic", "smooth_gradient", "--dims", "8,8,8", "--ratios", "2,1e6",
               "--experts-list", "2", "--steps", "3", "--batch", "16", "--out-dir", tmp_path / "sw")
    rows = [json.loads(l) for l in (tmp_path / "sw" / "results.jsonl").read_text().splitlines()]
    assert code == cli.EXIT_NUMERIC
    assert "error" in rows[1] and "psnr" in rows[0]
    assert math.isfinite(rows[0]["psnr"])
