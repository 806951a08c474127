"""Command-line entry point: ``python3 -m moec <command> ...``.

Exit codes: 0 ok, 2 usage, 3 data/I-O, 4 numeric failure, 5 corrupt artifact.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import platform
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

import moec
from moec import analysis as an
from moec import codec
from moec import model as mdl
from moec import router as rt
from moec import trainer as tr
from moec import volume as vl

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_CORRUPT = 5

log = logging.getLogger("moec")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# flag name -> config field
MODEL_FLAGS = {"experts": "n_experts", "topk": "top_k", "lambda_": "lambda_balance",
               "cf": "capacity_factor", "omega": "omega", "width": "width"}
TRAIN_FLAGS = {"steps": "steps", "batch": "batch_size", "seed": "seed",
               "freeze_at": "freeze_step", "lr": "lr0"}


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def manifest_hash(manifest: dict) -> str:
    """Hash of everything except wall-clock timings."""
    body = {k: v for k, v in manifest.items() if k != "timings"}
    return _sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode())


def _versions() -> dict:
    return {"moec": moec.__version__, "numpy": np.__version__, "python": platform.python_version()}


# --------------------------------------------------------------------------
# inputs and configs


def _parse_dims(text) -> tuple[int, int, int]:
    parts = [int(p) for p in str(text).lower().replace("x", ",").split(",") if p.strip()]
    if len(parts) != 3 or min(parts) < 1:
        raise CliError(f"--dims needs three positive integers, got {text!r}", EXIT_USAGE)
    return tuple(parts)


def load_input(args) -> tuple[vl.Volume, dict]:
    """Volume from ``--synthetic KIND[:components]`` or ``--input PATH``."""
    if getattr(args, "synthetic", None):
        kind, _, comp = args.synthetic.partition(":")
        dims = _parse_dims(args.dims) if args.dims else (64, 64, 64)
        bits = args.bits or 8
        try:
            v = vl.make_synthetic(kind, dims, seed=args.data_seed, voxel_bits=bits,
                                  components=int(comp) if comp else 1)
        except ValueError as exc:
            raise CliError(str(exc), EXIT_USAGE) from exc
        info = {"synthetic": kind, "components": int(comp) if comp else 1, "data_seed": args.data_seed}
        raw = vl.to_integers(v.data, bits).tobytes()
    elif getattr(args, "input", None):
        path = Path(args.input)
        try:
            if vl.sidecar_path(path).exists():
                v = vl.load_with_sidecar(path)
            else:
                if not (args.dims and args.bits):
                    raise CliError("no sidecar next to the input; pass --dims and --bits", EXIT_USAGE)
                v = vl.load_raw(path, _parse_dims(args.dims), args.bits, args.endian)
            raw = path.read_bytes()
        except (OSError, vl.VolumeFormatError) as exc:
            raise CliError(f"cannot read {path}: {exc}", EXIT_DATA) from exc
        info = {"path": str(path)}
    else:
        raise CliError("give --input or --synthetic", EXIT_USAGE)
    info.update(sha256=_sha256(raw), dims=list(v.dims), voxel_bits=v.voxel_bits)
    return v, info


def _read_config_file(path) -> dict:
    if not path:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read config file {path}: {exc}", EXIT_USAGE) from exc
    if not isinstance(cfg, dict):
        raise CliError("config file must hold a JSON object", EXIT_USAGE)
    return cfg


def resolve_configs(args, volume: vl.Volume) -> tuple[mdl.ModelConfig, tr.TrainConfig, str, float]:
    """CLI flag > config file > preset defaults."""
    file_cfg = _read_config_file(getattr(args, "config", None))
    model_over = dict(file_cfg.get("model", {}))
    train_over = dict(file_cfg.get("train", {}))
    for flag, name in MODEL_FLAGS.items():
        val = getattr(args, flag, None)
        if val is not None:
            model_over[name] = None if (name == "capacity_factor" and val < 0) else val
    for flag, name in TRAIN_FLAGS.items():
        val = getattr(args, flag, None)
        if val is not None:
            train_over[name] = val
    ratio = args.ratio if args.ratio is not None else file_cfg.get("ratio", 64.0)
    mode = args.mode or file_cfg.get("mode", "raw")
    preset = args.preset or file_cfg.get("preset", "default")
    train_preset = args.train_preset or file_cfg.get("train_preset", "desk")
    if preset not in mdl.PRESETS or train_preset not in tr.PRESETS:
        raise CliError(f"unknown preset {preset!r}/{train_preset!r}", EXIT_USAGE)
    if mode not in codec.ARTIFACT_MODES:
        raise CliError(f"unknown mode {mode!r}", EXIT_USAGE)
    for key in ("dims", "norm", "voxel_bits", "preset"):
        model_over.pop(key, None)
    try:
        width = model_over.pop("width", None)
        if width is None:
            mcfg = mdl.build_model(volume.dims, volume.voxel_bits, ratio, volume.norm, preset, **model_over)
        else:
            mcfg = mdl.ModelConfig(dims=volume.dims, voxel_bits=volume.voxel_bits, norm=volume.norm,
                                   preset=preset, width=width, **{**mdl.PRESETS[preset], **model_over})
        tcfg = tr.TrainConfig(**{**tr.PRESETS[train_preset], **train_over})
    except mdl.BudgetError as exc:
        raise CliError(f"unsolvable budget: {exc}", EXIT_USAGE) from exc
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid configuration: {exc}", EXIT_USAGE) from exc
    return mcfg, tcfg, mode, float(ratio)


# --------------------------------------------------------------------------
# pipeline pieces shared by commands and tests


def reconstruct(params: mdl.ModelParams, config: mdl.ModelConfig, threads: int | None = None) -> vl.Volume:
    """Full-grid decode, rounded to the source integer type."""
    rec = vl.reconstruct_grid(lambda c: mdl.predict(c, params, config), config.dims, config.norm,
                              config.voxel_bits, threads=threads)
    return vl.Volume(vl.to_integers(rec.data, config.voxel_bits).astype(np.float64),
                     config.voxel_bits, config.norm)


@dataclass
class CompressResult:
    artifact: bytes
    manifest: dict
    log: list[dict]
    reconstruction: vl.Volume
    psnr: float
    ssim: float


def run_compress(volume: vl.Volume, info: dict, mcfg: mdl.ModelConfig, tcfg: tr.TrainConfig,
                 mode: str, ratio: float, checkpoint: str | None = None,
                 checkpoint_every: int = 0, resume: str | None = None,
                 log_every: int = 100) -> CompressResult:
    t0 = time.perf_counter()
    state = None
    if resume:
        try:
            state, ck_model, _ = tr.load_checkpoint(resume, tcfg)
        except (tr.CheckpointError, codec.ArtifactError) as exc:
            raise CliError(f"cannot resume: {exc}", EXIT_CORRUPT) from exc
        if ck_model.to_dict() != mcfg.to_dict():
            raise CliError("checkpoint model settings differ from the requested ones", EXIT_USAGE)
    try:
        while state is None or state.step < tcfg.steps:
            until = tcfg.steps
            if checkpoint and checkpoint_every > 0:
                done = 0 if state is None else state.step
                until = min(tcfg.steps, (done // checkpoint_every + 1) * checkpoint_every)
            state = tr.train(volume, mcfg, tcfg, state=state, until=until, log_every=log_every)
            if checkpoint:
                tr.save_checkpoint(state, mcfg, tcfg, checkpoint)
            last = state.log[-1] if state.log else {}
            log.info("step %d/%d L_d=%.4g L_b=%.4g", state.step, tcfg.steps,
                     last.get("L_d", float("nan")), last.get("L_b", float("nan")))
    except (tr.DivergenceError, FloatingPointError) as exc:
        raise CliError(f"numeric failure: {exc}", EXIT_NUMERIC) from exc
    train_seconds = time.perf_counter() - t0

    extra = {"seed": tcfg.seed, "train": tcfg.to_dict()}
    artifact = codec.pack_artifact(state.params, mcfg, mode, extra=extra)
    unpacked = codec.unpack_artifact(artifact)
    t1 = time.perf_counter()
    rec = reconstruct(unpacked.params, unpacked.config)
    decode_seconds = time.perf_counter() - t1
    p = an.psnr(volume, rec, volume.peak)
    s = an.ssim3d(volume, rec, peak=volume.peak) if min(volume.dims) >= 7 else float("nan")
    last = state.log[-1] if state.log else {}
    manifest = {
        "command": "compress",
        "model": mcfg.to_dict(),
        "train": tcfg.to_dict(),
        "mode": mode,
        "ratio_target": ratio,
        "input": info,
        "seed": tcfg.seed,
        "baseline": mcfg.n_experts == 1,
        "versions": _versions(),
        "artifact": {
            "sha256": _sha256(artifact),
            "bytes": len(artifact),
            "payload_bytes": unpacked.payload_bytes,
            "ratio": volume.nbytes / len(artifact),
            "payload_ratio": volume.nbytes / unpacked.payload_bytes,
            "record_modes": unpacked.record_modes,
        },
        "result": {
            "psnr": None if math.isinf(p) else p,
            "ssim": None if math.isnan(s) else s,
            "L_d": last.get("L_d"),
            "L_b": last.get("L_b"),
            "drop_fraction": last.get("drop_fraction"),
        },
        "timings": {"train_seconds": train_seconds, "decompress_seconds": decode_seconds},
    }
    manifest["hash"] = manifest_hash(manifest)
    return CompressResult(artifact, manifest, state.log, rec, p, s)


def _side_paths(out: Path) -> tuple[Path, Path]:
    return out.with_name(out.name + ".manifest.json"), out.with_name(out.name + ".log.jsonl")


# --------------------------------------------------------------------------
# commands


def cmd_compress(args) -> int:
    volume, info = load_input(args)
    mcfg, tcfg, mode, ratio = resolve_configs(args, volume)
    log.info("width %d, %d parameters, %d experts", mcfg.width, mdl.param_count(mcfg), mcfg.n_experts)
    res = run_compress(volume, info, mcfg, tcfg, mode, ratio, args.checkpoint,
                       args.checkpoint_every, args.resume, args.log_every)
    out = Path(args.out)
    man_path, log_path = _side_paths(out)
    try:
        out.write_bytes(res.artifact)
        man_path.write_text(json.dumps(res.manifest, indent=2, sort_keys=True))
        tr.write_log(res.log, log_path)
    except OSError as exc:
        raise CliError(f"cannot write outputs: {exc}", EXIT_DATA) from exc
    a, r = res.manifest["artifact"], res.manifest["result"]
    print(f"artifact {out} {a['bytes']} bytes (payload {a['payload_bytes']}), "
          f"ratio {a['ratio']:.2f} (payload {a['payload_ratio']:.2f})")
    print(f"L_d {r['L_d']:.6g} L_b {r['L_b']:.6g} PSNR {res.psnr:.4f} dB SSIM {res.ssim:.4f}")
    print(f"manifest {res.manifest['hash']}")
    return EXIT_OK


def read_artifact(path) -> codec.Unpacked:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_DATA) from exc
    try:
        return codec.unpack_artifact(blob)
    except (codec.ArtifactError, KeyError, ValueError) as exc:
        raise CliError(f"corrupt artifact {path}: {exc}", EXIT_CORRUPT) from exc


def cmd_decompress(args) -> int:
    unpacked = read_artifact(args.artifact)
    t0 = time.perf_counter()
    rec = reconstruct(unpacked.params, unpacked.config, args.threads)
    seconds = time.perf_counter() - t0
    try:
        vl.save_raw(rec, args.out)
    except OSError as exc:
        raise CliError(f"cannot write {args.out}: {exc}", EXIT_DATA) from exc
    print(f"wrote {args.out} dims {'x'.join(map(str, rec.dims))} in {seconds:.3f} s")
    return EXIT_OK


def _load_volume_file(path) -> vl.Volume:
    try:
        return vl.load_with_sidecar(path)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_DATA) from exc


def cmd_eval(args) -> int:
    a = _load_volume_file(args.original)
    b = _load_volume_file(args.reconstructed)
    if a.dims != b.dims:
        raise CliError(f"dims differ: {a.dims} vs {b.dims}", EXIT_DATA)
    rep = an.evaluate(a, b, a.peak, args.M)
    d = rep.to_dict()
    d["hash"] = manifest_hash({"command": "eval", "report": d, "versions": _versions()})
    psnr_txt = "inf" if math.isinf(rep.psnr_db) else f"{rep.psnr_db:.4f}"
    print(f"PSNR {psnr_txt} dB SSIM {rep.ssim:.6f}")
    for m, val in rep.d_of_x.items():
        print(f"D(M={m}) {val:.6f}")
    print(f"manifest {d['hash']}")
    if args.json:
        Path(args.json).write_text(json.dumps(d, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_analyze(args) -> int:
    unpacked = read_artifact(args.artifact)
    volume, _ = load_input(args)
    if volume.dims != unpacked.config.dims:
        raise CliError("input dims do not match the artifact", EXIT_DATA)
    rep = an.expert_report(volume, unpacked.params, unpacked.config,
                           labels=an.material_labels(volume), out_dir=args.out_dir)
    print("expert shares " + " ".join(f"{s:.4f}" for s in rep.shares))
    print(f"mutual information (expert id, material) {rep.mutual_information:.4f} nats")
    if rep.slices:
        print(f"wrote {len(rep.slices)} assignment slices to {args.out_dir}")
    return EXIT_OK


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _float_list(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def cmd_sweep(args) -> int:
    """Grid over ratios x expert counts; finished cells are skipped on rerun."""
    volume, info = load_input(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results_path = out / "results.jsonl"
    done = {}
    if results_path.exists():
        for rec in tr.read_log(results_path):
            if "error" not in rec:
                done[(float(rec["ratio"]), int(rec["experts"]))] = rec
    ratios = _float_list(args.ratios)
    experts = [args.experts] if args.experts is not None else _int_list(args.experts_list)
    rows = []
    for ratio in ratios:
        for n in experts:
            key = (float(ratio), int(n))
            if key in done:
                rows.append(done[key])
                continue
            row = {"ratio": ratio, "experts": n}
            try:
                ns = argparse.Namespace(**{**vars(args), "experts": n, "ratio": ratio})
                mcfg, tcfg, mode, _ = resolve_configs(ns, volume)
                res = run_compress(volume, info, mcfg, tcfg, mode, ratio, log_every=args.log_every)
                name = f"r{ratio:g}_n{n}.moec"
                (out / name).write_bytes(res.artifact)
                row.update(bytes=len(res.artifact), payload_bytes=res.manifest["artifact"]["payload_bytes"],
                           psnr=res.psnr, ssim=res.ssim, time=res.manifest["timings"]["train_seconds"],
                           width=mcfg.width, artifact=name, hash=res.manifest["hash"])
            except CliError as exc:
                row["error"] = str(exc)
            with results_path.open("a") as fh:
                fh.write(json.dumps(row) + "\n")
            print(json.dumps(row))
            rows.append(row)
    ok = [r for r in rows if "error" not in r]
    if ok:
        table = an.rate_distortion_table(ok)
        table.save(out / "rate_distortion.csv")
        table.save(out / "rate_distortion.md")
        for ratio in ratios:
            ps = [r["psnr"] for r in ok if float(r["ratio"]) == float(ratio)]
            if len(ps) > 1:
                print(f"ratio {ratio:g}: PSNR spread over expert counts {max(ps) - min(ps):.3f} dB")
    failed = len(rows) - len(ok)
    print(f"{len(ok)} cells ok, {failed} failed; tables in {out}")
    return EXIT_OK if not failed else EXIT_NUMERIC


def selftest(verbose: bool = True) -> bool:
    """Gradient checks, dispatch invariants and codec round trips."""
    from moec.numeric import grad_check

    rng = np.random.default_rng(1234)
    checks = []

    cfg = mdl.ModelConfig(n_experts=2, width=4, expert_depth=2, capacity_factor=None,
                          lambda_balance=0.5)
    params = mdl.init_params(cfg, rng)
    coords = rng.uniform(-1, 1, size=(8, 3))
    targets = rng.uniform(0, 100, size=8)

    def f(ts):
        return mdl.total_loss(mdl.ModelParams.from_tensors(cfg, ts), cfg, coords, targets)

    def g(ts):
        p = mdl.ModelParams.from_tensors(cfg, ts)
        return mdl.loss_and_grads(p, cfg, coords, targets).grads.tensors()

    err = grad_check(f, g, params.tensors(), epsilon=1e-5)
    checks.append(("model gradients", err < 1e-5, f"max rel err {err:.2e}"))

    ok = True
    for _ in range(500):
        n = int(rng.integers(1, 9))
        B = int(rng.integers(1, 65))
        k = int(rng.integers(1, n + 1))
        cf = float(rng.uniform(0.5, 2.0))
        probs = rng.dirichlet(np.ones(n), size=B)
        sel = rt.top_k_select(probs, k)
        plan = rt.build_dispatch(sel, n, cf)
        again = rt.build_dispatch(rt.top_k_select(probs, k), n, cf)
        cap = rt.expert_capacity(B, n, cf)
        ok &= bool(np.all(plan.counts <= cap))
        ok &= int(plan.kept.sum()) + plan.dropped == k * B
        ok &= np.array_equal(plan.kept, again.kept) and np.array_equal(plan.slot_points, again.slot_points)
    checks.append(("dispatch invariants", bool(ok), "500 random plans"))

    blob = codec.pack_artifact(params, cfg, "raw")
    same = codec.pack_artifact(codec.unpack_artifact(blob).params, cfg, "raw") == blob
    checks.append(("raw artifact round trip", same, f"{len(blob)} bytes"))
    data = bytes(rng.integers(0, 8, size=4096).astype(np.uint8))
    checks.append(("huffman round trip", codec.huffman_unpack(codec.huffman_pack(data)) == data, "4096 bytes"))
    q, s = codec.quantize_tensor(params.tensors()[0])
    q2, _ = codec.quantize_tensor(codec.dequantize_tensor(q, s))
    checks.append(("quantization idempotent", np.array_equal(q, q2), ""))

    if verbose:
        for name, passed, detail in checks:
            print(f"{'ok  ' if passed else 'FAIL'} {name} {detail}".rstrip())
    return all(p for _, p, _ in checks)


def cmd_selftest(args) -> int:
    t0 = time.perf_counter()
    passed = selftest()
    print(f"selftest {'passed' if passed else 'FAILED'} in {time.perf_counter() - t0:.1f} s")
    return EXIT_OK if passed else EXIT_NUMERIC


# --------------------------------------------------------------------------
# argument parsing


def _add_input(p, required_dims=False):
    src = p.add_mutually_exclusive_group()
    src.add_argument("--input", help="raw volume (dims read from its .json sidecar if present)")
    src.add_argument("--synthetic", help="built-in volume KIND[:components], e.g. two_material_sphere")
    p.add_argument("--dims", help="X,Y,Z when there is no sidecar (synthetic default 64,64,64)")
    p.add_argument("--bits", type=int, choices=(8, 16))
    p.add_argument("--endian", choices=("little", "big"), default="little")
    p.add_argument("--data-seed", type=int, default=0, help="seed for synthetic volumes")


def _add_training(p):
    p.add_argument("--config", help="JSON file with 'model' and 'train' sections")
    p.add_argument("--ratio", type=float)
    p.add_argument("--experts", type=int)
    p.add_argument("--topk", type=int)
    p.add_argument("--lambda", dest="lambda_", type=float)
    p.add_argument("--cf", type=float, help="capacity factor; negative disables the limit")
    p.add_argument("--omega", type=float)
    p.add_argument("--width", type=int, help="fix the width instead of solving it from --ratio")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--freeze-at", type=int)
    p.add_argument("--preset", choices=sorted(mdl.PRESETS))
    p.add_argument("--train-preset", choices=sorted(tr.PRESETS))
    p.add_argument("--mode", choices=sorted(codec.ARTIFACT_MODES))
    p.add_argument("--log-every", type=int, default=100)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moec", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compress", help="train on a volume and write an artifact")
    _add_input(p)
    _add_training(p)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", help="write a resumable checkpoint here")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--resume", help="continue from this checkpoint")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help="reconstruct a raw volume from an artifact")
    p.add_argument("--artifact", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, help="defaults to MOEC_THREADS or 1")
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("eval", help="PSNR, SSIM and D(x) of a reconstruction")
    p.add_argument("--original", required=True)
    p.add_argument("--reconstructed", required=True)
    p.add_argument("--M", type=int, nargs="+", help="top-M values for D(x) (default 1%% of voxels)")
    p.add_argument("--json", help="also write the report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="expert utilization and assignment maps")
    p.add_argument("--artifact", required=True)
    _add_input(p)
    p.add_argument("--out-dir", help="write one PGM per slice here")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep", help="rate-distortion / expert-count grid (resumable)")
    _add_input(p)
    _add_training(p)
    p.add_argument("--ratios", default="64")
    p.add_argument("--experts-list", default="2", help="comma-separated expert counts")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("selftest", help="quick internal consistency checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
