"""Command-line driver: synthetic data, codebook training, encode/decode,
identity verification, probes and report aggregation.

Exit codes: 0 success, 2 format error, 3 identity-suite failure, 4 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .analysis import best_polar, qq_diagnostic
from .codebooks import PlanarCodebook, PolarQuantizer, make_polar, train_planar_lloyd
from .codec import (
    EncodedMatrix,
    bits_per_weight,
    decode_matrix,
    encode,
    plan_from_manifest,
    quantizer_digest,
    scales_from_manifest,
)
from .errors import FormatError, IntegrityError, QamwError
from .formats import (
    atomic_write,
    canonical_json,
    file_sha256,
    read_bytes,
    read_codebook,
    read_matrix,
    sha256_hex,
    write_codebook,
    write_matrix,
)
from .rotation import plan_rotation
from .scaling import DEFAULT_ALPHAS, a1_probe, build_scales, compute_channel_rms
from .synth import KINDS, SynthConfig, generate

EXIT_OK, EXIT_FORMAT, EXIT_IDENTITY, EXIT_USAGE = 0, 2, 3, 4
MANIFEST_SUFFIX = ".manifest.json"


class UsageError(QamwError):
    pass


class EmptyReportError(QamwError):
    pass


@dataclass
class RunConfig:
    command: str
    params: dict = field(default_factory=dict)


def _write_manifest(path, cfg: RunConfig, inputs, outputs, summary, started):
    """Sidecar manifest; everything but ``timing`` is deterministic."""
    manifest = {
        "tool": "qamw",
        "tool_version": __version__,
        "config": asdict(cfg),
        "inputs": {os.path.basename(p): file_sha256(p) for p in inputs},
        "outputs": {os.path.basename(p): file_sha256(p) for p in outputs},
        "summary": summary,
        "timing": {"seconds": round(time.perf_counter() - started, 6)},
    }
    atomic_write(path, canonical_json(manifest) + b"\n")
    return manifest


def _csv_bytes(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([format(v, ".17g") if isinstance(v, float) else v for v in row])
    return buf.getvalue().encode("ascii")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig) -> int:
    t0 = time.perf_counter()
    sc = SynthConfig(kind=args.kind, rows=args.rows, cols=args.cols, seed=args.seed,
                     scale=args.scale, nu=args.nu, log_sigma=args.log_sigma)
    a = generate(sc)
    write_matrix(args.out, a, args.dtype)
    _write_manifest(args.out + MANIFEST_SUFFIX, cfg, [], [args.out],
                    {"kind": "synth", "synth": asdict(sc), "shape": list(a.shape)}, t0)
    print(f"wrote {args.out} {a.shape[0]}x{a.shape[1]} sha256={file_sha256(args.out)}")
    return EXIT_OK


def cmd_train_codebook(args, cfg: RunConfig) -> int:
    t0 = time.perf_counter()
    if args.polar:
        if args.amp_bits is None or args.phase_bits is None:
            raise UsageError("--polar needs --amp-bits and --phase-bits")
        q = make_polar(args.amp_bits, args.phase_bits)
        q = PolarQuantizer(q.amp, q.phase, train_seed=args.seed)
        summary = {"kind": "codebook", "mode": "polar", "bits": q.bits, "amp_bits": args.amp_bits,
                   "phase_bits": args.phase_bits, "c_lm": q.amp.c_lm, "m_a": q.amp.m_a,
                   "eta": q.phase.eta, "distortion": q.distortion}
    else:
        if args.bits is None:
            raise UsageError("--joint needs --bits")
        q = train_planar_lloyd(args.bits, sample_count=args.samples, seed=args.seed,
                               tol=args.tol, max_iter=args.max_iter)
        summary = {"kind": "codebook", "mode": "joint", "bits": q.bits, "d_b": q.d_b,
                   "iterations": q.train_meta["iterations"], "converged": q.train_meta["converged"]}
    write_codebook(args.out, q)
    _write_manifest(args.out + MANIFEST_SUFFIX, cfg, [], [args.out], summary, t0)
    print(f"wrote {args.out} ({summary['mode']}, {q.bits} bits/pair)")
    return EXIT_OK


def cmd_encode(args, cfg: RunConfig) -> int:
    t0 = time.perf_counter()
    w = read_matrix(args.matrix)
    q = read_codebook(args.codebook)
    inputs = [args.matrix, args.codebook]
    scale = None
    if args.alpha is not None and args.alpha != 0.0:
        if not args.activations:
            raise UsageError("--alpha needs --activations")
        x = read_matrix(args.activations)
        inputs.append(args.activations)
        scale = build_scales(compute_channel_rms(x), args.alpha)
    enc, _, _ = encode(w, q, seed=args.seed, scale_vec=scale)
    atomic_write(args.out, enc.to_bytes())
    summary = {
        "kind": "encode",
        "mode": enc.manifest["mode"],
        "bits": enc.bits,
        "d_out": enc.d_out,
        "d_in": enc.d_in,
        "alpha": 0.0 if args.alpha is None else float(args.alpha),
        "clamp_hits": 0 if scale is None else scale.clamp_hits,
        "bpw": enc.manifest["bpw"],
        "payload_sha256": enc.manifest["payload_sha256"],
    }
    _write_manifest(args.out + MANIFEST_SUFFIX, cfg, inputs, [args.out], summary, t0)
    print(f"wrote {args.out} bpw={enc.manifest['bpw']:.6f} payload_sha256={summary['payload_sha256']}")
    return EXIT_OK


def cmd_decode(args, cfg: RunConfig) -> int:
    t0 = time.perf_counter()
    enc = EncodedMatrix.from_bytes(read_bytes(args.encoded))
    q = read_codebook(args.codebook)
    w_hat = decode_matrix(enc, plan_from_manifest(enc.manifest), q, scales_from_manifest(enc.manifest))
    write_matrix(args.out, w_hat, args.dtype)
    inputs = [args.encoded, args.codebook]
    summary = {"kind": "decode", "d_out": enc.d_out, "d_in": enc.d_in, "bits": enc.bits,
               "mode": enc.manifest["mode"], "bpw": enc.manifest["bpw"]}
    status = EXIT_OK
    if args.reference:
        w = read_matrix(args.reference)
        inputs.append(args.reference)
        rel = float(np.linalg.norm(w - w_hat) / np.linalg.norm(w))
        summary["rel_frobenius"] = rel
        summary["max_rel_error"] = args.max_rel_error
        if args.max_rel_error is not None:
            summary["passed"] = rel <= args.max_rel_error
            if not summary["passed"]:
                status = EXIT_IDENTITY
        print(f"relative Frobenius error {rel:.6e}")
    _write_manifest(args.out + MANIFEST_SUFFIX, cfg, inputs, [args.out], summary, t0)
    print(f"wrote {args.out}")
    return status


def _verify_file(path):
    """Integrity checks for one file; returns a list of (name, passed, detail)."""
    out = []
    if path.endswith(MANIFEST_SUFFIX) or os.path.basename(path) == "manifest.json":
        m = json.loads(read_bytes(path))
        base = os.path.dirname(path)
        for name, digest in sorted(m.get("outputs", {}).items()):
            p = os.path.join(base, name)
            ok = os.path.exists(p) and file_sha256(p) == digest
            out.append((f"{path}:output:{name}", ok, "digest" if ok else "digest mismatch"))
        return out
    buf = read_bytes(path)
    magic = buf[:4]
    if magic == b"QAMW":
        enc = EncodedMatrix.from_bytes(buf)
        try:
            enc.check_integrity()
            out.append((f"{path}:integrity", True, "ok"))
        except IntegrityError as exc:
            detail = str(exc) if exc.row is None else f"{exc} (row {exc.row})"
            out.append((f"{path}:integrity", False, detail))
    elif magic == b"QAMC":
        read_codebook(path)
        out.append((f"{path}:codebook", True, "ok"))
    elif magic == b"QWMX":
        read_matrix(path)
        out.append((f"{path}:matrix", True, "ok"))
    else:
        raise FormatError(f"{path}: unrecognized file type")
    sidecar = path + MANIFEST_SUFFIX
    if os.path.exists(sidecar):
        out.extend(_verify_file(sidecar))
    return out


def cmd_verify(args, cfg: RunConfig) -> int:
    from .verify import run_identity_suite

    t0 = time.perf_counter()
    results = [] if args.skip_identities else run_identity_suite(seed=args.seed)
    rows = [{"name": r.name, "value": r.value, "tol": r.tol, "passed": r.passed} for r in results]
    format_error = False
    for p in args.paths:
        try:
            for name, ok, detail in _verify_file(p):
                rows.append({"name": name, "value": detail, "tol": None, "passed": ok})
        except (FormatError, OSError, ValueError) as exc:
            format_error = True
            rows.append({"name": f"{p}:format", "value": str(exc), "tol": None, "passed": False})
    for r in rows:
        flag = "PASS" if r["passed"] else "FAIL"
        print(f"{flag}  {r['name']}  value={r['value']}  tol={r['tol']}")
    all_ok = all(r["passed"] for r in rows)
    if args.json:
        atomic_write(args.json, canonical_json({"checks": rows, "passed": all_ok}) + b"\n")
        _write_manifest(args.json + MANIFEST_SUFFIX, cfg, [p for p in args.paths if os.path.isfile(p)],
                        [args.json], {"kind": "verify", "passed": all_ok, "n_checks": len(rows)}, t0)
    print(f"{'all checks passed' if all_ok else 'verification FAILED'} ({len(rows)} checks)")
    if all_ok:
        return EXIT_OK
    return EXIT_FORMAT if format_error else EXIT_IDENTITY


def cmd_ladder(args, cfg: RunConfig) -> int:
    t0 = time.perf_counter()
    os.makedirs(args.out_dir, exist_ok=True)
    rows = []
    for b in args.bits:
        cb = train_planar_lloyd(b, seed=args.seed)
        ba, bp, pd = best_polar(b)
        rows.append({"bits": b, "d_b": cb.d_b, "polar_best": pd, "amp_bits": ba, "phase_bits": bp,
                     "bpw": bits_per_weight(b, args.d_in), "bpw_nominal": bits_per_weight(b, args.d_in, 0),
                     "iterations": cb.train_meta["iterations"]})
        if args.save_codebooks:
            write_codebook(os.path.join(args.out_dir, f"joint_b{b}.qamc"), cb)
    out_csv = os.path.join(args.out_dir, "ladder.csv")
    keys = ["bits", "d_b", "polar_best", "amp_bits", "phase_bits", "bpw", "bpw_nominal", "iterations"]
    atomic_write(out_csv, _csv_bytes(keys, [[r[k] for k in keys] for r in rows]))
    outs = [out_csv] + sorted(
        os.path.join(args.out_dir, f) for f in os.listdir(args.out_dir) if f.endswith(".qamc"))
    _write_manifest(os.path.join(args.out_dir, "manifest.json"), cfg, [], outs,
                    {"kind": "ladder", "d_in": args.d_in, "rows": rows}, t0)
    for r in rows:
        print(f"B={r['bits']:2d}  D_B={r['d_b']:.4e}  polar={r['polar_best']:.4e}  bpw={r['bpw']:.4f}")
    return EXIT_OK


def cmd_a1_probe(args, cfg: RunConfig) -> int:
    t0 = time.perf_counter()
    w = read_matrix(args.matrix)
    x = read_matrix(args.activations)
    q = read_codebook(args.codebook)
    res = a1_probe(w, compute_channel_rms(x), args.alphas, q, seed=args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    out_csv = os.path.join(args.out_dir, "a1_channels.csv")
    out_json = os.path.join(args.out_dir, "a1_summary.json")
    atomic_write(out_csv, _csv_bytes(["alpha", "channel", "c_j"], res.rows()))
    atomic_write(out_json, canonical_json({"summary": res.summary}) + b"\n")
    _write_manifest(os.path.join(args.out_dir, "manifest.json"), cfg,
                    [args.matrix, args.activations, args.codebook], [out_csv, out_json],
                    {"kind": "a1", "summary": res.summary}, t0)
    for s in res.summary:
        print(f"alpha={s['alpha']:.2f} median={s['median']:.4e} p99={s['p99']:.4e} "
              f"max={s['max']:.4e} clamp_rate={s['clamp_rate']:.4f}")
    return EXIT_OK


def cmd_qq(args, cfg: RunConfig) -> int:
    t0 = time.perf_counter()
    w = read_matrix(args.matrix)
    plan = None if args.no_rotation else plan_rotation(w.shape[1], args.seed)
    r = qq_diagnostic(w, plan, args.pairs, seed=args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    out_csv = os.path.join(args.out_dir, "qq_quantiles.csv")
    step = max(1, len(r.probs) // args.points)
    rows = [(float(r.probs[i]), float(r.magnitude[i, 0]), float(r.magnitude[i, 1]),
             float(r.real[i, 0]), float(r.real[i, 1])) for i in range(0, len(r.probs), step)]
    atomic_write(out_csv, _csv_bytes(["prob", "mag_emp", "mag_rayleigh", "re_emp", "re_gauss"], rows))
    summary = {"kind": "qq", "rotated": plan is not None, "pairs": args.pairs,
               "rayleigh_scale": r.rayleigh_scale, "gaussian_scale": r.gaussian_scale,
               "magnitude_body_dev": r.magnitude_body_dev, "real_body_dev": r.real_body_dev}
    _write_manifest(os.path.join(args.out_dir, "manifest.json"), cfg, [args.matrix], [out_csv], summary, t0)
    print(f"body deviation: |z| {r.magnitude_body_dev:.4f}  Re z {r.real_body_dev:.4f} (fitted-scale units)")
    return EXIT_OK


def _collect_manifests(run_dirs):
    found = []
    for d in run_dirs:
        if not os.path.isdir(d):
            raise UsageError(f"not a directory: {d}")
        for root, _, files in os.walk(d):
            for f in files:
                if f == "manifest.json" or f.endswith(MANIFEST_SUFFIX):
                    p = os.path.join(root, f)
                    tag = os.path.basename(os.path.normpath(d))
                    found.append((os.path.join(tag, os.path.relpath(p, d)), p))
    return sorted(found)


def cmd_report(args, cfg: RunConfig) -> int:
    t0 = time.perf_counter()
    entries = _collect_manifests(args.run_dirs)
    summaries = []
    for rel, p in entries:
        m = json.loads(read_bytes(p))
        s = m.get("summary")
        if s and s.get("kind") != "report":
            summaries.append((rel, s))
    if not summaries:
        raise EmptyReportError("no run manifests found in " + ", ".join(args.run_dirs))
    os.makedirs(args.out_dir, exist_ok=True)
    outs = []
    ladder = [(rel, r) for rel, s in summaries if s["kind"] == "ladder" for r in s["rows"]]
    if ladder:
        keys = ["bits", "d_b", "polar_best", "amp_bits", "phase_bits", "bpw", "bpw_nominal"]
        p = os.path.join(args.out_dir, "ladder.csv")
        atomic_write(p, _csv_bytes(["run"] + keys, [[rel] + [r[k] for k in keys] for rel, r in ladder]))
        outs.append(p)
    codecs = [(rel, s) for rel, s in summaries if s["kind"] in ("encode", "decode")]
    if codecs:
        keys = ["kind", "mode", "bits", "d_out", "d_in", "bpw", "alpha", "rel_frobenius"]
        p = os.path.join(args.out_dir, "codec_runs.csv")
        atomic_write(p, _csv_bytes(["run"] + keys, [[rel] + [s.get(k, "") for k in keys] for rel, s in codecs]))
        outs.append(p)
    a1 = [(rel, r) for rel, s in summaries if s["kind"] == "a1" for r in s["summary"]]
    if a1:
        keys = ["alpha", "median", "p99", "max", "clamp_rate"]
        p = os.path.join(args.out_dir, "a1_summary.csv")
        atomic_write(p, _csv_bytes(["run"] + keys, [[rel] + [r[k] for k in keys] for rel, r in a1]))
        outs.append(p)
    qq = [(rel, s) for rel, s in summaries if s["kind"] == "qq"]
    if qq:
        keys = ["rotated", "pairs", "rayleigh_scale", "gaussian_scale", "magnitude_body_dev", "real_body_dev"]
        p = os.path.join(args.out_dir, "qq_summary.csv")
        atomic_write(p, _csv_bytes(["run"] + keys, [[rel] + [s[k] for k in keys] for rel, s in qq]))
        outs.append(p)
    report = {"runs": [{"run": rel, "summary": s} for rel, s in summaries]}
    p = os.path.join(args.out_dir, "report.json")
    atomic_write(p, canonical_json(report) + b"\n")
    outs.append(p)
    _write_manifest(os.path.join(args.out_dir, "manifest.json"), cfg, [], outs,
                    {"kind": "report", "n_runs": len(summaries)}, t0)
    print(f"aggregated {len(summaries)} runs into {args.out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="qamw", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"qamw {__version__}")
    p.add_argument("--config", help="canonical-JSON file of option defaults for the subcommand")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    subs = {}

    s = sub.add_parser("synth", help="generate a seeded synthetic matrix")
    s.add_argument("--kind", choices=KINDS, default="gaussian")
    s.add_argument("--rows", type=int, default=128)
    s.add_argument("--cols", type=int, default=2048)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--scale", type=float, default=0.02)
    s.add_argument("--nu", type=float, default=4.0)
    s.add_argument("--log-sigma", type=float, default=0.5)
    s.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)
    subs["synth"] = s

    s = sub.add_parser("train-codebook", help="train a joint or polar pair quantizer")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--joint", action="store_true")
    g.add_argument("--polar", action="store_true")
    s.add_argument("--bits", type=int)
    s.add_argument("--amp-bits", type=int)
    s.add_argument("--phase-bits", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--samples", type=int)
    s.add_argument("--tol", type=float, default=1e-6)
    s.add_argument("--max-iter", type=int, default=200)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_codebook)
    subs["train-codebook"] = s

    s = sub.add_parser("encode", help="encode a QWMX matrix")
    s.add_argument("--matrix", required=True)
    s.add_argument("--codebook", required=True)
    s.add_argument("--alpha", type=float)
    s.add_argument("--activations")
    s.add_argument("--seed", type=int, default=0, help="rotation sign-mask seed")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_encode)
    subs["encode"] = s

    s = sub.add_parser("decode", help="decode a QAMW file to a QWMX matrix")
    s.add_argument("--encoded", required=True)
    s.add_argument("--codebook", required=True)
    s.add_argument("--reference", help="original matrix, for the relative error")
    s.add_argument("--max-rel-error", type=float)
    s.add_argument("--dtype", choices=("f32", "f64"), default="f64")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_decode)
    subs["decode"] = s

    s = sub.add_parser("verify", help="run the identity suite and check file integrity")
    s.add_argument("paths", nargs="*")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--json")
    s.add_argument("--skip-identities", action="store_true")
    s.set_defaults(func=cmd_verify)
    subs["verify"] = s

    s = sub.add_parser("ladder", help="train joint codebooks over a bit ladder")
    s.add_argument("--bits", type=int, nargs="+", default=[7, 8, 11])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--d-in", type=int, default=2048)
    s.add_argument("--save-codebooks", action="store_true")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_ladder)
    subs["ladder"] = s

    s = sub.add_parser("a1-probe", help="per-channel scaled-domain residuals across alpha")
    s.add_argument("--matrix", required=True)
    s.add_argument("--activations", required=True)
    s.add_argument("--codebook", required=True)
    s.add_argument("--alphas", type=float, nargs="+", default=list(DEFAULT_ALPHAS))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_a1_probe)
    subs["a1-probe"] = s

    s = sub.add_parser("qq", help="QQ diagnostic of rotated pairs")
    s.add_argument("--matrix", required=True)
    s.add_argument("--pairs", type=int, default=50_000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--points", type=int, default=1000, help="rows kept in the quantile CSV")
    s.add_argument("--no-rotation", action="store_true")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_qq)
    subs["qq"] = s

    s = sub.add_parser("report", help="aggregate run directories into tables")
    s.add_argument("run_dirs", nargs="+")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_report)
    subs["report"] = s
    return p, subs


def _resolve(argv):
    parser, subs = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        with open(known.config, "rb") as f:
            defaults = json.load(f)
        if not isinstance(defaults, dict):
            raise UsageError("config file must hold a JSON object")
        for sp in subs.values():
            sp.set_defaults(**{k.replace("-", "_"): v for k, v in defaults.items()})
    args = parser.parse_args(argv)
    params = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config", "command")}
    return args, RunConfig(command=args.command, params=params)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args, cfg = _resolve(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    except (UsageError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args, cfg)
    except (FormatError, IntegrityError, EmptyReportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except QamwError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
