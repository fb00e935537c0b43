"""Per-channel scaled-domain residuals c_j(alpha) on the default synthetic
setting, plus the activation-weighted error at each alpha."""

import argparse
import csv
import os
from dataclasses import asdict, replace

import numpy as np

from qamw.codebooks import train_planar_lloyd
from qamw.formats import atomic_write, canonical_json
from qamw.scaling import A1ProbeConfig, a1_probe, activation_weighted_error, build_scales, scaled_residual


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--bits", type=int, default=11)
    p.add_argument("--d-in", type=int, default=A1ProbeConfig.d_in)
    p.add_argument("--log-sigma", type=float, default=A1ProbeConfig.log_sigma)
    p.add_argument("--out-dir", default="results/a1")
    a = p.parse_args()

    cfg = replace(A1ProbeConfig(), d_in=a.d_in, log_sigma=a.log_sigma)
    w, rms = cfg.inputs()
    cb = train_planar_lloyd(a.bits, seed=0)
    res = a1_probe(w, rms, cfg.alphas, cb, seed=cfg.rotation_seed, workers=len(cfg.alphas))
    base = res.summary[0]
    os.makedirs(a.out_dir, exist_ok=True)
    with open(os.path.join(a.out_dir, "a1_channels.csv"), "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["alpha", "channel", "r_j", "c_j"])
        for alpha, j, c in res.rows():
            wr.writerow([alpha, j, rms.r[j], c])
    weighted = []
    for alpha in cfg.alphas:
        sr = scaled_residual(w, build_scales(rms, alpha), cb, cfg.rotation_seed)
        weighted.append(activation_weighted_error(w, sr.w_hat, rms))
    for s, e in zip(res.summary, weighted):
        s["activation_weighted_error"] = e
        print(f"alpha={s['alpha']:.1f}  median x{s['median'] / base['median']:.3f}  "
              f"max x{s['max'] / base['max']:.2f}  clamp={s['clamp_rate']:.3f}  "
              f"weighted err x{e / weighted[0]:.3f}")
    spread = np.percentile(rms.r, 95) / np.percentile(rms.r, 5)
    out = {"config": asdict(cfg), "bits": a.bits, "rms_p95_over_p5": spread, "summary": res.summary}
    atomic_write(os.path.join(a.out_dir, "a1_summary.json"), canonical_json(out) + b"\n")


if __name__ == "__main__":
    main()
