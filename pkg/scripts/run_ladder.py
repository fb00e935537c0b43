"""Distortion ladder: trained joint D_B against the best polar split and the
high-rate prediction, over a range of bits per pair."""

import argparse
import csv
import math
import os
import time
from dataclasses import asdict, dataclass

from qamw.analysis import best_polar, rate_slope
from qamw.codebooks import train_planar_lloyd, zador_gaussian_prediction, zador_prediction
from qamw.codec import bits_per_weight
from qamw.formats import atomic_write, canonical_json, write_codebook


@dataclass
class LadderConfig:
    bits: tuple = (7, 8, 9, 10, 11, 12)
    seed: int = 0
    d_in: int = 2048
    out_dir: str = "results/ladder"
    save_codebooks: bool = False


def run(cfg: LadderConfig):
    os.makedirs(cfg.out_dir, exist_ok=True)
    rows = []
    for b in cfg.bits:
        t0 = time.perf_counter()
        cb = train_planar_lloyd(b, seed=cfg.seed)
        secs = time.perf_counter() - t0
        ba, bp, pd = best_polar(b)
        rows.append({
            "bits": b, "d_b": cb.d_b, "polar_best": pd, "polar_split": f"{ba}+{bp}",
            "zador_no_source_factor": zador_prediction(b), "zador_gaussian": zador_gaussian_prediction(b),
            "bpw": bits_per_weight(b, cfg.d_in), "iterations": cb.train_meta["iterations"],
            "converged": cb.train_meta["converged"], "train_seconds": round(secs, 2),
        })
        if cfg.save_codebooks:
            write_codebook(os.path.join(cfg.out_dir, f"joint_b{b}.qamc"), cb)
        r = rows[-1]
        print(f"B={b:2d} D_B={r['d_b']:.4e} polar {r['polar_split']}={pd:.4e} "
              f"high-rate={r['zador_gaussian']:.4e} bpw={r['bpw']:.4f} ({secs:.1f}s)", flush=True)
    with open(os.path.join(cfg.out_dir, "ladder.csv"), "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    summary = {"config": asdict(cfg), "rows": rows}
    if len(rows) >= 3:
        summary["slope"] = rate_slope([(r["bits"], r["d_b"]) for r in rows])
        print(f"slope of ln D_B per bit: {summary['slope']:.4f} (-ln 2 = {-math.log(2):.4f})")
    atomic_write(os.path.join(cfg.out_dir, "summary.json"), canonical_json(summary) + b"\n")


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--bits", type=int, nargs="+", default=list(LadderConfig.bits))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--d-in", type=int, default=2048)
    p.add_argument("--out-dir", default=LadderConfig.out_dir)
    p.add_argument("--save-codebooks", action="store_true")
    a = p.parse_args()
    run(LadderConfig(tuple(a.bits), a.seed, a.d_in, a.out_dir, a.save_codebooks))


if __name__ == "__main__":
    main()
