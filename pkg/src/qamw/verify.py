"""Batch identity suite behind ``qamw verify``.

Every check is seeded and returns a :class:`~qamw.analysis.Residual`; the
suite is sized to finish in well under a minute.
"""

from __future__ import annotations

import math

import numpy as np

from .analysis import (
    CompositeBoundInputs,
    Residual,
    composite_bound,
    distortion_report,
    fisher_norm,
    kl_bridge,
    layer_output_error,
    pairwise_decomposition,
    top_eigenvalue,
)
from .codebooks import (
    make_polar,
    phase_eta,
    simulate_distortion,
    train_planar_lloyd,
    train_rayleigh_lloyd,
)
from .codec import (
    EncodedMatrix,
    bits_per_weight,
    calibrate_pair_scales,
    decode_matrix,
    encode,
    encode_matrix,
    pack_indices,
    trace_encode,
    unpack_indices,
)
from .errors import IntegrityError
from .rotation import dense_forward_matrix, forward_rotate, inverse_rotate, plan_rotation
from .scaling import ChannelRms, build_scales


def _rotation_checks(rng, seed):
    iso = rt = dense = 0.0
    for d in (2, 16, 2048, 5632):
        plan = plan_rotation(d, seed)
        v = rng.standard_normal((250, d))
        y = forward_rotate(plan, v)
        nv = np.linalg.norm(v, axis=1)
        iso = max(iso, float(np.max(np.abs(np.linalg.norm(y, axis=1) - nv) / nv)))
        rt = max(rt, float(np.max(np.linalg.norm(inverse_rotate(plan, y) - v, axis=1) / nv)))
    for d in (2, 8, 16, 48, 64):
        plan = plan_rotation(d, seed)
        v = rng.standard_normal((32, d))
        dense = max(dense, float(np.max(np.abs(forward_rotate(plan, v) - v @ dense_forward_matrix(plan).T))))
    return [
        Residual("rotation.isometry", iso, 1e-12),
        Residual("rotation.round_trip", rt, 1e-12),
        Residual("rotation.dense_oracle", dense, 1e-12),
    ]


def _codebook_checks(rng, seed):
    cent = max(abs(cb.m_a - (2.0 - cb.c_lm)) for cb in (train_rayleigh_lloyd(b) for b in range(0, 9)))
    worst = 0.0
    for ba in range(0, 8):
        q = make_polar(ba, 7 - ba)
        mc = simulate_distortion(q, 1_000_000, seed=seed + ba)
        worst = max(worst, abs(mc - q.distortion) / q.distortion)
    d = rng.uniform(-math.pi / 4, math.pi / 4, 1_000_000)
    eta_mc = float(np.mean(1.0 - np.cos(d)))
    return [
        Residual("codebooks.centroid_identity", cent, 1e-6),
        Residual("codebooks.polar_closed_form_vs_mc", worst, 0.01),
        Residual("codebooks.phase_eta_mc", abs(eta_mc - phase_eta(4)), 1e-3),
    ]


def _codec_checks(rng, seed):
    out = []
    cb = train_planar_lloyd(7, seed=seed)
    w = 0.02 * rng.standard_normal((64, 256))
    w[5] = 0.0
    enc, plan, scales = encode(w, cb, seed=seed)
    rep = distortion_report(w, plan, scales, cb, d_b=cb.d_b)
    out.extend(Residual("codec." + r.name, r.value, r.tol) for r in rep.residuals)
    w_hat = decode_matrix(enc, plan, cb, scales)
    out.append(Residual("codec.zero_row_exact", float(np.max(np.abs(w_hat[5]))), 0.0))
    out.append(Residual("codec.shape", float(w_hat.shape != w.shape), 0.0))
    buf = enc.to_bytes()
    out.append(Residual("codec.file_round_trip", float(EncodedMatrix.from_bytes(buf).to_bytes() != buf), 0.0))
    expect = w.shape[0] * math.ceil(w.shape[1] // 2 * cb.bits / 8)
    out.append(Residual("codec.payload_size", float(abs(len(enc.payload) - expect)), 0.0))
    try:
        enc.check_integrity()
        ok = 0.0
    except IntegrityError:
        ok = 1.0
    out.append(Residual("codec.integrity", ok, 0.0))
    # linear response: power-of-two scaling leaves every index unchanged
    sc2 = calibrate_pair_scales(4.0 * w, plan)
    t1, t2 = trace_encode(w, plan, scales, cb), trace_encode(4.0 * w, plan, sc2, cb)
    out.append(Residual("codec.linear_response_indices", float(np.count_nonzero(t1.indices != t2.indices)), 0.0))
    # pack / unpack fuzz
    bad = 0
    for _ in range(1000):
        b = int(rng.choice((7, 8, 11)))
        x = rng.integers(0, 1 << b, size=int(rng.integers(1, 64)))
        bad += int(not np.array_equal(unpack_indices(pack_indices(x, b), len(x), b), x))
    out.append(Residual("codec.pack_fuzz", float(bad), 0.0))
    bpw = max(abs(bits_per_weight(11, 2048, 0) - 5.51), abs(bits_per_weight(7, 2048, 0) - 3.51))
    out.append(Residual("codec.bpw_points", bpw, 0.01))
    # de-scaled error law on a scaled encode
    s = build_scales(ChannelRms(np.exp(0.5 * rng.standard_normal(256)), 1), 0.5).s
    ws = w * s[None, :]
    sc = calibrate_pair_scales(ws, plan)
    e_s = ws - decode_matrix(encode_matrix(ws, plan, sc, cb), plan, cb, sc)
    dw = w - decode_matrix(encode_matrix(w, plan, sc, cb, scale_vec=s), plan, cb, sc)
    law = float(np.max(np.abs(dw - e_s / s[None, :]))) / float(np.max(np.abs(w)))
    out.append(Residual("scaling.descaled_error_law", law, 1e-12))
    out.append(Residual("scaling.alpha0_ones", float(np.max(np.abs(build_scales(ChannelRms(s, 1), 0.0).s - 1))), 0.0))
    return out


def _analysis_checks(rng, seed):
    z = rng.standard_normal((10_000, 2))
    zh = rng.standard_normal((10_000, 2))
    tot, a, p = pairwise_decomposition(z, zh)
    pair = float(np.max(np.abs(tot - a - p)))
    trace = 0.0
    for _ in range(20):
        n, di, do = (int(v) for v in rng.integers(1, 129, size=3))
        x = rng.standard_normal((n, di))
        w = rng.standard_normal((do, di))
        le = layer_output_error(x, w, w + 0.01 * rng.standard_normal((do, di)))
        trace = max(trace, le.identity_residual)
    kl = 0.0
    for v in (2, 10, 1000):
        for _ in range(200):
            p_ = rng.dirichlet(np.ones(v))
            p_ = np.maximum(p_, 1e-300)
            p_ /= p_.sum()
            d = rng.standard_normal(v)
            d *= rng.uniform(0, 1) / np.linalg.norm(d)
            r = kl_bridge(p_, d)
            kl = max(kl, r.residual - r.cubic_bound)
    fn = max(fisher_norm(rng.dirichlet(np.ones(int(rng.integers(2, 50))))) for _ in range(200))
    grid = np.linspace(1e-5, 1e-2, 20)
    u = np.array([[composite_bound(CompositeBoundInputs(db, cw)) for cw in grid * 1e3] for db in grid])
    mono = float(np.sum(np.diff(u, axis=0) < 0) + np.sum(np.diff(u, axis=1) < 0))
    m = rng.standard_normal((200, 32))
    m = m.T @ m / 200
    eig = abs(top_eigenvalue(m, method="power", seed=seed) - np.linalg.eigvalsh(m)[-1]) / np.linalg.eigvalsh(m)[-1]
    return [
        Residual("analysis.pairwise_decomposition", pair, 1e-12),
        Residual("analysis.trace_identity", trace, 1e-8),
        Residual("analysis.kl_bridge_excess", max(kl, 0.0), 0.0),
        Residual("analysis.fisher_norm_excess", max(fn - 0.5, 0.0), 0.0),
        Residual("analysis.composite_monotone_violations", mono, 0.0),
        Residual("analysis.power_vs_dense_eig", float(eig), 1e-6),
    ]


def run_identity_suite(seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    out = []
    for part in (_rotation_checks, _codebook_checks, _codec_checks, _analysis_checks):
        out.extend(part(rng, seed))
    return out
