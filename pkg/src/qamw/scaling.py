"""Activation-aware per-channel scaling and the scaled-domain residual probe."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .codec import calibrate_pair_scales, decode_matrix, encode_matrix
from .errors import DomainError
from .rotation import plan_rotation

CLAMP_LO = 1.0 / 16.0
CLAMP_HI = 16.0
DEFAULT_ALPHAS = (0.0, 0.3, 0.5, 0.8)


@dataclass(frozen=True)
class ChannelRms:
    r: np.ndarray
    n_samples: int


@dataclass(frozen=True)
class ScaleVector:
    s: np.ndarray
    alpha: float
    clamp_lo: float = CLAMP_LO
    clamp_hi: float = CLAMP_HI
    clamp_hits: int = 0


def compute_channel_rms(x) -> ChannelRms:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0 or x.shape[1] == 0:
        raise DomainError(f"activation matrix must be non-empty 2-D, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DomainError("activations contain non-finite values")
    return ChannelRms(r=np.sqrt(np.mean(np.square(x), axis=0)), n_samples=x.shape[0])


def build_scales(rms: ChannelRms, alpha: float, clamp_lo: float = CLAMP_LO,
                 clamp_hi: float = CLAMP_HI) -> ScaleVector:
    """``s_j = r_j^alpha`` normalized to unit geometric mean over live channels,
    then clamped. Zero-RMS channels get ``s_j = 1``."""
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"alpha must be in [0, 1], got {alpha}")
    r = np.asarray(rms.r, dtype=np.float64)
    live = r > 0
    if not live.any():
        raise DomainError("every channel has zero RMS")
    s = np.ones_like(r)
    if alpha != 0.0:
        logr = np.log(r[live])
        s[live] = np.exp(alpha * (logr - logr.mean()))
    hits = int(np.count_nonzero((s < clamp_lo) | (s > clamp_hi)))
    s = np.clip(s, clamp_lo, clamp_hi)
    return ScaleVector(s=s, alpha=float(alpha), clamp_lo=clamp_lo, clamp_hi=clamp_hi, clamp_hits=hits)


def activation_weighted_error(w, w_hat, rms: ChannelRms) -> float:
    """``sum_ij r_j^2 (W - W_hat)_ij^2``."""
    d = np.asarray(w, dtype=np.float64) - np.asarray(w_hat, dtype=np.float64)
    return float(np.sum(np.square(d) * np.square(rms.r)[None, :]))


@dataclass
class ScaledResidual:
    scale: ScaleVector
    e_scaled: np.ndarray  # W D_s - quantized(W D_s)
    w_hat: np.ndarray  # de-scaled reconstruction


def scaled_residual(w, scale: ScaleVector, quantizer, seed: int = 0) -> ScaledResidual:
    """Quantize ``W diag(s)`` (pair scales calibrated in the scaled domain) and
    return the scaled-domain residual and the de-scaled reconstruction."""
    w = np.asarray(w, dtype=np.float64)
    ws = w * scale.s[None, :]
    plan = plan_rotation(w.shape[1], seed)
    scales = calibrate_pair_scales(ws, plan)
    enc = encode_matrix(ws, plan, scales, quantizer)
    ws_hat = decode_matrix(enc, plan, quantizer, scales)
    return ScaledResidual(scale=scale, e_scaled=ws - ws_hat, w_hat=ws_hat / scale.s[None, :])


@dataclass(frozen=True)
class A1ProbeConfig:
    """Default synthetic setting for the A1 probe.

    ``d_in = 2040`` gives a rotation block of 8, so each channel's scaled
    residual depends on its own small block; with a 1024-wide block the error
    is spread evenly and the per-channel tail cannot separate from the median.
    """

    d_out: int = 512
    d_in: int = 2040
    n_act: int = 256
    log_sigma: float = 0.5
    w_seed: int = 0
    x_seed: int = 1
    rotation_seed: int = 0
    alphas: tuple = DEFAULT_ALPHAS

    def inputs(self):
        from .synth import gaussian_matrix, lognormal_activations

        w = gaussian_matrix(self.d_out, self.d_in, self.w_seed)
        x = lognormal_activations(self.n_act, self.d_in, self.x_seed, self.log_sigma)
        return w, compute_channel_rms(x)


@dataclass
class A1Result:
    alphas: list
    c: np.ndarray  # (n_alpha, d_in) per-channel mean squared scaled residual
    clamp_rate: list
    summary: list = field(default_factory=list)

    def rows(self):
        for a, cj in zip(self.alphas, self.c):
            for j, v in enumerate(cj):
                yield a, j, float(v)


def a1_probe(w, rms: ChannelRms, alphas=DEFAULT_ALPHAS, quantizer=None, seed: int = 0,
             workers: int = 1) -> A1Result:
    """Per-channel ``c_j(alpha) = mean_i (E_s)_ij^2`` for each alpha."""
    if quantizer is None:
        raise DomainError("a quantizer is required")
    alphas = [float(a) for a in alphas]
    for a in alphas:
        if not 0.0 <= a <= 1.0:
            raise DomainError(f"alpha must be in [0, 1], got {a}")
    w = np.asarray(w, dtype=np.float64)

    def one(a):
        res = scaled_residual(w, build_scales(rms, a), quantizer, seed)
        return np.mean(np.square(res.e_scaled), axis=0), res.scale.clamp_hits / w.shape[1]

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            out = list(ex.map(one, alphas))
    else:
        out = [one(a) for a in alphas]
    c = np.stack([o[0] for o in out])
    rates = [float(o[1]) for o in out]
    summary = [
        {
            "alpha": a,
            "median": float(np.median(cj)),
            "p99": float(np.percentile(cj, 99)),
            "max": float(np.max(cj)),
            "clamp_rate": rate,
        }
        for a, cj, rate in zip(alphas, c, rates)
    ]
    return A1Result(alphas=alphas, c=c, clamp_rate=rates, summary=summary)
