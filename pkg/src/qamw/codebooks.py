"""Pair quantizers: Rayleigh Lloyd-Max amplitude levels, uniform phase bins and
a joint planar Lloyd codebook, plus their distortion statistics.

Every quantizer exposes ``bits``, ``encode(points) -> indices`` and
``decode(indices) -> points`` over ``(n, 2)`` arrays of normalized pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.linalg import solve_banded
from scipy.spatial import cKDTree
from scipy.special import erf

from .errors import DomainError, EncodingError

R_MAX = 8.0
SQRT_HALF_PI = math.sqrt(math.pi / 2)

# hexagonal lattice normalized second moment
G2_HEX = 5.0 / (36.0 * math.sqrt(3.0))


# ---------------------------------------------------------------------------
# Rayleigh amplitude codebook
# ---------------------------------------------------------------------------

def _rayleigh_p(r):
    return np.exp(-0.5 * np.square(r))


def _rayleigh_m1(r):
    # antiderivative of r * (r exp(-r^2/2))
    return -r * np.exp(-0.5 * np.square(r)) + SQRT_HALF_PI * erf(r / math.sqrt(2.0))


def _rayleigh_m2(r):
    # antiderivative of r^2 * (r exp(-r^2/2))
    return -(np.square(r) + 2.0) * np.exp(-0.5 * np.square(r))


def rayleigh_cell_moments(edges):
    """Zeroth, first and second moments of the unit Rayleigh density over the
    cells ``[edges[i], edges[i+1]]``."""
    edges = np.asarray(edges, dtype=np.float64)
    p = _rayleigh_p(edges[:-1]) - _rayleigh_p(edges[1:])
    m1 = _rayleigh_m1(edges[1:]) - _rayleigh_m1(edges[:-1])
    m2 = _rayleigh_m2(edges[1:]) - _rayleigh_m2(edges[:-1])
    return p, m1, m2


def _cell_edges(levels, r_max):
    mids = 0.5 * (levels[1:] + levels[:-1])
    return np.concatenate([[0.0], mids, [r_max]])


def amplitude_stats(levels, r_max=R_MAX):
    """(C_LM, M_a) of a nearest-level quantizer with the given levels, Rayleigh
    source truncated to ``[0, r_max]``."""
    levels = np.asarray(levels, dtype=np.float64)
    p, m1, m2 = rayleigh_cell_moments(_cell_edges(levels, r_max))
    c_lm = float(np.sum(m2 - 2.0 * levels * m1 + np.square(levels) * p))
    m_a = float(np.sum(levels * m1))
    return c_lm, m_a


@dataclass(frozen=True)
class AmplitudeCodebook:
    levels: np.ndarray  # float32, ascending
    c_lm: float
    m_a: float
    r_max: float = R_MAX
    train_meta: dict = field(default_factory=dict, compare=False)

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def bits(self) -> int:
        return int(self.n_levels).bit_length() - 1

    @property
    def boundaries(self) -> np.ndarray:
        lv = self.levels.astype(np.float64)
        return 0.5 * (lv[1:] + lv[:-1])

    def encode(self, amplitudes) -> np.ndarray:
        return np.searchsorted(self.boundaries, amplitudes, side="left").astype(np.int64)

    def decode(self, idx) -> np.ndarray:
        return self.levels.astype(np.float64)[idx]


def _lloyd_map(levels, r_max):
    edges = _cell_edges(levels, r_max)
    p, m1, _ = rayleigh_cell_moments(edges)
    return m1 / p, edges, p


def _newton_step(levels, r_max):
    """One Newton step on ``T(q) - q = 0`` where ``T`` is the Lloyd map; its
    Jacobian is tridiagonal since each centroid sees only its two edges."""
    t, edges, p = _lloyd_map(levels, r_max)
    dens = edges * np.exp(-0.5 * np.square(edges))
    lo, hi = edges[:-1], edges[1:]
    d_lo = dens[:-1] * (t - lo) / p  # d t_i / d lower edge
    d_hi = dens[1:] * (hi - t) / p  # d t_i / d upper edge
    n = len(levels)
    # edges 0 and r_max are fixed
    d_lo[0] = 0.0
    d_hi[-1] = 0.0
    sub = 0.5 * d_lo[1:]
    sup = 0.5 * d_hi[:-1]
    diag = 0.5 * (d_lo + d_hi) - 1.0
    ab = np.zeros((3, n))
    ab[0, 1:] = sup
    ab[1] = diag
    ab[2, :-1] = sub
    return levels - solve_banded((1, 1), ab, t - levels)


def train_rayleigh_lloyd(bits: int, r_max: float = R_MAX, tol: float = 1e-10,
                         max_iter: int = 10_000) -> AmplitudeCodebook:
    """Lloyd-Max levels for the unit Rayleigh density ``r exp(-r^2/2)``.

    Cell integrals use closed-form antiderivatives on ``[0, r_max]``. Plain
    Lloyd steps are interleaved with Newton steps on the same fixed point;
    a Newton step is kept only if it shrinks the Lloyd residual. Stops when the
    Lloyd residual ``max |T(q) - q|`` drops below ``tol``.
    """
    if not 0 <= bits <= 8:
        raise DomainError(f"amplitude bits must be in [0, 8], got {bits}")
    if tol <= 0:
        raise DomainError("tol must be positive")
    n = 1 << bits
    # start at Rayleigh quantiles
    u = (np.arange(n) + 0.5) / n
    levels = np.sqrt(-2.0 * np.log1p(-u))
    converged = False
    it = 0
    t, _, _ = _lloyd_map(levels, r_max)
    resid = float(np.max(np.abs(t - levels)))
    while it < max_iter:
        if resid < tol:
            converged = True
            break
        it += 1
        cand = _newton_step(levels, r_max) if n > 1 else t
        ok = np.all(np.isfinite(cand)) and np.all(np.diff(cand) > 0) and cand[0] > 0 and cand[-1] < r_max
        if ok:
            tc, _, _ = _lloyd_map(cand, r_max)
            rc = float(np.max(np.abs(tc - cand)))
            if rc < resid:
                levels, t, resid = cand, tc, rc
                continue
        levels = t
        t, _, _ = _lloyd_map(levels, r_max)
        resid = float(np.max(np.abs(t - levels)))
    # final centroid update so levels satisfy the centroid condition
    levels = t
    stored = levels.astype(np.float32)
    c_lm, m_a = amplitude_stats(stored, r_max)
    meta = {"iterations": it, "final_residual": resid, "converged": converged}
    return AmplitudeCodebook(levels=stored, c_lm=c_lm, m_a=m_a, r_max=r_max, train_meta=meta)


# ---------------------------------------------------------------------------
# Phase quantizer
# ---------------------------------------------------------------------------

def phase_eta(n_p: int) -> float:
    """Expected ``1 - cos(delta)`` for phase error uniform on one bin."""
    if n_p < 1:
        raise DomainError(f"phase level count must be >= 1, got {n_p}")
    h = math.pi / n_p
    if n_p == 1:
        return 1.0
    return 1.0 - math.sin(h) / h


@dataclass(frozen=True)
class PhaseQuantizer:
    """Uniform phase bins ``[2kh, 2(k+1)h)`` with centers ``(2k+1)h``, ``h = pi/N_p``."""

    bits: int

    @property
    def n_bins(self) -> int:
        return 1 << self.bits

    @property
    def eta(self) -> float:
        return phase_eta(self.n_bins)

    @property
    def centers(self) -> np.ndarray:
        return (2 * np.arange(self.n_bins) + 1) * (math.pi / self.n_bins)

    def encode(self, theta) -> np.ndarray:
        t = np.mod(np.asarray(theta, dtype=np.float64), 2 * math.pi)
        k = np.floor(t * (self.n_bins / (2 * math.pi))).astype(np.int64)
        return np.clip(k, 0, self.n_bins - 1)

    def decode(self, idx) -> np.ndarray:
        return self.centers[idx]


@dataclass(frozen=True)
class PolarQuantizer:
    """Independent amplitude and phase coding. Index layout: amplitude index in
    the high ``B_a`` bits, phase index in the low ``B_p`` bits."""

    amp: AmplitudeCodebook
    phase: PhaseQuantizer
    train_seed: int = 0

    @property
    def bits(self) -> int:
        return self.amp.bits + self.phase.bits

    def encode(self, points) -> np.ndarray:
        pts = _as_points(points)
        a = np.hypot(pts[:, 0], pts[:, 1])
        th = np.arctan2(pts[:, 1], pts[:, 0])
        return (self.amp.encode(a) << self.phase.bits) | self.phase.encode(th)

    def decode(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        a = self.amp.decode(idx >> self.phase.bits)
        th = self.phase.decode(idx & ((1 << self.phase.bits) - 1))
        return np.stack([a * np.cos(th), a * np.sin(th)], axis=-1)

    @property
    def distortion(self) -> float:
        return polar_pair_distortion(self.amp, self.phase, 1.0)


def polar_pair_distortion(amp: AmplitudeCodebook, phase: PhaseQuantizer, sigma: float) -> float:
    """Closed-form expected per-pair MSE ``sigma^2 [C + 2 (2 - C) eta]`` for a
    circular Gaussian pair with per-coordinate scale ``sigma``."""
    if not sigma > 0:
        raise DomainError("sigma must be positive")
    c = amp.c_lm
    return sigma * sigma * (c + 2.0 * (2.0 - c) * phase.eta)


def make_polar(amp_bits: int, phase_bits: int) -> PolarQuantizer:
    return PolarQuantizer(train_rayleigh_lloyd(amp_bits), PhaseQuantizer(phase_bits))


# ---------------------------------------------------------------------------
# Joint planar codebook
# ---------------------------------------------------------------------------

def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts.reshape(1, 2)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise EncodingError(f"expected (n, 2) points, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise EncodingError("non-finite point")
    return pts


def nearest_bruteforce(centroids, points) -> np.ndarray:
    """Linear scan; ties go to the lowest index."""
    c = np.asarray(centroids, dtype=np.float64)
    pts = _as_points(points)
    out = np.empty(len(pts), dtype=np.int64)
    chunk = max(1, 2**22 // max(len(c), 1))
    for s in range(0, len(pts), chunk):
        p = pts[s:s + chunk]
        d = np.square(p[:, None, 0] - c[None, :, 0]) + np.square(p[:, None, 1] - c[None, :, 1])
        out[s:s + chunk] = np.argmin(d, axis=1)
    return out


@dataclass(frozen=True)
class PlanarCodebook:
    bits: int
    centroids: np.ndarray  # (2^B, 2) float32
    d_b: float
    train_seed: int
    train_meta: dict = field(default_factory=dict, compare=False)

    @cached_property
    def _c64(self) -> np.ndarray:
        return self.centroids.astype(np.float64)

    @cached_property
    def _tree(self) -> cKDTree:
        return cKDTree(self._c64)

    def encode(self, points) -> np.ndarray:
        pts = _as_points(points)
        c = self._c64
        if len(c) == 1:
            return np.zeros(len(pts), dtype=np.int64)
        _, nn = self._tree.query(pts, k=2)
        i0, i1 = nn[:, 0], nn[:, 1]
        d0 = np.square(pts[:, 0] - c[i0, 0]) + np.square(pts[:, 1] - c[i0, 1])
        d1 = np.square(pts[:, 0] - c[i1, 0]) + np.square(pts[:, 1] - c[i1, 1])
        take1 = (d1 < d0) | ((d1 == d0) & (i1 < i0))
        return np.where(take1, i1, i0).astype(np.int64)

    def decode(self, idx) -> np.ndarray:
        return self._c64[np.asarray(idx, dtype=np.int64)]


def nearest_centroid(codebook: PlanarCodebook, point) -> int:
    return int(codebook.encode(point)[0])


def circular_gaussian(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal((n, 2))


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = np.empty((k, 2))
    centers[0] = x[rng.integers(n)]
    d2 = np.sum(np.square(x - centers[0]), axis=1)
    for j in range(1, k):
        cum = np.cumsum(d2)
        i = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
        centers[j] = x[min(i, n - 1)]
        np.minimum(d2, np.sum(np.square(x - centers[j]), axis=1), out=d2)
    return centers


def lloyd_2d(x: np.ndarray, centers: np.ndarray, tol: float, max_iter: int):
    """Plain Lloyd iterations on a fixed sample. Empty cells move to the sample
    point with the largest current error. Returns (centers, meta)."""
    k = len(centers)
    c = centers.copy()
    history = []
    converged = False
    rel = float("inf")
    for _ in range(max_iter):
        dist, idx = cKDTree(c).query(x)
        obj = float(np.mean(np.square(dist)))
        if history:
            rel = (history[-1] - obj) / history[-1] if history[-1] > 0 else 0.0
        history.append(obj)
        if len(history) > 1 and rel < tol:
            converged = True
            break
        cnt = np.bincount(idx, minlength=k)
        sx = np.bincount(idx, weights=x[:, 0], minlength=k)
        sy = np.bincount(idx, weights=x[:, 1], minlength=k)
        live = cnt > 0
        c[live, 0] = sx[live] / cnt[live]
        c[live, 1] = sy[live] / cnt[live]
        empty = np.flatnonzero(~live)
        if len(empty):
            worst = np.argsort(-dist, kind="stable")[: len(empty)]
            c[empty] = x[worst]
    meta = {
        "iterations": len(history),
        "final_rel_improvement": rel,
        "converged": converged,
        "objective": history,
    }
    return c, meta


def train_planar_lloyd(bits: int, sample_count: int | None = None, seed: int = 0,
                       tol: float = 1e-6, max_iter: int = 200, init=None,
                       heldout_count: int | None = None, symmetrize: bool = False) -> PlanarCodebook:
    """Lloyd codebook with ``2^bits`` points for the unit circular Gaussian,
    trained on a seeded sample; ``d_b`` is measured on a fresh seeded sample.

    ``symmetrize`` replaces the sample by the orbit of its first
    ``sample_count // 8`` points under the symmetry group of the square, so a
    symmetric ``init`` stays symmetric through every Lloyd step."""
    if not 0 <= bits <= 12:
        raise DomainError(f"planar bits must be in [0, 12], got {bits}")
    k = 1 << bits
    if sample_count is None:
        sample_count = k * 256
    if sample_count < k * 256:
        raise DomainError(f"sample_count must be >= {k * 256}")
    heldout_count = sample_count if heldout_count is None else heldout_count
    x = circular_gaussian(sample_count, np.random.default_rng([seed, 0]))
    if symmetrize:
        b = x[: sample_count // 8]
        sw = b[:, ::-1]
        x = np.concatenate([b * sg for sg in ((1, 1), (-1, 1), (1, -1), (-1, -1))]
                           + [sw * sg for sg in ((1, 1), (-1, 1), (1, -1), (-1, -1))])
    if init is None:
        pool = x[: min(sample_count, 32 * k)]
        init = _kmeanspp(pool, k, np.random.default_rng([seed, 2]))
    init = np.asarray(init, dtype=np.float64)
    if init.shape != (k, 2):
        raise DomainError(f"init must have shape ({k}, 2)")
    c, meta = lloyd_2d(x, init, tol, max_iter)
    stored = c.astype(np.float32)
    held = circular_gaussian(heldout_count, np.random.default_rng([seed, 1]))
    d, _ = cKDTree(stored.astype(np.float64)).query(held)
    return PlanarCodebook(bits=bits, centroids=stored, d_b=float(np.mean(np.square(d))),
                          train_seed=int(seed), train_meta=meta)


def zador_prediction(bits: int) -> float:
    """``2 G(2) 2^-B``, the high-rate per-pair figure without the source factor."""
    return 2.0 * G2_HEX * 2.0 ** -bits


def zador_gaussian_prediction(bits: int) -> float:
    """High-rate per-pair MSE for the unit circular Gaussian:
    ``2 G(2) (int sqrt f)^2 2^-B`` with ``(int sqrt f)^2 = 8 pi``."""
    return 2.0 * G2_HEX * 8.0 * math.pi * 2.0 ** -bits


def simulate_distortion(quantizer, n: int, seed: int, sigma: float = 1.0) -> float:
    """Monte-Carlo per-pair MSE of ``quantizer`` on a circular Gaussian of scale ``sigma``."""
    z = sigma * circular_gaussian(n, np.random.default_rng(seed))
    zh = sigma * quantizer.decode(quantizer.encode(z / sigma))
    return float(np.mean(np.sum(np.square(z - zh), axis=1)))
