"""Closed-form identities and bounds of the codec, checked numerically."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import ndtri

from .codebooks import make_polar
from .codec import trace_encode
from .errors import DimensionError, DomainError
from .rotation import RotationPlan, forward_rotate

# ---------------------------------------------------------------------------
# pair-level identities
# ---------------------------------------------------------------------------


def _as_complex(z) -> np.ndarray:
    z = np.asarray(z)
    if np.iscomplexobj(z):
        return z.astype(np.complex128)
    z = z.astype(np.float64)
    if z.shape[-1] != 2:
        raise DimensionError("real pair input must have a trailing axis of length 2")
    return z[..., 0] + 1j * z[..., 1]


def pairwise_decomposition(z, z_hat):
    """Split ``|z - z_hat|^2`` into ``(a - a_hat)^2`` and ``2 a a_hat (1 - cos dtheta)``.

    Accepts complex numbers or ``(..., 2)`` real arrays; returns
    ``(total, amplitude_term, phase_term)`` with matching shapes.
    """
    z, zh = _as_complex(z), _as_complex(z_hat)
    total = np.abs(z - zh) ** 2
    a, ah = np.abs(z), np.abs(zh)
    amp = (a - ah) ** 2
    phase = 2.0 * a * ah * (1.0 - np.cos(np.angle(z) - np.angle(zh)))
    return total, amp, phase


def cosine_loss_residual(u, u_hat) -> np.ndarray:
    """``(1 - <u, v>) - |u - v|^2 / 2`` with ``v = u_hat / |u_hat|``, per row."""
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    v = np.atleast_2d(np.asarray(u_hat, dtype=np.float64))
    v = v / np.linalg.norm(v, axis=1, keepdims=True)
    return (1.0 - np.sum(u * v, axis=1)) - 0.5 * np.sum(np.square(u - v), axis=1)


# ---------------------------------------------------------------------------
# layer-level identities
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerError:
    frob_direct: float
    trace_form: float
    relative_rmse: float

    @property
    def identity_residual(self) -> float:
        return abs(self.frob_direct - self.trace_form) / max(self.frob_direct, self.trace_form, 1e-300)


def layer_output_error(x, w, w_hat) -> LayerError:
    """``|X W^T - X W_hat^T|_F^2`` computed directly and as ``Tr(dW X^T X dW^T)``."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    w_hat = np.asarray(w_hat, dtype=np.float64)
    if w.shape != w_hat.shape or x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"inconsistent shapes X{x.shape} W{w.shape} W_hat{w_hat.shape}")
    out = x @ w.T
    direct = float(np.sum(np.square(out - x @ w_hat.T)))
    dw = w - w_hat
    m = x.T @ x
    trace = float(np.sum((dw @ m) * dw))
    ref = float(np.linalg.norm(out))
    rel = math.sqrt(direct) / ref if ref > 0 else float("inf")
    return LayerError(frob_direct=direct, trace_form=trace, relative_rmse=rel)


@dataclass(frozen=True)
class ActivationMoments:
    mode: str  # "diagonal" or "full"
    diag: np.ndarray | None = None
    full: np.ndarray | None = None
    n: int = 0
    lambda_max: float | None = None

    @classmethod
    def from_activations(cls, x, mode="full"):
        x = np.asarray(x, dtype=np.float64)
        n = x.shape[0]
        if mode == "diagonal":
            return cls(mode="diagonal", diag=np.mean(np.square(x), axis=0), n=n)
        if mode == "full":
            m = x.T @ x / n
            return cls(mode="full", full=m, n=n, lambda_max=top_eigenvalue(m))
        raise DomainError(f"unknown moment mode {mode!r}")

    @classmethod
    def diagonal(cls, r2, n=0):
        return cls(mode="diagonal", diag=np.asarray(r2, dtype=np.float64), n=n)

    @classmethod
    def from_matrix(cls, m, n=0):
        m = np.asarray(m, dtype=np.float64)
        check_psd(m)
        return cls(mode="full", full=m, n=n, lambda_max=top_eigenvalue(m))

    def quadratic(self, a) -> float:
        """``Tr(A M A^T)``."""
        a = np.asarray(a, dtype=np.float64)
        if self.mode == "diagonal":
            return float(np.sum(np.square(a) * self.diag[None, :]))
        return float(np.sum((a @ self.full) * a))


def amplification_ratio(w, w_hat, moments: ActivationMoments) -> float:
    """``rho_o / rho_w`` with ``rho_o^2 = Tr(dW M dW^T) / Tr(W M W^T)``."""
    w = np.asarray(w, dtype=np.float64)
    dw = w - np.asarray(w_hat, dtype=np.float64)
    ew = float(np.sum(np.square(dw)))
    if ew == 0.0:
        raise DomainError("weight error is zero; amplification ratio undefined")
    rho_w = math.sqrt(ew / float(np.sum(np.square(w))))
    rho_o = math.sqrt(moments.quadratic(dw) / moments.quadratic(w))
    return rho_o / rho_w


# ---------------------------------------------------------------------------
# eigenvalues and the layer constant
# ---------------------------------------------------------------------------


def check_psd(m, tol=1e-10) -> None:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DomainError("moment matrix must be square")
    scale = max(1.0, float(np.max(np.abs(np.diag(m)))) if m.size else 1.0)
    if np.max(np.abs(m - m.T), initial=0.0) > tol * scale:
        raise DomainError("moment matrix is not symmetric")
    try:
        np.linalg.cholesky(m + tol * scale * np.eye(len(m)))
    except np.linalg.LinAlgError:
        raise DomainError("moment matrix is not positive semi-definite") from None


def top_eigenvalue(m, tol=1e-8, seed=0, method="auto", max_iter=100_000) -> float:
    """Largest eigenvalue of a PSD matrix. ``auto`` uses a dense solve below
    dimension 64 and power iteration from a seeded start above."""
    m = np.asarray(m, dtype=np.float64)
    d = len(m)
    if method == "dense" or (method == "auto" and d < 64):
        return float(np.linalg.eigvalsh(m)[-1])
    v = np.random.default_rng(seed).standard_normal(d)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = m @ v
        new = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        if abs(new - lam) <= tol * abs(new):
            return new
        lam = new
    return float(np.linalg.eigvalsh(m)[-1])


def compute_c_w(layers) -> float:
    """``sum_l lambda_max(M_l) |W_l|_F^2`` over ``(W, M)`` pairs."""
    total = 0.0
    for w, m in layers:
        mm = m.full if isinstance(m, ActivationMoments) and m.mode == "full" else m
        if isinstance(mm, ActivationMoments):
            lam = float(np.max(mm.diag))
        else:
            check_psd(mm)
            lam = top_eigenvalue(mm)
        total += lam * float(np.sum(np.square(np.asarray(w, dtype=np.float64))))
    return total


@dataclass(frozen=True)
class CompositeBoundInputs:
    d_b: float
    c_w: float
    lipschitz: float = 1.0
    n_layers: int = 1


def composite_bound(inputs: CompositeBoundInputs) -> float:
    """Quantitative KL envelope ``L^2 L_q C_W D_B / 8``."""
    i = inputs
    return i.lipschitz**2 * i.n_layers * i.c_w * i.d_b / 8.0


# ---------------------------------------------------------------------------
# softmax KL bridge
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KlBridgeResult:
    exact_kl: float
    quadratic_term: float
    cubic_bound: float
    residual: float

    @property
    def within_bound(self) -> bool:
        return self.residual <= self.cubic_bound


def _check_simplex(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or len(p) < 1 or np.any(~(p > 0)) or abs(p.sum() - 1.0) > 1e-9:
        raise DomainError("p must be a strictly positive probability vector")
    return p


def fisher_matrix(p) -> np.ndarray:
    p = _check_simplex(p)
    return np.diag(p) - np.outer(p, p)


def fisher_norm(p) -> float:
    """Largest eigenvalue of ``diag(p) - p p^T``.

    Rank-one downdate: the top eigenvalue lies in ``[p_(2), p_(1)]`` and is the
    root of ``1 = sum_i p_i^2 / (p_i - lam)``, found by bisection.
    """
    p = _check_simplex(p)
    if len(p) == 1:
        return 0.0
    srt = np.sort(p)
    hi, lo = srt[-1], srt[-2]
    if hi == lo:
        return float(hi)

    def g(lam):
        return 1.0 - np.sum(p * p / (p - lam))

    a, b = lo, hi
    for _ in range(200):
        mid = 0.5 * (a + b)
        if mid <= a or mid >= b:
            break
        if g(mid) > 0:
            a = mid
        else:
            b = mid
    return float(0.5 * (a + b))


def kl_softmax_shift(p, delta) -> float:
    """``KL(softmax(f) || softmax(f + delta))`` with ``f = log p``.

    Uses ``KL = log sum_j p_j exp(d_j)`` with ``d = delta - <p, delta>``
    evaluated through ``expm1`` so small shifts keep full relative precision.
    """
    p = _check_simplex(p)
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != p.shape or not np.all(np.isfinite(delta)):
        raise DomainError("delta must be finite with the same shape as p")
    dc = delta - np.dot(p, delta)
    shift = float(np.max(dc))
    if shift > 1.0:
        # large shifts: plain log-sum-exp
        return float(shift + math.log(np.sum(p * np.exp(dc - shift))))
    return float(np.log1p(np.sum(p * (np.expm1(dc) - dc))))


def kl_bridge(p, delta) -> KlBridgeResult:
    p = _check_simplex(p)
    delta = np.asarray(delta, dtype=np.float64)
    exact = kl_softmax_shift(p, delta)
    dc = delta - np.dot(p, delta)
    quad = 0.5 * float(np.dot(p, dc * dc))
    cubic = float(np.linalg.norm(delta)) ** 3 / 3.0
    return KlBridgeResult(exact_kl=exact, quadratic_term=quad, cubic_bound=cubic, residual=abs(exact - quad))


# ---------------------------------------------------------------------------
# distortion reports
# ---------------------------------------------------------------------------


@dataclass
class Residual:
    name: str
    value: float
    tol: float
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = bool(self.value <= self.tol)


@dataclass
class DistortionReport:
    rho_w: float
    rho_o: float | None
    amplification: float | None
    pair_errors: dict
    predictions: dict
    residuals: list

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.residuals)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d


def distortion_report(w, plan: RotationPlan, scales, quantizer, d_b=None,
                      moments: ActivationMoments | None = None) -> DistortionReport:
    """Instrumented encode with error accounting in the rotated domain."""
    w = np.asarray(w, dtype=np.float64)
    t = trace_encode(w, plan, scales, quantizer)
    e = t.pair_errors
    live = t.row_norms > 0
    direction_err = np.sum(np.square(t.u - t.u_tilde), axis=1)
    acc = float(np.max(np.abs(direction_err - e.sum(axis=1)), initial=0.0))
    mse_coord = direction_err / w.shape[1]
    half_mean = 0.5 * np.mean(e, axis=1)
    coord = float(np.max(np.abs(mse_coord - half_mean), initial=0.0))
    cos = cosine_loss_residual(t.u[live], t.u_tilde[live]) if live.any() else np.zeros(1)
    w_hat = t.u_tilde * t.row_norms[:, None]
    dw = w - w_hat
    rho_w = math.sqrt(float(np.sum(dw * dw)) / float(np.sum(w * w)))
    rho_o = amp = None
    if moments is not None:
        rho_o = math.sqrt(moments.quadratic(dw) / moments.quadratic(w))
        amp = rho_o / rho_w if rho_w > 0 else None
    residuals = [
        Residual("rotated_error_accounting", acc, 1e-10),
        Residual("per_coordinate_mse", coord, 1e-10),
        Residual("cosine_loss_identity", float(np.max(np.abs(cos))), 1e-10),
    ]
    predictions = {}
    if d_b is not None:
        predictions = {"weight_mse_ratio": 0.5 * d_b, "rel_frobenius": math.sqrt(0.5 * d_b)}
    return DistortionReport(
        rho_w=rho_w,
        rho_o=rho_o,
        amplification=amp,
        pair_errors={
            "mean": float(e.mean()),
            "max": float(e.max()),
            "mse_coord": float(np.mean(mse_coord)),
            "weight_mse_ratio": rho_w**2,
        },
        predictions=predictions,
        residuals=residuals,
    )


# ---------------------------------------------------------------------------
# circular-Gaussian QQ diagnostic
# ---------------------------------------------------------------------------


@dataclass
class QQResult:
    probs: np.ndarray
    magnitude: np.ndarray  # (n, 2): empirical, fitted Rayleigh
    real: np.ndarray  # (n, 2): empirical, fitted Gaussian
    rayleigh_scale: float
    gaussian_scale: float
    magnitude_body_dev: float
    real_body_dev: float

    @property
    def body_dev(self) -> float:
        return max(self.magnitude_body_dev, self.real_body_dev)


def sample_pairs(w, plan: RotationPlan | None, count: int, seed: int = 0) -> np.ndarray:
    """``count`` pairs drawn without replacement from the unit-normalized
    (and, if ``plan`` is given, rotated) rows."""
    w = np.asarray(w, dtype=np.float64)
    r = np.linalg.norm(w, axis=1)
    u = w[r > 0] / r[r > 0, None]
    if plan is not None:
        u = forward_rotate(plan, u)
    z = u.reshape(-1, 2)
    if count > len(z):
        raise DomainError(f"requested {count} pairs, only {len(z)} available")
    pick = np.random.default_rng(seed).choice(len(z), size=count, replace=False)
    return z[np.sort(pick)]


def qq_diagnostic(w, plan: RotationPlan | None, sample_pairs_count: int = 50_000,
                  seed: int = 0, body: float = 0.98) -> QQResult:
    """Quantiles of ``|z|`` against a Rayleigh fit (scale from the sample mean)
    and of ``Re z`` against a zero-mean Gaussian fit (scale from the sample std).
    Body deviation is the largest quantile gap over the central ``body`` mass,
    in units of the fitted scale."""
    z = sample_pairs(w, plan, sample_pairs_count, seed)
    n = len(z)
    if n < 100:
        raise DomainError("too few pairs for a QQ fit")
    probs = (np.arange(n) + 0.5) / n
    mag = np.sort(np.hypot(z[:, 0], z[:, 1]))
    re = np.sort(z[:, 0])
    s_r = float(np.mean(mag)) / math.sqrt(math.pi / 2)
    s_g = float(np.std(re))
    if not (s_r > 0 and s_g > 0) or np.std(mag) <= 1e-12 * s_r:
        raise DomainError("degenerate sample: cannot fit Rayleigh/Gaussian scale")
    th_mag = s_r * np.sqrt(-2.0 * np.log1p(-probs))
    th_re = s_g * ndtri(probs)
    lo = (1.0 - body) / 2.0
    keep = (probs >= lo) & (probs <= 1.0 - lo)
    return QQResult(
        probs=probs,
        magnitude=np.stack([mag, th_mag], axis=1),
        real=np.stack([re, th_re], axis=1),
        rayleigh_scale=s_r,
        gaussian_scale=s_g,
        magnitude_body_dev=float(np.max(np.abs(mag - th_mag)[keep])) / s_r,
        real_body_dev=float(np.max(np.abs(re - th_re)[keep])) / s_g,
    )


# ---------------------------------------------------------------------------
# rate ladders
# ---------------------------------------------------------------------------


def rate_slope(ladder) -> float:
    """Least-squares slope of ``ln D_B`` against ``B``."""
    pts = list(ladder)
    if len(pts) < 3:
        raise DomainError("need at least 3 ladder points")
    b = np.array([p[0] for p in pts], dtype=np.float64)
    d = np.array([p[1] for p in pts], dtype=np.float64)
    if np.any(d <= 0):
        raise DomainError("distortions must be positive")
    return float(np.polyfit(b, np.log(d), 1)[0])


def polar_splits(bits: int, max_amp_bits: int = 8):
    """Closed-form distortion of every ``(B_a, B_p)`` split with ``B_a + B_p = bits``."""
    out = []
    for ba in range(0, min(bits, max_amp_bits) + 1):
        q = make_polar(ba, bits - ba)
        out.append((ba, bits - ba, q.distortion))
    return out


def best_polar(bits: int):
    """``(B_a, B_p, distortion)`` of the best polar split."""
    return min(polar_splits(bits), key=lambda t: t[2])
