"""Seeded synthetic weight and activation matrices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError

KINDS = ("gaussian", "studentt", "lognormal-rms-activations")


@dataclass(frozen=True)
class SynthConfig:
    kind: str = "gaussian"
    rows: int = 128
    cols: int = 2048
    seed: int = 0
    scale: float = 0.02
    nu: float = 4.0
    log_sigma: float = 0.5


def gaussian_matrix(rows, cols, seed, scale=0.02) -> np.ndarray:
    return scale * np.random.default_rng(seed).standard_normal((rows, cols))


def studentt_matrix(rows, cols, seed, nu=4.0, scale=0.02) -> np.ndarray:
    return scale * np.random.default_rng(seed).standard_t(nu, size=(rows, cols))


def lognormal_activations(n, d, seed, log_sigma=0.5) -> np.ndarray:
    """``X_tj = g_j * N(0, 1)`` with channel gains ``g_j = exp(log_sigma * N(0, 1))``."""
    rng = np.random.default_rng(seed)
    gains = np.exp(log_sigma * rng.standard_normal(d))
    return rng.standard_normal((n, d)) * gains[None, :]


def generate(cfg: SynthConfig) -> np.ndarray:
    if cfg.rows < 1 or cfg.cols < 1:
        raise DomainError("dimensions must be positive")
    if cfg.kind == "gaussian":
        return gaussian_matrix(cfg.rows, cfg.cols, cfg.seed, cfg.scale)
    if cfg.kind == "studentt":
        return studentt_matrix(cfg.rows, cfg.cols, cfg.seed, cfg.nu, cfg.scale)
    if cfg.kind == "lognormal-rms-activations":
        return lognormal_activations(cfg.rows, cfg.cols, cfg.seed, cfg.log_sigma)
    raise DomainError(f"unknown synthetic kind {cfg.kind!r}; expected one of {KINDS}")


def excess_kurtosis(a) -> float:
    x = np.asarray(a, dtype=np.float64).ravel()
    x = x - x.mean()
    v = np.mean(x * x)
    return float(np.mean(x**4) / (v * v) - 3.0)
