"""Sign-masked block-Hadamard rotation.

The forward map is ``F @ S`` and the inverse is ``S @ F`` where ``S`` is a
diagonal +/-1 mask and ``F`` is block diagonal with ``H_b / sqrt(b)`` blocks.
Both are applied with an in-place butterfly; no dense matrix is built.

Sign mask generator (portable, bit-exact): SplitMix64. For a seed ``s`` the
i-th draw (i = 0, 1, ...) is ``mix(s + (i + 1) * 0x9E3779B97F4A7C15 mod 2**64)``
with the standard SplitMix64 finalizer, and sign ``i`` is +1 iff the top bit
of draw ``i`` is 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError

MAX_BLOCK = 1024

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def splitmix64(seed: int, count: int) -> np.ndarray:
    """First ``count`` outputs of SplitMix64 seeded with ``seed``."""
    seed = int(seed) & _MASK64
    i = np.arange(1, count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed) + i * _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        z = z ^ (z >> np.uint64(31))
    return z


@dataclass(frozen=True)
class SignMask:
    seed: int
    signs: np.ndarray = field(repr=False, compare=False)

    @classmethod
    def from_seed(cls, seed: int, length: int) -> "SignMask":
        draws = splitmix64(seed, length)
        signs = np.where(draws >> np.uint64(63), -1.0, 1.0)
        signs.setflags(write=False)
        return cls(seed=int(seed) & _MASK64, signs=signs)


@dataclass(frozen=True)
class RotationPlan:
    d_in: int
    block_size: int
    mask: SignMask

    @property
    def seed(self) -> int:
        return self.mask.seed

    @property
    def n_blocks(self) -> int:
        return self.d_in // self.block_size


def largest_pow2_divisor(n: int) -> int:
    return n & -n


def plan_rotation(d_in: int, seed: int, max_block: int = MAX_BLOCK) -> RotationPlan:
    """Block size is the largest power of two dividing ``d_in``, capped at ``max_block``."""
    d_in = int(d_in)
    if d_in < 2 or d_in % 2:
        raise DimensionError(f"row dimension must be even and >= 2, got {d_in}")
    if max_block < 2 or max_block & (max_block - 1):
        raise DimensionError(f"max_block must be a power of two >= 2, got {max_block}")
    b = min(largest_pow2_divisor(d_in), max_block)
    return RotationPlan(d_in=d_in, block_size=b, mask=SignMask.from_seed(seed, d_in))


def fwht(x: np.ndarray, b: int) -> np.ndarray:
    """Normalized Walsh-Hadamard transform over contiguous blocks of size ``b``
    along the last axis. Returns a new array."""
    lead = x.shape[:-1]
    n = x.shape[-1]
    y = np.array(x, dtype=np.float64, copy=True).reshape(-1, n // b, b)
    h = 1
    while h < b:
        v = y.reshape(y.shape[0], y.shape[1], b // (2 * h), 2, h)
        a = v[:, :, :, 0, :].copy()
        c = v[:, :, :, 1, :]
        v[:, :, :, 0, :] += c
        v[:, :, :, 1, :] = a - c
        h *= 2
    y *= 1.0 / np.sqrt(b)
    return y.reshape(*lead, n)


def _check(plan: RotationPlan, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 0 or v.shape[-1] != plan.d_in:
        raise DimensionError(f"expected trailing dimension {plan.d_in}, got {v.shape}")
    return v


def forward_rotate(plan: RotationPlan, v) -> np.ndarray:
    """``F S v``; accepts a vector or a stack of row vectors."""
    v = _check(plan, v)
    return fwht(v * plan.mask.signs, plan.block_size)


def inverse_rotate(plan: RotationPlan, y) -> np.ndarray:
    """``S F y``; exact inverse of :func:`forward_rotate` in real arithmetic."""
    y = _check(plan, y)
    return fwht(y, plan.block_size) * plan.mask.signs


def hadamard_matrix(b: int) -> np.ndarray:
    """Unnormalized Sylvester Hadamard matrix (test oracle only)."""
    h = np.ones((1, 1))
    while h.shape[0] < b:
        h = np.block([[h, h], [h, -h]])
    return h


def dense_forward_matrix(plan: RotationPlan) -> np.ndarray:
    """Explicit ``F S``; only sensible for small ``d_in``."""
    b = plan.block_size
    f = np.kron(np.eye(plan.n_blocks), hadamard_matrix(b) / np.sqrt(b))
    return f @ np.diag(plan.mask.signs)
