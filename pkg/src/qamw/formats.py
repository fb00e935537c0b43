"""Binary containers and canonical JSON.

QWMX matrix container (little-endian)::

    0   4  magic  b"QWMX"
    4   1  version (1)
    5   1  dtype tag: 0 = float32, 1 = float64
    6   2  reserved, zero
    8   4  d_out  uint32
    12  4  d_in   uint32
    16  .. row-major values

QAMC codebook file (little-endian)::

    0   4  magic  b"QAMC"
    4   1  version (1)
    5   1  kind: 0 amplitude, 1 phase, 2 planar, 3 polar (amplitude + phase)
    6   1  bits (B for planar, B_a for amplitude/polar, B_p for phase)
    7   1  aux bits (B_p for polar, else 0)
    8   4  value count uint32 (levels, or 2 * centroids for planar)
    12  .. values float32
    ..  1  stat count n
    ..  8n stats float64 (amplitude/polar: C_LM, M_a, r_max; planar: D_B)
    ..  8  training seed uint64 (trailing)
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
import tempfile

import numpy as np

from .codebooks import (
    AmplitudeCodebook,
    PhaseQuantizer,
    PlanarCodebook,
    PolarQuantizer,
)
from .errors import FormatError

MATRIX_MAGIC = b"QWMX"
CODEBOOK_MAGIC = b"QAMC"
VERSION = 1

KIND_AMPLITUDE, KIND_PHASE, KIND_PLANAR, KIND_POLAR = 0, 1, 2, 3

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


# ---------------------------------------------------------------------------
# canonical JSON
# ---------------------------------------------------------------------------

def _canon(obj) -> str:
    if obj is None or obj is True or obj is False:
        return json.dumps(obj)
    if isinstance(obj, (bool, np.bool_)):
        return json.dumps(bool(obj))
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            raise ValueError(f"non-finite float in canonical JSON: {x}")
        return format(x, ".17g")
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=True)
    if isinstance(obj, dict):
        items = sorted((str(k), v) for k, v in obj.items())
        return "{" + ",".join(json.dumps(k) + ":" + _canon(v) for k, v in items) + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        return "[" + ",".join(_canon(v) for v in obj) + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def canonical_json(obj) -> bytes:
    """Sorted keys, no whitespace, floats with 17 significant digits."""
    return _canon(obj).encode("ascii")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def atomic_write(path, data: bytes) -> None:
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_bytes(path) -> bytes:
    with open(path, "rb") as f:
        return f.read()


# ---------------------------------------------------------------------------
# QWMX matrices
# ---------------------------------------------------------------------------

def matrix_to_bytes(a, dtype="f32") -> bytes:
    a = np.asarray(a)
    if a.ndim != 2:
        raise FormatError("matrix must be 2-D")
    tag = {"f32": 0, "f64": 1}[dtype]
    head = MATRIX_MAGIC + struct.pack("<BBHII", VERSION, tag, 0, a.shape[0], a.shape[1])
    return head + np.ascontiguousarray(a, dtype=_DTYPES[tag]).tobytes()


def matrix_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 16 or buf[:4] != MATRIX_MAGIC:
        raise FormatError("not a QWMX matrix container")
    version, tag, _, d_out, d_in = struct.unpack_from("<BBHII", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported QWMX version {version}")
    if tag not in _DTYPES:
        raise FormatError(f"unknown dtype tag {tag}")
    dt = _DTYPES[tag]
    need = 16 + d_out * d_in * dt.itemsize
    if len(buf) != need:
        raise FormatError(f"QWMX size mismatch: expected {need} bytes, got {len(buf)}")
    return np.frombuffer(buf, dtype=dt, offset=16).reshape(d_out, d_in).astype(np.float64)


def write_matrix(path, a, dtype="f32") -> None:
    atomic_write(path, matrix_to_bytes(a, dtype))


def read_matrix(path) -> np.ndarray:
    return matrix_from_bytes(read_bytes(path))


# ---------------------------------------------------------------------------
# QAMC codebooks
# ---------------------------------------------------------------------------

def codebook_to_bytes(cb) -> bytes:
    if isinstance(cb, PlanarCodebook):
        kind, bits, aux = KIND_PLANAR, cb.bits, 0
        values = cb.centroids.reshape(-1)
        stats = [cb.d_b]
        seed = cb.train_seed
    elif isinstance(cb, PolarQuantizer):
        kind, bits, aux = KIND_POLAR, cb.amp.bits, cb.phase.bits
        values = cb.amp.levels
        stats = [cb.amp.c_lm, cb.amp.m_a, cb.amp.r_max]
        seed = cb.train_seed
    elif isinstance(cb, AmplitudeCodebook):
        kind, bits, aux = KIND_AMPLITUDE, cb.bits, 0
        values = cb.levels
        stats = [cb.c_lm, cb.m_a, cb.r_max]
        seed = 0
    elif isinstance(cb, PhaseQuantizer):
        kind, bits, aux = KIND_PHASE, cb.bits, 0
        values = np.zeros(0, np.float32)
        stats = [cb.eta]
        seed = 0
    else:
        raise TypeError(f"not a codebook: {type(cb).__name__}")
    values = np.ascontiguousarray(values, dtype="<f4")
    out = CODEBOOK_MAGIC + struct.pack("<BBBBI", VERSION, kind, bits, aux, len(values))
    out += values.tobytes()
    out += struct.pack("<B", len(stats)) + struct.pack(f"<{len(stats)}d", *stats)
    out += struct.pack("<Q", int(seed) & ((1 << 64) - 1))
    return out


def codebook_from_bytes(buf: bytes):
    if len(buf) < 12 or buf[:4] != CODEBOOK_MAGIC:
        raise FormatError("not a QAMC codebook")
    version, kind, bits, aux, count = struct.unpack_from("<BBBBI", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported QAMC version {version}")
    off = 12
    if len(buf) < off + 4 * count + 1:
        raise FormatError("truncated QAMC codebook")
    values = np.frombuffer(buf, dtype="<f4", count=count, offset=off).astype(np.float32)
    off += 4 * count
    (n_stats,) = struct.unpack_from("<B", buf, off)
    off += 1
    if len(buf) != off + 8 * n_stats + 8:
        raise FormatError("QAMC size mismatch")
    stats = struct.unpack_from(f"<{n_stats}d", buf, off)
    off += 8 * n_stats
    (seed,) = struct.unpack_from("<Q", buf, off)
    if kind == KIND_PLANAR:
        if count != 2 << bits:
            raise FormatError("planar centroid count does not match bits")
        return PlanarCodebook(bits=bits, centroids=values.reshape(-1, 2), d_b=stats[0], train_seed=seed)
    if kind in (KIND_AMPLITUDE, KIND_POLAR):
        if count != 1 << bits or n_stats < 3:
            raise FormatError("amplitude level count does not match bits")
        amp = AmplitudeCodebook(levels=values, c_lm=stats[0], m_a=stats[1], r_max=stats[2])
        if kind == KIND_AMPLITUDE:
            return amp
        return PolarQuantizer(amp=amp, phase=PhaseQuantizer(aux), train_seed=seed)
    if kind == KIND_PHASE:
        return PhaseQuantizer(bits)
    raise FormatError(f"unknown codebook kind {kind}")


def write_codebook(path, cb) -> None:
    atomic_write(path, codebook_to_bytes(cb))


def read_codebook(path):
    return codebook_from_bytes(read_bytes(path))
