"""Weight-matrix encoder/decoder.

Per row: store the norm as binary16, rotate the unit direction, split into
adjacent pairs, divide by calibrated pair scales, quantize each pair to a
``B``-bit index and bit-pack the indices MSB-first with every row padded to a
byte boundary.

QAMW encoded file (little-endian)::

    0   4  magic b"QAMW"
    4   1  version (1)
    5   3  reserved, zero
    8   4  manifest length m (uint32)
    12  m  manifest, canonical JSON
    ..     row norms, d_out * binary16
    ..     payload, d_out * row_bytes
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import __version__
from .codebooks import PlanarCodebook, PolarQuantizer
from .errors import CalibrationError, DimensionError, EncodingError, FormatError, IntegrityError
from .formats import canonical_json, codebook_to_bytes, sha256_hex
from .rotation import RotationPlan, forward_rotate, inverse_rotate, plan_rotation

ENCODED_MAGIC = b"QAMW"
VERSION = 1
NORM_BITS = 16
CALIB_ROWS = 1024


# ---------------------------------------------------------------------------
# bit accounting and packing
# ---------------------------------------------------------------------------

def row_payload_bits(bits: int, d_in: int) -> int:
    return 8 * math.ceil((d_in // 2) * bits / 8)


def alignment_overhead(bits: int, d_in: int) -> int:
    return row_payload_bits(bits, d_in) - (d_in // 2) * bits


def bits_per_weight(bits: int, d_in: int, alignment_overhead_bits: int | None = None) -> float:
    """``B/2 + 16/d_in`` plus per-row byte-alignment padding spread over the row.

    ``alignment_overhead_bits`` defaults to the padding implied by byte-aligned
    rows; pass 0 for the nominal figure.
    """
    if bits < 1 or d_in < 2 or d_in % 2:
        raise DimensionError("need bits >= 1 and even d_in >= 2")
    if alignment_overhead_bits is None:
        alignment_overhead_bits = alignment_overhead(bits, d_in)
    return bits / 2 + NORM_BITS / d_in + alignment_overhead_bits / d_in


def pack_indices(indices, bits: int) -> bytes:
    """MSB-first bit packing; the output is padded to a whole byte."""
    return pack_rows(np.asarray(indices).reshape(1, -1), bits).tobytes()


def unpack_indices(data: bytes, count: int, bits: int) -> np.ndarray:
    need = math.ceil(count * bits / 8)
    if len(data) < need:
        raise FormatError(f"need {need} bytes for {count} indices, got {len(data)}")
    buf = np.frombuffer(data, dtype=np.uint8, count=need).reshape(1, need)
    return unpack_rows(buf, count, bits)[0]


def pack_rows(indices, bits: int) -> np.ndarray:
    """Pack a ``(rows, n)`` index array into ``(rows, row_bytes)`` uint8."""
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= (1 << bits)):
        raise EncodingError(f"index out of range for {bits}-bit field")
    idx = idx.astype(np.uint32)
    shifts = np.arange(bits - 1, -1, -1, dtype=np.uint32)
    b = ((idx[..., None] >> shifts) & 1).astype(np.uint8)
    return np.packbits(b.reshape(idx.shape[0], -1), axis=1)


def unpack_rows(buf: np.ndarray, count: int, bits: int) -> np.ndarray:
    b = np.unpackbits(buf, axis=1)[:, : count * bits].reshape(buf.shape[0], count, bits)
    weights = (1 << np.arange(bits - 1, -1, -1)).astype(np.int64)
    return b.astype(np.int64) @ weights


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PairScales:
    sigmas: np.ndarray
    calib_rows: int


def _as_matrix(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.size == 0:
        raise DimensionError(f"expected a non-empty 2-D matrix, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise EncodingError("weight matrix has non-finite entries")
    return w


def _unit_rows(w: np.ndarray):
    r = np.sqrt(np.einsum("ij,ij->i", w, w))
    u = np.zeros_like(w)
    nz = r > 0
    u[nz] = w[nz] / r[nz, None]
    return u, r


def calibrate_pair_scales(w, plan: RotationPlan, max_rows: int = CALIB_ROWS) -> PairScales:
    """``sigma_k = mean|z_k| / sqrt(pi/2)`` over the first ``max_rows``
    non-zero unit-normalized rotated rows."""
    w = _as_matrix(w)
    if w.shape[1] != plan.d_in:
        raise DimensionError(f"matrix has {w.shape[1]} columns, plan expects {plan.d_in}")
    u, r = _unit_rows(w[:max_rows])
    u = u[r > 0]
    if len(u) == 0:
        raise CalibrationError("all calibration rows are zero")
    z = forward_rotate(plan, u).reshape(len(u), -1, 2)
    sig = np.mean(np.hypot(z[..., 0], z[..., 1]), axis=0) / math.sqrt(math.pi / 2)
    dead = sig <= 0
    if dead.all():
        raise CalibrationError("every pair scale estimate is zero")
    if dead.any():
        sig[dead] = np.median(sig[~dead])
    return PairScales(sigmas=sig, calib_rows=len(u))


# ---------------------------------------------------------------------------
# encode / decode
# ---------------------------------------------------------------------------

def quantizer_mode(q) -> str:
    if isinstance(q, PlanarCodebook):
        return "joint"
    if isinstance(q, PolarQuantizer):
        return "polar"
    raise TypeError(f"unsupported quantizer {type(q).__name__}")


def quantizer_digest(q) -> str:
    return sha256_hex(codebook_to_bytes(q))


def _scale_array(scale_vec, d_in):
    if scale_vec is None:
        return None
    s = np.asarray(getattr(scale_vec, "s", scale_vec), dtype=np.float64)
    if s.shape != (d_in,):
        raise DimensionError(f"scale vector must have length {d_in}")
    if not np.all(np.isfinite(s) & (s > 0)):
        raise EncodingError("scale vector entries must be finite and positive")
    return s


def _check_scales(scales: PairScales, d_in: int) -> np.ndarray:
    sig = np.asarray(scales.sigmas, dtype=np.float64)
    if sig.shape != (d_in // 2,):
        raise DimensionError(f"expected {d_in // 2} pair scales, got {sig.shape}")
    if not np.all(sig > 0):
        raise CalibrationError("pair scales must be positive")
    return sig


@dataclass
class EncodedMatrix:
    manifest: dict
    row_norms: np.ndarray  # float16, length d_out
    payload: bytes

    @property
    def d_out(self) -> int:
        return int(self.manifest["d_out"])

    @property
    def d_in(self) -> int:
        return int(self.manifest["d_in"])

    @property
    def bits(self) -> int:
        return int(self.manifest["bits"])

    @property
    def row_bytes(self) -> int:
        return row_payload_bits(self.bits, self.d_in) // 8

    def to_bytes(self) -> bytes:
        m = canonical_json(self.manifest)
        head = ENCODED_MAGIC + struct.pack("<B3xI", VERSION, len(m))
        norms = np.ascontiguousarray(self.row_norms, dtype="<f2").tobytes()
        return head + m + norms + self.payload

    @classmethod
    def from_bytes(cls, buf: bytes) -> "EncodedMatrix":
        import json

        if len(buf) < 12 or buf[:4] != ENCODED_MAGIC:
            raise FormatError("not a QAMW encoded matrix")
        version, mlen = struct.unpack_from("<B3xI", buf, 4)
        if version != VERSION:
            raise FormatError(f"unsupported QAMW version {version}")
        if len(buf) < 12 + mlen:
            raise FormatError("truncated manifest")
        try:
            manifest = json.loads(buf[12:12 + mlen].decode("ascii"))
            d_out, d_in, bits = manifest["d_out"], manifest["d_in"], manifest["bits"]
        except (ValueError, KeyError) as exc:
            raise FormatError(f"bad manifest: {exc}") from exc
        off = 12 + mlen
        norms_end = off + 2 * d_out
        payload_len = d_out * (row_payload_bits(bits, d_in) // 8)
        if len(buf) < norms_end + payload_len:
            raise FormatError("truncated payload")
        if len(buf) > norms_end + payload_len:
            raise FormatError("trailing bytes after payload")
        norms = np.frombuffer(buf, dtype="<f2", count=d_out, offset=off).astype(np.float16)
        return cls(manifest=manifest, row_norms=norms, payload=bytes(buf[norms_end:]))

    def check_integrity(self) -> None:
        """Payload digest, per-row checksums and bpw self-consistency."""
        m = self.manifest
        expect = self.d_out * self.row_bytes
        if len(self.payload) != expect:
            raise FormatError(f"payload is {len(self.payload)} bytes, expected {expect}")
        if sha256_hex(self.payload) != m["payload_sha256"]:
            rows = np.frombuffer(self.payload, dtype=np.uint8).reshape(self.d_out, self.row_bytes)
            for i, crc in enumerate(m["row_crc32"]):
                if zlib.crc32(rows[i].tobytes()) != crc:
                    raise IntegrityError(f"payload digest mismatch at row {i}", row=i)
            raise IntegrityError("payload digest mismatch")
        bpw = bits_per_weight(self.bits, self.d_in)
        if m["bpw"] != bpw:
            raise IntegrityError(f"manifest bpw {m['bpw']} != recomputed {bpw}")


@dataclass
class EncodeTrace:
    """Intermediate quantities of one encode, 64-bit throughout."""

    u: np.ndarray  # unit rows
    row_norms: np.ndarray
    y: np.ndarray  # rotated rows
    z: np.ndarray  # (d_out, d_in/2, 2) pairs
    indices: np.ndarray
    z_hat: np.ndarray  # reconstructed pairs, pair scale applied
    u_tilde: np.ndarray  # inverse-rotated reconstruction before the norm multiply

    @property
    def pair_errors(self) -> np.ndarray:
        return np.sum(np.square(self.z - self.z_hat), axis=-1)


def trace_encode(w, plan: RotationPlan, scales: PairScales, quantizer) -> EncodeTrace:
    w = _as_matrix(w)
    if w.shape[1] != plan.d_in:
        raise DimensionError(f"matrix has {w.shape[1]} columns, plan expects {plan.d_in}")
    sig = _check_scales(scales, plan.d_in)
    u, r = _unit_rows(w)
    y = forward_rotate(plan, u)
    z = y.reshape(len(w), -1, 2)
    idx = quantizer.encode((z / sig[None, :, None]).reshape(-1, 2)).reshape(len(w), -1)
    idx[r == 0] = 0
    z_hat = quantizer.decode(idx) * sig[None, :, None]
    z_hat[r == 0] = 0.0
    u_tilde = inverse_rotate(plan, z_hat.reshape(len(w), -1))
    return EncodeTrace(u=u, row_norms=r, y=y, z=z, indices=idx, z_hat=z_hat, u_tilde=u_tilde)


def encode_matrix(w, plan: RotationPlan, scales: PairScales, quantizer, scale_vec=None) -> EncodedMatrix:
    w = _as_matrix(w)
    s = _scale_array(scale_vec, w.shape[1])
    if s is not None:
        w = w * s[None, :]
    r = np.sqrt(np.einsum("ij,ij->i", w, w))
    norms16 = r.astype(np.float16)
    if not np.all(np.isfinite(norms16)):
        raise EncodingError("row norm overflows binary16")
    t = trace_encode(w, plan, scales, quantizer)
    packed = pack_rows(t.indices, quantizer.bits)
    payload = packed.tobytes()
    mode = quantizer_mode(quantizer)
    manifest = {
        "format": "qamw",
        "tool_version": __version__,
        "d_out": w.shape[0],
        "d_in": w.shape[1],
        "mode": mode,
        "bits": quantizer.bits,
        "rotation_seed": plan.seed,
        "block_size": plan.block_size,
        "pair_scales": [float(x) for x in scales.sigmas],
        "calib_rows": scales.calib_rows,
        "scale_vector": None if s is None else [float(x) for x in s],
        "quantizer_sha256": quantizer_digest(quantizer),
        "bpw": bits_per_weight(quantizer.bits, w.shape[1]),
        "payload_sha256": sha256_hex(payload),
        "row_crc32": [zlib.crc32(row.tobytes()) for row in packed],
    }
    if mode == "polar":
        manifest["amp_bits"] = quantizer.amp.bits
        manifest["phase_bits"] = quantizer.phase.bits
    return EncodedMatrix(manifest=manifest, row_norms=norms16, payload=payload)


def plan_from_manifest(manifest: dict) -> RotationPlan:
    plan = plan_rotation(manifest["d_in"], manifest["rotation_seed"])
    if plan.block_size != manifest["block_size"]:
        plan = plan_rotation(manifest["d_in"], manifest["rotation_seed"], max_block=manifest["block_size"])
    return plan


def scales_from_manifest(manifest: dict) -> PairScales:
    return PairScales(np.asarray(manifest["pair_scales"], dtype=np.float64), int(manifest["calib_rows"]))


def decode_matrix(enc: EncodedMatrix, plan: RotationPlan, quantizer, scales: PairScales | None = None) -> np.ndarray:
    m = enc.manifest
    if plan.d_in != enc.d_in or plan.seed != m["rotation_seed"] or plan.block_size != m["block_size"]:
        raise IntegrityError("rotation plan does not match the manifest")
    if quantizer_digest(quantizer) != m["quantizer_sha256"]:
        raise IntegrityError("quantizer digest does not match the manifest")
    stored = scales_from_manifest(m)
    if scales is not None and not np.array_equal(np.asarray(scales.sigmas, dtype=np.float64), stored.sigmas):
        raise IntegrityError("pair scales do not match the manifest")
    enc.check_integrity()
    sig = _check_scales(stored, enc.d_in)
    rows = np.frombuffer(enc.payload, dtype=np.uint8).reshape(enc.d_out, enc.row_bytes)
    idx = unpack_rows(rows, enc.d_in // 2, enc.bits)
    if idx.size and idx.max() >= (1 << quantizer.bits):
        raise FormatError("index exceeds codebook size")
    z_hat = quantizer.decode(idx) * sig[None, :, None]
    u_tilde = inverse_rotate(plan, z_hat.reshape(enc.d_out, enc.d_in))
    w_hat = u_tilde * enc.row_norms.astype(np.float64)[:, None]
    if m.get("scale_vector") is not None:
        w_hat = w_hat / np.asarray(m["scale_vector"], dtype=np.float64)[None, :]
    return w_hat


def encode(w, quantizer, seed: int = 0, scale_vec=None, max_rows: int = CALIB_ROWS):
    """Plan, calibrate (in the scaled domain if a scale vector is given) and
    encode. Returns ``(encoded, plan, scales)``."""
    w = _as_matrix(w)
    plan = plan_rotation(w.shape[1], seed)
    s = _scale_array(scale_vec, w.shape[1])
    ws = w if s is None else w * s[None, :]
    scales = calibrate_pair_scales(ws, plan, max_rows)
    return encode_matrix(w, plan, scales, quantizer, scale_vec=s), plan, scales


def roundtrip(w, quantizer, seed: int = 0, scale_vec=None) -> np.ndarray:
    enc, plan, scales = encode(w, quantizer, seed, scale_vec)
    return decode_matrix(enc, plan, quantizer, scales)
