import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qamw.analysis import distortion_report
from qamw.codebooks import PlanarCodebook, make_polar
from qamw.codec import (
    EncodedMatrix,
    PairScales,
    alignment_overhead,
    bits_per_weight,
    calibrate_pair_scales,
    decode_matrix,
    encode,
    encode_matrix,
    pack_indices,
    pack_rows,
    plan_from_manifest,
    roundtrip,
    row_payload_bits,
    trace_encode,
    unpack_indices,
    unpack_rows,
)
from qamw.errors import CalibrationError, DimensionError, EncodingError, FormatError, IntegrityError
from qamw.rotation import forward_rotate, inverse_rotate, plan_rotation


def gaussian(rows, cols, seed, scale=0.02):
    return scale * np.random.default_rng(seed).standard_normal((rows, cols))


# ---------------------------------------------------------------------------
# bit accounting and packing
# ---------------------------------------------------------------------------

def test_bpw_paper_points():
    assert bits_per_weight(11, 2048, 0) == 5.5078125
    assert bits_per_weight(11, 2048) == pytest.approx(5.51, abs=0.01)
    assert bits_per_weight(7, 2048) == pytest.approx(3.51, abs=0.01)
    assert bits_per_weight(8, 2048) == pytest.approx(4.0078, abs=1e-4)


def test_alignment_overhead():
    assert alignment_overhead(11, 2048) == 0
    assert alignment_overhead(7, 6) == 3  # 21 bits -> 24
    assert bits_per_weight(7, 6) == pytest.approx(3.5 + 16 / 6 + 3 / 6)
    assert row_payload_bits(7, 6) == 24
    with pytest.raises(DimensionError):
        bits_per_weight(7, 5)


def test_pack_examples():
    x = np.array([0, 2047, 1])
    assert np.array_equal(unpack_indices(pack_indices(x, 11), 3, 11), x)
    assert pack_indices(np.array([1, 255, 16]), 8) == bytes([1, 255, 16])
    # MSB-first: a single 3-bit index 0b101 occupies the top bits of the byte
    assert pack_indices(np.array([5]), 3) == bytes([0b10100000])
    with pytest.raises(EncodingError):
        pack_indices(np.array([8]), 3)
    with pytest.raises(EncodingError):
        pack_indices(np.array([-1]), 3)


@settings(max_examples=300, deadline=None)
@given(st.sampled_from([7, 8, 11]), st.data())
def test_pack_fuzz(bits, data):
    x = np.array(data.draw(st.lists(st.integers(0, 2**bits - 1), min_size=1, max_size=300)))
    buf = pack_indices(x, bits)
    assert len(buf) == math.ceil(len(x) * bits / 8)
    assert np.array_equal(unpack_indices(buf, len(x), bits), x)


def test_pack_rows_byte_aligned():
    rng = np.random.default_rng(0)
    idx = rng.integers(0, 128, size=(5, 3))
    rows = pack_rows(idx, 7)
    assert rows.shape == (5, 3)  # 21 bits -> 3 bytes per row
    assert np.array_equal(unpack_rows(rows, 3, 7), idx)
    for i in range(5):
        assert rows[i].tobytes() == pack_indices(idx[i], 7)


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

def test_calibration_constant_radius():
    d = 16
    plan = plan_rotation(d, 3)
    a = 0.3
    ang = np.random.default_rng(0).uniform(0, 2 * np.pi, d // 2)
    z = np.stack([a * np.cos(ang), a * np.sin(ang)], -1).reshape(-1)
    row = inverse_rotate(plan, z / np.linalg.norm(z))  # unit row whose rotated pairs have equal radius
    sc = calibrate_pair_scales(row[None, :] * 5.0, plan)
    r = a / np.linalg.norm(z)
    np.testing.assert_allclose(sc.sigmas, r / math.sqrt(math.pi / 2), rtol=1e-12)
    assert sc.calib_rows == 1


def test_calibration_gaussian_scale():
    w = gaussian(4096, 2048, 1)
    sc = calibrate_pair_scales(w, plan_rotation(2048, 0))
    assert sc.calib_rows == 1024
    # per-coordinate scale of a unit row is 1/sqrt(d_in)
    assert np.mean(sc.sigmas) == pytest.approx(1 / math.sqrt(2048), rel=0.01)
    assert np.std(sc.sigmas) / np.mean(sc.sigmas) < 0.05


def test_calibration_uses_first_rows_and_skips_zero_rows():
    w = gaussian(40, 32, 2)
    plan = plan_rotation(32, 0)
    w2 = w.copy()
    w2[0] = 0.0
    a = calibrate_pair_scales(w2, plan, max_rows=10)
    b = calibrate_pair_scales(w2[1:10], plan)
    assert a.calib_rows == 9
    np.testing.assert_array_equal(a.sigmas, b.sigmas)


def test_calibration_errors_and_dead_pairs():
    plan = plan_rotation(8, 0, max_block=2)
    with pytest.raises(CalibrationError):
        calibrate_pair_scales(np.zeros((3, 8)), plan)
    w = np.zeros((4, 8))
    w[:, :4] = gaussian(4, 4, 0)
    sc = calibrate_pair_scales(w, plan)
    live = sc.sigmas[:2]
    np.testing.assert_allclose(sc.sigmas[2:], np.median(live))
    assert np.all(sc.sigmas > 0)


# ---------------------------------------------------------------------------
# encode / decode
# ---------------------------------------------------------------------------

def test_roundtrip_shape_zero_rows_and_file(small_cb, tmp_path):
    w = gaussian(20, 64, 3)
    w[[0, 7]] = 0.0
    enc, plan, scales = encode(w, small_cb, seed=5)
    w_hat = decode_matrix(enc, plan, small_cb, scales)
    assert w_hat.shape == w.shape
    assert np.all(w_hat[[0, 7]] == 0.0)
    buf = enc.to_bytes()
    back = EncodedMatrix.from_bytes(buf)
    assert back.to_bytes() == buf
    assert np.array_equal(decode_matrix(back, plan_from_manifest(back.manifest), small_cb), w_hat)
    assert len(enc.payload) == 20 * row_payload_bits(small_cb.bits, 64) // 8
    assert enc.manifest["bpw"] == bits_per_weight(small_cb.bits, 64)


def test_centroid_aligned_rows_reproduce_exactly(small_cb):
    d = 32
    plan = plan_rotation(d, 1)
    rng = np.random.default_rng(0)
    sig = 0.25
    base = rng.integers(0, 2**small_cb.bits, d // 2)
    # permuting one index set keeps every row's norm equal, so one set of pair scales fits all rows
    idx = np.array([rng.permutation(base) for _ in range(6)])
    z = small_cb.decode(idx) * sig
    n = np.linalg.norm(z[0])
    w = 4.0 * inverse_rotate(plan, z.reshape(6, -1) / n)  # row norm 4 is exact in binary16
    scales = PairScales(sigmas=np.full(d // 2, sig / n), calib_rows=6)
    t = trace_encode(w, plan, scales, small_cb)
    assert np.array_equal(t.indices, idx)
    w_hat = decode_matrix(encode_matrix(w, plan, scales, small_cb), plan, small_cb, scales)
    np.testing.assert_allclose(w_hat, w, rtol=0, atol=1e-12)


def test_error_accounting_identities(cb7):
    w = gaussian(64, 512, 4)
    w[3] = 0.0
    plan = plan_rotation(512, 2)
    scales = calibrate_pair_scales(w, plan)
    rep = distortion_report(w, plan, scales, cb7, d_b=cb7.d_b)
    assert rep.passed, rep.residuals
    t = trace_encode(w, plan, scales, cb7)
    e = t.pair_errors
    np.testing.assert_allclose(np.sum((t.u - t.u_tilde) ** 2, axis=1), e.sum(axis=1), atol=1e-10)


def test_polar_mode_roundtrip():
    q = make_polar(3, 4)
    w = gaussian(16, 128, 6)
    enc, plan, scales = encode(w, q, seed=1)
    assert enc.manifest["mode"] == "polar" and enc.manifest["amp_bits"] == 3
    w_hat = decode_matrix(enc, plan, q, scales)
    rel = np.linalg.norm(w - w_hat) ** 2 / np.linalg.norm(w) ** 2
    assert rel == pytest.approx(0.5 * q.distortion, rel=0.25)


def test_b11_relative_error_envelope(ladder):
    cb = ladder[11]
    w = gaussian(128, 256, 9)
    w_hat = roundtrip(w, cb, seed=0)
    assert np.linalg.norm(w - w_hat) / np.linalg.norm(w) <= math.sqrt(cb.d_b / 2) * 1.2


def test_linear_codec_response(cb7):
    w = gaussian(32, 256, 8)
    plan = plan_rotation(256, 0)
    base = encode_matrix(w, plan, calibrate_pair_scales(w, plan), cb7)
    w_hat = decode_matrix(base, plan, cb7)
    for c in (0.25, 2.0, 8.0):
        sc = calibrate_pair_scales(c * w, plan)
        enc = encode_matrix(c * w, plan, sc, cb7)
        assert enc.payload == base.payload
        np.testing.assert_allclose(decode_matrix(enc, plan, cb7, sc), c * w_hat, rtol=0, atol=1e-15 * c)
    # non power-of-two: indices equal, reconstruction scaled up to binary16 norm rounding
    sc = calibrate_pair_scales(3.0 * w, plan)
    t0 = trace_encode(w, plan, calibrate_pair_scales(w, plan), cb7)
    t1 = trace_encode(3.0 * w, plan, sc, cb7)
    assert np.array_equal(t0.indices, t1.indices)
    enc = encode_matrix(3.0 * w, plan, sc, cb7)
    np.testing.assert_allclose(decode_matrix(enc, plan, cb7, sc), 3.0 * w_hat, rtol=2e-3, atol=1e-12)


def test_scale_vector_recorded_and_inverted(small_cb):
    w = gaussian(16, 64, 1)
    s = np.exp(np.random.default_rng(2).uniform(-1, 1, 64))
    enc, plan, scales = encode(w, small_cb, scale_vec=s)
    assert enc.manifest["scale_vector"] == [float(x) for x in s]
    ws = w * s
    enc_s = encode_matrix(ws, plan, scales, small_cb)
    assert enc_s.payload == enc.payload
    np.testing.assert_allclose(decode_matrix(enc, plan, small_cb) * s, decode_matrix(enc_s, plan, small_cb),
                               rtol=1e-12)


def test_encode_errors(small_cb):
    plan = plan_rotation(8, 0)
    w = gaussian(2, 8, 0)
    sc = calibrate_pair_scales(w, plan)
    bad = w.copy()
    bad[0, 0] = np.nan
    with pytest.raises(EncodingError):
        encode_matrix(bad, plan, sc, small_cb)
    with pytest.raises(CalibrationError):
        encode_matrix(w, plan, PairScales(np.zeros(4), 1), small_cb)
    with pytest.raises(DimensionError):
        encode_matrix(gaussian(2, 10, 0), plan, sc, small_cb)
    with pytest.raises(DimensionError):
        encode_matrix(w, plan, sc, small_cb, scale_vec=np.ones(7))


def test_decode_consistency_checks(small_cb, cb7):
    w = gaussian(8, 64, 0)
    enc, plan, scales = encode(w, small_cb, seed=1)
    with pytest.raises(IntegrityError):
        decode_matrix(enc, plan_rotation(64, 2), small_cb)
    with pytest.raises(IntegrityError):
        decode_matrix(enc, plan, cb7)
    with pytest.raises(IntegrityError):
        decode_matrix(enc, plan, small_cb, PairScales(scales.sigmas * 2, scales.calib_rows))


def test_integrity_failures(small_cb):
    enc, plan, _ = encode(gaussian(10, 64, 0), small_cb)
    buf = bytearray(enc.to_bytes())
    buf[-enc.row_bytes * 3 + 1] ^= 0x10  # row 7
    bad = EncodedMatrix.from_bytes(bytes(buf))
    with pytest.raises(IntegrityError) as ei:
        bad.check_integrity()
    assert ei.value.row == 7
    tampered = EncodedMatrix(dict(enc.manifest, bpw=enc.manifest["bpw"] + 0.5), enc.row_norms, enc.payload)
    with pytest.raises(IntegrityError, match="bpw"):
        tampered.check_integrity()
    with pytest.raises(FormatError):
        EncodedMatrix.from_bytes(enc.to_bytes()[:-1])
    with pytest.raises(FormatError):
        EncodedMatrix.from_bytes(b"QAMX" + enc.to_bytes()[4:])


def test_encode_determinism(small_cb):
    w = gaussian(12, 96, 5)
    a = encode(w, small_cb, seed=3)[0].to_bytes()
    b = encode(w, small_cb, seed=3)[0].to_bytes()
    assert a == b
    assert encode(w, small_cb, seed=4)[0].to_bytes() != a


def test_codebook_with_one_entry():
    cb = PlanarCodebook(bits=0, centroids=np.zeros((1, 2), np.float32), d_b=2.0, train_seed=0)
    assert np.all(cb.encode(np.ones((3, 2))) == 0)
