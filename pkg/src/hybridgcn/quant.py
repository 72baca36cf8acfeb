"""Per-row stochastic integer quantization of embedding tables.

Each row gets its own zero-point ``Z = min(row)`` and scale
``S = (max(row) - min(row)) / (2^b - 1)``; elements map to
``q = stochastic_round((x - Z) / S)`` and back to ``q * S + Z``.
Codes are bit-packed little-endian inside each byte (lowest bits hold the
earliest element) and every row starts on a byte boundary.

Random bits come from a counter-based hash keyed by ``(seed, row key,
column)``, so a row's rounding does not depend on which worker or thread
quantizes it, nor on what other rows share the table.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

SUPPORTED_BITS = (2, 4, 8)
RAW_FP32 = 32
RAW_FP64 = 64
RAW_WIDTHS = {RAW_FP32: "<f4", RAW_FP64: "<f8"}
WIRE_HEADER = struct.Struct("<IIB3x")

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix64(x: np.ndarray) -> np.ndarray:
    """splitmix64 finaliser, vectorised; wraps modulo 2**64."""
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        x = (x ^ (x >> np.uint64(30))) * _M1
        x = (x ^ (x >> np.uint64(27))) * _M2
    return x ^ (x >> np.uint64(31))


def derive_seed(*parts: int) -> int:
    """Fold integers (seed, epoch, layer, ...) into one 64-bit stream key."""
    acc = np.zeros(1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        for p in parts:
            acc = _mix64(acc ^ (np.uint64(int(p) & 0xFFFFFFFFFFFFFFFF) + _GOLDEN))
    return int(acc[0])


def uniform_stream(seed: int, row_keys: np.ndarray, num_cols: int) -> np.ndarray:
    """Uniform [0, 1) draws, one per (row, column), independent per row key."""
    keys = np.asarray(row_keys, dtype=np.int64).astype(np.uint64)
    with np.errstate(over="ignore"):
        row_state = _mix64(np.uint64(seed) ^ _mix64(keys * _GOLDEN + np.uint64(1)))
        cols = (np.arange(1, num_cols + 1, dtype=np.uint64) * _GOLDEN)
        bits = _mix64(row_state[:, None] + cols[None, :])
    return (bits >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def _check_bits(b: int) -> None:
    if b not in SUPPORTED_BITS:
        raise ValueError(f"bit width must be one of {SUPPORTED_BITS}, got {b}")


def packed_row_bytes(num_cols: int, b: int) -> int:
    return (num_cols * b + 7) // 8


def pack_codes(codes: np.ndarray, b: int) -> np.ndarray:
    """Pack an (rows, F) array of b-bit codes into (rows, ceil(F*b/8)) bytes."""
    _check_bits(b)
    codes = np.asarray(codes, dtype=np.uint8)
    rows, cols = codes.shape
    per_byte = 8 // b
    nbytes = packed_row_bytes(cols, b)
    padded = np.zeros((rows, nbytes * per_byte), dtype=np.uint8)
    padded[:, :cols] = codes
    shifts = (np.arange(per_byte, dtype=np.uint8) * b)
    lanes = padded.reshape(rows, nbytes, per_byte) << shifts
    return np.bitwise_or.reduce(lanes, axis=2).astype(np.uint8)


def unpack_codes(packed: np.ndarray, num_cols: int, b: int) -> np.ndarray:
    _check_bits(b)
    packed = np.asarray(packed, dtype=np.uint8)
    rows = packed.shape[0]
    per_byte = 8 // b
    shifts = (np.arange(per_byte, dtype=np.uint8) * b)
    mask = np.uint8((1 << b) - 1)
    lanes = (packed[:, :, None] >> shifts) & mask
    return lanes.reshape(rows, packed.shape[1] * per_byte)[:, :num_cols]


@dataclass
class QuantBlock:
    packed: np.ndarray        # (rows, ceil(F*b/8)) uint8
    zero_point: np.ndarray    # (rows,) float32
    scale: np.ndarray         # (rows,) float32
    bits: int
    feat_dim: int

    @property
    def row_count(self) -> int:
        return int(self.zero_point.shape[0])

    def codes(self) -> np.ndarray:
        return unpack_codes(self.packed, self.feat_dim, self.bits)

    def to_bytes(self) -> bytes:
        params = np.empty((self.row_count, 2), dtype="<f4")
        params[:, 0] = self.zero_point
        params[:, 1] = self.scale
        return (WIRE_HEADER.pack(self.row_count, self.feat_dim, self.bits)
                + params.tobytes() + np.ascontiguousarray(self.packed).tobytes())

    @classmethod
    def from_bytes(cls, buf: bytes) -> "QuantBlock":
        rows, f, b = WIRE_HEADER.unpack_from(buf, 0)
        _check_bits(b)
        nb = packed_row_bytes(f, b)
        expect = WIRE_HEADER.size + rows * 8 + rows * nb
        if len(buf) != expect:
            raise ValueError(f"quantized payload is {len(buf)} bytes, expected {expect}")
        params = np.frombuffer(buf, "<f4", rows * 2, WIRE_HEADER.size).reshape(rows, 2)
        packed = np.frombuffer(buf, np.uint8, rows * nb, WIRE_HEADER.size + rows * 8)
        return cls(packed.reshape(rows, nb).copy(), params[:, 0].copy(), params[:, 1].copy(), b, f)


def quantize_rows(table, b: int = 2, seed: int = 0, row_keys=None,
                  stochastic: bool = True, block_rows: int = 256) -> QuantBlock:
    """Quantize each row of ``table`` to ``b`` bits.

    Parameters and codes are produced block by block: a block's min/max are
    taken and the same block is quantized immediately afterwards.
    ``row_keys`` (default: row index) select the random stream of each row;
    ``stochastic=False`` rounds to nearest and is meant for debugging only.
    """
    _check_bits(b)
    x = np.asarray(table)
    if x.ndim != 2:
        raise ValueError("table must be 2-D")
    rows, cols = x.shape
    if cols < 1:
        raise ValueError("feature dimension must be >= 1")
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot quantize NaN or Inf")
    keys = np.arange(rows) if row_keys is None else np.asarray(row_keys)
    if keys.shape != (rows,):
        raise ValueError("row_keys must have one entry per row")
    levels = (1 << b) - 1
    zp = np.empty(rows, dtype=np.float32)
    sc = np.empty(rows, dtype=np.float32)
    codes = np.empty((rows, cols), dtype=np.uint8)
    for start in range(0, rows, block_rows):
        blk = x[start:start + block_rows].astype(np.float64)
        lo, hi = blk.min(axis=1), blk.max(axis=1)
        z32 = lo.astype(np.float32)
        # keep the FP32 grid covering [lo, hi] despite rounding of Z and S
        z32 = np.where(z32.astype(np.float64) > lo, np.nextafter(z32, np.float32(-np.inf)), z32)
        s32 = ((hi - z32.astype(np.float64)) / levels).astype(np.float32)
        short = z32.astype(np.float64) + levels * s32.astype(np.float64) < hi
        s32 = np.where(short, np.nextafter(s32, np.float32(np.inf)), s32)
        zp[start:start + blk.shape[0]] = z32
        sc[start:start + blk.shape[0]] = s32
        s64 = s32.astype(np.float64)
        # multiply by a precomputed reciprocal; constant rows get 0 and code 0
        recip = np.divide(1.0, s64, out=np.zeros_like(s64), where=s64 > 0)
        scaled = np.clip((blk - z32.astype(np.float64)[:, None]) * recip[:, None], 0.0, levels)
        if stochastic:
            low = np.floor(scaled)
            u = uniform_stream(seed, keys[start:start + blk.shape[0]], cols)
            q = low + (u < scaled - low)
        else:
            q = np.floor(scaled + 0.5)
        codes[start:start + blk.shape[0]] = np.clip(q, 0, levels).astype(np.uint8)
    return QuantBlock(pack_codes(codes, b), zp, sc, b, cols)


def dequantize_rows(qb: QuantBlock, dtype=np.float32) -> np.ndarray:
    if qb.packed.shape != (qb.row_count, packed_row_bytes(qb.feat_dim, qb.bits)):
        raise ValueError("packed data does not match row count and feature dimension")
    if qb.scale.shape != qb.zero_point.shape:
        raise ValueError("parameter arrays differ in length")
    q = qb.codes().astype(np.float64)
    out = q * qb.scale.astype(np.float64)[:, None] + qb.zero_point.astype(np.float64)[:, None]
    return out.astype(dtype, copy=False)


def payload_bytes(rows: int, feat_dim: int, b: int) -> dict[str, int]:
    """Wire bytes of ``rows`` rows: packed data plus two FP32 params per row."""
    if b in RAW_WIDTHS:
        return {"data": rows * feat_dim * b // 8, "params": 0}
    _check_bits(b)
    return {"data": rows * packed_row_bytes(feat_dim, b), "params": rows * 2 * 4}


# --------------------------------------------------------------------------
# Wire payloads shared by the transport: quantized blocks or raw FP32 rows
# --------------------------------------------------------------------------

def encode_raw(table, b: int = RAW_FP32) -> bytes:
    x = np.ascontiguousarray(table, dtype=RAW_WIDTHS[b])
    rows, cols = x.shape
    return WIRE_HEADER.pack(rows, cols, b) + x.tobytes()


def encode_fp32(table) -> bytes:
    return encode_raw(table, RAW_FP32)


def encode_rows(table, b: int | None, seed: int = 0, row_keys=None) -> bytes:
    """Serialize rows for the wire; ``b=None`` or 32 ships raw FP32, 64 raw FP64."""
    if b is None or b in RAW_WIDTHS:
        return encode_raw(table, b or RAW_FP32)
    return quantize_rows(table, b, seed=seed, row_keys=row_keys).to_bytes()


def decode_rows(buf: bytes, dtype=np.float32) -> np.ndarray:
    rows, cols, b = WIRE_HEADER.unpack_from(buf, 0)
    if b in RAW_WIDTHS:
        if len(buf) != WIRE_HEADER.size + rows * cols * b // 8:
            raise ValueError("raw payload length mismatch")
        x = np.frombuffer(buf, RAW_WIDTHS[b], rows * cols, WIRE_HEADER.size).reshape(rows, cols)
        return x.astype(dtype)
    return dequantize_rows(QuantBlock.from_bytes(buf), dtype=dtype)


def wire_breakdown(buf: bytes) -> dict[str, int]:
    """Split an encoded payload into data and parameter bytes (header excluded)."""
    if not buf:
        return {"data": 0, "params": 0}
    rows, cols, b = WIRE_HEADER.unpack_from(buf, 0)
    return payload_bytes(rows, cols, b)
