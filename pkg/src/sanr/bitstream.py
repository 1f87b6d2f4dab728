"""Serialization of finalized models into self-describing byte streams.

Layout of a `.sanr` stream, all multi-byte integers little-endian and all
floats IEEE-754 binary32:

    header   magic "SANR", version u8, U u8, V u8, H u16, W u16,
             C_S u16, r u8, C_l u8, k u8, section count u8
    sections each framed as (type u8, body length u32, body):
             type 1  weight record: range-coded integer lattice under a
                     per-tensor Laplace model
             type 2  latent record: channel 1 under its own statistics,
                     later channels under the context model applied to the
                     previously decoded channel
             type 3  raw record: 16-bit uniformly quantized side tensor
    footer   CRC32 (IEEE) over every preceding byte, u32

The entropy coder is a 32-bit range coder with 16-bit probability
resolution.  Symbol tables are built by evaluating the Laplace CDF at the
integer-interval boundaries over the transmitted [int_min, int_max]
support and renormalizing to sum to 65536 with every symbol >= 1, so any
in-support value stays codable.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np
import torch

from .model import (
    NUM_BLOCKS,
    FinalizedModel,
    ModelConfig,
    Raw16Tensor,
    raw_tensor_order,
    weight_tensor_order,
)

MAGIC = b"SANR"
VERSION = 1
PROB_BITS = 16
PROB_TOTAL = 1 << PROB_BITS
_TOP = 1 << 24
_MAX_SUPPORT = 60000

SECTION_WEIGHT = 1
SECTION_LATENT = 2
SECTION_RAW16 = 3

_HEADER = struct.Struct("<4sBBBHHHBBBB")


class BitstreamError(Exception):
    """Raised on malformed, truncated, or corrupt streams."""


class RangeEncoder:
    """Carry-propagating 32-bit range encoder (byte-oriented)."""

    def __init__(self):
        self._low = 0
        self._range = 0xFFFFFFFF
        self._cache = 0
        self._cache_size = 1
        self._out = bytearray()

    def encode(self, cum: int, freq: int) -> None:
        """Narrow the range to [cum, cum+freq) on the 16-bit probability grid."""
        r = self._range >> PROB_BITS
        self._low += r * cum
        if cum + freq == PROB_TOTAL:
            self._range -= r * cum
        else:
            self._range = r * freq
        while self._range < _TOP:
            self._range = (self._range << 8) & 0xFFFFFFFF
            self._shift_low()

    def _shift_low(self) -> None:
        if self._low < 0xFF000000 or self._low > 0xFFFFFFFF:
            carry = self._low >> 32
            self._out.append((self._cache + carry) & 0xFF)
            for _ in range(self._cache_size - 1):
                self._out.append((0xFF + carry) & 0xFF)
            self._cache = (self._low >> 24) & 0xFF
            self._cache_size = 0
        self._cache_size += 1
        self._low = (self._low << 8) & 0xFFFFFFFF

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self._out)


class RangeDecoder:
    """Mirror of `RangeEncoder`; reads zeros past the end of the payload."""

    def __init__(self, data: bytes):
        if len(data) < 5:
            raise BitstreamError("truncated range-coded payload")
        self._data = data
        self._pos = 5
        self._code = int.from_bytes(data[1:5], "big")
        self._range = 0xFFFFFFFF
        self._r = 1

    def decode_target(self) -> int:
        self._r = self._range >> PROB_BITS
        return min(self._code // self._r, PROB_TOTAL - 1)

    def advance(self, cum: int, freq: int) -> None:
        self._code -= cum * self._r
        if cum + freq == PROB_TOTAL:
            self._range -= self._r * cum
        else:
            self._range = self._r * freq
        while self._range < _TOP:
            nxt = self._data[self._pos] if self._pos < len(self._data) else 0
            self._pos += 1
            self._code = ((self._code << 8) | nxt) & 0xFFFFFFFF
            self._range = (self._range << 8) & 0xFFFFFFFF


def quantize_pmf(pmf: np.ndarray, total: int = PROB_TOTAL) -> np.ndarray:
    """Integer frequencies summing exactly to `total`, every symbol >= 1.

    Works on the last axis, so per-element probability tables can be
    quantized in one vectorized call.  Ties are broken deterministically.
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    n_sym = pmf.shape[-1]
    if n_sym > _MAX_SUPPORT:
        raise BitstreamError(f"symbol support {n_sym} too wide for 16-bit probabilities")
    norm = pmf.sum(axis=-1, keepdims=True)
    # Rows with no usable mass fall back to a uniform table.
    pmf = np.where(norm <= 0, 1.0, pmf)
    norm = np.where(norm <= 0, float(n_sym), norm)
    scaled = pmf / norm * (total - n_sym)
    base = np.floor(scaled)
    frac = scaled - base
    freqs = base.astype(np.int64) + 1
    remainder = total - freqs.sum(axis=-1)
    order = np.argsort(-frac, axis=-1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.broadcast_to(np.arange(n_sym), order.shape).copy(), axis=-1)
    freqs += (ranks < remainder[..., None]).astype(np.int64)
    return freqs


def laplace_pmf(mu, b, int_min: int, int_max: int) -> np.ndarray:
    """Probability mass on each unit interval of [int_min, int_max].

    `mu` and `b` are scalars or (..., 1) arrays broadcast against the
    interval boundaries; float64 throughout so encoder and decoder build
    identical tables from identical float32 parameters.
    """
    bounds = np.arange(int_min, int_max + 2, dtype=np.float64) - 0.5
    z = (bounds - np.asarray(mu, dtype=np.float64)) / np.asarray(b, dtype=np.float64)
    half_tail = 0.5 * np.exp(-np.abs(z))
    cdf = np.where(z < 0, half_tail, 1.0 - half_tail)
    return np.maximum(np.diff(cdf, axis=-1), 0.0)


def laplace_coding_cdf(mu, b, int_min: int, int_max: int) -> np.ndarray:
    """Cumulative coding table over [int_min, int_max] plus two tail symbols.

    The first and last entries absorb the model's mass outside the support,
    so a coded symbol costs what the open-ended rate estimate says it does
    instead of profiting from truncation.  Value v maps to symbol index
    v - int_min + 1; the tail indices never occur in well-formed streams.
    """
    bounds = np.arange(int_min, int_max + 2, dtype=np.float64) - 0.5
    z = (bounds - np.asarray(mu, dtype=np.float64)) / np.asarray(b, dtype=np.float64)
    half_tail = 0.5 * np.exp(-np.abs(z))
    cdf = np.where(z < 0, half_tail, 1.0 - half_tail)
    left = cdf[..., :1]
    right = 1.0 - cdf[..., -1:]
    pmf = np.concatenate([left, np.maximum(np.diff(cdf, axis=-1), 0.0), right], axis=-1)
    return cdf_from_freqs(quantize_pmf(pmf))


def cdf_from_freqs(freqs: np.ndarray) -> np.ndarray:
    """Cumulative table with a leading zero: cdf[s] .. cdf[s+1] spans symbol s."""
    cum = np.zeros(freqs.shape[:-1] + (freqs.shape[-1] + 1,), dtype=np.int64)
    np.cumsum(freqs, axis=-1, out=cum[..., 1:])
    return cum


def range_encode(symbols, cdf: np.ndarray) -> bytes:
    """Range-code 0-based symbol indices under one shared cumulative table."""
    n_sym = len(cdf) - 1
    cdf_list = [int(c) for c in cdf]
    enc = RangeEncoder()
    for s in symbols:
        s = int(s)
        if not 0 <= s < n_sym:
            raise BitstreamError(f"symbol {s} outside table support of {n_sym}")
        enc.encode(cdf_list[s], cdf_list[s + 1] - cdf_list[s])
    return enc.finish()


def range_decode(data: bytes, count: int, cdf: np.ndarray) -> np.ndarray:
    """Recover `count` symbols coded by `range_encode` under the same table."""
    dec = RangeDecoder(data)
    out = np.empty(count, dtype=np.int64)
    for i in range(count):
        t = dec.decode_target()
        s = int(np.searchsorted(cdf, t, side="right") - 1)
        dec.advance(int(cdf[s]), int(cdf[s + 1] - cdf[s]))
        out[i] = s
    return out


def _encode_per_element(enc: RangeEncoder, symbols: np.ndarray, cdfs: np.ndarray) -> None:
    for i in range(symbols.shape[0]):
        row = cdfs[i]
        s = int(symbols[i])
        if not 0 <= s < row.shape[0] - 1:
            raise BitstreamError(f"latent symbol {s} outside support")
        enc.encode(int(row[s]), int(row[s + 1] - row[s]))


def _decode_per_element(dec: RangeDecoder, count: int, cdfs: np.ndarray) -> np.ndarray:
    out = np.empty(count, dtype=np.int64)
    for i in range(count):
        row = cdfs[i]
        t = dec.decode_target()
        s = int(np.searchsorted(row, t, side="right") - 1)
        dec.advance(int(row[s]), int(row[s + 1] - row[s]))
        out[i] = s
    return out


def _latent_context_cdfs(prev_channel: torch.Tensor, ctx, int_min: int, int_max: int) -> np.ndarray:
    """Per-element cumulative coding tables for one channel, from its predecessor."""
    mu_map, sigma_map = ctx(prev_channel)
    mu = mu_map.detach().numpy().astype(np.float64).reshape(-1, 1)
    b = sigma_map.detach().numpy().astype(np.float64).reshape(-1, 1) / np.sqrt(2.0)
    return laplace_coding_cdf(mu, b, int_min, int_max)


def _pack_dims(shape) -> bytes:
    out = struct.pack("<B", len(shape))
    for d in shape:
        if d > 0xFFFF:
            raise BitstreamError(f"dimension {d} exceeds u16")
        out += struct.pack("<H", d)
    return out


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise BitstreamError("truncated stream")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def _read_dims(r: _Reader) -> tuple[int, ...]:
    (ndim,) = r.unpack("<B")
    return tuple(r.unpack("<H")[0] for _ in range(ndim))


def _encode_weight_record(fm: FinalizedModel, tid: int, name: str) -> bytes:
    ints = fm.weight_ints[name].numpy().astype(np.int64)
    stats = fm.weight_stats(name)
    imin, imax = int(ints.min()), int(ints.max())
    cdf = laplace_coding_cdf(stats.mu, stats.b, imin, imax)
    payload = range_encode(ints.reshape(-1) - imin + 1, cdf)
    body = struct.pack("<H", tid) + _pack_dims(ints.shape)
    body += struct.pack("<fffiiI", np.float32(fm.weight_scales[name]), np.float32(stats.mu),
                        np.float32(stats.b), imin, imax, len(payload))
    return body + payload


def _encode_latent_record(fm: FinalizedModel, level: int) -> bytes:
    ints = fm.latent_ints[level][0].numpy().astype(np.int64)
    channels, h, w = ints.shape
    stats = fm.latent_first_stats(level)
    imin, imax = int(ints.min()), int(ints.max())
    enc = RangeEncoder()
    cdf0 = laplace_coding_cdf(stats.mu, stats.b, imin, imax)
    cdf0_list = [int(c) for c in cdf0]
    for s in ints[0].reshape(-1) - imin + 1:
        enc.encode(cdf0_list[s], cdf0_list[s + 1] - cdf0_list[s])
    ctx = fm.context_model(level)
    for c in range(1, channels):
        prev = torch.from_numpy(ints[c - 1].astype(np.float32))
        cdfs = _latent_context_cdfs(prev, ctx, imin, imax)
        _encode_per_element(enc, ints[c].reshape(-1) - imin + 1, cdfs)
    payload = enc.finish()
    body = struct.pack("<BBHH", level, channels, h, w)
    body += struct.pack("<ffiiI", np.float32(stats.mu), np.float32(stats.b), imin, imax, len(payload))
    return body + payload


def _encode_raw_record(fm: FinalizedModel, tid: int, name: str) -> bytes:
    raw = fm.raw16[name]
    body = struct.pack("<H", tid) + _pack_dims(raw.codes.shape)
    body += struct.pack("<ff", np.float32(raw.mn), np.float32(raw.mx))
    return body + raw.codes.astype("<u2").tobytes()


def serialize_model(fm: FinalizedModel) -> bytes:
    """Encode a finalized model into a decodable `.sanr` byte stream."""
    cfg = fm.config
    records: list[tuple[int, bytes]] = []
    for tid, name in enumerate(weight_tensor_order(cfg)):
        records.append((SECTION_WEIGHT, _encode_weight_record(fm, tid, name)))
    for level in range(NUM_BLOCKS):
        records.append((SECTION_LATENT, _encode_latent_record(fm, level)))
    for tid, name in enumerate(raw_tensor_order(cfg)):
        records.append((SECTION_RAW16, _encode_raw_record(fm, tid, name)))
    if len(records) > 0xFF:
        raise BitstreamError("too many sections for a u8 count")
    out = bytearray(
        _HEADER.pack(MAGIC, VERSION, cfg.u_count, cfg.v_count, cfg.height, cfg.width,
                     cfg.c_s, cfg.rank, cfg.c_l, cfg.kernel_size, len(records))
    )
    for kind, body in records:
        out += struct.pack("<BI", kind, len(body))
        out += body
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


@dataclass
class SectionInfo:
    kind: str
    name: str
    total_bytes: int
    payload_bytes: int


@dataclass
class StreamInfo:
    version: int
    u_count: int
    v_count: int
    height: int
    width: int
    c_s: int
    rank: int
    c_l: int
    kernel_size: int
    section_count: int
    file_bytes: int
    header_bytes: int = _HEADER.size
    crc_bytes: int = 4
    sections: list[SectionInfo] = field(default_factory=list)

    @property
    def raw16_bytes(self) -> int:
        return sum(s.total_bytes for s in self.sections if s.kind == "raw16")

    @property
    def raw16_share(self) -> float:
        return self.raw16_bytes / self.file_bytes

    @property
    def bpp(self) -> float:
        return self.file_bytes * 8.0 / (self.u_count * self.v_count * self.height * self.width)


def _check_container(data: bytes) -> _Reader:
    if len(data) < _HEADER.size + 4:
        raise BitstreamError("truncated stream: shorter than header plus footer")
    magic = data[:4]
    if magic != MAGIC:
        raise BitstreamError(f"not a SANR stream (magic {magic!r})")
    version = data[4]
    if version != VERSION:
        raise BitstreamError(f"unsupported version {version} (expected {VERSION})")
    (stored_crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored_crc:
        raise BitstreamError("CRC failure: stream is corrupt")
    return _Reader(data[: len(data) - 4])


def _walk_records(r: _Reader, section_count: int):
    """Yield (kind, body bytes) for each framed record, checking bounds."""
    for _ in range(section_count):
        kind, length = r.unpack("<BI")
        body = r.take(length)
        yield kind, body
    if r.pos != len(r.data):
        raise BitstreamError("trailing bytes after final section")


def stream_info(data: bytes) -> StreamInfo:
    """Header fields and per-section byte accounting, without full decode."""
    r = _check_container(data)
    magic, version, u, v, h, w, c_s, rank, c_l, k, count = r.unpack("<4sBBBHHHBBBB")
    info = StreamInfo(version, u, v, h, w, c_s, rank, c_l, k, count, file_bytes=len(data))
    weight_names = weight_tensor_order()
    raw_names = raw_tensor_order()
    for kind, body in _walk_records(r, count):
        br = _Reader(body)
        if kind == SECTION_WEIGHT:
            (tid,) = br.unpack("<H")
            _read_dims(br)
            *_, payload_len = br.unpack("<fffiiI")
            name = weight_names[tid] if tid < len(weight_names) else f"weight{tid}"
            info.sections.append(SectionInfo("weight", name, len(body) + 5, payload_len))
        elif kind == SECTION_LATENT:
            level, channels, lh, lw = br.unpack("<BBHH")
            *_, payload_len = br.unpack("<ffiiI")
            info.sections.append(SectionInfo("latent", f"latents.level{level + 1}", len(body) + 5, payload_len))
        elif kind == SECTION_RAW16:
            (tid,) = br.unpack("<H")
            dims = _read_dims(br)
            name = raw_names[tid] if tid < len(raw_names) else f"raw{tid}"
            n_values = int(np.prod(dims)) if dims else 1
            info.sections.append(SectionInfo("raw16", name, len(body) + 5, 2 * n_values))
        else:
            raise BitstreamError(f"unknown section type {kind}")
    return info


def deserialize_model(data: bytes) -> FinalizedModel:
    """Rebuild the finalized model; its renders equal the encoder's bit-exactly."""
    r = _check_container(data)
    magic, version, u, v, h, w, c_s, rank, c_l, k, count = r.unpack("<4sBBBHHHBBBB")

    weight_raw: dict[int, tuple] = {}
    latent_raw: dict[int, tuple] = {}
    raw_raw: dict[int, tuple] = {}
    for kind, body in _walk_records(r, count):
        br = _Reader(body)
        if kind == SECTION_WEIGHT:
            (tid,) = br.unpack("<H")
            dims = _read_dims(br)
            scale, mu, b, imin, imax, payload_len = br.unpack("<fffiiI")
            payload = br.take(payload_len)
            weight_raw[tid] = (dims, scale, mu, b, imin, imax, payload)
        elif kind == SECTION_LATENT:
            level, channels, lh, lw = br.unpack("<BBHH")
            mu, b, imin, imax, payload_len = br.unpack("<ffiiI")
            payload = br.take(payload_len)
            latent_raw[level] = (channels, lh, lw, mu, b, imin, imax, payload)
        elif kind == SECTION_RAW16:
            (tid,) = br.unpack("<H")
            dims = _read_dims(br)
            mn, mx = br.unpack("<ff")
            n_values = int(np.prod(dims)) if dims else 1
            codes = np.frombuffer(br.take(2 * n_values), dtype="<u2").reshape(dims).copy()
            raw_raw[tid] = (codes, mn, mx)
        else:
            raise BitstreamError(f"unknown section type {kind}")

    raw_names = raw_tensor_order()
    if len(raw_raw) != len(raw_names):
        raise BitstreamError("missing raw sections")
    ctx_tid = raw_names.index("ctx0.conv1.weight")
    context_hidden = int(raw_raw[ctx_tid][0].shape[0])
    config = ModelConfig(c_s=c_s, rank=rank, c_l=c_l, u_count=u, v_count=v, height=h, width=w,
                         kernel_size=k, context_hidden=context_hidden)

    weight_names = weight_tensor_order(config)
    if len(weight_raw) != len(weight_names):
        raise BitstreamError("missing weight sections")
    weight_ints: dict[str, torch.Tensor] = {}
    weight_scales: dict[str, float] = {}
    for tid, name in enumerate(weight_names):
        dims, scale, mu, b, imin, imax, payload = weight_raw[tid]
        cdf = laplace_coding_cdf(np.float32(mu), np.float32(b), imin, imax)
        symbols = range_decode(payload, int(np.prod(dims)) if dims else 1, cdf)
        if symbols.size and (symbols.min() < 1 or symbols.max() > imax - imin + 1):
            raise BitstreamError(f"corrupt payload: tensor {name} decoded outside its support")
        weight_ints[name] = torch.from_numpy((symbols + imin - 1).reshape(dims).astype(np.int32))
        weight_scales[name] = float(np.float32(scale))

    raw16 = {name: Raw16Tensor(codes=raw_raw[tid][0], mn=float(np.float32(raw_raw[tid][1])),
                               mx=float(np.float32(raw_raw[tid][2])))
             for tid, name in enumerate(raw_names)}

    placeholder = [torch.zeros((1, config.c_l) + latent_shape, dtype=torch.int32)
                   for latent_shape in config.latent_shapes()]
    fm = FinalizedModel(config, weight_ints, weight_scales, raw16, placeholder)

    if len(latent_raw) != NUM_BLOCKS:
        raise BitstreamError("missing latent sections")
    for level in range(NUM_BLOCKS):
        channels, lh, lw, mu, b, imin, imax, payload = latent_raw[level]
        dec = RangeDecoder(payload)
        ints = np.empty((channels, lh, lw), dtype=np.int64)
        cdf0 = laplace_coding_cdf(np.float32(mu), np.float32(b), imin, imax)
        flat0 = ints[0].reshape(-1)
        for i in range(lh * lw):
            t = dec.decode_target()
            s = int(np.searchsorted(cdf0, t, side="right") - 1)
            dec.advance(int(cdf0[s]), int(cdf0[s + 1] - cdf0[s]))
            flat0[i] = s + imin - 1
        ctx = fm.context_model(level)
        for c in range(1, channels):
            prev = torch.from_numpy(ints[c - 1].astype(np.float32))
            cdfs = _latent_context_cdfs(prev, ctx, imin, imax)
            ints[c] = (_decode_per_element(dec, lh * lw, cdfs) + imin - 1).reshape(lh, lw)
        if ints.min() < imin or ints.max() > imax:
            raise BitstreamError(f"corrupt payload: latent level {level} decoded outside its support")
        fm.latent_ints[level] = torch.from_numpy(ints.astype(np.int32))[None]
    return fm
