"""Instance bitstream container: header, update stream, frame streams.

A file carries everything a receiver holding the matching global model
needs: the spike-and-slab hyperparameters, the entropy-coded quantized
receiver update, and one entropy-coded latent stream per frame.  The
update stream decodes first; reconstruction of every latent depends on
the updated receiver parameters, so stream order is load-bearing.

Layout (little-endian throughout; see FORMAT.md for byte offsets):

    magic "IAC1" | version | width | height | frame_count
    beta | t | sigma | alpha | n_bins | receiver hash (sha256)
    stream count | per-stream (byte length, exact bit length) | header CRC
    then per stream: [u32 byte length][payload][u32 CRC32]

Exact bit lengths are what rate accounting reports; byte lengths include
the coder's padding to whole bytes.
"""

from __future__ import annotations

import math
import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np
from scipy import special

from .autodiff import Tensor, round_half_away
from .model import CodecModel, LatentPair, pad_to_multiple, crop_to
from .prior import PmfTable, SpikeSlabPrior
from .rangecoder import (BitReader, BitWriter, RangeDecoder, RangeEncoder,
                         cumulative, freq_from_pmf, freq_from_pmf_batch)

MAGIC = b"IAC1"
VERSION = 1
_FIXED_HEADER = struct.Struct("<4sHIIIddddI32sI")
_STREAM_ENTRY = struct.Struct("<IQ")

# widest half-support of a latent symbol table; scales are clamped into
# this budget and out-of-range values snap to the edge symbols
_MAX_HALF_SUPPORT = 256


class BitstreamError(ValueError):
    pass


class CrcMismatchError(BitstreamError):
    pass


class ModelHashMismatchError(BitstreamError):
    pass


class TruncatedStreamError(BitstreamError):
    pass


@dataclass
class StreamHeader:
    width: int
    height: int
    frame_count: int
    beta: float
    t: float
    sigma: float
    alpha: float
    n_bins: int
    model_hash: bytes
    stream_sizes: list  # (byte_length, bit_length) per stream

    def pack(self) -> bytes:
        out = bytearray(_FIXED_HEADER.pack(
            MAGIC, VERSION, self.width, self.height, self.frame_count,
            self.beta, self.t, self.sigma, self.alpha, self.n_bins,
            self.model_hash, len(self.stream_sizes)))
        for nbytes, nbits in self.stream_sizes:
            out += _STREAM_ENTRY.pack(nbytes, nbits)
        out += struct.pack("<I", zlib.crc32(bytes(out)))
        return bytes(out)

    @classmethod
    def unpack(cls, blob: bytes) -> tuple["StreamHeader", int]:
        if len(blob) < _FIXED_HEADER.size:
            raise TruncatedStreamError("header shorter than the fixed part")
        (magic, version, width, height, frame_count, beta, t, sigma, alpha,
         n_bins, model_hash, n_streams) = _FIXED_HEADER.unpack_from(blob, 0)
        if magic != MAGIC:
            raise BitstreamError(f"bad magic {magic!r}")
        if version != VERSION:
            raise BitstreamError(f"unsupported version {version}")
        end = _FIXED_HEADER.size + n_streams * _STREAM_ENTRY.size + 4
        if len(blob) < end:
            raise TruncatedStreamError("header stream table cut short")
        sizes = []
        off = _FIXED_HEADER.size
        for _ in range(n_streams):
            sizes.append(_STREAM_ENTRY.unpack_from(blob, off))
            off += _STREAM_ENTRY.size
        (crc,) = struct.unpack_from("<I", blob, off)
        if zlib.crc32(blob[:off]) != crc:
            raise CrcMismatchError("header CRC mismatch")
        if frame_count < 1 or n_streams != frame_count + 1:
            raise BitstreamError("inconsistent stream count")
        hdr = cls(width, height, frame_count, beta, t, sigma, alpha, n_bins,
                  model_hash, sizes)
        return hdr, off + 4


def _frame_substream(payload: bytes) -> bytes:
    return (struct.pack("<I", len(payload)) + payload
            + struct.pack("<I", zlib.crc32(payload)))


def _read_substream(blob: bytes, off: int, expect_bytes: int) -> tuple[bytes, int]:
    if off + 4 > len(blob):
        raise TruncatedStreamError("substream length field missing")
    (nbytes,) = struct.unpack_from("<I", blob, off)
    off += 4
    if nbytes != expect_bytes:
        raise BitstreamError("substream length disagrees with the header")
    if off + nbytes + 4 > len(blob):
        raise TruncatedStreamError("substream payload cut short")
    payload = blob[off:off + nbytes]
    off += nbytes
    (crc,) = struct.unpack_from("<I", blob, off)
    if zlib.crc32(payload) != crc:
        raise CrcMismatchError("substream CRC mismatch")
    return payload, off + 4


# ----------------------------------------------------- latent symbol tables


def _phi(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + special.erf(x / math.sqrt(2.0)))


def build_latent_tables(mean: np.ndarray, scale: np.ndarray):
    """Per-element integer coding tables for unit-bin gaussians.

    Returns (lo, cums): the lowest representable integer per element and
    the cumulative frequency table per element.  The support half-width
    adapts to the scale; tail mass folds into the edge symbols.  Both
    codec sides derive these from identical inputs, so the tables match
    bit for bit.
    """
    mean = np.asarray(mean, dtype=np.float64).ravel()
    scale = np.asarray(scale, dtype=np.float64).ravel()
    center = round_half_away(mean).astype(np.int64)
    half = np.ceil(np.maximum(16.0, 8.0 * scale)).astype(np.int64)
    np.minimum(half, _MAX_HALF_SUPPORT, out=half)
    lo = center - half
    cums: list = [None] * mean.size
    for hv in np.unique(half):
        sel = np.nonzero(half == hv)[0]
        width = int(2 * hv + 1)
        offs = lo[sel][:, None] + np.arange(width)[None, :]
        mu = mean[sel][:, None]
        sd = scale[sel][:, None]
        upper = _phi((offs + 0.5 - mu) / sd)
        lower = _phi((offs - 0.5 - mu) / sd)
        masses = upper - lower
        masses[:, 0] += lower[:, 0]
        masses[:, -1] += 1.0 - upper[:, -1]
        freqs = freq_from_pmf_batch(masses)
        for row, i in enumerate(sel):
            cums[i] = cumulative(freqs[row])
    return lo, cums


def _clip_to_support(values: np.ndarray, lo: np.ndarray, cums: list) -> np.ndarray:
    hi = lo + np.asarray([len(c) - 2 for c in cums], dtype=np.int64)
    return np.clip(values, lo, hi)


# ------------------------------------------------------------------ encode


@dataclass
class EncodeResult:
    payload: bytes
    header: StreamHeader
    latent_bits_computed: float
    update_bits_computed: float
    latent_bits_coded: int
    update_bits_coded: int
    pixels: int
    mse: float
    psnr: float
    reconstructions: list
    latent_bits_per_frame: list


def encode_instance(frames, model: CodecModel, prior: SpikeSlabPrior,
                    beta: float, delta_bar: dict | None = None) -> EncodeResult:
    """Produce a complete bitstream for an instance set.

    ``model`` carries the transmitter parameters to use (finetuned or
    global); ``delta_bar`` holds the quantized receiver update per
    parameter name (missing entries mean zero update).
    """
    if not frames:
        raise BitstreamError("encode_instance: empty instance set")
    c0, h0, w0 = frames[0].shape
    for f in frames:
        if f.shape != (c0, h0, w0):
            raise BitstreamError("encode_instance: frames differ in shape")
    table = PmfTable(prior)
    grid = table.grid

    names = [p.name for p in model.parameters("theta")]
    delta_bar = dict(delta_bar or {})
    for name in delta_bar:
        if name not in set(names):
            raise BitstreamError(f"unknown receiver parameter {name!r}")
    full_delta = {}
    symbols = []
    update_bits_computed = 0.0
    for p in model.parameters("theta"):
        bar = delta_bar.get(p.name)
        bar = (np.zeros(p.tensor.shape) if bar is None
               else np.asarray(bar, dtype=np.float64))
        if bar.shape != p.tensor.shape:
            raise BitstreamError(f"update shape mismatch for {p.name}")
        try:
            idx = grid.index_for_value(bar)      # validates the grid
        except ValueError as e:
            raise BitstreamError(f"update for {p.name}: {e}") from e
        canon = grid.value_for_index(idx)        # canonical floats
        full_delta[p.name] = canon
        symbols.extend(idx.ravel().tolist())
        update_bits_computed += float(table.bits[idx.ravel()].sum())

    delta_cum = cumulative(freq_from_pmf(table.masses))
    writer = BitWriter()
    enc = RangeEncoder(writer)
    for s in symbols:
        enc.encode(delta_cum, s)
    enc.finish()
    delta_payload = writer.getvalue()
    stream_sizes = [(len(delta_payload), writer.bits_written)]
    body = bytearray(_frame_substream(delta_payload))

    over = {name: Tensor(model.param(name).tensor.data + full_delta[name])
            for name in names}
    latent_bits_computed = 0.0
    per_frame_bits = []
    sq_err = 0.0
    recons = []
    with model.override_receiver(over):
        ms1 = model.hyper_prior()
        lo1, cums1 = build_latent_tables(ms1.mean.data.ravel(),
                                         ms1.scale.data.ravel())
        for frame in frames:
            fp = pad_to_multiple(frame, model.config.s_total)
            y_img, y_hyp = model.analysis(fp)
            ch1, hh, wh = y_hyp.shape
            v1 = round_half_away(y_hyp.data).astype(np.int64)
            v1 = np.clip(v1, lo1.reshape(ch1, 1, 1),
                         (lo1 + np.asarray([len(c) - 2 for c in cums1],
                                           dtype=np.int64)).reshape(ch1, 1, 1))
            v1_t = Tensor(v1.astype(np.float64))
            ms2 = model.hyper_synthesis(v1_t)
            lo2, cums2 = build_latent_tables(ms2.mean.data, ms2.scale.data)
            v2 = round_half_away(y_img.data).astype(np.int64).ravel()
            v2 = _clip_to_support(v2, lo2, cums2)

            writer = BitWriter()
            enc = RangeEncoder(writer)
            flat1 = v1.ravel()
            for i, val in enumerate(flat1):
                ch = i // (hh * wh)
                enc.encode(cums1[ch], int(val - lo1[ch]))
            for i, val in enumerate(v2):
                enc.encode(cums2[i], int(val - lo2[i]))
            enc.finish()
            payload = writer.getvalue()
            stream_sizes.append((len(payload), writer.bits_written))
            body += _frame_substream(payload)

            v2_t = Tensor(v2.astype(np.float64).reshape(y_img.shape))
            frame_bits = model.latent_rate(LatentPair(v1_t, v2_t)).item()
            per_frame_bits.append(frame_bits)
            latent_bits_computed += frame_bits
            xhat = crop_to(np.clip(model.synthesis(v2_t).data, 0.0, 1.0),
                           h0, w0)
            recons.append(xhat)
            sq_err += float(((xhat - frame) ** 2).sum())

    pixels = len(frames) * h0 * w0
    mse = sq_err / (pixels * c0)
    header = StreamHeader(w0, h0, len(frames), beta, prior.t, prior.sigma,
                          prior.alpha, table.n_bins, model.receiver_hash(),
                          stream_sizes)
    payload = header.pack() + bytes(body)
    psnr = math.inf if mse <= 0 else -10.0 * math.log10(mse)
    return EncodeResult(payload, header, latent_bits_computed,
                        update_bits_computed, sum(b for _, b in stream_sizes[1:]),
                        stream_sizes[0][1], pixels, mse, psnr, recons,
                        per_frame_bits)


# ------------------------------------------------------------------ decode


@dataclass
class DecodeResult:
    frames: list
    header: StreamHeader
    delta_bar: dict
    theta_bar: dict
    latent_bits_computed: float
    update_bits_computed: float
    latent_bits_coded: int
    update_bits_coded: int
    pixels: int


def decode_instance(blob: bytes, model: CodecModel) -> DecodeResult:
    """Decode a bitstream against the matching global model."""
    header, off = StreamHeader.unpack(blob)
    if header.model_hash != model.receiver_hash():
        raise ModelHashMismatchError(
            "bitstream was produced against a different global model")
    prior = SpikeSlabPrior(header.t, header.sigma, header.alpha)
    table = PmfTable(prior)
    if table.n_bins != header.n_bins:
        raise BitstreamError(
            f"bin count mismatch: header {header.n_bins}, prior {table.n_bins}")
    grid = table.grid

    delta_payload, off = _read_substream(blob, off, header.stream_sizes[0][0])
    delta_cum = cumulative(freq_from_pmf(table.masses))
    dec = RangeDecoder(BitReader(delta_payload))
    delta_bar = {}
    theta_bar = {}
    update_bits_computed = 0.0
    over = {}
    for p in model.parameters("theta"):
        n = p.tensor.size
        idx = np.asarray([dec.decode(delta_cum) for _ in range(n)],
                         dtype=np.int64)
        bar = grid.value_for_index(idx).reshape(p.tensor.shape)
        delta_bar[p.name] = bar
        update_bits_computed += float(table.bits[idx].sum())
        theta = p.tensor.data + bar
        theta_bar[p.name] = theta
        over[p.name] = Tensor(theta)

    s_total = model.config.s_total
    ph = (header.height + s_total - 1) // s_total * s_total
    pw = (header.width + s_total - 1) // s_total * s_total
    ch1 = model.config.hyper_channels
    ch2 = model.config.latent_channels
    hh, wh = ph // s_total, pw // s_total
    h2, w2 = ph // model.config.s_codec, pw // model.config.s_codec

    frames = []
    latent_bits_computed = 0.0
    with model.override_receiver(over):
        ms1 = model.hyper_prior()
        lo1, cums1 = build_latent_tables(ms1.mean.data.ravel(),
                                         ms1.scale.data.ravel())
        for fi in range(header.frame_count):
            payload, off = _read_substream(blob, off,
                                           header.stream_sizes[1 + fi][0])
            dec = RangeDecoder(BitReader(payload))
            v1 = np.empty((ch1, hh, wh), dtype=np.int64)
            flat1 = v1.reshape(ch1, hh * wh)
            for ch in range(ch1):
                cum = cums1[ch]
                base = lo1[ch]
                for j in range(hh * wh):
                    flat1[ch, j] = base + dec.decode(cum)
            v1_t = Tensor(v1.astype(np.float64))
            ms2 = model.hyper_synthesis(v1_t)
            lo2, cums2 = build_latent_tables(ms2.mean.data, ms2.scale.data)
            v2 = np.empty(ch2 * h2 * w2, dtype=np.int64)
            for i in range(v2.size):
                v2[i] = lo2[i] + dec.decode(cums2[i])
            v2_t = Tensor(v2.astype(np.float64).reshape(ch2, h2, w2))
            latent_bits_computed += model.latent_rate(
                LatentPair(v1_t, v2_t)).item()
            xhat = crop_to(np.clip(model.synthesis(v2_t).data, 0.0, 1.0),
                           header.height, header.width)
            frames.append(xhat)

    pixels = header.frame_count * header.height * header.width
    return DecodeResult(frames, header, delta_bar, theta_bar,
                        latent_bits_computed, update_bits_computed,
                        sum(b for _, b in header.stream_sizes[1:]),
                        header.stream_sizes[0][1], pixels)


def write_bitstream(path: str, payload: bytes):
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)
