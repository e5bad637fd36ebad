"""Binary arithmetic coder over integer frequency tables.

Classic 32-bit low/high interval coder: the interval is renormalized one
bit at a time, near-convergence around the midpoint is handled with
pending-bit counting, and the decoder mirrors the encoder's state
transitions exactly.  Frequency tables are integers summing to 2**16;
``freq_from_pmf`` builds them from float masses by largest-remainder
rounding with every symbol kept codable.

The bit writer reports the exact number of bits emitted before byte
padding, which is what rate accounting uses; the reader returns zeros
past the end of the buffer, matching the padding.
"""

from __future__ import annotations

from bisect import bisect_right

import numpy as np

STATE_SIZE = 32
FREQ_PRECISION = 16

_MASK = (1 << STATE_SIZE) - 1
_HALF = 1 << (STATE_SIZE - 1)
_QUARTER = 1 << (STATE_SIZE - 2)


class BitWriter:
    def __init__(self):
        self._buf = bytearray()
        self._acc = 0
        self._nacc = 0
        self.bits_written = 0

    def write(self, bit: int):
        self._acc = (self._acc << 1) | bit
        self._nacc += 1
        self.bits_written += 1
        if self._nacc == 8:
            self._buf.append(self._acc)
            self._acc = 0
            self._nacc = 0

    def getvalue(self) -> bytes:
        # zero-pad the final partial byte; padding is not counted
        if self._nacc:
            return bytes(self._buf) + bytes([self._acc << (8 - self._nacc)])
        return bytes(self._buf)


class BitReader:
    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def read(self) -> int:
        byte = self._pos >> 3
        if byte >= len(self._data):
            return 0
        bit = (self._data[byte] >> (7 - (self._pos & 7))) & 1
        self._pos += 1
        return bit


class RangeEncoder:
    def __init__(self, out: BitWriter):
        self.out = out
        self.low = 0
        self.high = _MASK
        self.pending = 0

    def encode(self, cum: list, symbol: int):
        total = cum[-1]
        span = self.high - self.low + 1
        self.high = self.low + cum[symbol + 1] * span // total - 1
        self.low = self.low + cum[symbol] * span // total
        while True:
            if (self.low ^ self.high) & _HALF == 0:
                # top bits agree: emit, then release any pending opposites
                bit = self.low >> (STATE_SIZE - 1)
                self.out.write(bit)
                for _ in range(self.pending):
                    self.out.write(bit ^ 1)
                self.pending = 0
            elif self.low & ~self.high & _QUARTER:
                # near-convergence around the midpoint: defer one bit and
                # map [1/4, 3/4) onto the full interval
                self.pending += 1
                self.low -= _QUARTER
                self.high -= _QUARTER
            else:
                break
            self.low = (self.low << 1) & _MASK
            self.high = ((self.high << 1) & _MASK) | 1

    def finish(self):
        # one disambiguating bit; the decoder's zero padding does the rest
        self.out.write(1)


class RangeDecoder:
    def __init__(self, inp: BitReader):
        self.inp = inp
        self.low = 0
        self.high = _MASK
        self.code = 0
        for _ in range(STATE_SIZE):
            self.code = (self.code << 1) | self.inp.read()

    def decode(self, cum: list) -> int:
        total = cum[-1]
        span = self.high - self.low + 1
        value = ((self.code - self.low + 1) * total - 1) // span
        symbol = bisect_right(cum, value) - 1
        self.high = self.low + cum[symbol + 1] * span // total - 1
        self.low = self.low + cum[symbol] * span // total
        while True:
            if (self.low ^ self.high) & _HALF == 0:
                pass
            elif self.low & ~self.high & _QUARTER:
                self.low -= _QUARTER
                self.high -= _QUARTER
                self.code -= _QUARTER
            else:
                break
            self.low = (self.low << 1) & _MASK
            self.high = ((self.high << 1) & _MASK) | 1
            self.code = ((self.code << 1) & _MASK) | self.inp.read()
        return symbol


def freq_from_pmf(pmf, precision: int = FREQ_PRECISION) -> np.ndarray:
    """Integer frequencies summing to 2**precision, every entry >= 1.

    Largest-remainder rounding; zero rows are bumped to one and the
    deficit is taken from the largest bin.
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    if pmf.ndim != 1 or pmf.size == 0 or (pmf < 0).any():
        raise ValueError("freq_from_pmf: need a nonempty nonnegative 1-d pmf")
    total = 1 << precision
    if pmf.size > total:
        raise ValueError("freq_from_pmf: more symbols than frequency space")
    scaled = pmf / pmf.sum() * total
    base = np.floor(scaled).astype(np.int64)
    deficit = total - int(base.sum())
    if deficit > 0:
        order = np.argsort(-(scaled - base), kind="stable")
        base[order[:deficit]] += 1
    zeros = base == 0
    if zeros.any():
        bump = int(zeros.sum())
        base[zeros] = 1
        top = int(base.argmax())
        base[top] -= bump
        if base[top] < 1:
            raise ValueError("freq_from_pmf: pmf too flat for the precision")
    return base


def freq_from_pmf_batch(pmf, precision: int = FREQ_PRECISION) -> np.ndarray:
    """Row-wise ``freq_from_pmf`` with identical rounding decisions."""
    pmf = np.asarray(pmf, dtype=np.float64)
    if pmf.ndim != 2 or pmf.shape[1] == 0 or (pmf < 0).any():
        raise ValueError("freq_from_pmf_batch: need a nonnegative 2-d array")
    total = 1 << precision
    scaled = pmf / pmf.sum(axis=1, keepdims=True) * total
    base = np.floor(scaled).astype(np.int64)
    deficit = total - base.sum(axis=1)
    ranks = np.argsort(np.argsort(-(scaled - base), axis=1, kind="stable"),
                       axis=1, kind="stable")
    base += ranks < deficit[:, None]
    zeros = base == 0
    bump = zeros.sum(axis=1)
    if bump.any():
        base[zeros] = 1
        rows = np.arange(base.shape[0])
        base[rows, base.argmax(axis=1)] -= bump
        if (base < 1).any():
            raise ValueError("freq_from_pmf_batch: pmf too flat for the precision")
    return base


def cumulative(freqs) -> list:
    """Plain-int cumulative table [0, f0, f0+f1, ...] for the coders."""
    out = [0]
    running = 0
    for f in np.asarray(freqs).tolist():
        running += int(f)
        out.append(running)
    return out


def encode_symbols(symbols, tables) -> tuple[bytes, int]:
    """Encode a symbol sequence; returns (payload, exact bit count).

    ``tables`` is either one cumulative table shared by every symbol or a
    sequence of per-symbol cumulative tables of matching length.
    """
    shared = tables and isinstance(tables[0], int)
    writer = BitWriter()
    enc = RangeEncoder(writer)
    if shared:
        cum = tables
        for s in symbols:
            enc.encode(cum, int(s))
    else:
        if len(tables) != len(symbols):
            raise ValueError("encode_symbols: one table per symbol required")
        for cum, s in zip(tables, symbols):
            enc.encode(cum, int(s))
    enc.finish()
    return writer.getvalue(), writer.bits_written


def decode_symbols(data: bytes, tables, count: int) -> list:
    """Inverse of ``encode_symbols`` for a known symbol count."""
    shared = tables and isinstance(tables[0], int)
    dec = RangeDecoder(BitReader(data))
    if shared:
        return [dec.decode(tables) for _ in range(count)]
    if len(tables) != count:
        raise ValueError("decode_symbols: one table per symbol required")
    return [dec.decode(tables[i]) for i in range(count)]
