"""Range coding over integer symbols with 16-bit quantized CDF tables.

Two entry points:

* :func:`encode` / :func:`decode` with explicit :class:`CdfTable` objects;
* :func:`encode_gaussian` / :func:`decode_gaussian`, which build discretized
  Gaussian tables on the fly from symbol-domain ``(mu, sigma)``. Symbols that
  fall outside a table's window are sent through an escape symbol followed by
  an Exp-Golomb code, so any value in ``[SYM_MIN, SYM_MAX]`` is codable.

Payload format: big-endian renormalization bytes of a 32-bit range coder;
the always-zero lead byte is dropped and trailing zero bytes are stripped
(the decoder reads zeros past the end).
"""

from dataclasses import dataclass
import math

import numpy as np

from . import _backend, _consts
from ._pykernels import RangeDecoder, RangeEncoder, repair_cdf
from .errors import TruncatedError, UsageError

PROB_BITS = _consts.PROB_BITS
PROB_TOTAL = _consts.PROB_TOTAL
SYM_MIN = _consts.SYM_MIN
SYM_MAX = _consts.SYM_MAX

__all__ = [
    "CdfTable",
    "CodedSegment",
    "RangeEncoder",
    "RangeDecoder",
    "encode",
    "decode",
    "encode_gaussian",
    "decode_gaussian",
    "gaussian_table",
    "gaussian_cost_bits",
]


@dataclass(frozen=True)
class CdfTable:
    """Symbols ``offset .. offset + len(cdf) - 2`` with cumulative counts ``cdf``."""

    offset: int
    cdf: np.ndarray

    def __post_init__(self):
        cdf = np.asarray(self.cdf, dtype=np.int64)
        if cdf[0] != 0 or cdf[-1] != PROB_TOTAL or np.any(np.diff(cdf) <= 0):
            raise UsageError("CDF must start at 0, end at 2**16 and be strictly increasing")
        object.__setattr__(self, "cdf", cdf)

    @property
    def size(self):
        return len(self.cdf) - 1

    @classmethod
    def from_pmf(cls, pmf, offset=0):
        """Quantize a pmf to 16 bits; every symbol keeps a nonzero frequency."""
        pmf = np.asarray(pmf, dtype=np.float64)
        if pmf.ndim != 1 or pmf.size < 1 or pmf.size >= PROB_TOTAL:
            raise UsageError("pmf must be a 1D array with fewer than 2**16 entries")
        cum = np.concatenate([[0.0], np.cumsum(pmf)])
        cdf = np.floor(cum / cum[-1] * PROB_TOTAL + 0.5).astype(np.int64)
        cdf[-1] = PROB_TOTAL
        return cls(int(offset), repair_cdf(cdf))

    def prob(self, symbol):
        i = int(symbol) - self.offset
        return (self.cdf[i + 1] - self.cdf[i]) / PROB_TOTAL


@dataclass(frozen=True)
class CodedSegment:
    payload: bytes
    count: int
    declared_length: int

    @classmethod
    def wrap(cls, payload, count):
        return cls(bytes(payload), int(count), len(payload))

    def checked_payload(self):
        if len(self.payload) < self.declared_length:
            raise TruncatedError(
                f"payload truncated: {len(self.payload)} of {self.declared_length} bytes",
                section="segment",
                position=len(self.payload),
            )
        return bytes(self.payload)


def encode(symbols, tables, backend=None):
    symbols = np.asarray(symbols, dtype=np.int64).ravel()
    if len(tables) != symbols.size:
        raise UsageError("one table per symbol is required")
    k = _backend.get(backend)
    payload = k.encode_cdf(symbols.tolist(), [t.cdf for t in tables], [t.offset for t in tables])
    return CodedSegment.wrap(payload, symbols.size)


def decode(segment, tables, backend=None):
    if len(tables) != segment.count:
        raise UsageError("one table per symbol is required")
    k = _backend.get(backend)
    return k.decode_cdf(segment.checked_payload(), [t.cdf for t in tables], [t.offset for t in tables])


def encode_gaussian(symbols, mu, sigma, backend=None):
    """Code symbols under discretized Gaussians given in the symbol domain."""
    symbols = np.asarray(symbols, dtype=np.int64).ravel()
    if symbols.size and (symbols.min() < SYM_MIN or symbols.max() > SYM_MAX):
        raise UsageError("symbol outside the codable range; clamp upstream")
    k = _backend.get(backend)
    payload = k.encode_gaussian(symbols, np.asarray(mu, np.float64), np.asarray(sigma, np.float64))
    return CodedSegment.wrap(payload, symbols.size)


def decode_gaussian(segment, mu, sigma, backend=None):
    k = _backend.get(backend)
    return k.decode_gaussian(
        segment.checked_payload(), np.asarray(mu, np.float64), np.asarray(sigma, np.float64), segment.count
    )


def gaussian_table(mu, sigma, backend=None):
    """(center, lo, cdf) for one Gaussian; the last interval is the escape symbol."""
    k = _backend.get(backend)
    mu_q, sig_q = k.quantize_gaussian_params(mu, sigma)
    return k.gaussian_table(float(np.ravel(mu_q)[0]), float(np.ravel(sig_q)[0]))


def gaussian_cost_bits(symbols, mu, sigma):
    """Sum of -log2 p under the quantized tables, escape codes included."""
    symbols = np.asarray(symbols, dtype=np.int64).ravel()
    k = _backend.get()
    mu_q, sig_q = k.quantize_gaussian_params(np.ravel(mu), np.ravel(sigma))
    mu_q = np.broadcast_to(mu_q, symbols.shape)
    sig_q = np.broadcast_to(sig_q, symbols.shape)
    cache = {}
    bits = 0.0
    for s, m, g in zip(symbols.tolist(), mu_q.tolist(), sig_q.tolist()):
        table = cache.get((m, g))
        if table is None:
            table = cache[(m, g)] = k.gaussian_table(m, g)
        center, lo, cdf = table
        n_window = len(cdf) - 2
        idx = s - lo
        if not 0 <= idx < n_window:
            idx = n_window
            zz = 2 * (s - center) if s >= center else -2 * (s - center) - 1
            bits += _consts.ESC_LEN_BITS + (zz + 1).bit_length() - 1
        bits -= math.log2((cdf[idx + 1] - cdf[idx]) / PROB_TOTAL)
    return bits
