"""Pure-Python implementation of the entropy-coding kernels.

This is the reference backend and the fallback used when the compiled
``_ckernels`` extension is unavailable. Both backends expose the same
functions and must produce byte-identical output.

Everything that influences a probability table is computed with IEEE basic
operations only (+ - * / sqrt, floor, ldexp): the exponential and the normal
CDF are evaluated with the fixed polynomial/rational forms below instead of
the platform libm, so encoder and decoder tables agree bit-exactly.
"""

import math

import numpy as np

from . import _consts as K


# -- deterministic math ------------------------------------------------------


def det_exp(x):
    """exp(x) via Cody-Waite reduction and a degree-13 Taylor polynomial."""
    x = np.clip(np.asarray(x, dtype=np.float64), -K.EXP_CLAMP, K.EXP_CLAMP)
    k = np.floor(x * K.INV_LN2 + 0.5)
    r = (x - k * K.LN2_HI) - k * K.LN2_LO
    p = np.full_like(r, K.EXP_COEFFS[-1])
    for c in K.EXP_COEFFS[-2::-1]:
        p = p * r + c
    return np.ldexp(p, k.astype(np.int64))


def _erfc_pos(z):
    t = 1.0 / (1.0 + 0.5 * z)
    poly = np.full_like(z, K.ERFC_COEFFS[-1])
    for c in K.ERFC_COEFFS[-2::-1]:
        poly = poly * t + c
    return t * det_exp(-z * z + poly)


def det_normal_cdf(x):
    """Standard normal CDF with relative error below 1.2e-7."""
    u = np.asarray(x, dtype=np.float64) * K.INV_SQRT2
    neg = u < 0.0
    e = _erfc_pos(np.abs(u))
    return np.where(neg, 0.5 * e, 1.0 - 0.5 * e)


def det_gelu(x):
    return x * det_normal_cdf(x)


# -- quantized Gaussian tables -------------------------------------------------


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_gaussian_params(mu, sigma):
    """Snap (mu, sigma) onto the fixed grid tables are built from."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
        raise ValueError("non-finite Gaussian parameters")
    mu_q = round_half_away(np.clip(mu, K.SYM_MIN, K.SYM_MAX) * K.PARAM_GRID) / K.PARAM_GRID
    sig_q = round_half_away(np.clip(sigma, 0.0, K.SIGMA_MAX) * K.PARAM_GRID) / K.PARAM_GRID
    sig_q = np.maximum(sig_q, K.SIGMA_MIN)
    return mu_q, sig_q


def repair_cdf(cdf):
    """Make every interval of an integer CDF at least 1 wide.

    Zero-width intervals are fixed lowest symbol first, each by taking one
    unit from the currently largest interval (lowest index on ties).
    """
    freq = np.diff(np.asarray(cdf, dtype=np.int64))
    for i in range(freq.size):
        if freq[i] <= 0:
            need = 1 - freq[i]
            for _ in range(int(need)):
                j = int(np.argmax(freq))
                freq[j] -= 1
                freq[i] += 1
    out = np.zeros(freq.size + 1, dtype=np.int64)
    np.cumsum(freq, out=out[1:])
    return out


def gaussian_table(mu_q, sig_q):
    """Table for one quantized Gaussian.

    Returns ``(center, lo, cdf)``: the window covers symbols ``lo ..
    lo + len(cdf) - 3`` and the final interval is the escape symbol that
    carries the mass outside the window.
    """
    center = int(round_half_away(mu_q))
    radius = min(int(math.ceil(sig_q * K.TAIL_SIGMAS)), K.MAX_RADIUS)
    radius = max(radius, 1)
    lo = max(center - radius, K.SYM_MIN)
    hi = min(center + radius, K.SYM_MAX)
    n = hi - lo + 1
    bounds = (np.arange(n + 1, dtype=np.float64) + (lo - 0.5 - mu_q)) / sig_q
    cum = det_normal_cdf(bounds)
    scaled = (cum - cum[0]) * float(K.PROB_TOTAL)
    cdf = np.empty(n + 2, dtype=np.int64)
    cdf[: n + 1] = np.floor(scaled + 0.5).astype(np.int64)
    cdf[n + 1] = K.PROB_TOTAL
    cdf = np.minimum(cdf, K.PROB_TOTAL)
    return center, lo, repair_cdf(cdf)


class TableCache:
    def __init__(self):
        self._tables = {}

    def get(self, mu_q, sig_q):
        key = (float(mu_q), float(sig_q))
        table = self._tables.get(key)
        if table is None:
            table = gaussian_table(key[0], key[1])
            self._tables[key] = table
        return table


# -- range coder -----------------------------------------------------------------

_MASK32 = 0xFFFFFFFF
_TOP = 1 << 24


class RangeEncoder:
    """32-bit range encoder with byte-wise renormalization and carry caching."""

    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self):
        low = self.low
        if (low & _MASK32) < 0xFF000000 or (low >> 32) != 0:
            carry = low >> 32
            temp = self.cache
            while True:
                self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (low << 8) & _MASK32

    def encode(self, start, size, total_bits):
        r = self.range >> total_bits
        self.low += r * start
        self.range = r * size
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def encode_bits(self, value, nbits):
        while nbits > 0:
            take = min(nbits, 16)
            nbits -= take
            self.encode((value >> nbits) & ((1 << take) - 1), 1, take)

    def finish(self):
        low, high = self.low, self.low + self.range - 1
        for keep in range(5):
            mask = (1 << (8 * (4 - keep))) - 1
            v = (low + mask) & ~mask
            if v <= high:
                break
        self.low = v
        for _ in range(5):
            self._shift_low()
        data = bytes(self.out)
        if data[:1] != b"\x00":
            raise AssertionError("range coder lead byte must be zero")
        return data[1:].rstrip(b"\x00")


class RangeDecoder:
    def __init__(self, data):
        self.data = data
        self.pos = 0
        self.range = _MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next()
        self._r = 0

    def _next(self):
        pos = self.pos
        self.pos = pos + 1
        return self.data[pos] if pos < len(self.data) else 0

    def target(self, total_bits):
        self._r = self.range >> total_bits
        v = self.code // self._r
        top = (1 << total_bits) - 1
        return v if v < top else top

    def update(self, start, size):
        r = self._r
        self.code -= r * start
        self.range = r * size
        while self.range < _TOP:
            self.code = ((self.code << 8) | self._next()) & _MASK32
            self.range <<= 8

    def decode_bits(self, nbits):
        value = 0
        while nbits > 0:
            take = min(nbits, 16)
            nbits -= take
            v = self.target(take)
            self.update(v, 1)
            value = (value << take) | v
        return value


def _find(cdf, target):
    # largest i with cdf[i] <= target
    return int(np.searchsorted(cdf, target, side="right")) - 1


def encode_cdf(symbols, cdfs, offsets):
    """Code ``symbols[i]`` with table ``cdfs[i]`` (symbol ``offsets[i]`` at index 0)."""
    enc = RangeEncoder()
    for s, cdf, off in zip(symbols, cdfs, offsets):
        idx = int(s) - int(off)
        if idx < 0 or idx >= len(cdf) - 1:
            raise ValueError(f"symbol {int(s)} outside table range")
        start = int(cdf[idx])
        size = int(cdf[idx + 1]) - start
        if size <= 0:
            raise ValueError(f"symbol {int(s)} has zero frequency")
        enc.encode(start, size, K.PROB_BITS)
    return enc.finish()


def decode_cdf(data, cdfs, offsets):
    dec = RangeDecoder(data)
    out = np.empty(len(cdfs), dtype=np.int64)
    for i, (cdf, off) in enumerate(zip(cdfs, offsets)):
        t = dec.target(K.PROB_BITS)
        idx = _find(cdf, t)
        dec.update(int(cdf[idx]), int(cdf[idx + 1] - cdf[idx]))
        out[i] = idx + int(off)
    return out


def _encode_escape(enc, value):
    zz = 2 * value if value >= 0 else -2 * value - 1
    u = zz + 1
    nb = u.bit_length() - 1
    enc.encode_bits(nb, K.ESC_LEN_BITS)
    enc.encode_bits(u - (1 << nb), nb)


def _decode_escape(dec):
    nb = dec.decode_bits(K.ESC_LEN_BITS)
    u = (1 << nb) + dec.decode_bits(nb)
    zz = u - 1
    return zz // 2 if zz % 2 == 0 else -(zz + 1) // 2


def _encode_one(enc, s, table):
    center, lo, cdf = table
    n_window = len(cdf) - 2
    idx = s - lo
    if 0 <= idx < n_window:
        enc.encode(int(cdf[idx]), int(cdf[idx + 1] - cdf[idx]), K.PROB_BITS)
    else:
        enc.encode(int(cdf[n_window]), int(cdf[n_window + 1] - cdf[n_window]), K.PROB_BITS)
        _encode_escape(enc, s - center)


def _decode_one(dec, table):
    center, lo, cdf = table
    n_window = len(cdf) - 2
    t = dec.target(K.PROB_BITS)
    idx = _find(cdf, t)
    dec.update(int(cdf[idx]), int(cdf[idx + 1] - cdf[idx]))
    if idx < n_window:
        return lo + idx
    return center + _decode_escape(dec)


def encode_gaussian(symbols, mu, sigma):
    """Range-code integer ``symbols`` under discretized Gaussians."""
    symbols = np.asarray(symbols, dtype=np.int64).ravel()
    mu_q, sig_q = quantize_gaussian_params(np.ravel(mu), np.ravel(sigma))
    mu_q = np.broadcast_to(mu_q, symbols.shape)
    sig_q = np.broadcast_to(sig_q, symbols.shape)
    cache = TableCache()
    enc = RangeEncoder()
    for s, m, sg in zip(symbols.tolist(), mu_q.tolist(), sig_q.tolist()):
        _encode_one(enc, s, cache.get(m, sg))
    return enc.finish()


def decode_gaussian(data, mu, sigma, count):
    mu_q, sig_q = quantize_gaussian_params(np.ravel(mu), np.ravel(sigma))
    mu_q = np.broadcast_to(mu_q, (count,))
    sig_q = np.broadcast_to(sig_q, (count,))
    cache = TableCache()
    dec = RangeDecoder(data)
    out = np.empty(count, dtype=np.int64)
    for i in range(count):
        out[i] = _decode_one(dec, cache.get(float(mu_q[i]), float(sig_q[i])))
    return out


# -- autoregressive context coding ------------------------------------------------


def causal_offsets(kernel, include_center):
    """Kernel offsets (dt, dh, dw) strictly before (or up to) the center, raster order."""
    r = kernel // 2
    offs = []
    for dt in range(-r, r + 1):
        for dh in range(-r, r + 1):
            for dw in range(-r, r + 1):
                if (dt, dh, dw) < (0, 0, 0) or (include_center and (dt, dh, dw) == (0, 0, 0)):
                    offs.append((dt, dh, dw))
    return np.asarray(offs, dtype=np.int64)


def _layer_norm(a, gamma, beta):
    m = a.sum(axis=-1, keepdims=True) / a.shape[-1]
    d = a - m
    v = (d * d).sum(axis=-1, keepdims=True) / a.shape[-1]
    return d / np.sqrt(v + K.LN_EPS) * gamma + beta


def context_code_block(weights, delta, shape, kernel, symbols=None, data=None):
    """Encode (``symbols`` given) or decode (``data`` given) one grid block.

    ``weights`` holds float64 arrays w1 (G,W,nA), b1 (G,W), g2/be2 (G,W),
    w2 (G,W,W,nB), b2 (G,W), g3/be3 (G,W), w3 (G,2,W,nB), b3 (G,2).
    ``delta`` is the per-channel quantization step (G,), ``shape`` the
    block extents (T, H, W). Symbols are laid out (T, H, W, G).

    Returns the payload when encoding and the symbol array when decoding.
    The (mu, sigma) sequence is also returned for rate accounting.
    """
    T, H, W = shape
    w1, b1 = weights["w1"], weights["b1"]
    g2, be2, w2, b2 = weights["g2"], weights["be2"], weights["w2"], weights["b2"]
    g3, be3, w3, b3 = weights["g3"], weights["be3"], weights["w3"], weights["b3"]
    G, width = b1.shape
    pad = kernel // 2
    offA = causal_offsets(kernel, False)
    offB = causal_offsets(kernel, True)
    x = np.zeros((T + 2 * pad, H + 2 * pad, W + 2 * pad, G))
    n1 = np.zeros((T + 2 * pad, H + 2 * pad, W + 2 * pad, G, width))
    n2 = np.zeros_like(n1)
    delta = np.asarray(delta, dtype=np.float64)
    encoding = symbols is not None
    if encoding:
        symbols = np.asarray(symbols, dtype=np.int64).reshape(T, H, W, G)
        coder = RangeEncoder()
    else:
        coder = RangeDecoder(data)
        symbols = np.zeros((T, H, W, G), dtype=np.int64)
    cache = TableCache()
    mus = np.empty((T, H, W, G))
    sigmas = np.empty((T, H, W, G))
    ga = np.arange(G)
    for t in range(T):
        for h in range(H):
            for w in range(W):
                pt, ph, pw = t + pad, h + pad, w + pad
                xa = x[pt + offA[:, 0], ph + offA[:, 1], pw + offA[:, 2]]  # (nA, G)
                h1 = b1 + np.einsum("goa,ag->go", w1, xa)
                n1[pt, ph, pw] = _layer_norm(det_gelu(h1), g2, be2)
                win = n1[pt + offB[:, 0], ph + offB[:, 1], pw + offB[:, 2]]  # (nB, G, W)
                h2 = b2 + np.einsum("goia,agi->go", w2, win)
                n2[pt, ph, pw] = _layer_norm(det_gelu(h2), g3, be3)
                win = n2[pt + offB[:, 0], ph + offB[:, 1], pw + offB[:, 2]]
                out = b3 + np.einsum("gkia,agi->gk", w3, win)
                mu_s = out[ga, 0] / delta
                sig_s = det_exp(np.clip(out[ga, 1], K.LOG_SIGMA_MIN, K.LOG_SIGMA_MAX)) / delta
                mu_q, sig_q = quantize_gaussian_params(mu_s, sig_s)
                mus[t, h, w] = mu_q
                sigmas[t, h, w] = sig_q
                for g in range(G):
                    table = cache.get(mu_q[g], sig_q[g])
                    if encoding:
                        s = int(symbols[t, h, w, g])
                        _encode_one(coder, s, table)
                    else:
                        s = _decode_one(coder, table)
                        symbols[t, h, w, g] = s
                    x[pt, ph, pw, g] = s * delta[g]
    if encoding:
        return coder.finish(), mus, sigmas
    return symbols, mus, sigmas
