# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled entropy-coding kernels; drop-in replacement for ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, ldexp, sqrt, ceil
from libc.stdlib cimport malloc, realloc, free

from . import _consts as K

cnp.import_array()

ctypedef unsigned long long u64
ctypedef long long i64

cdef double EXP_CLAMP = K.EXP_CLAMP
cdef double LN2_HI = K.LN2_HI
cdef double LN2_LO = K.LN2_LO
cdef double INV_LN2 = K.INV_LN2
cdef double INV_SQRT2 = K.INV_SQRT2
cdef double EXP_C[14]
cdef double ERFC_C[10]
cdef int _i
for _i in range(14):
    EXP_C[_i] = K.EXP_COEFFS[_i]
for _i in range(10):
    ERFC_C[_i] = K.ERFC_COEFFS[_i]

cdef int PROB_BITS = K.PROB_BITS
cdef i64 PROB_TOTAL = K.PROB_TOTAL
cdef i64 SYM_MIN = K.SYM_MIN
cdef i64 SYM_MAX = K.SYM_MAX
cdef double PARAM_GRID = K.PARAM_GRID
cdef double SIGMA_MIN = K.SIGMA_MIN
cdef double SIGMA_MAX = K.SIGMA_MAX
cdef double TAIL_SIGMAS = K.TAIL_SIGMAS
cdef int MAX_RADIUS = K.MAX_RADIUS
cdef int ESC_LEN_BITS = K.ESC_LEN_BITS
cdef double LOG_SIGMA_MIN = K.LOG_SIGMA_MIN
cdef double LOG_SIGMA_MAX = K.LOG_SIGMA_MAX
cdef double LN_EPS = K.LN_EPS


# -- deterministic math ---------------------------------------------------------

cdef inline double c_exp(double x) nogil:
    cdef double k, r, p
    cdef int n
    if x > EXP_CLAMP:
        x = EXP_CLAMP
    elif x < -EXP_CLAMP:
        x = -EXP_CLAMP
    k = floor(x * INV_LN2 + 0.5)
    r = (x - k * LN2_HI) - k * LN2_LO
    p = EXP_C[13]
    for n in range(12, -1, -1):
        p = p * r + EXP_C[n]
    return ldexp(p, <int>k)


cdef inline double c_erfc_pos(double z) nogil:
    cdef double t = 1.0 / (1.0 + 0.5 * z)
    cdef double poly = ERFC_C[9]
    cdef int n
    for n in range(8, -1, -1):
        poly = poly * t + ERFC_C[n]
    return t * c_exp(-z * z + poly)


cdef inline double c_phi(double x) nogil:
    cdef double u = x * INV_SQRT2
    cdef double e
    if u < 0.0:
        e = c_erfc_pos(-u)
        return 0.5 * e
    e = c_erfc_pos(u)
    return 1.0 - 0.5 * e


cdef inline double c_round(double x) nogil:
    if x < 0.0:
        return -floor(-x + 0.5)
    if x > 0.0:
        return floor(x + 0.5)
    return 0.0 * x


def det_exp(x):
    a = np.asarray(x, dtype=np.float64)
    flat = np.ascontiguousarray(a).ravel()
    cdef double[::1] v = flat
    out = np.empty_like(flat)
    cdef double[::1] o = out
    cdef Py_ssize_t i
    for i in range(v.shape[0]):
        o[i] = c_exp(v[i])
    return out.reshape(a.shape)


def det_normal_cdf(x):
    a = np.asarray(x, dtype=np.float64)
    flat = np.ascontiguousarray(a).ravel()
    cdef double[::1] v = flat
    out = np.empty_like(flat)
    cdef double[::1] o = out
    cdef Py_ssize_t i
    for i in range(v.shape[0]):
        o[i] = c_phi(v[i])
    return out.reshape(a.shape)


cdef inline void c_quantize(double mu, double sigma, double* mu_q, double* sig_q) noexcept nogil:
    if mu < SYM_MIN:
        mu = SYM_MIN
    elif mu > SYM_MAX:
        mu = SYM_MAX
    if sigma < 0.0:
        sigma = 0.0
    elif sigma > SIGMA_MAX:
        sigma = SIGMA_MAX
    mu_q[0] = c_round(mu * PARAM_GRID) / PARAM_GRID
    sig_q[0] = c_round(sigma * PARAM_GRID) / PARAM_GRID
    if sig_q[0] < SIGMA_MIN:
        sig_q[0] = SIGMA_MIN


def quantize_gaussian_params(mu, sigma):
    m = np.ascontiguousarray(np.asarray(mu, dtype=np.float64))
    s = np.ascontiguousarray(np.asarray(sigma, dtype=np.float64))
    if not (np.all(np.isfinite(m)) and np.all(np.isfinite(s))):
        raise ValueError("non-finite Gaussian parameters")
    m, s = np.broadcast_arrays(m, s)
    shape = m.shape
    mf = np.ascontiguousarray(m).ravel()
    sf = np.ascontiguousarray(s).ravel()
    mo = np.empty_like(mf)
    so = np.empty_like(sf)
    cdef double[::1] a = mf, b = sf, c = mo, d = so
    cdef Py_ssize_t i
    for i in range(a.shape[0]):
        c_quantize(a[i], b[i], &c[i], &d[i])
    return mo.reshape(shape), so.reshape(shape)


# -- tables ---------------------------------------------------------------------

cdef struct Table:
    i64 center
    i64 lo
    int nsym          # window symbols + escape
    i64* cdf          # nsym + 1 entries


cdef void c_repair(i64* cdf, int nsym, i64* freq) noexcept nogil:
    cdef int i, j, k
    cdef i64 best
    for i in range(nsym):
        freq[i] = cdf[i + 1] - cdf[i]
    for i in range(nsym):
        while freq[i] <= 0:
            j = 0
            best = freq[0]
            for k in range(1, nsym):
                if freq[k] > best:
                    best = freq[k]
                    j = k
            freq[j] -= 1
            freq[i] += 1
    cdf[0] = 0
    for i in range(nsym):
        cdf[i + 1] = cdf[i] + freq[i]


cdef int c_build_table(double mu_q, double sig_q, Table* tb) except -1:
    cdef i64 center = <i64>c_round(mu_q)
    cdef int radius = <int>ceil(sig_q * TAIL_SIGMAS)
    cdef i64 lo, hi, v
    cdef int n, i
    cdef double c0, base, cum
    cdef i64* freq
    if radius > MAX_RADIUS:
        radius = MAX_RADIUS
    if radius < 1:
        radius = 1
    lo = center - radius
    if lo < SYM_MIN:
        lo = SYM_MIN
    hi = center + radius
    if hi > SYM_MAX:
        hi = SYM_MAX
    n = <int>(hi - lo + 1)
    tb.cdf = <i64*>malloc((n + 2) * sizeof(i64))
    freq = <i64*>malloc((n + 1) * sizeof(i64))
    if tb.cdf == NULL or freq == NULL:
        free(tb.cdf)
        free(freq)
        raise MemoryError()
    base = (<double>lo - 0.5) - mu_q
    c0 = c_phi((0.0 + base) / sig_q)
    tb.cdf[0] = 0
    for i in range(1, n + 1):
        cum = c_phi((<double>i + base) / sig_q)
        v = <i64>floor((cum - c0) * <double>PROB_TOTAL + 0.5)
        if v > PROB_TOTAL:
            v = PROB_TOTAL
        tb.cdf[i] = v
    tb.cdf[n + 1] = PROB_TOTAL
    tb.center = center
    tb.lo = lo
    tb.nsym = n + 1
    c_repair(tb.cdf, n + 1, freq)
    free(freq)
    return 0


cdef class _TableObj:
    cdef Table tb

    def __cinit__(self):
        self.tb.cdf = NULL

    def __dealloc__(self):
        free(self.tb.cdf)


def gaussian_table(double mu_q, double sig_q):
    cdef _TableObj obj = _TableObj()
    c_build_table(mu_q, sig_q, &obj.tb)
    cdf = np.empty(obj.tb.nsym + 1, dtype=np.int64)
    cdef i64[::1] c = cdf
    cdef int i
    for i in range(obj.tb.nsym + 1):
        c[i] = obj.tb.cdf[i]
    return int(obj.tb.center), int(obj.tb.lo), cdf


# -- range coder ------------------------------------------------------------------

cdef u64 MASK32 = 0xFFFFFFFFULL
cdef u64 TOP = 1ULL << 24


cdef struct Enc:
    u64 low
    u64 rng
    unsigned int cache
    u64 cache_size
    unsigned char* buf
    Py_ssize_t len
    Py_ssize_t cap


cdef int enc_init(Enc* e) except -1:
    e.low = 0
    e.rng = MASK32
    e.cache = 0
    e.cache_size = 1
    e.cap = 256
    e.len = 0
    e.buf = <unsigned char*>malloc(e.cap)
    if e.buf == NULL:
        raise MemoryError()
    return 0


cdef int enc_put(Enc* e, unsigned int byte) except -1:
    cdef unsigned char* nb
    if e.len == e.cap:
        nb = <unsigned char*>realloc(e.buf, e.cap * 2)
        if nb == NULL:
            raise MemoryError()
        e.buf = nb
        e.cap *= 2
    e.buf[e.len] = <unsigned char>(byte & 0xFF)
    e.len += 1
    return 0


cdef int enc_shift_low(Enc* e) except -1:
    cdef u64 low = e.low
    cdef unsigned int carry, temp
    if (low & MASK32) < 0xFF000000ULL or (low >> 32) != 0:
        carry = <unsigned int>(low >> 32)
        temp = e.cache
        while True:
            enc_put(e, temp + carry)
            temp = 0xFF
            e.cache_size -= 1
            if e.cache_size == 0:
                break
        e.cache = <unsigned int>((low >> 24) & 0xFF)
    e.cache_size += 1
    e.low = (low << 8) & MASK32
    return 0


cdef inline int enc_encode(Enc* e, u64 start, u64 size, int total_bits) except -1:
    cdef u64 r = e.rng >> total_bits
    e.low += r * start
    e.rng = r * size
    while e.rng < TOP:
        e.rng <<= 8
        enc_shift_low(e)
    return 0


cdef int enc_bits(Enc* e, u64 value, int nbits) except -1:
    cdef int take
    while nbits > 0:
        take = 16 if nbits > 16 else nbits
        nbits -= take
        enc_encode(e, (value >> nbits) & ((1ULL << take) - 1), 1, take)
    return 0


cdef bytes enc_finish(Enc* e):
    cdef u64 low = e.low
    cdef u64 high = e.low + e.rng - 1
    cdef u64 mask, v = low
    cdef int keep
    cdef Py_ssize_t end
    for keep in range(5):
        mask = (1ULL << (8 * (4 - keep))) - 1
        v = (low + mask) & ~mask
        if v <= high:
            break
    e.low = v
    for keep in range(5):
        enc_shift_low(e)
    if e.len < 1 or e.buf[0] != 0:
        free(e.buf)
        raise AssertionError("range coder lead byte must be zero")
    end = e.len
    while end > 1 and e.buf[end - 1] == 0:
        end -= 1
    out = (<char*>e.buf)[1:end] if end > 1 else b""
    free(e.buf)
    e.buf = NULL
    return out


cdef struct Dec:
    const unsigned char* data
    Py_ssize_t n
    Py_ssize_t pos
    u64 rng
    u64 code
    u64 r


cdef inline unsigned int dec_next(Dec* d) nogil:
    cdef Py_ssize_t p = d.pos
    d.pos = p + 1
    if p < d.n:
        return d.data[p]
    return 0


cdef void dec_init(Dec* d, const unsigned char* data, Py_ssize_t n) noexcept nogil:
    cdef int i
    d.data = data
    d.n = n
    d.pos = 0
    d.rng = MASK32
    d.code = 0
    d.r = 0
    for i in range(4):
        d.code = (d.code << 8) | dec_next(d)


cdef inline u64 dec_target(Dec* d, int total_bits) nogil:
    cdef u64 v, top
    d.r = d.rng >> total_bits
    v = d.code // d.r
    top = (1ULL << total_bits) - 1
    return v if v < top else top


cdef inline void dec_update(Dec* d, u64 start, u64 size) noexcept nogil:
    d.code -= d.r * start
    d.rng = d.r * size
    while d.rng < TOP:
        d.code = ((d.code << 8) | dec_next(d)) & MASK32
        d.rng <<= 8


cdef u64 dec_bits(Dec* d, int nbits) nogil:
    cdef u64 value = 0, v
    cdef int take
    while nbits > 0:
        take = 16 if nbits > 16 else nbits
        nbits -= take
        v = dec_target(d, take)
        dec_update(d, v, 1)
        value = (value << take) | v
    return value


cdef inline int find_index(const i64* cdf, int nsym, u64 target) nogil:
    # largest i with cdf[i] <= target, i < nsym
    cdef int lo = 0, hi = nsym, mid
    while hi - lo > 1:
        mid = (lo + hi) >> 1
        if <u64>cdf[mid] <= target:
            lo = mid
        else:
            hi = mid
    return lo


cdef inline int bit_length(u64 u) nogil:
    cdef int n = 0
    while u:
        u >>= 1
        n += 1
    return n


cdef int encode_one(Enc* e, i64 s, Table* tb) except -1:
    cdef int n_window = tb.nsym - 1
    cdef i64 idx = s - tb.lo
    cdef i64 value, zz
    cdef u64 u
    cdef int nb
    if idx >= 0 and idx < n_window:
        enc_encode(e, tb.cdf[idx], tb.cdf[idx + 1] - tb.cdf[idx], PROB_BITS)
        return 0
    enc_encode(e, tb.cdf[n_window], tb.cdf[n_window + 1] - tb.cdf[n_window], PROB_BITS)
    value = s - tb.center
    zz = 2 * value if value >= 0 else -2 * value - 1
    u = <u64>(zz + 1)
    nb = bit_length(u) - 1
    enc_bits(e, nb, ESC_LEN_BITS)
    enc_bits(e, u - (1ULL << nb), nb)
    return 0


cdef i64 decode_one(Dec* d, Table* tb) nogil:
    cdef int n_window = tb.nsym - 1
    cdef u64 t = dec_target(d, PROB_BITS)
    cdef int idx = find_index(tb.cdf, tb.nsym, t)
    cdef int nb
    cdef u64 u
    cdef i64 zz
    dec_update(d, tb.cdf[idx], tb.cdf[idx + 1] - tb.cdf[idx])
    if idx < n_window:
        return tb.lo + idx
    nb = <int>dec_bits(d, ESC_LEN_BITS)
    u = (1ULL << nb) + dec_bits(d, nb)
    zz = <i64>u - 1
    if zz % 2 == 0:
        return tb.center + zz // 2
    return tb.center - (zz + 1) // 2


cdef class _TableCache:
    """Cache keyed by quantized (mu, sigma); the last table is reused directly."""
    cdef Table* last
    cdef double last_mu, last_sig
    cdef dict tables

    def __cinit__(self):
        self.last = NULL
        self.tables = {}

    cdef Table* get(self, double mu_q, double sig_q) except NULL:
        cdef _TableObj obj
        if self.last != NULL and mu_q == self.last_mu and sig_q == self.last_sig:
            return self.last
        key = (mu_q, sig_q)
        holder = self.tables.get(key)
        if holder is None:
            if len(self.tables) >= 20000:
                self.tables.clear()
            obj = _TableObj()
            c_build_table(mu_q, sig_q, &obj.tb)
            self.tables[key] = obj
        else:
            obj = <_TableObj>holder
        self.last = &obj.tb
        self.last_mu = mu_q
        self.last_sig = sig_q
        return self.last


def encode_cdf(symbols, cdfs, offsets):
    cdef Enc e
    cdef i64 idx, start, size
    enc_init(&e)
    try:
        for s, cdf, off in zip(symbols, cdfs, offsets):
            idx = int(s) - int(off)
            if idx < 0 or idx >= len(cdf) - 1:
                raise ValueError(f"symbol {int(s)} outside table range")
            start = int(cdf[idx])
            size = int(cdf[idx + 1]) - start
            if size <= 0:
                raise ValueError(f"symbol {int(s)} has zero frequency")
            enc_encode(&e, start, size, PROB_BITS)
    except BaseException:
        free(e.buf)
        raise
    return enc_finish(&e)


def decode_cdf(bytes data, cdfs, offsets):
    cdef Dec d
    cdef u64 t
    cdef int idx, nsym
    cdef i64[::1] c
    dec_init(&d, <const unsigned char*>data, len(data))
    out = np.empty(len(cdfs), dtype=np.int64)
    cdef i64[::1] o = out
    cdef Py_ssize_t i = 0
    for cdf, off in zip(cdfs, offsets):
        c = np.ascontiguousarray(cdf, dtype=np.int64)
        nsym = c.shape[0] - 1
        t = dec_target(&d, PROB_BITS)
        idx = find_index(&c[0], nsym, t)
        dec_update(&d, c[idx], c[idx + 1] - c[idx])
        o[i] = idx + int(off)
        i += 1
    return out


def encode_gaussian(symbols, mu, sigma):
    sym = np.ascontiguousarray(np.asarray(symbols, dtype=np.int64).ravel())
    mu_q, sig_q = quantize_gaussian_params(np.ravel(mu), np.ravel(sigma))
    mu_q = np.ascontiguousarray(np.broadcast_to(mu_q, sym.shape))
    sig_q = np.ascontiguousarray(np.broadcast_to(sig_q, sym.shape))
    cdef const i64[::1] s = sym
    cdef const double[::1] m = mu_q
    cdef const double[::1] g = sig_q
    cdef _TableCache cache = _TableCache()
    cdef Enc e
    cdef Py_ssize_t i
    enc_init(&e)
    try:
        for i in range(s.shape[0]):
            encode_one(&e, s[i], cache.get(m[i], g[i]))
    except BaseException:
        free(e.buf)
        raise
    return enc_finish(&e)


def decode_gaussian(bytes data, mu, sigma, Py_ssize_t count):
    mu_q, sig_q = quantize_gaussian_params(np.ravel(mu), np.ravel(sigma))
    mu_q = np.ascontiguousarray(np.broadcast_to(mu_q, (count,)))
    sig_q = np.ascontiguousarray(np.broadcast_to(sig_q, (count,)))
    cdef const double[::1] m = mu_q
    cdef const double[::1] g = sig_q
    cdef _TableCache cache = _TableCache()
    cdef Dec d
    out = np.empty(count, dtype=np.int64)
    cdef i64[::1] o = out
    cdef Py_ssize_t i
    dec_init(&d, <const unsigned char*>data, len(data))
    for i in range(count):
        o[i] = decode_one(&d, cache.get(m[i], g[i]))
    return out


# -- autoregressive context coding ---------------------------------------------------

def causal_offsets(int kernel, bint include_center):
    from ._pykernels import causal_offsets as _co
    return _co(kernel, include_center)


cdef inline double c_gelu(double x) nogil:
    return x * c_phi(x)


cdef void c_layer_norm(double* a, const double* gamma, const double* beta, int n) noexcept nogil:
    cdef double m = 0.0, v = 0.0, d, inv
    cdef int i
    for i in range(n):
        m += a[i]
    m = m / n
    for i in range(n):
        d = a[i] - m
        v += d * d
    v = v / n
    inv = sqrt(v + LN_EPS)
    for i in range(n):
        a[i] = (a[i] - m) / inv * gamma[i] + beta[i]


def context_code_block(weights, delta, shape, int kernel, symbols=None, data=None):
    cdef int T = shape[0], H = shape[1], W = shape[2]
    cdef double[:, :, ::1] w1 = np.ascontiguousarray(weights["w1"], dtype=np.float64)
    cdef double[:, ::1] b1 = np.ascontiguousarray(weights["b1"], dtype=np.float64)
    cdef double[:, ::1] g2 = np.ascontiguousarray(weights["g2"], dtype=np.float64)
    cdef double[:, ::1] be2 = np.ascontiguousarray(weights["be2"], dtype=np.float64)
    cdef double[:, :, :, ::1] w2 = np.ascontiguousarray(weights["w2"], dtype=np.float64)
    cdef double[:, ::1] b2 = np.ascontiguousarray(weights["b2"], dtype=np.float64)
    cdef double[:, ::1] g3 = np.ascontiguousarray(weights["g3"], dtype=np.float64)
    cdef double[:, ::1] be3 = np.ascontiguousarray(weights["be3"], dtype=np.float64)
    cdef double[:, :, :, ::1] w3 = np.ascontiguousarray(weights["w3"], dtype=np.float64)
    cdef double[:, ::1] b3 = np.ascontiguousarray(weights["b3"], dtype=np.float64)
    cdef double[::1] dl = np.ascontiguousarray(delta, dtype=np.float64)
    cdef int G = b1.shape[0], WD = b1.shape[1]
    cdef int pad = kernel // 2
    cdef i64[:, ::1] offA = np.ascontiguousarray(causal_offsets(kernel, False))
    cdef i64[:, ::1] offB = np.ascontiguousarray(causal_offsets(kernel, True))
    cdef int nA = offA.shape[0], nB = offB.shape[0]
    cdef int TP = T + 2 * pad, HP = H + 2 * pad, WP = W + 2 * pad
    xa = np.zeros((TP, HP, WP, G))
    n1a = np.zeros((TP, HP, WP, G, WD))
    n2a = np.zeros((TP, HP, WP, G, WD))
    cdef double[:, :, :, ::1] x = xa
    cdef double[:, :, :, :, ::1] n1 = n1a
    cdef double[:, :, :, :, ::1] n2 = n2a
    mus_a = np.empty((T, H, W, G))
    sig_a = np.empty((T, H, W, G))
    cdef double[:, :, :, ::1] mus = mus_a
    cdef double[:, :, :, ::1] sigs = sig_a
    cdef bint encoding = symbols is not None
    cdef Enc e
    cdef Dec d
    cdef bytes payload
    if encoding:
        sym_a = np.ascontiguousarray(np.asarray(symbols, dtype=np.int64).reshape(T, H, W, G))
    else:
        sym_a = np.zeros((T, H, W, G), dtype=np.int64)
        payload = data
    cdef i64[:, :, :, ::1] sym = sym_a
    cdef _TableCache cache = _TableCache()
    cdef double acc[64]
    cdef double hv[64]
    cdef double mu_s, sig_s, mu_q, sig_q, ls
    cdef int t, h, w, g, o, i, a, k, pt, ph, pw, qt, qh, qw
    cdef i64 s
    if WD > 64:
        raise ValueError("context width above 64 not supported")
    if encoding:
        enc_init(&e)
    else:
        dec_init(&d, <const unsigned char*>payload, len(payload))
    try:
        for t in range(T):
            for h in range(H):
                for w in range(W):
                    pt = t + pad
                    ph = h + pad
                    pw = w + pad
                    for g in range(G):
                        # block 1: type-A masked conv, GeLU, then LN feeding block 2
                        for o in range(WD):
                            acc[o] = 0.0
                            for a in range(nA):
                                acc[o] += w1[g, o, a] * x[pt + offA[a, 0], ph + offA[a, 1], pw + offA[a, 2], g]
                            hv[o] = c_gelu(b1[g, o] + acc[o])
                        c_layer_norm(hv, &g2[g, 0], &be2[g, 0], WD)
                        for o in range(WD):
                            n1[pt, ph, pw, g, o] = hv[o]
                        # block 2
                        for o in range(WD):
                            acc[o] = 0.0
                            for i in range(WD):
                                for a in range(nB):
                                    qt = pt + offB[a, 0]
                                    qh = ph + offB[a, 1]
                                    qw = pw + offB[a, 2]
                                    acc[o] += w2[g, o, i, a] * n1[qt, qh, qw, g, i]
                            hv[o] = c_gelu(b2[g, o] + acc[o])
                        c_layer_norm(hv, &g3[g, 0], &be3[g, 0], WD)
                        for o in range(WD):
                            n2[pt, ph, pw, g, o] = hv[o]
                        # block 3: mean and log scale
                        for k in range(2):
                            acc[k] = 0.0
                            for i in range(WD):
                                for a in range(nB):
                                    qt = pt + offB[a, 0]
                                    qh = ph + offB[a, 1]
                                    qw = pw + offB[a, 2]
                                    acc[k] += w3[g, k, i, a] * n2[qt, qh, qw, g, i]
                        mu_s = (b3[g, 0] + acc[0]) / dl[g]
                        ls = b3[g, 1] + acc[1]
                        if ls < LOG_SIGMA_MIN:
                            ls = LOG_SIGMA_MIN
                        elif ls > LOG_SIGMA_MAX:
                            ls = LOG_SIGMA_MAX
                        sig_s = c_exp(ls) / dl[g]
                        c_quantize(mu_s, sig_s, &mu_q, &sig_q)
                        mus[t, h, w, g] = mu_q
                        sigs[t, h, w, g] = sig_q
                        if encoding:
                            s = sym[t, h, w, g]
                            encode_one(&e, s, cache.get(mu_q, sig_q))
                        else:
                            s = decode_one(&d, cache.get(mu_q, sig_q))
                            sym[t, h, w, g] = s
                        x[pt, ph, pw, g] = <double>s * dl[g]
    except BaseException:
        if encoding and e.buf != NULL:
            free(e.buf)
        raise
    if encoding:
        return enc_finish(&e), mus_a, sig_a
    return sym_a, mus_a, sig_a
