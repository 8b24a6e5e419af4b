"""Three-level parameter coding and the ``.nvrc`` container.

Levels:

* theta - the representation (grids and layer tensors), coded under phi-hat;
* phi   - quantization scales and entropy-model parameters, grouped by kind
          and coded per group under psi-hat;
* psi   - per-group (log step, mu, log sigma), stored raw in half precision.

Everything that shapes a probability table at coding time is derived in
float64 from decoded integers and half-precision values with the
deterministic exponential of the kernel layer, so encoder and decoder agree
bit for bit.

Container layout (all integers little-endian)::

    "NVRC" | version u16 | flags u16 | config_len u32 | config | config crc32 u32
    | T u16 | H u16 | W u16 | C u16 | color u8
    | 3 x (offset u32, length u32, crc32 u32)        # psi, phi, theta
    | psi section | phi section | theta section

The config is the ``key = value`` text of the model and codec options,
deflate-compressed; its crc32 covers the compressed bytes. The phi and
theta sections start with a varint table of segment lengths:
phi has one segment per group; theta has one per grid block (level
ascending, block raster order) followed by one per layer tensor (network
definition order).
"""

from dataclasses import asdict, dataclass, fields
import io
import logging
import math
import struct
import zlib

import numpy as np
import torch
from torch import nn
from torch.func import functional_call

from . import _backend, _consts
from ._pykernels import det_exp, round_half_away
from .entropy import ContextModel, DualAxisGaussian, TensorGaussian, discretized_pmf, rate_bits, sigma_from_log
from .errors import ChecksumError, ConfigurationError, DecodeError, TruncatedError, VersionError
from .model import ModelConfig, NeuralRepresentation, reshape_layer_param
from .quantization import (
    LOG_DELTA_INIT,
    LOG_DELTA_MAX,
    LOG_DELTA_MIN,
    GridQuantParams,
    LayerQuantParams,
    QuantView,
    block_counts,
    block_extents,
    quantize,
)

logger = logging.getLogger(__name__)

MAGIC = b"NVRC"
VERSION = 1
FLAG_PSI_HALF = 1
FLAG_PHI_CODED = 2
COLOR_MODES = ("rgb", "yuv444")

_FIXED = struct.Struct("<4sHHI")
_GEOM = struct.Struct("<HHHHB")
_SECTION = struct.Struct("<III")
SECTIONS = ("psi", "phi", "theta")


@dataclass
class CodecOptions:
    """Coding choices shared by encoder and decoder (stored in the header)."""

    grid_block: tuple = (16, 8, 8)
    axis_threshold: int = 16
    grid_em: str = "context"
    layer_em: str = "dual_axis"
    level2_coding: bool = True
    grid_step: str = "learned"
    context_width: int = 8
    context_kernel: int = 5
    color: str = "rgb"

    def __post_init__(self):
        self.grid_block = tuple(self.grid_block)
        self.validate()

    def validate(self):
        if len(self.grid_block) != 3 or min(self.grid_block) < 1:
            raise ConfigurationError("grid_block needs three positive extents")
        if self.grid_em not in ("context", "per_tensor"):
            raise ConfigurationError(f"grid_em must be context or per_tensor, got {self.grid_em!r}")
        if self.layer_em not in ("dual_axis", "per_tensor"):
            raise ConfigurationError(f"layer_em must be dual_axis or per_tensor, got {self.layer_em!r}")
        if self.grid_step not in ("learned", "fixed"):
            raise ConfigurationError(f"grid_step must be learned or fixed, got {self.grid_step!r}")
        if self.axis_threshold < 1:
            raise ConfigurationError("axis_threshold must be positive")
        if self.context_kernel % 2 == 0 or self.context_kernel < 3:
            raise ConfigurationError("context_kernel must be odd and at least 3")
        if not 1 <= self.context_width <= 64:
            raise ConfigurationError("context_width must be in [1, 64]")
        if self.color not in COLOR_MODES:
            raise ConfigurationError(f"color must be one of {COLOR_MODES}")


# -- level 1: phi --------------------------------------------------------------


def _key(name):
    return name.replace(":", "_")


class CompressionParams(nn.Module):
    """phi: quantization scales and entropy-model parameters for every theta tensor."""

    def __init__(self, model, options, seed=0):
        super().__init__()
        self.options = options
        cfg = model.config
        self.grid_names = list(model.grid_names)
        self.layer_names = list(model.layer_names)
        self.layer_shapes = {n: tuple(model.params[n].shape) for n in self.layer_names}
        self.grid_quant = nn.ModuleList(
            GridQuantParams(cfg.level_shape(l), options.grid_block, learned=options.grid_step == "learned")
            for l in range(cfg.grid_levels)
        )
        self.layer_quant = nn.ModuleDict()
        self.layer_em = nn.ModuleDict()
        for n in self.layer_names:
            rows, cols = reshape_layer_param(model.params[n]).shape
            self.layer_quant[_key(n)] = LayerQuantParams(rows, cols, options.axis_threshold)
            self.layer_em[_key(n)] = DualAxisGaussian(
                rows, cols, options.axis_threshold, per_tensor=options.layer_em == "per_tensor"
            )
        if options.grid_em == "context":
            self.grid_em = nn.ModuleList(
                ContextModel(
                    cfg.level_shape(l)[3],
                    options.grid_block,
                    width=options.context_width,
                    kernel=options.context_kernel,
                    seed=seed * 1000 + l,
                )
                for l in range(cfg.grid_levels)
            )
        else:
            self.grid_em = nn.ModuleList(TensorGaussian() for _ in range(cfg.grid_levels))

    @torch.no_grad()
    def fit_(self, model):
        """Initialize entropy-model spreads from the current representation."""
        for n in self.layer_names:
            self.layer_em[_key(n)].fit_(reshape_layer_param(model.params[n]))
        for l, name in enumerate(self.grid_names):
            em = self.grid_em[l]
            if isinstance(em, ContextModel):
                em.fit_(model.params[name] / math.exp(LOG_DELTA_INIT))
            else:
                em.fit_(model.params[name])

    def groups(self):
        """Canonical ordered list of (group, [(qualified name, parameter), ...])."""
        out = []
        if self.options.grid_step == "learned":
            for l, gq in enumerate(self.grid_quant):
                out.append((f"grid.log_delta.{l}", [(f"grid_quant.{l}.log_delta_blk", gq.log_delta_blk)]))
        for attr, group in (("log_delta_out", "layer.log_delta_out"), ("log_delta_in", "layer.log_delta_in")):
            members = []
            for n in self.layer_names:
                p = getattr(self.layer_quant[_key(n)], attr)
                if p is not None:
                    members.append((f"layer_quant.{_key(n)}.{attr}", p))
            out.append((group, members))
        for attr in ("mu_out", "log_sigma_out", "mu_in", "log_sigma_in"):
            members = []
            for n in self.layer_names:
                p = getattr(self.layer_em[_key(n)], attr)
                if p is not None:
                    members.append((f"layer_em.{_key(n)}.{attr}", p))
            out.append((f"layer.{attr}", members))
        if self.options.grid_em == "context":
            kinds = {"w": "context.weight", "g": "context.gain", "b": "context.bias"}
            members = {k: [] for k in kinds.values()}
            for l, cm in enumerate(self.grid_em):
                for name, p in cm.tensors():
                    members[kinds[name[0]]].append((f"grid_em.{l}.{name}", p))
            out.extend(members.items())
        else:
            out.append(("grid.mu", [(f"grid_em.{l}.mu", em.mu) for l, em in enumerate(self.grid_em)]))
            out.append(("grid.log_sigma", [(f"grid_em.{l}.log_sigma", em.log_sigma) for l, em in enumerate(self.grid_em)]))
        return [(g, m) for g, m in out if m]

    def group_names(self):
        return [g for g, _ in self.groups()]

    def tensor_count(self):
        return sum(p.numel() for _, m in self.groups() for _, p in m)

    # -- views -------------------------------------------------------------------

    def grid_delta(self, level, phi):
        gq = self.grid_quant[level]
        ld = phi.get(f"grid_quant.{level}.log_delta_blk", gq.log_delta_blk)
        return gq.delta(ld)

    def layer_delta(self, name, phi):
        lq = self.layer_quant[_key(name)]
        k = _key(name)
        lo = phi.get(f"layer_quant.{k}.log_delta_out", lq.log_delta_out)
        li = phi.get(f"layer_quant.{k}.log_delta_in", lq.log_delta_in)
        return lq.delta(lo, li)

    def layer_prior(self, name, phi):
        em = self.layer_em[_key(name)]
        k = _key(name)
        vals = {a: phi.get(f"layer_em.{k}.{a}", getattr(em, a)) for a in ("mu_out", "log_sigma_out", "mu_in", "log_sigma_in")}
        vals = {a: v for a, v in vals.items() if v is not None}
        return functional_call(em, vals, ())

    def grid_prior(self, level, z_hat, phi, delta):
        """(mu, sigma) for a grid given its dequantized values.

        The context model reads the decoded symbols z_hat / delta and predicts
        in units of the step, so its outputs are rescaled by delta here.
        """
        em = self.grid_em[level]
        prefix = f"grid_em.{level}."
        vals = {n[len(prefix):]: v for n, v in phi.items() if n.startswith(prefix)}
        if isinstance(em, ContextModel):
            mu, log_sigma = functional_call(em, vals, (z_hat / delta,))
            return mu * delta, sigma_from_log(log_sigma) * delta
        return functional_call(em, vals, ()) if vals else em()


# -- level 2: psi -------------------------------------------------------------------


PSI_STEPS = {
    "grid.log_delta": 1 / 16,
    "layer.log_delta_out": 1 / 16,
    "layer.log_delta_in": 1 / 16,
    "layer.log_sigma_out": 1 / 16,
    "layer.log_sigma_in": 1 / 16,
    "layer.mu_out": 1e-3,
    "layer.mu_in": 1e-3,
    "context.weight": 1e-2,
    "context.gain": 1 / 16,
    "context.bias": 1 / 16,
    "grid.mu": 1e-3,
    "grid.log_sigma": 1 / 16,
}


def initial_step(group):
    for prefix, step in PSI_STEPS.items():
        if group.startswith(prefix):
            return step
    raise KeyError(group)


class LevelTwoParams(nn.Module):
    """psi: one (log step, mu, log sigma) row per phi group."""

    def __init__(self, groups):
        super().__init__()
        self.group_names = list(groups)
        self.values = nn.Parameter(torch.zeros(len(self.group_names), 3))

    @torch.no_grad()
    def fit_(self, phi_groups):
        """Per-group step by parameter kind; mean and a narrow spread from the data.

        Groups that start constant get a scale well below one step, so
        parameters that are never updated cost almost nothing to transmit.
        """
        for i, (g, members) in enumerate(phi_groups):
            v = torch.cat([p.detach().reshape(-1).double() for _, p in members])
            step = initial_step(g)
            std = float(v.std()) if v.numel() > 1 else 0.0
            self.values[i, 0] = math.log(step)
            self.values[i, 1] = float(v.mean())
            self.values[i, 2] = math.log(max(std, 0.15 * step))

    def half(self):
        """Half-precision snapshot (float16 numpy, shape (groups, 3))."""
        return self.values.detach().cpu().numpy().astype(np.float16)

    def row(self, i):
        return self.values[i, 0], self.values[i, 1], self.values[i, 2]


# -- training-time views -------------------------------------------------------------


class Codec(nn.Module):
    """theta, phi and psi together, with relaxed views for training."""

    def __init__(self, model_config, options, seed=0):
        super().__init__()
        self.options = options
        self.model = NeuralRepresentation(model_config, seed=seed)
        self.phi = CompressionParams(self.model, options, seed=seed)
        self.phi.fit_(self.model)
        self.psi = LevelTwoParams(self.phi.group_names())
        self.psi.fit_(self.phi.groups())

    @property
    def config(self):
        return self.model.config

    def phi_view(self, view, generator=None, need_rate=True):
        """Quantized/relaxed phi values by qualified name, plus their rate in bits."""
        values = {}
        bits = torch.zeros(())
        for i, (group, members) in enumerate(self.phi.groups()):
            if not self.options.level2_coding or view.mode == "raw":
                for name, p in members:
                    values[name] = p
                continue
            log_step, mu, log_sigma = self.psi.row(i)
            step = torch.exp(log_step.clamp(LOG_DELTA_MIN, LOG_DELTA_MAX))
            for name, p in members:
                zs, zh = quantize(p, step, view, generator)
                values[name] = zh
                if need_rate:
                    bits = bits + rate_bits(zs, mu, sigma_from_log(log_sigma), step)
        return values, bits

    def theta_view(self, phi, view, generator=None, need_rate=True):
        """(values, grid bits, layer bits) for the representation under ``view``."""
        model = self.model
        values = {}
        grid_bits = torch.zeros(())
        layer_bits = torch.zeros(())
        for l, name in enumerate(model.grid_names):
            z = model.params[name]
            delta = self.phi.grid_delta(l, phi)
            zs, zh = quantize(z, delta, view, generator)
            values[name] = zh
            if need_rate:
                mu, sigma = self.phi.grid_prior(l, zh, phi, delta)
                grid_bits = grid_bits + rate_bits(zs, mu, sigma, delta)
        for name in model.layer_names:
            w = model.params[name]
            w2 = reshape_layer_param(w)
            delta = self.phi.layer_delta(name, phi)
            zs, zh = quantize(w2, delta, view, generator)
            values[name] = zh.reshape(w.shape)
            if need_rate:
                mu, sigma = self.phi.layer_prior(name, phi)
                layer_bits = layer_bits + rate_bits(zs, mu, sigma, delta)
        return values, grid_bits, layer_bits

    def rate_estimate(self, view=QuantView("hard")):
        """Estimated rate in bits per component under ``view`` (psi counted raw)."""
        with torch.no_grad():
            phi, em_bits = self.phi_view(view)
            _, gb, lb = self.theta_view(phi, view)
        psi_bits = 16 * 3 * len(self.psi.group_names) if self.options.level2_coding else 0
        if not self.options.level2_coding:
            em_bits = torch.tensor(16.0 * self.phi.tensor_count())
        return {"grids": float(gb), "layers": float(lb), "phi": float(em_bits), "psi": float(psi_bits)}


# -- deterministic coding-time parameter derivation --------------------------------------


def _np(t):
    return t.detach().cpu().double().numpy()


def _clamp_symbols(sym, where, diagnostics):
    lo, hi = _consts.SYM_MIN, _consts.SYM_MAX
    n = int(np.count_nonzero((sym < lo) | (sym > hi)))
    if n:
        logger.warning("%d symbols clamped to the codable range in %s", n, where)
        diagnostics["clamped"] = diagnostics.get("clamped", 0) + n
    return np.clip(sym, lo, hi).astype(np.int64)


def _quant_symbols(values, step, where, diagnostics):
    sym = round_half_away(np.asarray(values, np.float64) / step)
    return _clamp_symbols(sym, where, diagnostics)


def _log_sigma_to_sigma(ls):
    return det_exp(np.clip(ls, _consts.LOG_SIGMA_MIN, _consts.LOG_SIGMA_MAX))


def _layer_step(lo, li):
    d = det_exp(np.clip(lo, LOG_DELTA_MIN, LOG_DELTA_MAX)).reshape(-1, 1)
    if li is not None:
        d = d * det_exp(np.clip(li, LOG_DELTA_MIN - LOG_DELTA_INIT, LOG_DELTA_MAX - LOG_DELTA_INIT)).reshape(1, -1)
    return d


def _grid_block_steps(log_delta_blk):
    return det_exp(np.clip(log_delta_blk, LOG_DELTA_MIN, LOG_DELTA_MAX))


def _layer_gaussian(em_vals):
    s_out = _log_sigma_to_sigma(em_vals["log_sigma_out"]).reshape(-1, 1)
    m_out = em_vals["mu_out"].reshape(-1, 1)
    if em_vals.get("mu_in") is None:
        return m_out, s_out
    s_in = _log_sigma_to_sigma(em_vals["log_sigma_in"]).reshape(1, -1)
    return m_out * s_in + em_vals["mu_in"].reshape(1, -1), s_out * s_in


def _estimate_bits(sym, mu_s, sigma_s):
    """Sum of -log2 pmf with the same floor as training (float64)."""
    if np.size(sym) == 0:
        return 0.0
    k = torch.as_tensor(np.asarray(sym, np.float64))
    m = torch.as_tensor(np.broadcast_to(mu_s, np.shape(sym)).astype(np.float64))
    s = torch.as_tensor(np.maximum(np.broadcast_to(sigma_s, np.shape(sym)), _consts.SIGMA_MIN).astype(np.float64))
    p = discretized_pmf(k, m, s).clamp(min=1e-9)
    return float(-torch.log2(p).sum())


def _blocks(shape, block):
    blk = block_extents(shape, block)
    counts = block_counts(shape, block)
    for bt in range(counts[0]):
        for bh in range(counts[1]):
            for bw in range(counts[2]):
                sl = (
                    slice(bt * blk[0], min((bt + 1) * blk[0], shape[0])),
                    slice(bh * blk[1], min((bh + 1) * blk[1], shape[1])),
                    slice(bw * blk[2], min((bw + 1) * blk[2], shape[2])),
                )
                yield (bt, bh, bw), sl


# -- varints and sections --------------------------------------------------------------


def write_varint(buf, n):
    while True:
        b = n & 0x7F
        n >>= 7
        if n:
            buf.append(b | 0x80)
        else:
            buf.append(b)
            return


def read_varint(data, pos, section):
    n, shift = 0, 0
    while True:
        if pos >= len(data):
            raise TruncatedError("segment table ends early", section=section, position=pos)
        b = data[pos]
        pos += 1
        n |= (b & 0x7F) << shift
        if not b & 0x80:
            return n, pos
        shift += 7
        if shift > 63:
            raise DecodeError("varint too long", section=section, position=pos)


def pack_segments(payloads):
    """Varint length table followed by the concatenated payloads; returns (bytes, table_len)."""
    table = bytearray()
    for p in payloads:
        write_varint(table, len(p))
    return bytes(table) + b"".join(payloads), len(table)


def unpack_segments(data, count, section):
    pos = 0
    lengths = []
    for _ in range(count):
        n, pos = read_varint(data, pos, section)
        lengths.append(n)
    table_len = pos
    out = []
    for n in lengths:
        if pos + n > len(data):
            raise TruncatedError("segment extends past the section end", section=section, position=pos)
        out.append(data[pos : pos + n])
        pos += n
    if pos != len(data):
        raise DecodeError("trailing bytes after the last segment", section=section, position=pos)
    return out, table_len


# -- config text ----------------------------------------------------------------------------


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def header_config_text(model_config, options):
    lines = [f"{k} = {_format_value(v)}" for k, v in asdict(model_config).items()]
    lines += [f"{k} = {_format_value(v)}" for k, v in asdict(options).items()]
    return "\n".join(lines) + "\n"


def parse_header_config(text):
    from .config import parse_text

    parsed = parse_text(text)
    return parsed.model, parsed.codec


# -- encoder ----------------------------------------------------------------------------------


@dataclass
class EncodeResult:
    data: bytes
    symbols: dict
    psi_half: np.ndarray
    estimates: dict
    actual: dict
    diagnostics: dict
    reconstruction: torch.Tensor = None


class _Decoded:
    """Parameter values as the decoder sees them."""

    def __init__(self):
        self.psi_half = None
        self.phi = {}  # qualified name -> float64 numpy
        self.theta = {}  # tensor name -> float64 numpy
        self.symbols = {}


def _phi_coding_params(psi_row):
    log_step, mu, log_sigma = (float(x) for x in psi_row.astype(np.float64))
    step = float(det_exp(np.clip(log_step, LOG_DELTA_MIN, LOG_DELTA_MAX)))
    sigma = float(_log_sigma_to_sigma(log_sigma))
    return step, mu / step, sigma / step


def _theta_coding(codec_or_shapes, dec, options, model_config, phi_shapes, encode_values=None, segments=None, diagnostics=None, backend=None):
    """Shared encoder/decoder walk over theta in canonical order.

    Encoding: ``encode_values`` maps tensor names to float64 arrays; returns
    (payloads, estimate bits per category). Decoding: ``segments`` holds the
    payloads; fills ``dec.theta``.
    """
    k = _backend.get(backend)
    encoding = encode_values is not None
    diagnostics = {} if diagnostics is None else diagnostics
    payloads = []
    est = {"grids": 0.0, "layers": 0.0}
    seg_iter = iter(segments or [])
    cfg = model_config
    for l in range(cfg.grid_levels):
        name = f"grid:{l}"
        shape = cfg.level_shape(l)
        if options.grid_step == "learned":
            ld = dec.phi[f"grid_quant.{l}.log_delta_blk"]
        else:
            ld = np.full((*block_counts(shape, options.grid_block), shape[3]), LOG_DELTA_INIT)
        steps = _grid_block_steps(ld)
        if encoding:
            z = encode_values[name]
            sym_all = np.zeros(shape, np.int64)
        else:
            sym_all = np.zeros(shape, np.int64)
        recon = np.zeros(shape, np.float64)
        if options.grid_em == "context":
            weights = {n: dec.phi[f"grid_em.{l}.{n}"] for n in ("w1", "b1", "g2", "be2", "w2", "b2", "g3", "be3", "w3", "b3")}
        else:
            g_mu = float(dec.phi[f"grid_em.{l}.mu"].reshape(-1)[0])
            g_sigma = float(_log_sigma_to_sigma(dec.phi[f"grid_em.{l}.log_sigma"].reshape(-1)[0]))
        for (bt, bh, bw), sl in _blocks(shape, options.grid_block):
            delta = np.ascontiguousarray(steps[bt, bh, bw])
            bshape = tuple(s.stop - s.start for s in sl)
            if encoding:
                sym = _quant_symbols(z[sl] / delta, 1.0, name, diagnostics)
            if options.grid_em == "context":
                # the context model works on symbols, so the kernels see a unit step
                unit = np.ones_like(delta)
                if encoding:
                    payload, mus, sig = k.context_code_block(weights, unit, bshape, options.context_kernel, symbols=sym)
                else:
                    sym, mus, sig = k.context_code_block(
                        weights, unit, bshape, options.context_kernel, data=bytes(next(seg_iter))
                    )
                    sym = sym.reshape(*bshape, shape[3])
            else:
                mus = np.broadcast_to(g_mu / delta, (*bshape, shape[3]))
                sig = np.broadcast_to(g_sigma / delta, (*bshape, shape[3]))
                if encoding:
                    payload = k.encode_gaussian(sym.reshape(-1), mus.reshape(-1), sig.reshape(-1))
                else:
                    count = int(np.prod(bshape)) * shape[3]
                    sym = k.decode_gaussian(bytes(next(seg_iter)), mus.reshape(-1), sig.reshape(-1), count)
                    sym = sym.reshape(*bshape, shape[3])
            if encoding:
                payloads.append(payload)
                est["grids"] += _estimate_bits(sym, mus, sig)
            sym_all[sl] = sym
            recon[sl] = sym * delta
        dec.symbols[name] = sym_all
        dec.theta[name] = recon
    for name, shp in phi_shapes:
        kname = _key(name)
        lo = dec.phi[f"layer_quant.{kname}.log_delta_out"]
        li = dec.phi.get(f"layer_quant.{kname}.log_delta_in")
        rows = shp[0]
        cols = int(np.prod(shp[1:])) if len(shp) > 1 else 1
        delta = np.broadcast_to(_layer_step(lo, li), (rows, cols))
        em_vals = {a: dec.phi.get(f"layer_em.{kname}.{a}") for a in ("mu_out", "log_sigma_out", "mu_in", "log_sigma_in")}
        mu, sigma = _layer_gaussian(em_vals)
        mu_s = np.broadcast_to(mu, (rows, cols)) / delta
        sig_s = np.broadcast_to(sigma, (rows, cols)) / delta
        if encoding:
            sym = _quant_symbols(encode_values[name].reshape(rows, cols), delta, name, diagnostics)
            payloads.append(k.encode_gaussian(sym.reshape(-1), mu_s.reshape(-1), sig_s.reshape(-1)))
            est["layers"] += _estimate_bits(sym, mu_s, sig_s)
        else:
            sym = k.decode_gaussian(bytes(next(seg_iter)), mu_s.reshape(-1), sig_s.reshape(-1), rows * cols)
            sym = sym.reshape(rows, cols)
        dec.symbols[name] = sym
        dec.theta[name] = (sym * delta).reshape(shp)
    return payloads, est


def _phi_layout(codec_phi):
    """[(group, [(qualified name, shape)])] in canonical order."""
    return [(g, [(n, tuple(p.shape)) for n, p in members]) for g, members in codec_phi.groups()]


def _encode_phi(layout, phi_values, psi_half, level2, diagnostics, backend=None):
    """Returns (segments, decoded phi dict, estimate bits per category, symbols)."""
    k = _backend.get(backend)
    payloads = []
    decoded = {}
    symbols = {}
    est = {"quant_params": 0.0, "entropy_params": 0.0}
    for i, (group, members) in enumerate(layout):
        vals = np.concatenate([phi_values[n].reshape(-1) for n, _ in members]) if members else np.zeros(0)
        cat = "quant_params" if ".log_delta" in group else "entropy_params"
        if level2:
            step, mu_s, sig_s = _phi_coding_params(psi_half[i])
            sym = _quant_symbols(vals, step, group, diagnostics)
            payloads.append(k.encode_gaussian(sym, np.array([mu_s]), np.array([sig_s])))
            est[cat] += _estimate_bits(sym, mu_s, sig_s)
            hat = sym * step
            symbols[group] = sym
        else:
            raw = vals.astype(np.float16)
            payloads.append(raw.tobytes())
            est[cat] += 16.0 * raw.size
            hat = raw.astype(np.float64)
            symbols[group] = raw.view(np.uint16).astype(np.int64)
        pos = 0
        for n, shp in members:
            size = int(np.prod(shp))
            decoded[n] = hat[pos : pos + size].reshape(shp)
            pos += size
    return payloads, decoded, est, symbols


def _decode_phi(layout, segments, psi_half, level2, backend=None):
    k = _backend.get(backend)
    decoded = {}
    symbols = {}
    for i, ((group, members), seg) in enumerate(zip(layout, segments)):
        count = sum(int(np.prod(s)) for _, s in members)
        if level2:
            step, mu_s, sig_s = _phi_coding_params(psi_half[i])
            sym = k.decode_gaussian(bytes(seg), np.array([mu_s]), np.array([sig_s]), count)
            hat = sym * step
            symbols[group] = sym
        else:
            if len(seg) != 2 * count:
                raise DecodeError(f"raw phi group {group} has {len(seg)} bytes, expected {2 * count}", section="phi")
            raw = np.frombuffer(bytes(seg), dtype=np.float16)
            hat = raw.astype(np.float64)
            symbols[group] = raw.view(np.uint16).astype(np.int64)
        pos = 0
        for n, shp in members:
            size = int(np.prod(shp))
            decoded[n] = hat[pos : pos + size].reshape(shp)
            pos += size
    return decoded, symbols


def _layer_shapes(model_config):
    """Layer tensor (name, shape) in network definition order, from config alone."""
    shell = _shell_model(model_config)
    return [(n, tuple(shell.params[n].shape)) for n in shell.layer_names]


def _shell_model(model_config):
    with torch.random.fork_rng():
        return NeuralRepresentation(model_config, seed=0)


def encode_codec(codec, backend=None, render=True):
    """Quantize and code a trained :class:`Codec`; returns an :class:`EncodeResult`."""
    options = codec.options
    cfg = codec.config
    diagnostics = {}
    layout = _phi_layout(codec.phi)
    level2 = options.level2_coding
    psi_half = codec.psi.half() if level2 else np.zeros((0, 3), np.float16)
    if level2 and not np.all(np.isfinite(psi_half.astype(np.float64))):
        raise ConfigurationError("psi is not finite in half precision")
    phi_values = {n: _np(p) for _, members in codec.phi.groups() for n, p in members}
    phi_payloads, phi_hat, phi_est, phi_sym = _encode_phi(layout, phi_values, psi_half, level2, diagnostics, backend)
    dec = _Decoded()
    dec.phi = phi_hat
    dec.psi_half = psi_half
    theta_values = {n: _np(codec.model.params[n]) for n in codec.model.names}
    theta_payloads, theta_est = _theta_coding(
        None, dec, options, cfg, _layer_shapes(cfg), encode_values=theta_values, diagnostics=diagnostics, backend=backend
    )
    psi_bytes = psi_half.astype("<f2").tobytes()
    phi_bytes, phi_table = pack_segments(phi_payloads)
    theta_bytes, theta_table = pack_segments(theta_payloads)
    data = serialize(cfg, options, psi_bytes, phi_bytes, theta_bytes)
    estimates = {"psi": 16.0 * psi_half.size, "phi": phi_est["quant_params"] + phi_est["entropy_params"]}
    estimates.update(theta_est)
    estimates["theta"] = theta_est["grids"] + theta_est["layers"]
    actual = {
        "psi": 8 * len(psi_bytes),
        "phi": 8 * (len(phi_bytes) - phi_table),
        "theta": 8 * (len(theta_bytes) - theta_table),
    }
    symbols = {"phi": phi_sym, "theta": dec.symbols}
    result = EncodeResult(data, symbols, psi_half, estimates, actual, diagnostics)
    if render:
        result.reconstruction = reconstruct(cfg, dec.theta)
    return result


def reconstruct(model_config, theta):
    """Render the video from dequantized theta (float64 arrays by name)."""
    model = _shell_model(model_config)
    values = {n: torch.from_numpy(np.asarray(theta[n], np.float64)).float() for n in model.names}
    model.eval()
    return model.render(values)


# -- container ------------------------------------------------------------------------------------


def serialize(model_config, options, psi_bytes, phi_bytes, theta_bytes):
    text = zlib.compress(header_config_text(model_config, options).encode("utf-8"), 9)
    flags = FLAG_PSI_HALF | (FLAG_PHI_CODED if options.level2_coding else 0)
    head = bytearray(_FIXED.pack(MAGIC, VERSION, flags, len(text)))
    head += text
    head += struct.pack("<I", zlib.crc32(text))
    head += _GEOM.pack(
        model_config.frames, model_config.height, model_config.width, model_config.channels, COLOR_MODES.index(options.color)
    )
    start = len(head) + 3 * _SECTION.size
    table = bytearray()
    offset = start
    for body in (psi_bytes, phi_bytes, theta_bytes):
        table += _SECTION.pack(offset, len(body), zlib.crc32(body))
        offset += len(body)
    return bytes(head + table) + psi_bytes + phi_bytes + theta_bytes


@dataclass
class ParsedStream:
    version: int
    flags: int
    config_text: str
    model_config: ModelConfig
    options: CodecOptions
    geometry: tuple
    color: str
    header_len: int
    sections: dict  # name -> bytes
    section_layout: dict  # name -> (offset, length)


def parse(data):
    """Validate and split a stream into header fields and section bodies."""
    data = bytes(data)
    if len(data) < _FIXED.size:
        raise TruncatedError("stream shorter than the fixed header", section="header", position=len(data))
    magic, version, flags, text_len = _FIXED.unpack_from(data, 0)
    if magic != MAGIC:
        raise DecodeError(f"bad magic {magic!r}", section="header", position=0)
    if version != VERSION:
        raise VersionError(f"unsupported format version {version} (expected {VERSION})", section="header", position=4)
    pos = _FIXED.size
    need = pos + text_len + 4 + _GEOM.size + 3 * _SECTION.size
    if len(data) < need:
        raise TruncatedError("header incomplete", section="header", position=len(data))
    text = data[pos : pos + text_len]
    pos += text_len
    (crc,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if zlib.crc32(text) != crc:
        raise ChecksumError("config checksum mismatch", section="header", position=pos - 4)
    geom = _GEOM.unpack_from(data, pos)
    pos += _GEOM.size
    if geom[4] >= len(COLOR_MODES):
        raise DecodeError(f"unknown color mode {geom[4]}", section="header", position=pos - 1)
    try:
        text = zlib.decompress(text)
        model_config, options = parse_header_config(text.decode("utf-8"))
    except (ConfigurationError, UnicodeDecodeError, zlib.error) as exc:
        raise DecodeError(f"invalid embedded config: {exc}", section="header") from exc
    if (model_config.frames, model_config.height, model_config.width, model_config.channels) != tuple(geom[:4]):
        raise DecodeError("geometry does not match the embedded config", section="header")
    sections, layout = {}, {}
    expected = pos + 3 * _SECTION.size
    entries = []
    for name in SECTIONS:
        off, length, crc = _SECTION.unpack_from(data, pos)
        pos += _SECTION.size
        entries.append((name, off, length, crc))
    for name, off, length, crc in entries:
        if off != expected:
            raise DecodeError(f"section {name} at offset {off}, expected {expected}", section=name, position=off)
        if off + length > len(data):
            raise TruncatedError(
                f"section {name} needs {length} bytes, {max(len(data) - off, 0)} available",
                section=name,
                position=len(data),
            )
        body = data[off : off + length]
        if zlib.crc32(body) != crc:
            raise ChecksumError(f"checksum mismatch in section {name}", section=name, position=off)
        sections[name] = body
        layout[name] = (off, length)
        expected = off + length
    if expected != len(data):
        raise DecodeError("trailing bytes after the theta section", section="theta", position=expected)
    return ParsedStream(
        version, flags, text.decode("utf-8"), model_config, options, tuple(geom[:4]), COLOR_MODES[geom[4]],
        layout["psi"][0], sections, layout,
    )


def _layout_from_config(model_config, options):
    shell = _shell_model(model_config)
    phi = CompressionParams(shell, options)
    return _phi_layout(phi), phi


def theta_segment_count(model_config, options):
    n = 0
    for l in range(model_config.grid_levels):
        c = block_counts(model_config.level_shape(l), options.grid_block)
        n += c[0] * c[1] * c[2]
    return n + len(_layer_shapes(model_config))


@dataclass
class DecodeResult:
    model_config: ModelConfig
    options: CodecOptions
    psi_half: np.ndarray
    phi: dict
    theta: dict
    symbols: dict
    video: torch.Tensor = None


def decode_stream(data, backend=None, render=True):
    """Parse and decode a stream back to quantized parameters (and the video)."""
    ps = parse(data)
    cfg, options = ps.model_config, ps.options
    layout, _ = _layout_from_config(cfg, options)
    level2 = options.level2_coding
    if bool(ps.flags & FLAG_PHI_CODED) != level2:
        raise DecodeError("flags disagree with the embedded config", section="header")
    psi_raw = ps.sections["psi"]
    n_groups = len(layout) if level2 else 0
    if len(psi_raw) != 6 * n_groups:
        raise DecodeError(f"psi section has {len(psi_raw)} bytes, expected {6 * n_groups}", section="psi")
    psi_half = np.frombuffer(psi_raw, dtype="<f2").reshape(n_groups, 3).astype(np.float16)
    phi_segments, _ = unpack_segments(ps.sections["phi"], len(layout), "phi")
    dec = _Decoded()
    dec.psi_half = psi_half
    try:
        dec.phi, phi_sym = _decode_phi(layout, phi_segments, psi_half, level2, backend)
    except (IndexError, ValueError) as exc:
        raise DecodeError(f"phi payload corrupt: {exc}", section="phi") from exc
    theta_segments, _ = unpack_segments(ps.sections["theta"], theta_segment_count(cfg, options), "theta")
    try:
        _theta_coding(None, dec, options, cfg, _layer_shapes(cfg), segments=theta_segments, backend=backend)
    except (IndexError, ValueError) as exc:
        raise DecodeError(f"theta payload corrupt: {exc}", section="theta") from exc
    result = DecodeResult(cfg, options, psi_half, dec.phi, dec.theta, {"phi": phi_sym, "theta": dec.symbols})
    if render:
        result.video = reconstruct(cfg, dec.theta)
    return result


# -- rate report ----------------------------------------------------------------------------------------

REPORT_CATEGORIES = ("grids", "layers", "quant_params", "entropy_params", "psi", "container")


def rate_report(data):
    """Per-category bits of a stream; categories sum to 8 * len(data) exactly."""
    ps = parse(data)
    cfg, options = ps.model_config, ps.options
    layout, _ = _layout_from_config(cfg, options)
    bits = dict.fromkeys(REPORT_CATEGORIES, 0)
    counts = dict.fromkeys(REPORT_CATEGORIES, 0)
    bits["psi"] = 8 * len(ps.sections["psi"])
    counts["psi"] = len(ps.sections["psi"]) // 2
    phi_segments, phi_table = unpack_segments(ps.sections["phi"], len(layout), "phi")
    for (group, members), seg in zip(layout, phi_segments):
        cat = "quant_params" if ".log_delta" in group else "entropy_params"
        bits[cat] += 8 * len(seg)
        counts[cat] += sum(int(np.prod(s)) for _, s in members)
    n_grid_segments = theta_segment_count(cfg, options) - len(_layer_shapes(cfg))
    theta_segments, theta_table = unpack_segments(ps.sections["theta"], theta_segment_count(cfg, options), "theta")
    bits["grids"] = 8 * sum(len(s) for s in theta_segments[:n_grid_segments])
    bits["layers"] = 8 * sum(len(s) for s in theta_segments[n_grid_segments:])
    counts["grids"] = sum(int(np.prod(cfg.level_shape(l))) for l in range(cfg.grid_levels))
    counts["layers"] = sum(int(np.prod(s)) for _, s in _layer_shapes(cfg))
    bits["container"] = 8 * (ps.header_len + phi_table + theta_table)
    total = 8 * len(data)
    if sum(bits.values()) != total:  # pragma: no cover - accounting identity
        raise AssertionError("rate report does not add up")
    pixels = cfg.frames * cfg.height * cfg.width
    return {
        "bits": bits,
        "parameters": counts,
        "bits_per_parameter": {k: (bits[k] / counts[k] if counts[k] else 0.0) for k in REPORT_CATEGORIES if k != "container"},
        "total_bits": total,
        "bpp": total / pixels,
        "phi_coded_bits": (bits["quant_params"] + bits["entropy_params"]) if options.level2_coding else 0,
    }
