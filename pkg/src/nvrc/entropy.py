"""Probability models for quantized parameters and the differentiable rate.

* :class:`ContextModel` - causal masked 3D convolutions over grid blocks,
  grouped per grid channel, predicting a Gaussian per feature.
* :class:`DualAxisGaussian` - row/column factorized Gaussian for 2D-reshaped
  layer tensors (falls back to per-tensor when the tensor is small).
* :class:`TensorGaussian` - one (mu, log sigma) pair for a whole tensor.

Means and scales live in the unscaled parameter domain and are divided by the
quantization step before the pmf is evaluated.
"""

import math

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from . import _consts
from .quantization import axis_mode

SIGMA_MIN = _consts.SIGMA_MIN
LOG_SIGMA_MIN = _consts.LOG_SIGMA_MIN
LOG_SIGMA_MAX = _consts.LOG_SIGMA_MAX
LIKELIHOOD_BOUND = 1e-9


def normal_cdf(x):
    return 0.5 * torch.special.erfc(-x * _consts.INV_SQRT2)


def discretized_pmf(k, mu_s, sigma_s):
    """Gaussian mass on [k - 1/2, k + 1/2] in the symbol domain.

    Evaluated as a difference of upper-tail probabilities on |k - mu| so that
    far-tail symbols do not lose precision to cancellation.
    """
    v = torch.abs(k - mu_s)
    c = _consts.INV_SQRT2 / sigma_s
    return 0.5 * (torch.special.erfc((v - 0.5) * c) - torch.special.erfc((v + 0.5) * c))


class _LowerBound(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, bound):
        ctx.save_for_backward(x)
        ctx.bound = bound
        return torch.clamp(x, min=bound)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        # below the bound, still let through gradients that would raise x
        passing = (x >= ctx.bound) | (grad < 0)
        return grad * passing, None


def lower_bound(x, bound):
    """max(x, bound) whose gradient is not cut off when it points back above the bound."""
    return _LowerBound.apply(x, bound)


def rate_bits(values_s, mu, sigma, delta, reduce=True):
    """-log2 likelihood of (possibly relaxed) symbols under a scaled Gaussian.

    ``mu`` and ``sigma`` are in the parameter domain; ``values_s`` are symbols.
    """
    mu_s = mu / delta
    sigma_s = lower_bound(sigma / delta, SIGMA_MIN)
    p = discretized_pmf(values_s, mu_s, sigma_s)
    bits = -torch.log2(torch.clamp(p, min=LIKELIHOOD_BOUND))
    tail = p < LIKELIHOOD_BOUND
    if tail.any():
        # floored symbols keep a gradient from the Gaussian log-density,
        # otherwise the prior can never widen to cover outliers
        v = (values_s - mu_s) / sigma_s
        surrogate = (0.5 * v * v + torch.log(sigma_s)) / math.log(2.0)
        bits = bits + torch.where(tail, surrogate - surrogate.detach(), torch.zeros_like(surrogate))
    return bits.sum() if reduce else bits


def sigma_from_log(log_sigma):
    return torch.exp(torch.clamp(log_sigma, LOG_SIGMA_MIN, LOG_SIGMA_MAX))


class TensorGaussian(nn.Module):
    """Single Gaussian shared by every element of a tensor."""

    def __init__(self, mu=0.0, log_sigma=-3.0):
        super().__init__()
        self.mu = nn.Parameter(torch.tensor([float(mu)]))
        self.log_sigma = nn.Parameter(torch.tensor([float(log_sigma)]))

    def forward(self):
        return self.mu, sigma_from_log(self.log_sigma)

    params = forward

    @torch.no_grad()
    def fit_(self, values):
        std = float(values.detach().double().std()) if values.numel() > 1 else 0.0
        self.mu.fill_(float(values.detach().double().mean()))
        self.log_sigma.fill_(math.log(max(std, 1e-4)))


def combine_dual_axis(mu_out, log_sigma_out, mu_in=None, log_sigma_in=None):
    """mu[i, j] = mu_out[i] * sigma_in[j] + mu_in[j]; sigma[i, j] = sigma_out[i] * sigma_in[j]."""
    s_out = sigma_from_log(log_sigma_out).reshape(-1, 1)
    m_out = mu_out.reshape(-1, 1)
    if mu_in is None:
        return m_out, s_out
    s_in = sigma_from_log(log_sigma_in).reshape(1, -1)
    return m_out * s_in + mu_in.reshape(1, -1), s_out * s_in


class DualAxisGaussian(nn.Module):
    """Row/column factorized Gaussian over a (rows x cols) parameter matrix.

    The axis layout follows :func:`nvrc.quantization.axis_mode`; with
    ``per_tensor=True`` a single (mu, log sigma) pair is used regardless of
    size. An absent input axis behaves as mu_in = 0, sigma_in = 1.
    """

    def __init__(self, rows, cols, threshold, per_tensor=False):
        super().__init__()
        self.rows, self.cols = rows, cols
        self.mode = "per-tensor" if per_tensor else axis_mode(rows, cols, threshold)
        n_out = rows if self.mode in ("dual", "single-out") else 1
        self.mu_out = nn.Parameter(torch.zeros(n_out))
        self.log_sigma_out = nn.Parameter(torch.full((n_out,), -3.0))
        if self.mode in ("dual", "single-in"):
            self.mu_in = nn.Parameter(torch.zeros(cols))
            self.log_sigma_in = nn.Parameter(torch.zeros(cols))
        else:
            self.mu_in = None
            self.log_sigma_in = None

    def forward(self):
        mu, sigma = combine_dual_axis(self.mu_out, self.log_sigma_out, self.mu_in, self.log_sigma_in)
        shape = (self.rows, self.cols)
        return torch.broadcast_to(mu, shape), torch.broadcast_to(sigma, shape)

    params = forward

    @torch.no_grad()
    def fit_(self, w2d):
        """Initialize the scales from the spread of ``w2d`` (one value for all rows)."""
        std = float(torch.sqrt((w2d.detach().double() ** 2).mean()))
        self.log_sigma_out.fill_(math.log(max(std, 1e-4)))


# -- context model ---------------------------------------------------------------


def causal_tap_count(kernel, include_center):
    n = kernel ** 3 // 2
    return n + 1 if include_center else n


def full_kernel(taps, kernel):
    """Scatter compact causal taps (raster order) into a dense k^3 kernel."""
    pad = kernel ** 3 - taps.shape[-1]
    full = torch.cat([taps, taps.new_zeros(*taps.shape[:-1], pad)], dim=-1)
    return full.reshape(*taps.shape[:-1], kernel, kernel, kernel)


def causal_mask(kernel, include_center):
    m = torch.zeros(kernel ** 3)
    m[: causal_tap_count(kernel, include_center)] = 1.0
    return m.reshape(kernel, kernel, kernel)


def to_blocks(x, block):
    """(T, H, W, G) -> (N, G, bT, bH, bW), zero-padded, plus a validity mask."""
    T, H, W, G = x.shape
    bt, bh, bw = block
    nt, nh, nw = -(-T // bt), -(-H // bh), -(-W // bw)
    pad = (0, 0, 0, nw * bw - W, 0, nh * bh - H, 0, nt * bt - T)
    xp = F.pad(x, pad)
    mask = F.pad(torch.ones(T, H, W, 1, dtype=x.dtype), pad)
    def split(a):
        c = a.shape[-1]
        a = a.reshape(nt, bt, nh, bh, nw, bw, c).permute(0, 2, 4, 6, 1, 3, 5)
        return a.reshape(nt * nh * nw, c, bt, bh, bw)
    return split(xp), split(mask), (nt, nh, nw)


def from_blocks(xb, counts, shape):
    nt, nh, nw = counts
    T, H, W = shape
    n, c, bt, bh, bw = xb.shape
    a = xb.reshape(nt, nh, nw, c, bt, bh, bw).permute(0, 4, 1, 5, 2, 6, 3)
    return a.reshape(nt * bt, nh * bh, nw * bw, c)[:T, :H, :W]


class ContextModel(nn.Module):
    """Causal context model for one grid level.

    Three blocks of masked 3D convolutions, grouped per grid channel with
    ``width`` hidden features each: conv(type A) -> GeLU, then LayerNorm ->
    conv(type B) -> GeLU, then LayerNorm -> conv(type B) producing (mu, log
    sigma). Only the causal taps are parameters.
    """

    def __init__(self, channels, block, width=8, kernel=5, sigma_init=1.0, seed=0):
        super().__init__()
        self.channels, self.width, self.kernel = channels, width, kernel
        self.block = tuple(block)
        na = causal_tap_count(kernel, False)
        nb = causal_tap_count(kernel, True)
        g = torch.Generator().manual_seed(seed)
        def taps(*shape):
            # tiny random taps break symmetry but quantize to zero at any sane step
            return nn.Parameter(torch.randn(*shape, generator=g) * 1e-3)
        G, Wd = channels, width
        self.w1 = taps(G, Wd, na)
        self.b1 = nn.Parameter(torch.zeros(G, Wd))
        self.g2 = nn.Parameter(torch.ones(G, Wd))
        self.be2 = nn.Parameter(torch.zeros(G, Wd))
        self.w2 = taps(G, Wd, Wd, nb)
        self.b2 = nn.Parameter(torch.zeros(G, Wd))
        self.g3 = nn.Parameter(torch.ones(G, Wd))
        self.be3 = nn.Parameter(torch.zeros(G, Wd))
        self.w3 = taps(G, 2, Wd, nb)
        b3 = torch.zeros(G, 2)
        b3[:, 1] = math.log(sigma_init)
        self.b3 = nn.Parameter(b3)

    def _ln(self, h, gamma, beta, mask):
        n, _, *sp = h.shape
        h = h.reshape(n, self.channels, self.width, *sp)
        h = F.layer_norm(h.movedim(2, -1), (self.width,), eps=_consts.LN_EPS).movedim(-1, 2)
        h = h * gamma[None, :, :, None, None, None] + beta[None, :, :, None, None, None]
        return h.reshape(n, self.channels * self.width, *sp) * mask

    def predict_blocks(self, xb, mask):
        """Blocked input (N, G, bT, bH, bW) -> (mu, log sigma), each (N, G, bT, bH, bW)."""
        G, Wd, k = self.channels, self.width, self.kernel
        p = k // 2
        # channel masks broadcast over (N, G*Wd, ...)
        m = mask
        h = F.conv3d(xb, full_kernel(self.w1, k).reshape(G * Wd, 1, k, k, k), self.b1.reshape(-1), padding=p, groups=G)
        h = self._ln(F.gelu(h), self.g2, self.be2, m)
        h = F.conv3d(h, full_kernel(self.w2, k).reshape(G * Wd, Wd, k, k, k), self.b2.reshape(-1), padding=p, groups=G)
        h = self._ln(F.gelu(h), self.g3, self.be3, m)
        out = F.conv3d(h, full_kernel(self.w3, k).reshape(G * 2, Wd, k, k, k), self.b3.reshape(-1), padding=p, groups=G)
        n, _, *sp = out.shape
        out = out.reshape(n, G, 2, *sp)
        return out[:, :, 0], out[:, :, 1]

    def forward(self, z_hat):
        """Grid (T, H, W, G) of decoded values -> (mu, log sigma) of the same shape, same units."""
        from .quantization import block_extents

        blk = block_extents(z_hat.shape, self.block)
        xb, mask, counts = to_blocks(z_hat, blk)
        mu, ls = self.predict_blocks(xb, mask)
        shape = z_hat.shape[:3]
        return from_blocks(mu, counts, shape), from_blocks(ls, counts, shape)

    @torch.no_grad()
    def fit_(self, grid):
        """Start the output scale at the spread of each channel of ``grid``."""
        std = grid.detach().double().reshape(-1, self.channels).std(dim=0).clamp(min=1e-4)
        self.b3[:, 1] = torch.log(std).to(self.b3.dtype)

    def tensors(self):
        """Named parameter tensors in canonical order."""
        return [
            ("w1", self.w1), ("b1", self.b1), ("g2", self.g2), ("be2", self.be2),
            ("w2", self.w2), ("b2", self.b2), ("g3", self.g3), ("be3", self.be3),
            ("w3", self.w3), ("b3", self.b3),
        ]

    @staticmethod
    def kernel_weights(values):
        """float64 numpy dict for the coding kernels from a {name: tensor} mapping."""
        return {k: np.ascontiguousarray(v.detach().cpu().double().numpy()) for k, v in values.items()}
