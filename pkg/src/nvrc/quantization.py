"""Scalar quantizers and their training-time relaxations.

All scales are stored as natural logarithms. Hard quantization rounds half
away from zero; during training the rounding is replaced by soft-rounding
with Kumaraswamy noise (stage 1) or by Quant-Noise (stage 2).
"""

from dataclasses import dataclass
import math

import torch
from torch import nn

from .errors import ConfigurationError, NumericDomainError

LOG_DELTA_INIT = -4.0
LOG_DELTA_MIN = -12.0
LOG_DELTA_MAX = 2.0


def round_half_away(x):
    return torch.sign(x) * torch.floor(torch.abs(x) + 0.5)


def soft_round(x, temperature):
    """Differentiable surrogate of rounding; tends to hard rounding as T -> 0."""
    if temperature <= 0:
        raise ConfigurationError("soft-round temperature must be positive")
    floor = torch.floor(x).detach()
    delta = x - floor - 0.5
    return floor + 0.5 * torch.tanh(delta / temperature) / math.tanh(0.5 / temperature) + 0.5


def kumaraswamy_b(a):
    """Second Kumaraswamy shape giving a mode of 1/2 for shape ``a``."""
    if a < 1:
        raise ConfigurationError(f"Kumaraswamy shape must be >= 1, got {a}")
    if a == 1:
        return 1.0
    return (2.0 ** a * (a - 1.0) + 1.0) / a


def kumaraswamy_noise(shape, a, generator=None, dtype=None, device=None):
    """Samples on [0, 1] from Kumaraswamy(a, b(a)) by inverse CDF."""
    b = kumaraswamy_b(a)
    v = torch.rand(shape, generator=generator, dtype=dtype or torch.get_default_dtype(), device=device)
    return (1.0 - (1.0 - v) ** (1.0 / b)) ** (1.0 / a)


@dataclass(frozen=True)
class QuantView:
    """How parameters are seen by the forward pass.

    ``mode`` is one of ``raw`` (no quantization), ``hard``, ``soft`` (soft
    rounding with Kumaraswamy noise at ``temperature`` / ``noise_a``) or
    ``quant_noise`` (each element hard-quantized with probability ``ratio``).
    """

    mode: str = "hard"
    temperature: float = 0.5
    noise_a: float = 2.0
    ratio: float = 1.0

    def __post_init__(self):
        if self.mode not in ("raw", "hard", "soft", "quant_noise"):
            raise ConfigurationError(f"unknown quantizer mode {self.mode!r}")
        if self.mode == "soft":
            if self.temperature <= 0:
                raise ConfigurationError("temperature must be positive")
            kumaraswamy_b(self.noise_a)
        if not 0.0 <= self.ratio <= 1.0:
            raise ConfigurationError("quant-noise ratio must lie in [0, 1]")


RAW = QuantView("raw")
HARD = QuantView("hard")


def quantize(z, delta, view=HARD, generator=None, noise=None):
    """Scale, quantize (or relax) and unscale.

    Returns ``(z_s, z_hat)`` where ``z_s`` are the (possibly relaxed) symbols
    and ``z_hat = z_s * delta``. ``noise`` may supply the uniform-shaped
    Kumaraswamy samples for the soft mode (used to freeze noise in tests).
    Hard rounding carries no straight-through gradient.
    """
    if not torch.is_tensor(delta):
        delta = torch.as_tensor(delta, dtype=z.dtype)
    if torch.any(delta <= 0):
        raise NumericDomainError("quantization step must be positive")
    scaled = z / delta
    if view.mode == "raw":
        return scaled, z
    if view.mode == "hard":
        zs = round_half_away(scaled).detach()
        return zs, zs * delta
    if view.mode == "soft":
        if noise is None:
            noise = kumaraswamy_noise(z.shape, view.noise_a, generator, dtype=z.dtype)
        zs = soft_round(soft_round(scaled, view.temperature) + noise - 0.5, view.temperature)
        return zs, zs * delta
    # quant_noise
    if view.ratio >= 1.0:
        keep = torch.ones_like(z, dtype=torch.bool)
    elif view.ratio <= 0.0:
        keep = torch.zeros_like(z, dtype=torch.bool)
    else:
        keep = torch.rand(z.shape, generator=generator, dtype=z.dtype) < view.ratio
    hard = round_half_away(scaled).detach()
    zs = torch.where(keep, hard, scaled)
    z_hat = torch.where(keep, hard * delta, z)
    return zs, z_hat


def block_extents(grid_shape, block):
    """Effective block size per axis (a block never exceeds its grid)."""
    return tuple(min(b, n) for b, n in zip(block, grid_shape[:3]))


def block_counts(grid_shape, block):
    blk = block_extents(grid_shape, block)
    return tuple(-(-n // b) for n, b in zip(grid_shape[:3], blk))


def expand_block_scales(log_delta_blk, grid_shape, block):
    """Broadcast per-block log steps to a per-element step tensor.

    ``delta[t, h, w, c] = exp(log_delta_blk[t // Tb, h // Hb, w // Wb, c])``.
    """
    blk = block_extents(grid_shape, block)
    counts = block_counts(grid_shape, block)
    if tuple(log_delta_blk.shape) != (*counts, grid_shape[3]):
        raise ConfigurationError(
            f"block scale shape {tuple(log_delta_blk.shape)} does not match grid {tuple(grid_shape)} / block {block}"
        )
    d = torch.exp(log_delta_blk)
    for axis in range(3):
        d = torch.repeat_interleave(d, blk[axis], dim=axis)
    return d[: grid_shape[0], : grid_shape[1], : grid_shape[2]]


def combine_layer_scales(log_delta_out, log_delta_in=None):
    """delta[i, j] = delta_out[i] * delta_in[j] (in-axis absent: all ones)."""
    d_out = torch.exp(log_delta_out).reshape(-1, 1)
    if log_delta_in is None:
        return d_out
    return d_out * torch.exp(log_delta_in).reshape(1, -1)


def axis_mode(rows, cols, threshold):
    """Which per-axis vectors a (rows x cols) tensor gets.

    A per-row (output) vector pays off when every row holds at least
    ``threshold`` parameters, a per-column (input) vector when every column
    does.
    """
    out_axis = cols >= threshold
    in_axis = rows >= threshold
    if out_axis and in_axis:
        return "dual"
    if out_axis:
        return "single-out"
    if in_axis:
        return "single-in"
    return "per-tensor"


class GridQuantParams(nn.Module):
    """Learned per-block, per-channel log steps for one grid level."""

    def __init__(self, grid_shape, block, init=LOG_DELTA_INIT, learned=True):
        super().__init__()
        self.grid_shape = tuple(grid_shape)
        self.block = tuple(block)
        shape = (*block_counts(grid_shape, block), grid_shape[3])
        value = torch.full(shape, float(init))
        if learned:
            self.log_delta_blk = nn.Parameter(value)
        else:
            self.register_buffer("log_delta_blk", value)
        self.learned = learned

    def delta(self, log_delta_blk=None):
        ld = self.log_delta_blk if log_delta_blk is None else log_delta_blk
        return expand_block_scales(ld.clamp(LOG_DELTA_MIN, LOG_DELTA_MAX), self.grid_shape, self.block)


class LayerQuantParams(nn.Module):
    """Per-axis log steps for one 2D-reshaped layer tensor."""

    def __init__(self, rows, cols, threshold, init=LOG_DELTA_INIT):
        super().__init__()
        self.rows, self.cols = rows, cols
        self.mode = axis_mode(rows, cols, threshold)
        n_out = rows if self.mode in ("dual", "single-out") else 1
        self.log_delta_out = nn.Parameter(torch.full((n_out,), float(init)))
        if self.mode in ("dual", "single-in"):
            self.log_delta_in = nn.Parameter(torch.zeros(cols))
        else:
            self.log_delta_in = None

    def delta(self, log_delta_out=None, log_delta_in=None):
        lo = self.log_delta_out if log_delta_out is None else log_delta_out
        li = self.log_delta_in if log_delta_in is None else log_delta_in
        lo = lo.clamp(LOG_DELTA_MIN, LOG_DELTA_MAX)
        if li is not None:
            li = li.clamp(LOG_DELTA_MIN - LOG_DELTA_INIT, LOG_DELTA_MAX - LOG_DELTA_INIT)
        return torch.broadcast_to(combine_layer_scales(lo, li), (self.rows, self.cols))
