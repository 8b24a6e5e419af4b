"""Differentiable primitives used by the codec.

Reverse-mode differentiation is delegated to :mod:`torch.autograd`; this
module pins down the closed set of operations the codec relies on, their
shape contracts and the border / epsilon conventions, and provides an
independent central-difference :func:`gradcheck` used to validate every
primitive in 64-bit mode.
"""

import contextlib
import math

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, UsageError

LAYER_NORM_EPS = 1e-5

__all__ = [
    "float64_mode",
    "add",
    "sub",
    "mul",
    "div",
    "exp",
    "log",
    "tanh",
    "absolute",
    "gelu",
    "matmul",
    "conv3d",
    "trilinear",
    "layer_norm",
    "normal_cdf",
    "backward",
    "gradcheck",
]


@contextlib.contextmanager
def float64_mode():
    """Run the enclosed block with float64 as the default dtype."""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


def _broadcast_check(a, b):
    try:
        return torch.broadcast_shapes(tuple(a.shape), tuple(b.shape))
    except RuntimeError:
        raise ConfigurationError(
            f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}"
        ) from None


def _as_tensor(x):
    return x if torch.is_tensor(x) else torch.as_tensor(x, dtype=torch.get_default_dtype())


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b)
    return a + b


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b)
    return a - b


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b)
    return a * b


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b)
    return a / b


def exp(x):
    return torch.exp(x)


def log(x):
    return torch.log(x)


def tanh(x):
    return torch.tanh(x)


def absolute(x):
    return torch.abs(x)


def gelu(x):
    """Exact (erf based) GeLU."""
    return F.gelu(x)


def matmul(a, b):
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ConfigurationError(
            f"matmul shape mismatch: {tuple(a.shape)} @ {tuple(b.shape)}"
        )
    return a @ b


def conv3d(x, weight, bias=None, mask=None, groups=1, padding=0):
    """3D convolution over ``x`` of shape (N, C_in, T, H, W).

    ``mask``, when given, multiplies the kernel elementwise and must
    broadcast against ``weight``; an all-ones mask is an exact no-op.
    ``groups == C_in`` gives a depthwise convolution.
    """
    if x.dim() != 5 or weight.dim() != 5:
        raise ConfigurationError(
            f"conv3d expects 5D input and weight, got {tuple(x.shape)} and {tuple(weight.shape)}"
        )
    if x.shape[1] != weight.shape[1] * groups or weight.shape[0] % groups:
        raise ConfigurationError(
            f"conv3d channel mismatch: input {tuple(x.shape)}, weight {tuple(weight.shape)}, groups={groups}"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ConfigurationError(f"conv3d bias shape {tuple(bias.shape)} != ({weight.shape[0]},)")
    if mask is not None:
        _broadcast_check(weight, mask)
        weight = weight * mask
    return F.conv3d(x, weight, bias, padding=padding, groups=groups)


def trilinear(grid, coords):
    """Sample a (T, H, W, C) grid at continuous (t, h, w) coordinates.

    ``coords`` has shape (..., 3) in grid index units; coordinates are clamped
    to the grid edges (no wraparound). Returns (..., C).
    """
    if grid.dim() != 4 or coords.shape[-1] != 3:
        raise ConfigurationError(
            f"trilinear expects grid (T,H,W,C) and coords (...,3), got {tuple(grid.shape)} and {tuple(coords.shape)}"
        )
    sizes = grid.shape[:3]
    lead = coords.shape[:-1]
    c = coords.reshape(-1, 3)
    lo_idx, frac = [], []
    for axis in range(3):
        n = sizes[axis]
        p = c[:, axis].clamp(0.0, float(n - 1))
        base = torch.floor(p).clamp(max=max(n - 2, 0))
        lo_idx.append(base.long())
        frac.append(p - base)
    out = 0.0
    for dt in (0, 1):
        for dh in (0, 1):
            for dw in (0, 1):
                it = (lo_idx[0] + dt).clamp(max=sizes[0] - 1)
                ih = (lo_idx[1] + dh).clamp(max=sizes[1] - 1)
                iw = (lo_idx[2] + dw).clamp(max=sizes[2] - 1)
                wt = frac[0] if dt else 1.0 - frac[0]
                wh = frac[1] if dh else 1.0 - frac[1]
                ww = frac[2] if dw else 1.0 - frac[2]
                weight = (wt * wh * ww).unsqueeze(-1)
                out = out + weight * grid[it, ih, iw]
    return out.reshape(*lead, grid.shape[3])


def layer_norm(x, weight=None, bias=None, axis=1, eps=LAYER_NORM_EPS):
    """Normalize over ``axis`` (the channel axis by default).

    A constant vector maps to zeros before the affine terms.
    """
    mean = x.mean(dim=axis, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=axis, keepdim=True)
    y = (x - mean) / torch.sqrt(var + eps)
    if weight is not None or bias is not None:
        shape = [1] * x.dim()
        shape[axis] = x.shape[axis]
        if weight is not None:
            y = y * weight.reshape(shape)
        if bias is not None:
            y = y + bias.reshape(shape)
    return y


def normal_cdf(x):
    """Standard normal CDF."""
    return 0.5 * torch.special.erfc(-x * (1.0 / math.sqrt(2.0)))


def backward(loss):
    """Populate ``.grad`` on every leaf reachable from a scalar ``loss``."""
    if loss.numel() != 1:
        raise UsageError(f"backward expects a scalar loss, got shape {tuple(loss.shape)}")
    loss.backward()


def gradcheck(fn, inputs, step=1e-6):
    """Largest relative error between autograd and central differences.

    ``fn`` maps the list ``inputs`` (float64 tensors) to a tensor; a scalar
    objective is formed by summing it against fixed random weights so every
    output element is exercised. The error per element is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    inputs = [t.detach().clone().to(torch.float64).requires_grad_(True) for t in inputs]
    gen = torch.Generator().manual_seed(1234)
    probe = None

    def objective(args):
        nonlocal probe
        out = fn(args)
        if probe is None:
            probe = torch.rand(out.shape, generator=gen, dtype=torch.float64) + 0.5
        return (out * probe).sum()

    value = objective(inputs)
    analytic = torch.autograd.grad(value, inputs, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for idx, tensor in enumerate(inputs):
            grad = analytic[idx]
            grad = torch.zeros_like(tensor) if grad is None else grad
            flat = tensor.view(-1)
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + step
                plus = objective(inputs).item()
                flat[k] = orig - step
                minus = objective(inputs).item()
                flat[k] = orig
                numeric = (plus - minus) / (2.0 * step)
                a = grad.reshape(-1)[k].item()
                denom = max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, abs(a - numeric) / denom)
    return worst
