"""Quality and rate-distortion metrics: PSNR, PSNR-YUV 6:1:1, MS-SSIM, BD-rate."""

from dataclasses import dataclass, field
import csv
import io
import math

import numpy as np
import torch
import torch.nn.functional as F

from .errors import UsageError

PSNR_CAP = 100.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
K1, K2 = 0.01, 0.03


def _as_float64(x):
    if torch.is_tensor(x):
        return x.detach().cpu().double().numpy()
    return np.asarray(x, dtype=np.float64)


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise UsageError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def mse(a, b):
    a, b = _as_float64(a), _as_float64(b)
    _check_shapes(a, b)
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(m, peak=1.0, with_flag=False):
    if peak <= 0:
        raise UsageError("peak must be positive")
    if m <= 0:
        value, infinite = PSNR_CAP, True
    else:
        value, infinite = min(10.0 * math.log10(peak * peak / m), PSNR_CAP), False
    return (value, infinite) if with_flag else value


def psnr(a, b, peak=1.0, with_flag=False):
    """10 log10(peak^2 / MSE), capped at 100 dB (flagged as infinite when MSE = 0)."""
    return psnr_from_mse(mse(a, b), peak, with_flag)


def psnr_yuv_611(a, b, peak=1.0, with_flag=False):
    """PSNR of the 6:1:1 weighted plane MSE; planes on the last axis (Y, U, V)."""
    a, b = _as_float64(a), _as_float64(b)
    _check_shapes(a, b)
    if a.shape[-1] != 3:
        raise UsageError("psnr_yuv_611 expects three planes on the last axis")
    m = [float(np.mean((a[..., i] - b[..., i]) ** 2)) for i in range(3)]
    return psnr_from_mse((6.0 * m[0] + m[1] + m[2]) / 8.0, peak, with_flag)


# -- MS-SSIM --------------------------------------------------------------------------


def gaussian_window(size, sigma, dtype=torch.float64):
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _blur(x, win):
    c = x.shape[1]
    k = win.to(x.dtype)
    x = F.conv2d(x, k.reshape(1, 1, 1, -1).repeat(c, 1, 1, 1), groups=c)
    return F.conv2d(x, k.reshape(1, 1, -1, 1).repeat(c, 1, 1, 1), groups=c)


def _ssim_terms(x, y, win, data_range):
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mx, my = _blur(x, win), _blur(y, win)
    sxx = _blur(x * x, win) - mx * mx
    syy = _blur(y * y, win) - my * my
    sxy = _blur(x * y, win) - mx * my
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    return (lum * cs).flatten(2).mean(-1), cs.flatten(2).mean(-1)


def ms_ssim_scales(height, width, window, max_scales=5):
    """Number of scales usable for an image: each scale halves the image and
    the coarsest must still be at least one window wide."""
    side = min(height, width)
    n = max_scales
    while n > 1 and side < 2 ** (n - 1) * window:
        n -= 1
    return n


def ms_ssim(x, y, window=11, sigma=1.5, data_range=1.0, max_scales=5, return_scales=False):
    """Multi-scale SSIM of (N, C, H, W) tensors, averaged over channels and batch.

    Uses valid-mode Gaussian filtering, 2x average pooling between scales and
    ReLU on the per-scale contrast-structure terms. When the image is too
    small for ``max_scales`` scales the coarser ones are dropped and the
    remaining exponents are renormalized to sum to one.
    """
    if x.shape != y.shape:
        raise UsageError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.dim() != 4:
        raise UsageError("ms_ssim expects (N, C, H, W)")
    n = ms_ssim_scales(x.shape[-2], x.shape[-1], window, max_scales)
    if min(x.shape[-2:]) < window:
        raise UsageError(f"image {tuple(x.shape[-2:])} smaller than the {window}x{window} window")
    weights = torch.tensor(MS_SSIM_WEIGHTS[:n], dtype=x.dtype)
    weights = weights / weights.sum()
    win = gaussian_window(window, sigma)
    factors = []
    for s in range(n):
        ssim, cs = _ssim_terms(x, y, win, data_range)
        if s < n - 1:
            factors.append(torch.relu(cs))
            pad = (x.shape[-2] % 2, x.shape[-1] % 2)
            x = F.avg_pool2d(x, 2, padding=pad)
            y = F.avg_pool2d(y, 2, padding=pad)
        else:
            factors.append(torch.relu(ssim))
    stack = torch.stack(factors, dim=0)
    val = torch.prod(stack ** weights.reshape(-1, 1, 1), dim=0).mean()
    return (val, n) if return_scales else val


# -- BD-rate ----------------------------------------------------------------------------


@dataclass
class RdCurve:
    points: list = field(default_factory=list)  # [(bpp, quality)]
    metric: str = "psnr"

    def __post_init__(self):
        self.points = [(float(r), float(q)) for r, q in self.points]

    def validate(self):
        if len(self.points) < 4:
            raise UsageError("BD-rate needs at least 4 points per curve")
        if any(r <= 0 for r, _ in self.points):
            raise UsageError("rates must be strictly positive")

    def to_csv(self, label="curve"):
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["label", "bpp", self.metric])
        for r, q in self.points:
            w.writerow([label, f"{r:.6f}", f"{q:.6f}"])
        return buf.getvalue()


def _fit(curve):
    rates = np.array([p[0] for p in curve.points])
    qual = np.array([p[1] for p in curve.points])
    return np.polyfit(qual, np.log(rates), 3), qual.min(), qual.max()


def bd_rate(curve_a, curve_b):
    """Average rate difference of ``curve_b`` relative to ``curve_a`` in percent.

    Cubic fits of log-rate as a function of quality are integrated over the
    overlapping quality interval.
    """
    a = curve_a if isinstance(curve_a, RdCurve) else RdCurve(curve_a)
    b = curve_b if isinstance(curve_b, RdCurve) else RdCurve(curve_b)
    a.validate()
    b.validate()
    pa, amin, amax = _fit(a)
    pb, bmin, bmax = _fit(b)
    lo, hi = max(amin, bmin), min(amax, bmax)
    if hi <= lo:
        raise UsageError("RD curves have no overlapping quality range")
    ia, ib = np.polyint(pa), np.polyint(pb)
    avg = ((np.polyval(ib, hi) - np.polyval(ib, lo)) - (np.polyval(ia, hi) - np.polyval(ia, lo))) / (hi - lo)
    return float((math.exp(avg) - 1.0) * 100.0)
