"""Patch-wise neural video representation.

The video is represented by multi-resolution feature grids and a small
synthesis network. For a patch at coordinates (i, j, k) the grids are passed
through a per-level stem convolution, sampled trilinearly at the patch's
stem-resolution positions and summed; synthesis stages then upsample
(nearest), convolve, add a tiled local grid and apply residual blocks before
a 1x1 output head.

Every learnable tensor is either a grid (``grid:<level>``) or a layer tensor;
layer tensors are coded as 2D matrices (see :func:`reshape_layer_param`).
"""

from dataclasses import asdict, dataclass, fields
import math

import torch
from torch import nn
import torch.nn.functional as F

from .autodiff import trilinear
from .errors import ConfigurationError, UsageError


@dataclass
class ModelConfig:
    frames: int = 16
    height: int = 64
    width: int = 64
    channels: int = 3
    patch: tuple = (1, 32, 32)
    grid_size: tuple = (16, 8, 8, 1)
    grid_levels: int = 3
    grid_ratio: tuple = (2.0, 2.0, 2.0, 0.5)
    stem_channels: int = 16
    stem_kernel: int = 3
    stage_channels: tuple = (16, 12, 8)
    stage_depths: tuple = (1, 1, 0)
    strides: tuple = (2, 2, 2)
    kernel: int = 3
    margin: int = 1
    grid_init: float = 0.05

    def __post_init__(self):
        for f in ("patch", "grid_size", "grid_ratio", "stage_channels", "stage_depths", "strides"):
            setattr(self, f, tuple(getattr(self, f)))
        self.validate()

    def validate(self):
        if min(self.frames, self.height, self.width, self.channels) <= 0:
            raise ConfigurationError("video extents must be positive")
        if self.grid_levels < 1:
            raise ConfigurationError("at least one grid level is required")
        if len(self.patch) != 3 or len(self.grid_size) != 4 or len(self.grid_ratio) != 4:
            raise ConfigurationError("patch needs 3 extents, grid_size and grid_ratio need 4")
        if min(self.patch) <= 0 or min(self.grid_size) <= 0 or min(self.grid_ratio) <= 0:
            raise ConfigurationError("patch, grid extents and ratios must be positive")
        if not len(self.stage_channels) == len(self.stage_depths) == len(self.strides):
            raise ConfigurationError("stage_channels, stage_depths and strides must have equal length")
        if min(self.strides) < 1 or min(self.stage_channels) < 1 or min(self.stage_depths) < 0:
            raise ConfigurationError("invalid synthesis stage sizes")
        up = math.prod(self.strides)
        tp, hp, wp = self.patch
        if hp % up or wp % up:
            raise ConfigurationError(
                f"patch {hp}x{wp} is not divisible by the total synthesis stride {up}"
            )
        if self.frames % tp or self.height % hp or self.width % wp:
            raise ConfigurationError(
                f"video {self.frames}x{self.height}x{self.width} is not tiled by patch {self.patch}"
            )
        if self.kernel % 2 == 0 or self.stem_kernel % 2 == 0:
            raise ConfigurationError("kernel sizes must be odd")

    @property
    def stem_patch(self):
        up = math.prod(self.strides)
        return (self.patch[0], self.patch[1] // up, self.patch[2] // up)

    @property
    def stem_video(self):
        up = math.prod(self.strides)
        return (self.frames, self.height // up, self.width // up)

    @property
    def patch_counts(self):
        """Number of patches along (time, height, width)."""
        return (self.frames // self.patch[0], self.height // self.patch[1], self.width // self.patch[2])

    def level_shape(self, level):
        r = self.grid_ratio
        base = self.grid_size
        dims = [max(1, math.ceil(base[a] / r[a] ** level - 1e-9)) for a in range(3)]
        ch = max(1, int(round(base[3] / r[3] ** level)))
        return (*dims, ch)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass(frozen=True)
class PatchCoord:
    """Patch indices along width (i), height (j) and time (k)."""

    i: int
    j: int
    k: int


def reshape_layer_param(tensor):
    """2D view: rows are output features, columns flattened inputs."""
    if tensor.dim() == 1:
        return tensor.reshape(-1, 1)
    return tensor.reshape(tensor.shape[0], -1)


def unreshape_layer_param(matrix, shape):
    return matrix.reshape(shape)


def _uniform(gen, shape, bound):
    return (torch.rand(shape, generator=gen) * 2.0 - 1.0) * bound


class NeuralRepresentation(nn.Module):
    """Grids plus layer tensors; :meth:`forward` takes an explicit value view."""

    def __init__(self, config, seed=0):
        super().__init__()
        config.validate()
        self.config = config
        gen = torch.Generator().manual_seed(int(seed))
        self.params = nn.ParameterDict()
        self.grid_names = []
        self.layer_names = []
        cfg = config
        for level in range(cfg.grid_levels):
            shape = cfg.level_shape(level)
            self._add(f"grid:{level}", _uniform(gen, shape, cfg.grid_init), grid=True)
        k = cfg.stem_kernel
        for level in range(cfg.grid_levels):
            c_in = cfg.level_shape(level)[3]
            fan = c_in * k ** 3
            self._add(f"stem:{level}:weight", _uniform(gen, (cfg.stem_channels, c_in, k, k, k), math.sqrt(3.0 / fan)))
        self._add("stem:bias", torch.zeros(cfg.stem_channels))
        c_prev = cfg.stem_channels
        k = cfg.kernel
        for s, (c, d, st) in enumerate(zip(cfg.stage_channels, cfg.stage_depths, cfg.strides)):
            self._add(f"stage:{s}:conv:weight", _uniform(gen, (c, c_prev, k, k), math.sqrt(3.0 / (c_prev * k * k))))
            self._add(f"stage:{s}:conv:bias", torch.zeros(c))
            self._add(f"stage:{s}:local", _uniform(gen, (c, cfg.frames, st, st), 0.01))
            for b in range(d):
                self._add(f"stage:{s}:block:{b}:weight", _uniform(gen, (c, c, k, k), math.sqrt(3.0 / (c * k * k))))
                self._add(f"stage:{s}:block:{b}:bias", torch.zeros(c))
            c_prev = c
        self._add("head:weight", _uniform(gen, (cfg.channels, c_prev, 1, 1), math.sqrt(3.0 / c_prev)))
        self._add("head:bias", torch.full((cfg.channels,), 0.5))

    def _add(self, name, value, grid=False):
        self.params[name] = nn.Parameter(value.float())
        (self.grid_names if grid else self.layer_names).append(name)

    # -- accessors -----------------------------------------------------------

    @property
    def names(self):
        return self.grid_names + self.layer_names

    def values(self):
        return {n: self.params[n] for n in self.names}

    def parameter_count(self):
        return sum(self.params[n].numel() for n in self.names)

    def grid_parameters(self):
        return [self.params[n] for n in self.grid_names]

    def layer_parameters(self):
        return [self.params[n] for n in self.layer_names]

    # -- forward -------------------------------------------------------------

    def all_coords(self):
        nt, nh, nw = self.config.patch_counts
        return [PatchCoord(i, j, k) for k in range(nt) for j in range(nh) for i in range(nw)]

    def _check_coords(self, coords):
        nt, nh, nw = self.config.patch_counts
        for c in coords:
            if not (0 <= c.i < nw and 0 <= c.j < nh and 0 <= c.k < nt):
                raise UsageError(f"patch coordinate {c} outside ({nw}, {nh}, {nt})")

    def _stem_positions(self, coords):
        """Stem-resolution sample positions, with margin: (B, Tp, Hm, Wm, 3) in stem units."""
        cfg = self.config
        tp, hp, wp = cfg.stem_patch
        m = cfg.margin
        dev = self.params["head:bias"].device
        t = torch.arange(tp, device=dev, dtype=torch.float32)
        h = torch.arange(-m, hp + m, device=dev, dtype=torch.float32)
        w = torch.arange(-m, wp + m, device=dev, dtype=torch.float32)
        tt, hh, ww = torch.meshgrid(t, h, w, indexing="ij")
        base = torch.stack([tt, hh, ww], dim=-1)
        offs = torch.tensor([[c.k * tp, c.j * hp, c.i * wp] for c in coords], dtype=torch.float32, device=dev)
        return base[None] + offs[:, None, None, None, :]

    def forward(self, coords, values=None, clamp=None):
        """Render patches for ``coords``; returns (B, Tp, Hp, Wp, C).

        ``values`` maps tensor names to the view of the parameters to use
        (raw, relaxed or dequantized); default is the raw parameters.
        ``clamp`` defaults to ``not self.training``.
        """
        if isinstance(coords, PatchCoord):
            coords = [coords]
        self._check_coords(coords)
        cfg = self.config
        v = self.values() if values is None else values
        if clamp is None:
            clamp = not self.training
        pos = self._stem_positions(coords)
        st, sh, sw = cfg.stem_video
        feat = 0.0
        for level in range(cfg.grid_levels):
            grid = v[f"grid:{level}"]
            g = F.conv3d(
                grid.permute(3, 0, 1, 2)[None], v[f"stem:{level}:weight"], padding=cfg.stem_kernel // 2
            )[0].permute(1, 2, 3, 0)
            T, H, W = g.shape[:3]
            scale = torch.tensor([T / st, H / sh, W / sw], dtype=pos.dtype, device=pos.device)
            feat = feat + trilinear(g, (pos + 0.5) * scale - 0.5)
        x = feat + v["stem:bias"]
        B, tp, hm, wm, C = x.shape
        x = x.reshape(B * tp, hm, wm, C).permute(0, 3, 1, 2)
        frames = torch.tensor([c.k * tp + t for c in coords for t in range(tp)], device=x.device)
        margin = cfg.margin
        for s, (c, d, stride) in enumerate(zip(cfg.stage_channels, cfg.stage_depths, cfg.strides)):
            x = F.interpolate(x, scale_factor=stride, mode="nearest")
            margin *= stride
            x = F.conv2d(x, v[f"stage:{s}:conv:weight"], v[f"stage:{s}:conv:bias"], padding=cfg.kernel // 2)
            local = v[f"stage:{s}:local"][:, frames].permute(1, 0, 2, 3)
            reps = (x.shape[2] // stride, x.shape[3] // stride)
            x = x + local.repeat(1, 1, *reps)
            for b in range(d):
                y = F.layer_norm(x.permute(0, 2, 3, 1), (c,), eps=1e-5).permute(0, 3, 1, 2)
                y = F.conv2d(F.gelu(y), v[f"stage:{s}:block:{b}:weight"], v[f"stage:{s}:block:{b}:bias"], padding=cfg.kernel // 2)
                x = x + y
        x = F.conv2d(x, v["head:weight"], v["head:bias"])
        x = x[:, :, margin : x.shape[2] - margin, margin : x.shape[3] - margin]
        out = x.permute(0, 2, 3, 1).reshape(B, tp, cfg.patch[1], cfg.patch[2], cfg.channels)
        if clamp:
            out = out.clamp(0.0, 1.0)
        return out

    @torch.no_grad()
    def render(self, values=None, batch=4):
        """Full video (T, H, W, C) assembled from all patches, clamped to [0, 1]."""
        cfg = self.config
        video = torch.empty(cfg.frames, cfg.height, cfg.width, cfg.channels)
        coords = self.all_coords()
        tp, hp, wp = cfg.patch
        for start in range(0, len(coords), batch):
            chunk = coords[start : start + batch]
            out = self.forward(chunk, values, clamp=True)
            for c, patch in zip(chunk, out):
                video[c.k * tp : (c.k + 1) * tp, c.j * hp : (c.j + 1) * hp, c.i * wp : (c.i + 1) * wp] = patch
        return video
