"""Video ingestion and output: Y4M (4:4:4), PNG frame directories, synthetic clips.

Every reader returns a :class:`VideoBuffer` holding float samples in [0, 1]
shaped (T, H, W, C). Y4M streams are always 8-bit 4:4:4 here; other chroma
layouts are rejected rather than resampled.
"""

from dataclasses import dataclass
import os

import numpy as np
import torch

from .errors import UsageError

SYNTHETIC_PREFIX = "synthetic"
COLOR_MODES = ("rgb", "yuv444")


class InputError(UsageError):
    """The input video is missing, unreadable or in an unsupported layout."""


@dataclass
class VideoBuffer:
    frames: torch.Tensor  # (T, H, W, C) float32 in [0, 1]
    color: str = "rgb"

    def __post_init__(self):
        if self.frames.dim() != 4:
            raise UsageError("video frames must be shaped (T, H, W, C)")
        if self.color not in COLOR_MODES:
            raise UsageError(f"color must be one of {COLOR_MODES}")
        if self.frames.numel() and (float(self.frames.min()) < 0.0 or float(self.frames.max()) > 1.0):
            raise UsageError("samples must lie in [0, 1]")

    @property
    def shape(self):
        return tuple(self.frames.shape)

    def to_uint8(self):
        return to_uint8(self.frames)


def to_uint8(frames):
    x = torch.as_tensor(frames).detach().double().clamp(0.0, 1.0)
    return np.round(x.numpy() * 255.0).astype(np.uint8)


def from_uint8(arr):
    return torch.from_numpy(np.asarray(arr, dtype=np.float32) / 255.0)


# -- synthetic -------------------------------------------------------------------


def synthetic_video(frames=16, height=64, width=64, seed=0, blobs=4, channels=3):
    """Moving Gaussian blobs over a smooth background, all drifting with one global translation.

    The content is spatially and temporally correlated, which is what the
    context model is meant to exploit.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(frames, dtype=np.float64)[:, None, None]
    y = np.arange(height, dtype=np.float64)[None, :, None]
    x = np.arange(width, dtype=np.float64)[None, None, :]
    drift = rng.uniform(-1.0, 1.0, size=2)  # global pixels per frame (dy, dx)
    base = rng.uniform(0.2, 0.4, size=channels)
    grad = rng.uniform(-0.15, 0.15, size=(channels, 2))
    out = np.empty((frames, height, width, channels))
    gy = (y - drift[0] * t) / height
    gx = (x - drift[1] * t) / width
    for c in range(channels):
        out[..., c] = base[c] + grad[c, 0] * gy + grad[c, 1] * gx
    for _ in range(blobs):
        cy, cx = rng.uniform(0.2, 0.8) * height, rng.uniform(0.2, 0.8) * width
        vy, vx = rng.uniform(-1.5, 1.5, size=2)
        s = rng.uniform(0.08, 0.18) * min(height, width)
        amp = rng.uniform(0.2, 0.5, size=channels)
        py = cy + (vy + drift[0]) * t
        px = cx + (vx + drift[1]) * t
        blob = np.exp(-((y - py) ** 2 + (x - px) ** 2) / (2.0 * s * s))
        out += blob[..., None] * amp
    # quantize to 8 bits so the clip is exactly representable as Y4M/PNG
    out = np.clip(out, 0.0, 1.0)
    return torch.from_numpy(np.round(out * 255.0) / 255.0).float()


def parse_synthetic(spec):
    """``synthetic[:key=value,...]`` with keys frames, height, width, seed, blobs."""
    head, _, rest = spec.partition(":")
    if head != SYNTHETIC_PREFIX:
        raise InputError(f"not a synthetic video spec: {spec!r}")
    kwargs = {}
    allowed = ("frames", "height", "width", "seed", "blobs")
    for item in filter(None, (s.strip() for s in rest.split(","))):
        key, eq, value = item.partition("=")
        if not eq or key not in allowed:
            raise InputError(f"bad synthetic option {item!r}; keys are {allowed}")
        try:
            kwargs[key] = int(value)
        except ValueError:
            raise InputError(f"synthetic option {key} needs an integer, got {value!r}") from None
    return kwargs


# -- Y4M ----------------------------------------------------------------------------


def _y4m_params(line):
    params = {}
    for tok in line.split()[1:]:
        params[tok[0]] = tok[1:]
    return params


def read_y4m(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    nl = data.find(b"\n")
    if nl < 0 or not data.startswith(b"YUV4MPEG2"):
        raise InputError(f"{path} is not a YUV4MPEG2 stream")
    params = _y4m_params(data[:nl].decode("ascii", "replace"))
    try:
        width, height = int(params["W"]), int(params["H"])
    except (KeyError, ValueError):
        raise InputError(f"{path}: header lacks frame size") from None
    chroma = params.get("C", "420jpeg")
    if chroma not in ("444", "444p8"):
        raise InputError(f"{path}: chroma layout {chroma!r} unsupported; only 8-bit 4:4:4 is accepted")
    plane = width * height
    frames = []
    pos = nl + 1
    while pos < len(data):
        end = data.find(b"\n", pos)
        if end < 0 or not data.startswith(b"FRAME", pos):
            raise InputError(f"{path}: malformed frame header at byte {pos}")
        pos = end + 1
        if pos + 3 * plane > len(data):
            raise InputError(f"{path}: truncated frame at byte {pos}")
        buf = np.frombuffer(data, dtype=np.uint8, count=3 * plane, offset=pos)
        frames.append(buf.reshape(3, height, width).transpose(1, 2, 0))
        pos += 3 * plane
    if not frames:
        raise InputError(f"{path}: no frames")
    return VideoBuffer(from_uint8(np.stack(frames)), color="yuv444")


def write_y4m(path, frames, fps=(25, 1)):
    arr = to_uint8(frames)
    t, h, w, c = arr.shape
    if c != 3:
        raise UsageError("Y4M output needs three planes")
    with open(path, "wb") as fh:
        fh.write(f"YUV4MPEG2 W{w} H{h} F{fps[0]}:{fps[1]} Ip A1:1 C444\n".encode("ascii"))
        for frame in arr:
            fh.write(b"FRAME\n")
            fh.write(np.ascontiguousarray(frame.transpose(2, 0, 1)).tobytes())


# -- PNG directories ----------------------------------------------------------------


def read_png_dir(path):
    from PIL import Image

    names = sorted(n for n in os.listdir(path) if n.lower().endswith(".png"))
    if not names:
        raise InputError(f"{path}: no PNG frames")
    frames = []
    for n in names:
        try:
            with Image.open(os.path.join(path, n)) as im:
                frames.append(np.asarray(im.convert("RGB")))
        except OSError as exc:
            raise InputError(f"cannot read {n}: {exc}") from exc
    if len({f.shape for f in frames}) != 1:
        raise InputError(f"{path}: frames differ in size")
    return VideoBuffer(from_uint8(np.stack(frames)), color="rgb")


def write_png_dir(path, frames):
    from PIL import Image

    os.makedirs(path, exist_ok=True)
    arr = to_uint8(frames)
    if arr.shape[-1] != 3:
        raise UsageError("PNG output needs three channels")
    for i, frame in enumerate(arr):
        Image.fromarray(frame, mode="RGB").save(os.path.join(path, f"frame_{i:04d}.png"))


# -- dispatch -------------------------------------------------------------------------


def load_video(source):
    """Read a synthetic spec, a .y4m file or a directory of PNG frames."""
    source = str(source)
    if source.split(":", 1)[0] == SYNTHETIC_PREFIX:
        return VideoBuffer(synthetic_video(**parse_synthetic(source)))
    if os.path.isdir(source):
        return read_png_dir(source)
    if not os.path.exists(source):
        raise InputError(f"input {source!r} does not exist")
    if source.lower().endswith(".y4m"):
        return read_y4m(source)
    raise InputError(f"{source!r}: expected a .y4m file, a PNG directory or 'synthetic:...'")


def save_video(path, frames):
    """Write Y4M when ``path`` ends in .y4m, otherwise a PNG directory."""
    path = str(path)
    if path.lower().endswith(".y4m"):
        write_y4m(path, frames)
    else:
        write_png_dir(path, frames)
