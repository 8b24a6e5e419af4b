"""Two-stage rate-distortion training with alternating rate/distortion steps.

Stage 1 relaxes quantization with soft-rounding plus Kumaraswamy noise;
stage 2 fine-tunes with Quant-Noise (a growing fraction of parameters is hard
rounded each step). With alternating optimization, K steps minimize lambda*D
and every (K+1)-th step minimizes K*R.
"""

from dataclasses import asdict, dataclass
import json
import logging
import math

import torch

from .errors import ConfigurationError, NumericDomainError, UsageError
from .hierarchy import Codec
from .metrics import ms_ssim, psnr
from .model import PatchCoord
from .quantization import QuantView

logger = logging.getLogger(__name__)

MSE_FLOOR = 1e-12


@dataclass
class TrainConfig:
    rd_lambda: float = 1.0
    rate_period: int = 8
    stage1_steps: int = 3000
    stage2_steps: int = 300
    lr_stage1: tuple = (2e-3, 1e-4)
    lr_stage2: tuple = (1e-4, 1e-5)
    grad_clip: float = 1.0
    l2: float = 1e-6
    temperature: tuple = (0.5, 0.3)
    noise_a: tuple = (2.0, 1.0)
    quant_noise: tuple = (0.5, 1.0)
    patches_per_step: int = 4
    seed: int = 0
    loss: str = "rgb"
    alternating: bool = True
    ssim_window: int = 5
    psi_lr_scale: float = 30.0
    log_every: int = 100

    def __post_init__(self):
        for f in ("lr_stage1", "lr_stage2", "temperature", "noise_a", "quant_noise"):
            setattr(self, f, tuple(float(x) for x in getattr(self, f)))
        self.validate()

    def validate(self):
        if self.rate_period < 1:
            raise ConfigurationError("rate_period (K) must be at least 1")
        if self.rd_lambda < 0:
            raise ConfigurationError("rd_lambda must be nonnegative")
        if self.stage1_steps < 0 or self.stage2_steps < 0:
            raise ConfigurationError("step counts must be nonnegative")
        if self.loss not in ("rgb", "yuv"):
            raise ConfigurationError(f"loss must be rgb or yuv, got {self.loss!r}")
        if min(self.temperature) <= 0:
            raise ConfigurationError("temperatures must be positive")
        if min(self.noise_a) < 1:
            raise ConfigurationError("Kumaraswamy shape must be >= 1")
        if not all(0.0 <= p <= 1.0 for p in self.quant_noise):
            raise ConfigurationError("quant-noise ratios must lie in [0, 1]")
        if self.psi_lr_scale <= 0:
            raise ConfigurationError("psi_lr_scale must be positive")
        if self.patches_per_step < 1:
            raise ConfigurationError("patches_per_step must be positive")


@dataclass
class LossBreakdown:
    step: int
    stage: int
    kind: str
    D: float
    R_inr: float
    R_em: float
    total: float
    bpp: float
    psnr: float = float("nan")

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


# -- distortion ------------------------------------------------------------------------------


def _to_nchw(x):
    # (B, T, H, W, C) -> (B*T, C, H, W)
    if x.dim() != 5:
        raise UsageError("expected patches shaped (B, T, H, W, C)")
    b, t, h, w, c = x.shape
    return x.reshape(b * t, h, w, c).permute(0, 3, 1, 2)


def distortion_rgb(pred, target, window=5):
    """0.7 * L1 + 0.3 * (1 - MS-SSIM) with a reduced Gaussian window."""
    if pred.shape != target.shape:
        raise UsageError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    l1 = torch.mean(torch.abs(pred - target))
    ssim = ms_ssim(_to_nchw(pred), _to_nchw(target), window=window)
    return 0.7 * l1 + 0.3 * (1.0 - ssim)


def distortion_yuv(pred, target, window=5):
    """0.99 * MSE_Y^(6/8) MSE_U^(1/8) MSE_V^(1/8) + 0.01 * (1 - MS-SSIM_Y)."""
    if pred.shape != target.shape:
        raise UsageError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.shape[-1] != 3:
        raise UsageError("YUV distortion needs three planes")
    d = (pred - target) ** 2
    m = [torch.clamp(d[..., i].mean(), min=MSE_FLOOR) for i in range(3)]
    geo = m[0] ** 0.75 * m[1] ** 0.125 * m[2] ** 0.125
    y = _to_nchw(pred[..., :1]), _to_nchw(target[..., :1])
    return 0.99 * geo + 0.01 * (1.0 - ms_ssim(*y, window=window))


def distortion(pred, target, mode="rgb", window=5):
    return distortion_rgb(pred, target, window) if mode == "rgb" else distortion_yuv(pred, target, window)


# -- schedules ----------------------------------------------------------------------------


def linear(endpoints, progress):
    a, b = endpoints
    return a + (b - a) * progress


def cosine(endpoints, progress):
    start, end = endpoints
    return end + 0.5 * (start - end) * (1.0 + math.cos(math.pi * progress))


def step_kind(step, period, alternating=True):
    """'D' for distortion steps, 'R' for the rate step closing each cycle, 'joint' without alternation."""
    if not alternating:
        return "joint"
    return "R" if step % (period + 1) == period else "D"


def stage_view(stage, progress, cfg):
    if stage == 1:
        return QuantView("soft", temperature=linear(cfg.temperature, progress), noise_a=linear(cfg.noise_a, progress))
    return QuantView("quant_noise", ratio=linear(cfg.quant_noise, progress))


# -- training loop ----------------------------------------------------------------------------


def extract_patches(video, coords, patch):
    tp, hp, wp = patch
    return torch.stack(
        [video[c.k * tp : (c.k + 1) * tp, c.j * hp : (c.j + 1) * hp, c.i * wp : (c.i + 1) * wp] for c in coords]
    )


class Trainer:
    def __init__(self, video, model_config, options, train_config, log=None):
        video = torch.as_tensor(video, dtype=torch.float32)
        shape = (model_config.frames, model_config.height, model_config.width, model_config.channels)
        if tuple(video.shape) != shape:
            raise UsageError(f"video shape {tuple(video.shape)} does not match config {shape}")
        self.video = video
        self.cfg = train_config
        torch.manual_seed(train_config.seed)
        self.gen = torch.Generator().manual_seed(train_config.seed)
        self.codec = Codec(model_config, options, seed=train_config.seed)
        self.pixels = model_config.frames * model_config.height * model_config.width
        self.coords = self.codec.model.all_coords()
        self.log = [] if log is None else log
        # psi is a handful of per-group scalars that must track phi within a short run
        psi = list(self.codec.psi.parameters())
        ids = {id(p) for p in psi}
        rest = [p for p in self.codec.parameters() if id(p) not in ids]
        groups = [{"params": rest, "scale": 1.0}]
        if psi:
            groups.append({"params": psi, "scale": train_config.psi_lr_scale})
        self.optimizer = torch.optim.Adam(groups, lr=train_config.lr_stage1[0], betas=(0.9, 0.999), eps=1e-8)

    def _sample(self):
        idx = torch.randint(len(self.coords), (self.cfg.patches_per_step,), generator=self.gen)
        return [self.coords[i] for i in idx.tolist()]

    def losses(self, view, kind, coords=None):
        """Compute the pieces of the objective for one step kind."""
        codec, cfg = self.codec, self.cfg
        need_rate = kind in ("R", "joint", "log")
        need_dist = kind in ("D", "joint", "log")
        phi, em_bits = codec.phi_view(view, self.gen, need_rate=need_rate)
        values, grid_bits, layer_bits = codec.theta_view(phi, view, self.gen, need_rate=need_rate)
        D = torch.zeros(())
        if need_dist:
            coords = coords or self._sample()
            pred = codec.model(coords, values, clamp=False)
            target = extract_patches(self.video, coords, codec.config.patch)
            D = distortion(pred, target, cfg.loss, cfg.ssim_window)
        r_inr = (grid_bits + layer_bits) / self.pixels
        r_em = em_bits / self.pixels
        return D, r_inr, r_em, values

    def step(self, global_step, stage, progress, kind):
        cfg = self.cfg
        view = stage_view(stage, progress, cfg)
        lr = cosine(cfg.lr_stage1 if stage == 1 else cfg.lr_stage2, progress)
        for group in self.optimizer.param_groups:
            group["lr"] = lr * group["scale"]
        D, r_inr, r_em, _ = self.losses(view, kind)
        R = r_inr + r_em
        if kind == "D":
            loss = cfg.rd_lambda * D
        elif kind == "R":
            loss = cfg.rate_period * R
        else:
            loss = R + cfg.rd_lambda * D
        if stage == 1 and cfg.l2 > 0:
            l2 = cfg.l2 * (1.0 - progress)
            loss = loss + l2 * sum((p * p).sum() for p in self.codec.model.parameters())
        if not torch.isfinite(loss):
            raise NumericDomainError(
                f"non-finite loss at step {global_step} (stage {stage}, {kind}): D={float(D)}, R_inr={float(r_inr)}, R_em={float(r_em)}"
            )
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(self.codec.parameters(), cfg.grad_clip)
        self.optimizer.step()
        return D, r_inr, r_em

    def record(self, global_step, stage, progress, kind):
        view = stage_view(stage, progress, self.cfg)
        with torch.no_grad():
            D, r_inr, r_em, values = self.losses(view, "log", coords=self.coords[:: max(1, len(self.coords) // 4)])
        R = float(r_inr + r_em)
        entry = LossBreakdown(
            global_step, stage, kind, float(D), float(r_inr), float(r_em), R + self.cfg.rd_lambda * float(D), R
        )
        self.log.append(entry)
        logger.info(entry.to_json())
        return entry

    def run(self):
        cfg = self.cfg
        self.codec.train()
        g = 0
        for stage, steps in ((1, cfg.stage1_steps), (2, cfg.stage2_steps)):
            for s in range(steps):
                progress = s / max(steps - 1, 1)
                kind = step_kind(g, cfg.rate_period, cfg.alternating)
                self.step(g, stage, progress, kind)
                if cfg.log_every and (g % cfg.log_every == 0):
                    self.record(g, stage, progress, kind)
                g += 1
        self.codec.eval()
        return self.codec


def train(video, model_config, options, train_config, log=None):
    """Train a codec on ``video`` (T, H, W, C in [0, 1]); returns the trained :class:`Codec`."""
    return Trainer(video, model_config, options, train_config, log).run()


def evaluate(codec, video):
    """PSNR of the hard-quantized reconstruction (training-side, float32)."""
    with torch.no_grad():
        phi, _ = codec.phi_view(QuantView("hard"), need_rate=False)
        values, _, _ = codec.theta_view(phi, QuantView("hard"), need_rate=False)
        codec.model.eval()
        rec = codec.model.render(values)
    return psnr(rec, video)
