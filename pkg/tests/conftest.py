import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

torch.set_num_threads(int(os.environ.get("NVRC_THREADS", "1")))

settings.register_profile(
    "nvrc", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("nvrc")


def tiny_model_config(**kw):
    from nvrc.model import ModelConfig

    base = dict(
        frames=2,
        height=16,
        width=16,
        patch=(1, 16, 16),
        grid_size=(2, 4, 4, 1),
        grid_levels=2,
        stem_channels=4,
        stage_channels=(4, 4),
        stage_depths=(1, 0),
        strides=(2, 2),
    )
    base.update(kw)
    return ModelConfig(**base)


def tiny_options(**kw):
    from nvrc.hierarchy import CodecOptions

    base = dict(grid_block=(2, 2, 2), axis_threshold=4, context_width=2, context_kernel=3)
    base.update(kw)
    return CodecOptions(**base)


def randomize_codec(codec, seed):
    """Scatter theta, phi and psi so every coding path sees nontrivial symbols."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in codec.model.parameters():
            p.add_(torch.randn(p.shape, generator=gen) * 0.05)
        for _, members in codec.phi.groups():
            for _, p in members:
                p.add_(torch.randn(p.shape, generator=gen) * 0.05)
        # psi follows the scattered phi, then gets its own perturbation
        codec.psi.fit_(codec.phi.groups())
        n = codec.psi.values.shape[0]
        codec.psi.values[:, 0].add_(torch.randn(n, generator=gen) * 0.3)
        codec.psi.values[:, 1].add_(torch.randn(n, generator=gen) * 1e-3)
        codec.psi.values[:, 2].add_(torch.rand(n, generator=gen) * 0.5)
    return codec


# acceptance verdicts, printed as one line per criterion at the end of the run
ACCEPTANCE = {}


def record_criterion(number, passed, detail):
    ACCEPTANCE[number] = (bool(passed), detail)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
