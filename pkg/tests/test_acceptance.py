"""Acceptance gate: one test per criterion, each recording a pass/fail line.

The slow criteria (2, 7, 8, 11) train desk-scale models on the seeded
synthetic video; the trained codecs are cached per (variant, lambda) so
criteria 7, 8 and 11 share runs.
"""

import functools
import math
import time

import numpy as np
import pytest
import torch
from pytorch_msssim import ms_ssim as reference_ms_ssim

from conftest import randomize_codec, record_criterion, tiny_model_config, tiny_options
from nvrc import autodiff as ad
from nvrc import rangecoder as rc
from nvrc.config import ablation
from nvrc.entropy import ContextModel, discretized_pmf, rate_bits
from nvrc.hierarchy import Codec, CodecOptions, decode_stream, encode_codec, rate_report
from nvrc.metrics import RdCurve, bd_rate, ms_ssim, psnr
from nvrc.model import ModelConfig
from nvrc.quantization import QuantView, block_counts, combine_layer_scales, expand_block_scales, kumaraswamy_noise, quantize, soft_round
from nvrc.trainer import TrainConfig, train
from nvrc.video import synthetic_video

from test_rangecoder import ExactArithmeticCoder, random_table

LAMBDAS = (0.5, 1.0, 2.0, 4.0)
SECTION_TOL = (0.02, 512)
_consistency = []  # (where, section, estimate, actual) from criteria 1 and 2


def _check_sections(where, res):
    for section in ("psi", "phi", "theta"):
        _consistency.append((where, section, res.estimates[section], res.actual[section]))


def _symbols_equal(a, b):
    if a.keys() != b.keys():
        return False
    return all(a[k].keys() == b[k].keys() and all(np.array_equal(a[k][n], b[k][n]) for n in a[k]) for k in a)


# -- criterion 1 -------------------------------------------------------------------------


def test_c01_hierarchy_round_trip():
    variants = [{}, {"grid_em": "per_tensor"}, {"layer_em": "per_tensor"}, {"level2_coding": False}, {"grid_step": "fixed"}]
    start = time.perf_counter()
    mismatches = 0
    for seed in range(50):
        opts = tiny_options(**variants[seed % len(variants)])
        codec = randomize_codec(Codec(tiny_model_config(), opts, seed=seed), seed)
        res = encode_codec(codec, render=False)
        dec = decode_stream(res.data, render=False)
        _check_sections(f"random model {seed}", res)
        same_psi = res.psi_half.view(np.uint16).tobytes() == dec.psi_half.view(np.uint16).tobytes()
        mismatches += int(not (same_psi and _symbols_equal(res.symbols, dec.symbols)))
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 60
    record_criterion(1, ok, f"50 random models, {mismatches} mismatching, {elapsed:.1f} s")
    assert ok


# -- criterion 2 -------------------------------------------------------------------------


@pytest.mark.slow
def test_c02_bit_exact_reconstruction():
    video = synthetic_video(16, 64, 64, seed=0)
    worst = 0.0
    exact = 0
    for seed in range(5):
        start = time.perf_counter()
        codec = train(video, ModelConfig(), CodecOptions(), TrainConfig(seed=seed))
        res = encode_codec(codec)
        dec = decode_stream(res.data)
        worst = max(worst, time.perf_counter() - start)
        _check_sections(f"synthetic encode seed {seed}", res)
        exact += int(res.reconstruction.numpy().tobytes() == dec.video.numpy().tobytes())
    ok = exact == 5 and worst < 15 * 60
    record_criterion(2, ok, f"{exact}/5 encodes byte-identical, slowest {worst:.0f} s")
    assert ok


# -- criterion 3 -------------------------------------------------------------------------


def test_c03_rate_estimate_consistency():
    if not _consistency:
        test_c01_hierarchy_round_trip()
    rel, slack = SECTION_TOL
    bad = [(w, s, e, a) for w, s, e, a in _consistency if abs(a - e) > rel * e + slack]
    worst = max(abs(a - e) - rel * e for _, _, e, a in _consistency)
    ok = not bad
    record_criterion(3, ok, f"{len(_consistency)} sections checked, {len(bad)} outside 2% + 512 bits (worst excess {worst:.0f} bits)")
    assert ok, bad[:5]


# -- criterion 4 -------------------------------------------------------------------------


def _rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def test_c04_gradients():
    mask = torch.ones(2, 1, 3, 3, 3, dtype=torch.float64)
    mask.view(2, -1)[:, 14:] = 0.0
    coords = torch.rand(7, 3, generator=torch.Generator().manual_seed(3), dtype=torch.float64) * 2.0
    cases = {
        "add": (lambda a: ad.add(a[0], a[1]), [_rand(3, 2), _rand(3, 2, seed=1)]),
        "sub": (lambda a: ad.sub(a[0], a[1]), [_rand(3, 2), _rand(2, seed=1)]),
        "mul": (lambda a: ad.mul(a[0], a[1]), [_rand(4), _rand(4, seed=1)]),
        "div": (lambda a: ad.div(a[0], a[1].abs() + 0.5), [_rand(4), _rand(4, seed=1)]),
        "exp": (lambda a: ad.exp(a[0]), [_rand(5)]),
        "log": (lambda a: ad.log(a[0].abs() + 0.5), [_rand(5)]),
        "tanh": (lambda a: ad.tanh(a[0]), [_rand(5)]),
        "abs": (lambda a: ad.absolute(a[0] + 0.05), [_rand(5)]),
        "gelu": (lambda a: ad.gelu(a[0]), [_rand(16)]),
        "matmul": (lambda a: ad.matmul(a[0], a[1]), [_rand(3, 4), _rand(4, 2, seed=1)]),
        "layer_norm": (lambda a: ad.layer_norm(a[0], a[1], a[2], axis=1), [_rand(2, 5, 3), _rand(5, seed=1), _rand(5, seed=2)]),
        "normal_cdf": (lambda a: ad.normal_cdf(a[0]), [_rand(6)]),
        "reductions": (lambda a: a[0].sum() + a[0].mean(), [_rand(3, 3)]),
        "masked_conv3d": (
            lambda a: ad.conv3d(a[0], a[1], a[2], mask=mask, groups=2, padding=1),
            [_rand(1, 2, 4, 4, 4), _rand(2, 1, 3, 3, 3, seed=1), _rand(2, seed=2)],
        ),
        "trilinear": (lambda a: ad.trilinear(a[0], coords), [_rand(3, 3, 3, 2)]),
    }
    noise = kumaraswamy_noise((6,), 2.0, torch.Generator().manual_seed(5), dtype=torch.float64)
    soft = QuantView("soft", temperature=0.4, noise_a=2.0)
    cases["soft_round_quantizer"] = (
        lambda a: quantize(a[0], torch.exp(a[1]), soft, noise=noise)[1],
        [_rand(6) * 0.3, torch.tensor([-2.0], dtype=torch.float64)],
    )
    cases["rate_term"] = (
        lambda a: rate_bits(a[0], a[1], a[2], torch.exp(a[3])),
        [torch.tensor([-1.3, 0.2, 2.6], dtype=torch.float64), _rand(3) * 0.02, torch.tensor([0.08, 0.05, 0.12], dtype=torch.float64), torch.tensor([-3.5], dtype=torch.float64)],
    )
    ctx = ContextModel(1, (4, 4, 4), width=4, kernel=3).double()
    gen = torch.Generator().manual_seed(6)
    with torch.no_grad():
        for _, p in ctx.tensors():
            p.add_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * 0.5)
    names = [n for n, _ in ctx.tensors()]

    def context(a):
        mu, ls = torch.func.functional_call(ctx, dict(zip(names, a[1:])), (a[0],))
        return mu + ls

    cases["context_model_4x4x4"] = (context, [_rand(4, 4, 4, 1, seed=7)] + [p.detach().clone() for _, p in ctx.tensors()])
    errors = {name: ad.gradcheck(fn, inputs) for name, (fn, inputs) in cases.items()}
    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-4
    record_criterion(4, ok, f"{len(errors)} gradchecks, worst {worst} rel. err {errors[worst]:.2e}")
    assert ok, errors


# -- criterion 5 -------------------------------------------------------------------------


def test_c05_context_causality():
    m = ContextModel(2, (6, 6, 6), width=3, kernel=5).double()
    gen = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for _, p in m.tensors():
            p.add_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * 0.5)
    x = torch.randn(1, 2, 6, 6, 6, generator=gen, dtype=torch.float64)
    mask = torch.ones(1, 1, 6, 6, 6, dtype=torch.float64)
    leaks = 0
    with torch.no_grad():
        mu0, ls0 = (t.reshape(2, -1) for t in m.predict_blocks(x, mask))
        for q in range(216):
            t, h, w = np.unravel_index(q, (6, 6, 6))
            for c in range(2):
                xp = x.clone()
                xp[0, c, t, h, w] += 3.0
                mu, ls = (v.reshape(2, -1) for v in m.predict_blocks(xp, mask))
                leaks += int(not torch.equal(mu[:, : q + 1], mu0[:, : q + 1]))
                leaks += int(not torch.equal(ls[:, : q + 1], ls0[:, : q + 1]))
                leaks += int(not torch.equal(mu[1 - c], mu0[1 - c]))
    ok = leaks == 0
    record_criterion(5, ok, f"432 perturbations on 6x6x6, {leaks} leaks")
    assert ok


# -- criterion 6 -------------------------------------------------------------------------


def test_c06_range_coder_oracle():
    rng = np.random.default_rng(6)
    wrong, worst = 0, 0
    for _ in range(1000):
        tables = [random_table(rng) for _ in range(int(rng.integers(0, 33)))]
        symbols = [int(rng.choice(t.size, p=np.diff(t.cdf) / rc.PROB_TOTAL)) + t.offset for t in tables]
        seg = rc.encode(symbols, tables)
        code, nbits = ExactArithmeticCoder.encode(symbols, tables)
        oracle = ExactArithmeticCoder.decode(code, nbits, tables)
        wrong += int(rc.decode(seg, tables).tolist() != symbols or oracle != symbols)
        worst = max(worst, abs(len(seg.payload) - math.ceil(nbits / 8)))
    ok = wrong == 0 and worst <= 2
    record_criterion(6, ok, f"1000 trials, {wrong} recovery mismatches, worst length gap {worst} bytes")
    assert ok


# -- trained desk-scale runs (criteria 7, 8, 11) ---------------------------------------------


@functools.lru_cache(maxsize=None)
def trained(variant, lam):
    video = synthetic_video(16, 64, 64, seed=0)
    opts = CodecOptions(**(ablation(variant) if variant != "default" else {}))
    codec = train(video, ModelConfig(), opts, TrainConfig(rd_lambda=lam))
    res = encode_codec(codec)
    report = rate_report(res.data)
    return {"bytes": len(res.data), "bpp": report["bpp"], "psnr": psnr(res.reconstruction, video), "report": report}


def _violations(values):
    """Adjacent decreases as relative drops."""
    return [(a - b) / abs(a) for a, b in zip(values, values[1:]) if b < a]


@pytest.mark.slow
def test_c07_rd_monotonicity():
    runs = [trained("default", lam) for lam in LAMBDAS]
    bpp = [r["bpp"] for r in runs]
    q = [r["psnr"] for r in runs]
    viol = _violations(bpp) + _violations(q)
    ok = len(viol) <= 1 and all(v <= 0.02 for v in viol)
    detail = ", ".join(f"lambda {l}: {b:.3f} bpp {p:.2f} dB" for l, b, p in zip(LAMBDAS, bpp, q))
    record_criterion(7, ok, detail)
    assert ok


@pytest.mark.slow
def test_c08_ablation_directionality():
    size = {v: trained(v, 1.0)["bytes"] for v in ("default", "v1", "v2", "v3", "v4", "v5")}
    checks = {
        "default<=v1": size["default"] <= size["v1"],
        "v1<=v3": size["v1"] <= size["v3"],
        "default<=v2": size["default"] <= size["v2"],
        "v2<=v3": size["v2"] <= size["v3"],
        "default<=v4": size["default"] <= size["v4"],
        "|default-v5|<=3%": abs(size["default"] - size["v5"]) <= 0.03 * size["default"],
    }
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    record_criterion(8, ok, f"bytes {size}; failed: {failed or 'none'}")
    assert ok, (size, failed)


@pytest.mark.slow
def test_c11_level_two_overhead():
    shares, exact = [], True
    for key in [("default", lam) for lam in LAMBDAS] + [(v, 1.0) for v in ("v1", "v2", "v3", "v5")]:
        rep = trained(*key)["report"]
        bits = rep["bits"]
        exact &= sum(bits.values()) == rep["total_bits"]
        shares.append((bits["quant_params"] + bits["entropy_params"] + bits["psi"]) / rep["total_bits"])
    ok = exact and max(shares) < 0.15
    record_criterion(11, ok, f"phi+psi share max {100 * max(shares):.1f}% over {len(shares)} models, categories sum exactly: {exact}")
    assert ok


# -- criterion 9 -------------------------------------------------------------------------


def test_c09_formula_examples():
    t = lambda *v: torch.tensor(v, dtype=torch.float64)
    results = {}
    ld = torch.log(t(0.25)).reshape(1, 1, 1, 1)
    results["block scale, one block"] = torch.all(expand_block_scales(ld, (4, 4, 4, 1), (16, 8, 8)) == 0.25).item()
    results["780 blocks"] = block_counts((200, 45, 80, 1), (16, 8, 8)) == (13, 6, 10)
    idx = torch.arange(13, dtype=torch.float64).reshape(13, 1, 1, 1)
    results["t=199 in block 12"] = abs(float(torch.log(expand_block_scales(idx, (200, 1, 1, 1), (16, 8, 8))[199])) - 12) < 1e-12
    zs, zh = quantize(t(1.3), t(0.5))
    results["hard quantization"] = float(zs) == 3.0 and float(zh) == 1.5
    results["soft-round fixed points"] = float(soft_round(t(2.0), 0.3)) == pytest.approx(2.0, abs=1e-12) and float(
        soft_round(t(2.5), 0.3)
    ) == pytest.approx(2.5, abs=1e-12)
    results["soft-round limit"] = abs(float(soft_round(t(2.4), 0.01)) - 2.0) < 1e-3
    results["layer scales"] = float(combine_layer_scales(torch.log(t(2.0)), torch.log(t(3.0)))[0, 0]) == pytest.approx(6.0)
    from nvrc.entropy import combine_dual_axis

    mu, sigma = combine_dual_axis(t(1.0), t(math.log(2.0)), t(3.0), t(math.log(3.0)))
    results["dual-axis mu, sigma"] = float(mu[0, 0]) == pytest.approx(1 * 3 + 3) and float(sigma[0, 0]) == pytest.approx(6.0)
    mu, _ = combine_dual_axis(t(1.0), t(0.0), t(3.0), t(math.log(2.0)))
    results["mu example"] = float(mu[0, 0]) == pytest.approx(5.0)
    p = float(discretized_pmf(t(0.0), t(0.0), t(1.0)))
    oracle = math.erf(0.5 / math.sqrt(2.0))
    results["pmf(0; 0, 1)"] = abs(p - 0.38292) <= 1e-4 and abs(p - oracle) < 1e-12
    failed = [k for k, v in results.items() if not v]
    ok = not failed
    record_criterion(9, ok, f"{len(results)} worked examples, pmf(0;0,1) = {p:.5f}; failed: {failed or 'none'}")
    assert ok


# -- criterion 10 ------------------------------------------------------------------------


def test_c10_metric_oracles():
    gen = torch.Generator().manual_seed(10)
    worst = 0.0
    for _ in range(10):
        x = torch.rand(1, 3, 256, 256, generator=gen, dtype=torch.float64)
        y = (x + 0.08 * torch.randn(x.shape, generator=gen, dtype=torch.float64)).clamp(0, 1)
        worst = max(worst, abs(float(ms_ssim(x, y)) - float(reference_ms_ssim(x, y, data_range=1.0, win_size=11))))
    a = RdCurve([(0.1, 30.0), (0.2, 33.0), (0.4, 35.5), (0.8, 37.2)])
    same = bd_rate(a, a)
    doubled = bd_rate(a, RdCurve([(2 * r, q) for r, q in a.points]))
    ok = worst < 1e-4 and abs(same) < 1e-9 and abs(doubled - 100.0) <= 0.01
    record_criterion(10, ok, f"MS-SSIM max diff {worst:.2e}; BD-rate identical {same:.4f}%, doubled {doubled:.4f}%")
    assert ok
