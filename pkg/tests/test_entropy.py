import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from nvrc import _pykernels, autodiff as ad
from nvrc.entropy import (
    SIGMA_MIN,
    ContextModel,
    DualAxisGaussian,
    TensorGaussian,
    combine_dual_axis,
    discretized_pmf,
    lower_bound,
    rate_bits,
    to_blocks,
)


def erf_pmf(k, mu, sigma):
    """Independent oracle from math.erf."""
    cdf = lambda x: 0.5 * (1.0 + math.erf((x - mu) / (sigma * math.sqrt(2.0))))
    return cdf(k + 0.5) - cdf(k - 0.5)


def erf_pmf_tail(k, sigma):
    c = 1.0 / (sigma * math.sqrt(2.0))
    return 0.5 * (math.erfc((k - 0.5) * c) - math.erfc((k + 0.5) * c))


def t64(*values):
    return torch.tensor(values, dtype=torch.float64)


class TestDiscretizedPmf:
    def test_standard_normal_at_zero(self):
        p = float(discretized_pmf(t64(0.0), t64(0.0), t64(1.0)))
        assert p == pytest.approx(0.38292, abs=1e-4)
        assert p == pytest.approx(erf_pmf(0, 0.0, 1.0), abs=1e-12)

    @given(st.integers(-20, 20), st.floats(-5, 5), st.floats(0.2, 10))
    def test_matches_erf_oracle(self, k, mu, sigma):
        p = float(discretized_pmf(t64(k), t64(mu), t64(sigma)))
        assert p == pytest.approx(erf_pmf(k, mu, sigma), abs=1e-12)

    @given(st.integers(0, 30), st.floats(0.11, 8))
    def test_symmetric(self, k, sigma):
        s = t64(sigma)
        assert float(discretized_pmf(t64(k), t64(0.0), s)) == pytest.approx(float(discretized_pmf(t64(-k), t64(0.0), s)), rel=1e-12)

    def test_sums_to_one(self):
        k = torch.arange(-200, 201, dtype=torch.float64)
        assert float(discretized_pmf(k, t64(0.3), t64(7.0)).sum()) == pytest.approx(1.0, abs=1e-12)

    def test_tail_keeps_relative_precision(self):
        p = float(discretized_pmf(t64(12.0), t64(0.0), t64(1.0)))
        assert p == pytest.approx(erf_pmf_tail(12, 1.0), rel=1e-9)


class TestRate:
    def test_quarter_probability_symbols(self):
        # sigma chosen so that the centre bin has mass 1/4
        lo, hi = 0.5, 5.0
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            lo, hi = (mid, hi) if erf_pmf(0, 0.0, mid) > 0.25 else (lo, mid)
        bits = rate_bits(torch.zeros(8, dtype=torch.float64), t64(0.0), t64(lo), t64(1.0))
        assert float(bits) == pytest.approx(16.0, abs=1e-6)
        assert float(bits) / 16 == pytest.approx(1.0, abs=1e-6)  # bpp over a 16-pixel video

    @given(st.floats(0.1, 20))
    def test_joint_scaling_invariance(self, c):
        sym = t64(-3, 0, 1, 4, 7)
        mu, sigma, delta = t64(0.02), t64(0.05), t64(0.01)
        a = rate_bits(sym, mu, sigma, delta)
        b = rate_bits(sym, mu * c, sigma * c, delta * c)
        assert float(a) == pytest.approx(float(b), rel=1e-9)

    def test_sigma_floor(self):
        a = rate_bits(t64(0.0), t64(0.0), t64(1e-6), t64(1.0))
        b = rate_bits(t64(0.0), t64(0.0), t64(SIGMA_MIN), t64(1.0))
        assert float(a) == float(b)

    def test_lower_bound_gradient_passes_upward_only(self):
        x = torch.tensor([0.05, 0.05, 0.5], requires_grad=True)
        y = lower_bound(x, 0.11)
        y.backward(torch.tensor([-1.0, 1.0, 1.0]))
        assert x.grad.tolist() == [-1.0, 0.0, 1.0]

    def test_tail_symbols_still_pull_sigma_up(self):
        ls = torch.tensor(0.0, dtype=torch.float64, requires_grad=True)
        bits = rate_bits(t64(100.0), t64(0.0), torch.exp(ls), t64(1.0))
        bits.backward()
        assert float(ls.grad) < 0.0

    def test_gradcheck_values_mu_sigma_logdelta(self):
        inputs = [t64(-1.3, 0.2, 2.6), t64(0.01, -0.02, 0.03), t64(0.08, 0.05, 0.12), t64(-3.5)]
        fn = lambda a: rate_bits(a[0], a[1], a[2], torch.exp(a[3]))
        assert ad.gradcheck(fn, inputs) < 1e-4


class TestDualAxis:
    def test_mean_combination(self):
        mu, _ = combine_dual_axis(t64(1.0), t64(0.0), t64(3.0), t64(math.log(2.0)))
        assert float(mu[0, 0]) == pytest.approx(5.0)

    def test_scale_combination(self):
        _, sigma = combine_dual_axis(t64(0.0), t64(math.log(2.0)), t64(0.0), t64(math.log(3.0)))
        assert float(sigma[0, 0]) == pytest.approx(6.0)

    def test_zero_out_mean_is_column_constant(self):
        mu_in = t64(0.5, -1.0, 2.0)
        mu, _ = combine_dual_axis(torch.zeros(4, dtype=torch.float64), torch.zeros(4, dtype=torch.float64), mu_in, torch.zeros(3, dtype=torch.float64))
        assert torch.equal(mu, mu_in.expand(4, 3))

    def test_modes_and_shapes(self):
        em = DualAxisGaussian(32, 20, 16)
        mu, sigma = em()
        assert em.mode == "dual" and mu.shape == sigma.shape == (32, 20)
        assert DualAxisGaussian(32, 20, 16, per_tensor=True).mu_in is None

    def test_tensor_gaussian_fit(self):
        em = TensorGaussian()
        em.fit_(t64(1.0, 3.0))
        mu, sigma = (t.detach() for t in em())
        assert float(mu) == pytest.approx(2.0) and float(sigma) == pytest.approx(math.sqrt(2.0), rel=1e-6)


def _ctx(channels=2, width=3, kernel=3, seed=0, dtype=torch.float64):
    m = ContextModel(channels, (6, 6, 6), width=width, kernel=kernel, seed=seed).to(dtype)
    g = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for _, p in m.tensors():
            p.add_(torch.randn(p.shape, generator=g, dtype=dtype) * 0.5)
    return m


class TestContextCausality:
    def test_exhaustive_perturbation_6x6x6(self):
        m = _ctx()
        g = torch.Generator().manual_seed(3)
        x = torch.randn(1, 2, 6, 6, 6, generator=g, dtype=torch.float64)
        mask = torch.ones(1, 1, 6, 6, 6, dtype=torch.float64)
        with torch.no_grad():
            mu0, ls0 = m.predict_blocks(x, mask)
            for q in range(216):
                t, h, w = np.unravel_index(q, (6, 6, 6))
                for c in range(2):
                    xp = x.clone()
                    xp[0, c, t, h, w] += 5.0
                    mu, ls = m.predict_blocks(xp, mask)
                    before = slice(0, q + 1)
                    assert torch.equal(mu.reshape(1, 2, -1)[..., before], mu0.reshape(1, 2, -1)[..., before])
                    assert torch.equal(ls.reshape(1, 2, -1)[..., before], ls0.reshape(1, 2, -1)[..., before])
                    other = 1 - c
                    assert torch.equal(mu[0, other], mu0[0, other])

    def test_zero_input_is_constant_away_from_padding(self):
        m = _ctx(kernel=3)
        x = torch.zeros(1, 2, 6, 6, 6, dtype=torch.float64)
        with torch.no_grad():
            mu, _ = m.predict_blocks(x, torch.ones(1, 1, 6, 6, 6, dtype=torch.float64))
        # two masked layers reach two cells back in t and two either way in h, w
        interior = mu[0, :, 2:, 2:-2, 2:-2]
        assert torch.allclose(interior, interior[:, :1, :1, :1].expand_as(interior), atol=1e-12)

    def test_identical_blocks_get_identical_predictions(self):
        m = _ctx()
        blk = torch.randn(6, 6, 6, 2, generator=torch.Generator().manual_seed(4), dtype=torch.float64)
        grid = torch.cat([blk, blk], dim=0)
        with torch.no_grad():
            mu, ls = m(grid)
        assert torch.equal(mu[:6], mu[6:]) and torch.equal(ls[:6], ls[6:])

    def test_gradcheck_end_to_end_4x4x4(self):
        m = _ctx(channels=1, width=4, kernel=3)
        names = [n for n, _ in m.tensors()]
        x = torch.randn(4, 4, 4, 1, generator=torch.Generator().manual_seed(5), dtype=torch.float64)

        def fn(a):
            params = dict(zip(names, a[1:]))
            mu, ls = torch.func.functional_call(m, params, (a[0],))
            return mu + ls

        inputs = [x] + [p.detach().clone() for _, p in m.tensors()]
        assert ad.gradcheck(fn, inputs) < 1e-4


class TestKernelAgreement:
    def test_sequential_coder_reproduces_parallel_predictions(self):
        torch.manual_seed(0)
        m = _ctx(channels=2, width=3, kernel=3)
        delta = np.array([0.5, 0.25])
        sym = np.random.default_rng(0).integers(-3, 4, size=(4, 4, 4, 2))
        grid = torch.from_numpy(sym * delta)
        with torch.no_grad():
            mu, ls = m(grid)
        w = ContextModel.kernel_weights(dict(m.tensors()))
        payload, mus, sigmas = _pykernels.context_code_block(w, delta, (4, 4, 4), 3, symbols=sym)
        mu_s = mu.numpy() / delta
        sig_s = np.exp(ls.numpy()) / delta
        assert np.max(np.abs(mus - mu_s)) <= 1 / 512 + 1e-6
        assert np.max(np.abs(sigmas - np.maximum(sig_s, SIGMA_MIN))) <= 1 / 512 + 1e-6
        back, _, _ = _pykernels.context_code_block(w, delta, (4, 4, 4), 3, data=payload)
        assert np.array_equal(back, sym)

    def test_blocks_pad_and_mask(self):
        x = torch.ones(5, 3, 3, 1)
        xb, mask, counts = to_blocks(x, (2, 2, 2))
        assert counts == (3, 2, 2) and xb.shape == (12, 1, 2, 2, 2)
        assert float(mask.sum()) == 45.0
