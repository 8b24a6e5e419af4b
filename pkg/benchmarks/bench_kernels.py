"""Time the compiled kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Each row codes the same data with both backends, checks the outputs are
byte-identical and reports the best wall time of ``--repeat`` runs.
"""

import argparse
import time

import numpy as np

from nvrc import _pykernels


def _best(fn, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def _context_weights(rng, G=1, W=8, k=5):
    na, nb = k ** 3 // 2, k ** 3 // 2 + 1
    return {
        "w1": rng.normal(0, 0.05, (G, W, na)), "b1": np.zeros((G, W)),
        "g2": np.ones((G, W)), "be2": np.zeros((G, W)),
        "w2": rng.normal(0, 0.05, (G, W, W, nb)), "b2": np.zeros((G, W)),
        "g3": np.ones((G, W)), "be3": np.zeros((G, W)),
        "w3": rng.normal(0, 0.05, (G, 2, W, nb)), "b3": np.zeros((G, 2)),
    }


def cases(rng):
    n = 20000
    mu, sigma = rng.normal(0, 2, n), np.exp(rng.uniform(-1, 3, n))
    sym = np.round(rng.normal(mu, sigma)).astype(np.int64)
    yield "gaussian encode (20k symbols)", lambda k: k.encode_gaussian(sym, mu, sigma)
    data = _pykernels.encode_gaussian(sym, mu, sigma)
    yield "gaussian decode (20k symbols)", lambda k: k.decode_gaussian(data, mu, sigma, n).tobytes()
    x = rng.normal(0, 5, 200000)
    yield "normal cdf (200k values)", lambda k: k.det_normal_cdf(x).tobytes()
    w = _context_weights(rng)
    blk = rng.integers(-3, 4, (8, 8, 8, 1))
    yield "context block encode (8x8x8, k=5, width 8)", lambda k: k.context_code_block(w, np.ones(1), (8, 8, 8), 5, symbols=blk)[0]


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args(argv)
    try:
        from nvrc import _ckernels
    except ImportError:
        print("compiled kernels not built; nothing to compare")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'case':<46}{'python s':>10}{'cython s':>10}{'speedup':>9}")
    for name, fn in cases(rng):
        tp, a = _best(lambda: fn(_pykernels), args.repeat)
        tc, b = _best(lambda: fn(_ckernels), args.repeat)
        if a != b:
            raise SystemExit(f"backends disagree on {name}")
        print(f"{name:<46}{tp:>10.4f}{tc:>10.4f}{tp / tc:>8.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
