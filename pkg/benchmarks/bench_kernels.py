"""Side-by-side timing of the numba and numpy kernel lanes.

Covers the three hot spots: the im2col gather, the col2im scatter-add,
and the gamma CDF family used by the Dirichlet sampler, plus a full
conv2d forward/backward through the autodiff op on each lane.

Run:  python benchmarks/bench_kernels.py [--batch 256] [--channels 64]
"""

import argparse
import time

import numpy as np
from threadpoolctl import threadpool_limits

from specmix.kernels import numba_impl, numpy_impl
from specmix import tensor as T


def timeit(fn, repeats=10, warmup=2):
    for _ in range(warmup):
        fn()
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def bench_gather_scatter(lane, n, c, h, w):
    rng = np.random.default_rng(0)
    xpad = rng.normal(size=(n, h + 2, w + 2, c))
    cols = np.empty((n * h * w, 9 * c))
    gcols = rng.normal(size=cols.shape)
    gx = np.zeros_like(xpad)
    t_gather = timeit(lambda: lane.im2col3x3(xpad, cols))
    t_scatter = timeit(lambda: lane.col2im3x3_add(gcols, gx))
    return t_gather, t_scatter


def bench_gamma(lane, size=4096):
    rng = np.random.default_rng(1)
    a = rng.uniform(0.05, 20.0, size)
    u = rng.uniform(1e-6, 1 - 1e-6, size)
    x = lane.gamma_cdf_inv(a, u)
    t_inv = timeit(lambda: lane.gamma_cdf_inv(a, u), repeats=5)
    t_cdf = timeit(lambda: lane.gamma_cdf(a, x), repeats=5)
    t_dda = timeit(lambda: lane.gamma_dcdf_da(a, x), repeats=5)
    return t_cdf, t_inv, t_dda


def bench_conv_op(lane_name, n, c, h, w):
    import specmix.kernels as K
    saved = (K.im2col3x3, K.col2im3x3_add)
    lane = numba_impl if lane_name == "numba" else numpy_impl
    K.im2col3x3 = lane.im2col3x3
    K.col2im3x3_add = lane.col2im3x3_add
    try:
        rng = np.random.default_rng(2)
        pool = T.BufferPool()
        x = T.Tensor(rng.normal(size=(n, h, w, c)), requires_grad=True)
        k = T.Tensor(rng.normal(size=(c, c, 3, 3)), requires_grad=True)
        b = T.Tensor(np.zeros(c), requires_grad=True)

        def fwd_bwd():
            for p in (x, k, b):
                p.zero_grad()
            with T.Tape() as tape:
                loss = T.mean_all(T.conv2d_nhwc(x, k, b, pool=pool))
            T.backward(loss, tape)
        return timeit(fwd_bwd, repeats=5)
    finally:
        K.im2col3x3, K.col2im3x3_add = saved


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--batch", type=int, default=256)
    parser.add_argument("--channels", type=int, default=64)
    parser.add_argument("--patch", type=int, default=7)
    args = parser.parse_args()
    n, c, h = args.batch, args.channels, args.patch

    flops = 2.0 * n * c * h * h * c * 9

    with threadpool_limits(limits=1):
        print(f"shapes: batch={n} channels={c} spatial={h}x{h} (single BLAS thread)")
        print(f"{'kernel':<26}{'numpy':>12}{'numba':>12}{'speedup':>9}")
        rows = []
        g_np = bench_gather_scatter(numpy_impl, n, c, h, h)
        g_nb = bench_gather_scatter(numba_impl, n, c, h, h)
        rows.append(("im2col gather", g_np[0], g_nb[0]))
        rows.append(("col2im scatter-add", g_np[1], g_nb[1]))
        gm_np = bench_gamma(numpy_impl)
        gm_nb = bench_gamma(numba_impl)
        rows.append(("gamma cdf (4096)", gm_np[0], gm_nb[0]))
        rows.append(("gamma cdf inverse (4096)", gm_np[1], gm_nb[1]))
        rows.append(("gamma dF/da (4096)", gm_np[2], gm_nb[2]))
        t_np = bench_conv_op("numpy", n, c, h, h)
        t_nb = bench_conv_op("numba", n, c, h, h)
        rows.append(("conv2d fwd+bwd op", t_np, t_nb))
        for name, a, b in rows:
            print(f"{name:<26}{a * 1e3:>10.2f}ms{b * 1e3:>10.2f}ms{a / b:>8.2f}x")
        print(f"conv fwd+bwd throughput: numpy {3 * flops / t_np / 1e9:.1f} GFLOP/s, "
              f"numba {3 * flops / t_nb / 1e9:.1f} GFLOP/s")


if __name__ == "__main__":
    main()
