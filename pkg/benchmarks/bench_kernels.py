"""Benchmark the numba kernels against the pure-numpy fallback.

Times the convolution hot paths (forward + full backward) through both
backends on U-Net-shaped workloads, plus the raw im2col/col2im kernels.

    python benchmarks/bench_kernels.py [--repeats N] [--batch N]
"""

import argparse
import time

import numpy as np

from defectscan import autodiff as ad
from defectscan import backend

CASES = [
    # label, (n, c, h, w), (o, kh, kw), stride, padding
    ("res_conv 28x28 c32", (64, 32, 28, 28), (32, 3, 3), 1, 1),
    ("res_conv 14x14 c64", (64, 64, 14, 14), (64, 3, 3), 1, 1),
    ("downsample 28->14", (64, 32, 28, 28), (32, 4, 4), 2, 1),
    ("skip_fuse 28x28 64->32", (64, 64, 28, 28), (32, 3, 3), 1, 1),
]


def time_conv(name, case, repeats):
    label, (n, c, h, w), (o, kh, kw), stride, padding = case
    rng = np.random.default_rng(0)
    x = ad.Tensor(rng.standard_normal((n, c, h, w)).astype(np.float32), requires_grad=True)
    wt = ad.Tensor(rng.standard_normal((o, c, kh, kw)).astype(np.float32) * 0.1,
                   requires_grad=True)
    b = ad.Tensor(np.zeros(o, np.float32), requires_grad=True)

    def step():
        x.grad = wt.grad = b.grad = None
        with ad.GradientTape() as tape:
            y = ad.conv2d(x, wt, b, stride=stride, padding=padding)
            loss = ad.sum_all(y)
        ad.backward(loss, tape)

    backend.set_backend(name)
    step()  # warm-up (JIT compile on the numba path)
    t0 = time.perf_counter()
    for _ in range(repeats):
        step()
    return (time.perf_counter() - t0) / repeats


def time_raw_kernels(name, repeats):
    k = backend.get_kernels(name)
    rng = np.random.default_rng(1)
    xp = rng.standard_normal((64, 32, 30, 30)).astype(np.float32)
    oh = ow = 28
    cols = k.im2col(xp, 3, 3, 1, oh, ow)  # warm-up
    t0 = time.perf_counter()
    for _ in range(repeats):
        k.im2col(xp, 3, 3, 1, oh, ow)
    t_im2col = (time.perf_counter() - t0) / repeats
    t0 = time.perf_counter()
    for _ in range(repeats):
        k.col2im(cols, 32, 30, 30, 3, 3, 1, oh, ow)
    t_col2im = (time.perf_counter() - t0) / repeats
    return t_im2col, t_col2im


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    print(f"{'case':30s} {'numpy':>10s} {'numba':>10s} {'speedup':>8s}")
    for case in CASES:
        t_np = time_conv("numpy", case, args.repeats)
        t_nb = time_conv("numba", case, args.repeats)
        print(f"{case[0]:30s} {t_np * 1e3:9.2f}ms {t_nb * 1e3:9.2f}ms {t_np / t_nb:7.2f}x")

    for name in ("numpy", "numba"):
        im, col = time_raw_kernels(name, args.repeats * 3)
        print(f"raw {name:6s} im2col {im * 1e3:7.2f}ms  col2im {col * 1e3:7.2f}ms")
    backend.set_backend("auto")


if __name__ == "__main__":
    main()
