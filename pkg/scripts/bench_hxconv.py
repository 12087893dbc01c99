"""Parameter counts and forward timings of hxconv against the equivalent real convolution.

    python scripts/bench_hxconv.py --iters 5

Prints CSV: one row per (Ci, Co, k) at a fixed spatial size. Also times the
componentwise reference loop to show what the block-weight assembly buys.
"""

import argparse
import csv
import sys
import time

import numpy as np

from sedunet.layers import hxconv_forward, hxconv_forward_componentwise, hxconv_init, hxconv_param_count, \
    real_conv_param_count
from sedunet.tensor import Conv2dSpec, Prng, conv2d


def per_call_ms(fn, iters):
    fn()
    t0 = time.perf_counter()
    for _ in range(iters):
        fn()
    return (time.perf_counter() - t0) / iters * 1e3


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--iters", type=int, default=5)
    p.add_argument("--size", type=int, default=32)
    args = p.parse_args()

    rng = Prng(0)
    out = csv.writer(sys.stdout, lineterminator="\n")
    out.writerow(["ci", "co", "k", "hw", "hx_params", "real_params", "ratio", "hx_ms", "loop_ms", "real_ms"])
    for ci, co, k in [(1, 1, 3), (4, 4, 3), (8, 16, 3), (16, 16, 3), (16, 16, 1), (32, 32, 3)]:
        spec = Conv2dSpec.square(ci, co, k)
        layer = hxconv_init(spec, rng)
        full = Conv2dSpec.square(16 * ci, 16 * co, k)
        weight = rng.normal(full.weight_shape, scale=0.01).astype(np.float32)
        x = rng.normal((1, 16 * ci, args.size, args.size)).astype(np.float32)
        out.writerow([ci, co, k, args.size, hxconv_param_count(spec), real_conv_param_count(spec),
                      real_conv_param_count(spec) / hxconv_param_count(spec),
                      f"{per_call_ms(lambda: hxconv_forward(layer, x), args.iters):.2f}",
                      f"{per_call_ms(lambda: hxconv_forward_componentwise(layer, x), args.iters):.2f}",
                      f"{per_call_ms(lambda: conv2d(x, weight, full), args.iters):.2f}"])


if __name__ == "__main__":
    main()
