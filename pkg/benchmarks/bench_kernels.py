#!/usr/bin/env python3
"""Benchmark the encoder hot kernels: numpy backend vs numba backend.

Times a full forward+backward pass (conv stack + BiLSTM + head) over a
synthetic batch, per backend.  The numba figures exclude the one-off JIT
compile (a warmup call runs first).

Usage: python benchmarks/bench_kernels.py [--batch 64] [--length 600]
       [--repeats 5]
"""

import argparse
import time

import numpy as np

from spirokit.neural import EncoderConfig, EncoderParams
from spirokit.neural.encoder import classifier_loss_and_grads


def bench(backend, params, flows, labels, repeats):
    classifier_loss_and_grads(params, flows, labels, backend=backend)  # warmup
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        classifier_loss_and_grads(params, flows, labels, backend=backend)
        times.append(time.perf_counter() - start)
    return min(times), sum(times) / len(times)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--batch", type=int, default=64)
    parser.add_argument("--length", type=int, default=600)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    config = EncoderConfig()
    params = EncoderParams.init(config, seed=0)
    rng = np.random.default_rng(1)
    flows = [rng.uniform(0, 8, int(rng.integers(args.length // 2, args.length)))
             for _ in range(args.batch)]
    labels = rng.integers(0, 2, args.batch).astype(float)

    print(f"batch={args.batch} max_length={args.length} "
          f"conv={config.conv_channels} hidden={config.hidden}")
    print(f"{'backend':<8} {'best (ms)':>10} {'mean (ms)':>10}")
    results = {}
    for backend in ("numpy", "numba"):
        best, mean = bench(backend, params, flows, labels, args.repeats)
        results[backend] = best
        print(f"{backend:<8} {best * 1e3:>10.1f} {mean * 1e3:>10.1f}")
    print(f"speedup (numpy/numba): {results['numpy'] / results['numba']:.2f}x")


if __name__ == "__main__":
    main()
