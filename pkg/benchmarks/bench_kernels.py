"""Benchmark the numba kernel lane against the pure-NumPy fallback.

Times the three fused forward kernels on shapes representative of this
package's workloads (small per-task tensors up to pre-training batches),
plus one end-to-end forward/backward through the transformer encoder.

Run:  python benchmarks/bench_kernels.py [--repeats 200]
"""

import argparse
import time

import numpy as np

from fsml import kernels, nn
from fsml.nn import RawSeriesModel, cross_entropy
from fsml.tensor import Tape, grad

KERNEL_SHAPES = {
    "gelu": [(8, 16), (64, 128), (256, 512)],
    "softmax_rows": [(2, 12, 12), (8, 64, 64), (4, 366, 366)],
    "layer_norm_rows": [(8, 16), (128, 128), (1024, 128)],
}


def time_call(fn, repeats):
    fn()  # warm-up (numba compiles here)
    start = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - start) / repeats


def bench_kernels(repeats):
    rng = np.random.default_rng(0)
    rows = []
    for name, shapes in KERNEL_SHAPES.items():
        fn = getattr(kernels, name)
        for shape in shapes:
            x = rng.standard_normal(shape)
            args = (x, 1e-5) if name == "layer_norm_rows" else (x,)
            timings = {}
            for backend in available_backends():
                kernels.set_backend(backend)
                timings[backend] = time_call(lambda: fn(*args), repeats)
            rows.append((name, shape, timings))
    return rows


def bench_forward_backward(repeats):
    """Forward+backward of a small classify loss under each backend."""
    rng = np.random.default_rng(1)
    config = nn.small_config(embed_dim=32, num_heads=4, hidden_dim=64)
    model = RawSeriesModel(config, in_channels=6)
    params = model.init_params(np.random.default_rng(0), n_classes=8)
    values = rng.standard_normal((16, 14, 6))
    days = np.sort(rng.integers(1, 366, size=(16, 14)), axis=1)
    mask = np.ones((16, 14), dtype=bool)
    labels = rng.integers(0, 8, size=16)

    def step():
        with Tape():
            named = params.named()
            logits = model.logits(params.backbone, params.head, (values, days, mask))
            loss = cross_entropy(logits, labels)
            grad(loss, list(named.values()))

    timings = {}
    for backend in available_backends():
        kernels.set_backend(backend)
        timings[backend] = time_call(step, max(1, repeats // 10))
    return timings


def available_backends():
    return ["numpy", "numba"] if kernels.HAVE_NUMBA else ["numpy"]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=200)
    args = parser.parse_args()

    print(f"{'kernel':<16} {'shape':<16} " + " ".join(f"{b:>12}" for b in available_backends()) + "  speedup")
    for name, shape, timings in bench_kernels(args.repeats):
        cells = " ".join(f"{timings[b] * 1e6:>10.1f}us" for b in available_backends())
        speedup = ""
        if "numba" in timings:
            speedup = f"  {timings['numpy'] / timings['numba']:.2f}x"
        print(f"{name:<16} {str(shape):<16} {cells}{speedup}")

    timings = bench_forward_backward(args.repeats)
    cells = " ".join(f"{timings[b] * 1e3:>10.2f}ms" for b in available_backends())
    speedup = ""
    if "numba" in timings:
        speedup = f"  {timings['numpy'] / timings['numba']:.2f}x"
    print(f"{'encoder fwd+bwd':<16} {'(16x14 batch)':<16} {cells}{speedup}")


if __name__ == "__main__":
    main()
