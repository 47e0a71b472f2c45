"""Time the compiled and numpy kernel backends on model-sized shapes.

    python benchmarks/bench_kernels.py [--repeat 20] [--dtype float32]

Shapes follow the desk training step: batch 64 folded into the node axis
(64 * 10 nodes), 40 channels, 13 time steps, kernel size 2.
"""

import argparse
import time

import numpy as np

from stwave.kernels import available_backends

CASES = {
    # name: (C_in, C_out, nodes, T, K, dilation)
    "conv d=1": (40, 40, 640, 13, 2, 1),
    "conv d=2": (40, 40, 640, 12, 2, 2),
    "conv 1x1 wide": (40, 256, 640, 1, 1, 1),
    "conv start": (2, 40, 640, 13, 1, 1),
}


def _best(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_conv(impl, shape, dtype, repeat, rng):
    cin, cout, n, t, k, d = shape
    x = rng.standard_normal((1, cin, n, t)).astype(dtype)
    w = rng.standard_normal((cout, cin, k)).astype(dtype)
    b = rng.standard_normal(cout).astype(dtype)
    y = impl.conv_time_forward(x, w, b, d)
    g = rng.standard_normal(y.shape).astype(dtype)
    fwd = _best(lambda: impl.conv_time_forward(x, w, b, d), repeat)
    bwd = _best(lambda: impl.conv_time_backward(x, w, g, d, True), repeat)
    return fwd, bwd


def bench_node_mix(impl, dtype, repeat, rng, density):
    n = 10
    P = rng.random((n, n)).astype(dtype)
    P[rng.random((n, n)) > density] = 0
    x = rng.standard_normal((64, 40, n, 12)).astype(dtype)
    g = rng.standard_normal(x.shape).astype(dtype)
    fwd = _best(lambda: impl.node_mix_forward(P, x), repeat)
    bwd = _best(lambda: impl.node_mix_backward(P, x, g, True, False), repeat)
    return fwd, bwd


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--dtype", default="float32", choices=["float32", "float64"])
    args = p.parse_args(argv)
    dtype = np.dtype(args.dtype)
    backends = available_backends()
    if "cython" not in backends:
        print("compiled backend not built; run `pip install -e . --no-build-isolation` first")
    rows = []
    for name, shape in CASES.items():
        for backend, impl in backends.items():
            fwd, bwd = bench_conv(impl, shape, dtype, args.repeat, np.random.default_rng(0))
            rows.append((name, backend, fwd, bwd))
    for density in (0.15, 1.0):
        for backend, impl in backends.items():
            fwd, bwd = bench_node_mix(impl, dtype, args.repeat, np.random.default_rng(0), density)
            rows.append((f"node_mix p={density}", backend, fwd, bwd))
    print(f"{'kernel':<20}{'backend':<9}{'fwd ms':>10}{'bwd ms':>10}")
    for name, backend, fwd, bwd in rows:
        print(f"{name:<20}{backend:<9}{fwd * 1e3:>10.3f}{bwd * 1e3:>10.3f}")
    return rows


if __name__ == "__main__":
    main()
