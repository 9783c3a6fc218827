"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeat N]

Prints best-of-N wall time per kernel and the speedup of each backend over
numpy. Full inference is timed by swapping the backend the engine dispatches to.
"""
import argparse
import time

import numpy as np

from xnor_forge import bitcore, engine, kernels, modelio, netspec, verify


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(rng):
    a = rng.integers(0, 2**63, (100, 50), dtype=np.uint64)
    b = rng.integers(0, 2**63, (128, 50), dtype=np.uint64)
    words = rng.integers(0, 2**63, 1 << 16, dtype=np.uint64)
    image = rng.uniform(-1, 1, (32, 32, 3))
    signs = np.where(rng.integers(0, 2, (64, 3, 5, 5)) == 1, 1, -1).astype(np.int8)
    spec = netspec.builtin_custom()
    bundle = modelio.random_bundle(spec, 0)
    net_image = verify.random_image(rng, spec)
    return {
        "popcount (64 Ki words)": lambda k: k.popcount(words),
        "xnor_dot_matrix 100x128x3200b": lambda k: k.xnor_dot_matrix(a, b, 3200),
        "conv_first 32x32x3 * 64x5x5": lambda k: k.conv_first_accumulate(image, signs),
        "infer builtin:custom": lambda k: _infer_with(k, spec, bundle, net_image),
    }


def _infer_with(backend, spec, bundle, image):
    saved = engine.kernels, bitcore.kernels
    engine.kernels = bitcore.kernels = backend
    try:
        return engine.infer(spec, bundle, image)
    finally:
        engine.kernels, bitcore.kernels = saved


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    backends = kernels.available_backends()
    rng = np.random.default_rng(0)
    names = sorted(backends)
    print(f"{'kernel':34s}" + "".join(f"{n:>14s}" for n in names) + "   speedup")
    for label, fn in cases(rng).items():
        t = {n: best_of(lambda: fn(backends[n]), args.repeat) for n in names}
        speed = "  ".join(f"{n} x{t['numpy'] / t[n]:.1f}" for n in names if n != "numpy")
        print(f"{label:34s}" + "".join(f"{t[n] * 1e3:12.3f}ms" for n in names) + f"   {speed or '-'}")


if __name__ == "__main__":
    main()
