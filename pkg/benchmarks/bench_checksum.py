"""Throughput of the basis checksum: compiled kernel vs pure-Python fallback.

The FNV-1a loop is the only byte-serial computation in the pipeline (all the
linear algebra is BLAS-bound), so it is the one place a compiled kernel pays.
Run: python benchmarks/bench_checksum.py [--mb 8]
"""

import argparse
import importlib
import os
import sys
import time

import numpy as np


def load_impl(force_pure: bool):
    os.environ.pop("SPECTRAL_SURGEON_NO_EXT", None)
    if force_pure:
        os.environ["SPECTRAL_SURGEON_NO_EXT"] = "1"
    import spectral_surgeon._fnv as fnv

    importlib.reload(fnv)
    return fnv


def bench(fnv, data: bytes, repeats: int = 3) -> float:
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fnv.fnv1a(data)
        best = min(best, time.perf_counter() - start)
    return best


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--mb", type=float, default=8.0, help="payload size in MiB")
    args = parser.parse_args()

    n = int(args.mb * 2**20)
    data = np.random.default_rng(0).integers(0, 256, n, dtype=np.uint8).tobytes()

    pure = load_impl(force_pure=True)
    assert not pure.USING_NATIVE
    t_pure = bench(pure, data, repeats=1)
    h_pure = pure.fnv1a(data)

    native = load_impl(force_pure=False)
    if not native.USING_NATIVE:
        print("compiled kernel not built; only the fallback is available")
        print(f"pure python : {args.mb / t_pure:8.1f} MiB/s")
        return 0
    t_native = bench(native, data)
    h_native = native.fnv1a(data)
    assert h_pure == h_native, "implementations disagree"

    print(f"payload     : {args.mb:.1f} MiB")
    print(f"pure python : {args.mb / t_pure:8.1f} MiB/s  ({t_pure * 1e3:.1f} ms)")
    print(f"compiled    : {args.mb / t_native:8.1f} MiB/s  ({t_native * 1e3:.1f} ms)")
    print(f"speedup     : {t_pure / t_native:8.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
