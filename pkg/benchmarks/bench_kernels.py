"""Time each hot kernel on the numba and numpy backends.

Shapes follow the full-width reference tracker (search branch, 303 px
input). Run from the repo root:

    python3 benchmarks/bench_kernels.py [--repeats 5] [--csv out.csv]

Prints one row per kernel with median milliseconds per backend and the
speedup. The first numba call per kernel is excluded as JIT warmup.
"""
import argparse
import csv
import statistics
import sys
import time

import numpy as np

from prunekit import kernels


def cases(rng):
    f32 = np.float32
    conv_x = rng.standard_normal((1, 96, 31, 31)).astype(f32)  # conv2 input after pool
    conv_w = rng.standard_normal((256, 96, 5, 5)).astype(f32)
    conv_b = np.zeros(256, f32)
    pool_x = rng.standard_normal((1, 96, 147, 147)).astype(f32)
    z = rng.standard_normal((1, 256, 4, 4)).astype(f32)
    x = rng.standard_normal((1, 256, 26, 26)).astype(f32)
    maps = rng.standard_normal((384, 15, 15)).astype(f32)  # per-filter maps of a tap
    return {
        "im2col 96x31x31 k5": ("im2col", (conv_x, 5, 1, 0)),
        "conv2d_direct 96->256 k5": ("conv2d_direct", (conv_x, conv_w, conv_b, 1, 0)),
        "max_pool2d 96x147 k3s2": ("max_pool2d", (pool_x, 3, 2)),
        "xcorr_depthwise 256 4/26": ("xcorr_depthwise", (z, x)),
        "rank_batch 384x15x15": ("rank_batch", (maps, 1e-5)),
    }


def median_ms(fn, args, repeats):
    fn(*args)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--csv", help="also write results here")
    args = ap.parse_args(argv)

    if kernels.numba_impl is None:
        print("numba backend disabled (PRUNEKIT_NUMBA=0 or numba missing); timing numpy only", file=sys.stderr)
    backends = ["numpy"] + (["numba"] if kernels.numba_impl is not None else [])
    rows = []
    for label, (name, kargs) in cases(np.random.default_rng(args.seed)).items():
        row = {"kernel": label}
        outs = {}
        for be in backends:
            fn = kernels.get(name, be)
            row[f"{be}_ms"] = round(median_ms(fn, kargs, args.repeats), 3)
            outs[be] = np.asarray(fn(*kargs))
        if len(outs) == 2:
            a, b = outs["numpy"], outs["numba"]
            row["max_abs_diff"] = float(np.abs(a.astype(np.float64) - b).max())
            row["speedup"] = round(row["numpy_ms"] / max(row["numba_ms"], 1e-9), 2)
        rows.append(row)

    cols = list(rows[0])
    print("  ".join(f"{c:>26}" if i == 0 else f"{c:>12}" for i, c in enumerate(cols)))
    for r in rows:
        print("  ".join(f"{r[c]!s:>26}" if i == 0 else f"{r[c]!s:>12}" for i, c in enumerate(cols)))
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=cols)
            w.writeheader()
            w.writerows(rows)


if __name__ == "__main__":
    main()
