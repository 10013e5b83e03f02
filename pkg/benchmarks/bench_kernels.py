#!/usr/bin/env python3
"""Benchmark the compiled kernels against the pure-Python fallback.

Runs the two hot loops (dual-path converter stepping and delay-and-sum
accumulation) on both backends, checks the outputs are bit-identical,
and prints a timing table.

Usage: python benchmarks/bench_kernels.py [--steps N] [--pixels N]
"""

import argparse
import time

import numpy as np

from shmnet import _kernels
from shmnet._kernels import _fallback

try:
    from shmnet._kernels import _native
except ImportError:
    _native = None


def time_call(fn, *args, repeat=3):
    best = float("inf")
    result = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        result = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best, result


def bench_dcdc(n_steps):
    rng = np.random.default_rng(0)
    harvest = np.abs(rng.normal(5e-3, 2e-3, n_steps))
    i_load = np.abs(rng.normal(2e-3, 0.8e-3, n_steps))
    args = (2, 2.0, 3.3, harvest, i_load, 2e-5, 0.72, 0.8, 22e-6, 11e-3,
            2.1, 1.9, 1.8, 1.6, 0.02, 2.5)

    def run(mod):
        rs = np.empty(n_steps, dtype=np.int8)
        rv = np.empty(n_steps)
        rw = np.empty(n_steps)
        return mod.dcdc_run(*args, rs, rv, rw), rv

    rows = []
    t_py, (out_py, v_py) = time_call(lambda: run(_fallback))
    rows.append(("python", t_py))
    if _native is not None:
        t_c, (out_c, v_c) = time_call(lambda: run(_native))
        rows.append(("native", t_c))
        assert out_c == out_py and np.array_equal(v_c, v_py), \
            "backends disagree"
    return rows


def bench_das(n_pixels, n_pairs=30, n_t=4000):
    rng = np.random.default_rng(1)
    env = np.abs(rng.normal(size=(n_pairs, n_t)))
    tau = rng.uniform(0, n_t - 2, size=(n_pairs, n_pixels))

    def run(mod):
        out = np.zeros(n_pixels)
        clipped = mod.das_accumulate(env, tau, out)
        return clipped, out

    rows = []
    t_py, (c_py, out_py) = time_call(lambda: run(_fallback))
    rows.append(("python", t_py))
    if _native is not None:
        t_c, (c_c, out_c) = time_call(lambda: run(_native))
        rows.append(("native", t_c))
        assert c_c == c_py and np.array_equal(out_c, out_py), \
            "backends disagree"
    return rows


def show(title, rows, unit_count, unit_name):
    print(f"\n{title}")
    base = rows[0][1]
    for name, dt in rows:
        rate = unit_count / dt
        speedup = base / dt
        print(f"  {name:8s} {dt * 1e3:9.2f} ms   "
              f"{rate / 1e6:8.2f} M{unit_name}/s   x{speedup:.1f}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=1_000_000,
                    help="converter switching periods")
    ap.add_argument("--pixels", type=int, default=40_000,
                    help="image pixels (30 pairs)")
    args = ap.parse_args()

    print(f"active backend: {_kernels.BACKEND}")
    if _native is None:
        print("compiled kernels unavailable; timing the fallback only")

    show(f"dual-path converter, {args.steps:,} switching periods",
         bench_dcdc(args.steps), args.steps, "steps")
    show(f"delay-and-sum, {args.pixels:,} pixels x 30 pairs",
         bench_das(args.pixels), args.pixels * 30, "lookups")


if __name__ == "__main__":
    main()
