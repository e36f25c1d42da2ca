#!/usr/bin/env python3
"""Time the compiled similarity kernels against the numpy fallback.

The pairwise matching-similarity fill is the hot loop of query selection;
this script generates synthetic pools and reports both backends' wall
times and their agreement, e.g.::

    python benchmarks/bench_backends.py --pools 100 200 --objects 8 --dim 32
"""

import argparse
import time

import numpy as np

from alquery import _kernels
from alquery.records import make_object, make_record
from alquery.similarity import PROB_FLOOR


def synthetic_pool(rng, n, objects, dim, num_classes=10, ways=11):
    pool = []
    for i in range(n):
        count = int(rng.integers(1, objects + 1))
        objs = [
            make_object(
                rng.normal(size=dim),
                int(rng.integers(0, num_classes)),
                float(rng.uniform()),
                rng.dirichlet(np.ones(ways)),
            )
            for _ in range(count)
        ]
        pool.append(make_record(f"img_{i:05d}", objs))
    return pool


def time_call(fn, repeats):
    best = np.inf
    result = None
    for _ in range(repeats):
        start = time.perf_counter()
        result = fn()
        best = min(best, time.perf_counter() - start)
    return result, best


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--pools", type=int, nargs="+", default=[50, 100, 200])
    parser.add_argument("--objects", type=int, default=8, help="max objects per image")
    parser.add_argument("--dim", type=int, default=32)
    parser.add_argument("--repeats", type=int, default=3)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    if _kernels._simkern is None:
        print("compiled extension not built; timing the numpy fallback only")

    header = f"{'kernel':8s} {'n':>5s} {'numpy [ms]':>12s} {'compiled [ms]':>14s} {'speedup':>8s} {'max|diff|':>10s}"
    print(header)
    print("-" * len(header))
    rng = np.random.default_rng(args.seed)
    for n in args.pools:
        pool = synthetic_pool(rng, n, args.objects, args.dim)
        feats, classes, scores, offsets = _kernels.flatten_pool(pool)
        probs = np.stack([o.probs for r in pool for o in r.objects])
        probs = np.maximum(probs, PROB_FLOOR)
        probs /= probs.sum(axis=1, keepdims=True)
        probs = np.ascontiguousarray(probs)
        logs = np.ascontiguousarray(np.log(probs))

        cases = {
            "ccms": (
                lambda: _kernels._ccms_matrix_numpy(feats, classes, scores, offsets),
                (lambda: _kernels._simkern.ccms_matrix(feats, classes, scores, offsets))
                if _kernels._simkern
                else None,
            ),
            "kl": (
                lambda: _kernels._kl_matrix_numpy(probs, logs, classes, scores, offsets),
                (lambda: _kernels._simkern.kl_matrix(probs, logs, classes, scores, offsets))
                if _kernels._simkern
                else None,
            ),
        }
        for name, (numpy_fn, ext_fn) in cases.items():
            ref, numpy_t = time_call(numpy_fn, args.repeats)
            if ext_fn is None:
                print(f"{name:8s} {n:5d} {numpy_t * 1e3:12.2f} {'-':>14s} {'-':>8s} {'-':>10s}")
                continue
            out, ext_t = time_call(ext_fn, args.repeats)
            diff = float(np.max(np.abs(out - ref))) if ref.size else 0.0
            print(
                f"{name:8s} {n:5d} {numpy_t * 1e3:12.2f} {ext_t * 1e3:14.2f} "
                f"{numpy_t / ext_t:7.1f}x {diff:10.2e}"
            )


if __name__ == "__main__":
    main()
