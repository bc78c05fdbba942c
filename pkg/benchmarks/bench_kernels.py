"""Time the compiled and numpy kernel cores on the Gram-matrix hot paths.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Prints one line per (kernel, shape, backend) with the best wall time over
``--repeat`` runs and the cython speed-up.
"""
import argparse
import json
import timeit

import numpy as np

from kdm import _backend

SHAPES = [(64, 32, 8), (1024, 64, 14), (4096, 256, 104), (8192, 32, 104)]


def bench(fn, repeat):
    t = timeit.Timer(fn)
    number, _ = t.autorange()
    return min(t.repeat(repeat, number)) / number


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results to this file")
    args = ap.parse_args(argv)

    gen = np.random.default_rng(0)
    rows = []
    for n, m, d in SHAPES:
        X = gen.standard_normal((n, d))
        C = gen.standard_normal((m, d))
        for name in _backend.available():
            mod = _backend.get(name)
            rows.append({"kernel": "rbf", "shape": [n, m, d], "backend": name,
                         "seconds": bench(lambda: mod.rbf_gram_sq(X, C, 1.3), args.repeat)})
            rows.append({"kernel": "cosine", "shape": [n, m, d], "backend": name,
                         "seconds": bench(lambda: mod.cos_gram_sq(X, C), args.repeat)})

    base = {(r["kernel"], tuple(r["shape"])): r["seconds"] for r in rows if r["backend"] == "numpy"}
    print(f"{'kernel':8}{'n x m x d':>18}{'backend':>10}{'ms':>12}{'speed-up':>10}")
    for r in rows:
        key = (r["kernel"], tuple(r["shape"]))
        r["speedup_vs_numpy"] = base[key] / r["seconds"]
        shape = "x".join(map(str, r["shape"]))
        print(f"{r['kernel']:8}{shape:>18}{r['backend']:>10}{1e3 * r['seconds']:>12.3f}"
              f"{r['speedup_vs_numpy']:>10.2f}")
    if "cython" not in _backend.available():
        print("compiled backend not built; only the numpy core was timed")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
