"""Compare the compiled and numpy Hamming kernels.

    python3 benchmarks/bench_hamming.py --n 200000 --bits 64 --queries 50
"""
import argparse
import time

import numpy as np

from seqhash.kernels import load_backend


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=200_000, help="database size")
    ap.add_argument("--bits", type=int, default=64)
    ap.add_argument("--queries", type=int, default=50)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    width = (args.bits + 7) // 8
    db = rng.integers(0, 256, size=(args.n, width), dtype=np.uint8)
    qs = rng.integers(0, 256, size=(args.queries, width), dtype=np.uint8)

    backends = {"python": load_backend("python")}
    try:
        backends["cython"] = load_backend("cython")
    except ImportError:
        print("cython backend not built; timing the fallback only")

    ref = backends["python"].hamming_matrix(qs, db)
    print(f"db={args.n} codes x {args.bits} bits, {args.queries} queries, best of {args.repeat}")
    print(f"{'backend':>8} {'scan ms':>10} {'matrix ms':>10} {'Mcmp/s':>10}")
    timings = {}
    for name, mod in backends.items():
        if not np.array_equal(mod.hamming_matrix(qs, db), ref):
            raise SystemExit(f"{name} disagrees with the reference kernel")
        scan = best_of(lambda: mod.hamming_scan(db, qs[0]), args.repeat)
        mat = best_of(lambda: mod.hamming_matrix(qs, db), args.repeat)
        timings[name] = (scan, mat)
        rate = args.n * args.queries / mat / 1e6
        print(f"{name:>8} {scan * 1e3:>10.3f} {mat * 1e3:>10.2f} {rate:>10.1f}")
    if "cython" in timings:
        s = timings["python"][0] / timings["cython"][0]
        m = timings["python"][1] / timings["cython"][1]
        print(f"speedup: scan x{s:.2f}, matrix x{m:.2f}")


if __name__ == "__main__":
    main()
