"""Compare the compiled and numpy backends of the view-aggregation kernels.

    python3 benchmarks/bench_kernels.py [--grid 24] [--width 1024] [--batch 2] [--repeat 3]
"""

import argparse
import time

import numpy as np

from fbclip import kernels


def _time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--grid", type=int, nargs="+", default=[8, 16, 24])
    ap.add_argument("--width", type=int, default=256)
    ap.add_argument("--batch", type=int, default=2)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    names = sorted(kernels.BACKENDS)
    print(f"backends: {', '.join(names)} (active: {kernels.BACKEND})")
    print(f"{'kernel':<6} {'grid':>5} {'L':>5} {'C':>5} " + " ".join(f"{n + ' ms':>14}" for n in names) + "   speedup")
    for side in args.grid:
        L, C, B = side * side, args.width, args.batch
        tokens = rng.normal(size=(B, L, C))
        cls = rng.normal(size=(B, C))
        mask = rng.choice([0.5, 1.0], size=(B, L))
        for kname, call in (
            ("SEM", lambda m: m.sem_aggregate(tokens, cls, mask, 0.6)),
            ("SPA", lambda m: m.spa_aggregate(tokens, cls, mask, side, 5, 1e-8)),
        ):
            times = {n: _time(lambda n=n: call(kernels.BACKENDS[n]), args.repeat) for n in names}
            outs = [call(kernels.BACKENDS[n]) for n in names]
            agree = all(np.allclose(outs[0], o, atol=1e-10) for o in outs[1:])
            speed = f"{times['python'] / times['compiled']:8.1f}x" if "compiled" in times else "     n/a"
            print(f"{kname:<6} {side:>5} {L:>5} {C:>5} " + " ".join(f"{1e3 * times[n]:14.2f}" for n in names)
                  + f"  {speed}" + ("" if agree else "  MISMATCH"))


if __name__ == "__main__":
    main()
