"""Time the compiled and pure-Python metric kernels side by side.

    python benchmarks/bench_kernels.py [--repeat 3] [--quick]

Each row reports the best wall time over ``--repeat`` runs for every backend
importable here, plus the speedup of the compiled backend.  Both backends
must agree bit for bit; a mismatch is reported and the script exits 1.
"""
import argparse
import sys
import time

import numpy as np

from r2p import kernels


def best_of(fn, repeat):
    best, out = float("inf"), None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def auction(mod, cost):
    # same epsilon-scaling driver as metrics.emd_approx, bound to one backend
    cmax = float(cost.max())
    eps_final = 1e-4 * cmax
    prices = np.zeros(len(cost))
    eps = cmax / 4.0
    while True:
        assign, _ = mod.auction_phase(cost, prices, eps)
        if eps <= eps_final:
            return assign
        eps = max(eps / 5.0, eps_final)


def cases(quick):
    rng = np.random.default_rng(0)
    sizes_nn = (256, 1024) if quick else (256, 1024, 4096)
    for n in sizes_nn:
        a, b = rng.standard_normal((n, 3)), rng.standard_normal((n, 3))
        yield f"nearest_neighbors n={n}", lambda m, a=a, b=b: m.nearest_neighbors(a, b)
    for n in (64, 256) if quick else (64, 256, 1024):
        cost = kernels.pairwise_distances(rng.standard_normal((n, 3)), rng.standard_normal((n, 3)))
        yield f"hungarian n={n}", lambda m, c=cost: m.hungarian(c)
    for n in (256,) if quick else (256, 1024, 4096):
        cost = kernels.pairwise_distances(rng.standard_normal((n, 3)), rng.standard_normal((n, 3)))
        yield f"auction n={n}", lambda m, c=cost: auction(m, c)


def same(x, y):
    if isinstance(x, tuple):
        return all(same(p, q) for p, q in zip(x, y))
    return np.asarray(x).tobytes() == np.asarray(y).tobytes()


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--quick", action="store_true", help="small sizes only")
    ap.add_argument("--slow", type=float, default=30.0,
                    help="run a case once only when a single run takes longer than this many seconds")
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    names = sorted(backends, key=lambda k: k != "cython")
    print(f"default backend: {kernels.BACKEND}; available: {', '.join(names)}")
    print(f"{'case':28s}" + "".join(f"{n:>12s}" for n in names) + f"{'speedup':>10s}")
    ok = True
    for label, fn in cases(args.quick):
        times, outs = {}, {}
        for name in names:
            mod = backends[name]
            t, out = best_of(lambda: fn(mod), 1)
            if t < args.slow and args.repeat > 1:
                t2, out = best_of(lambda: fn(mod), args.repeat - 1)
                t = min(t, t2)
            times[name], outs[name] = t, out
        if len(names) == 2 and not same(outs["cython"], outs["python"]):
            ok = False
            label += " MISMATCH"
        row = f"{label:28s}" + "".join(f"{times[n]:12.4f}" for n in names)
        if len(names) == 2:
            row += f"{times['python'] / times['cython']:9.1f}x"
        print(row, flush=True)
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
