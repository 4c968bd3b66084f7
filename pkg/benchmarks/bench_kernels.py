"""Compare the compiled and pure-Python gradient kernels.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Prints the best time per call for each kernel, backend and problem size.
"""
import argparse
import timeit

import numpy as np

from scalweight import kernels


def cases(rng):
    for T, P in ((2, 10_000), (6, 10_000), (6, 100_000), (12, 50_000)):
        G = rng.normal(size=(T, P))
        order = np.stack([rng.permutation([j for j in range(T) if j != i]) for i in range(T)])
        yield T, P, G, order, rng.random(P)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    impls = kernels.backends()
    print(f"active backend: {kernels.BACKEND}")
    print(f"{'kernel':<16}{'T':>4}{'P':>9}" + "".join(f"{name + ' ms':>14}" for name in impls) + f"{'speedup':>10}")
    for T, P, G, order, u in cases(np.random.default_rng(0)):
        calls = {
            "gram": lambda impl: kernels.gram(G, impl),
            "pcgrad_project": lambda impl: kernels.pcgrad_project(G, order, impl),
            "graddrop": lambda impl: kernels.graddrop(G, u, impl),
        }
        for name, fn in calls.items():
            best = {k: min(timeit.repeat(lambda: fn(impl), number=1, repeat=args.repeat)) * 1e3 for k, impl in impls.items()}
            speedup = best["python"] / best["cython"] if "cython" in best else float("nan")
            print(f"{name:<16}{T:>4}{P:>9}" + "".join(f"{v:>14.3f}" for v in best.values()) + f"{speedup:>10.2f}")


if __name__ == "__main__":
    main()
