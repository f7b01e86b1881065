"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--gallery 20000] [--dim 128] [--repeat 5]

Prints one line per kernel with the best-of-N time for each backend and
the speedup, after checking both backends agree on the inputs used.
"""
import argparse
import timeit

import numpy as np

from vcfes import _kernels_py as pure

try:
    from vcfes import _kernels as compiled
except ImportError:
    compiled = None


def cases(args):
    rng = np.random.default_rng(args.seed)
    q = rng.normal(size=(4, args.dim))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    g = rng.normal(size=(args.gallery, 4, args.dim)).astype(np.float32)
    g /= np.linalg.norm(g, axis=2, keepdims=True)
    dists = rng.uniform(0, 2, size=(args.gallery, 4))
    weights = rng.dirichlet(np.ones(3), size=args.gallery)
    batch = rng.normal(size=(args.batch, args.dim))
    batch /= np.linalg.norm(batch, axis=1, keepdims=True)
    labels = np.repeat(np.arange(args.batch // 4), 4)
    pair = pure.pairwise_distances(batch)
    return {
        "space_distances": lambda k: k.space_distances(q, g),
        "fuse": lambda k: k.fuse(dists, weights),
        "pairwise_distances": lambda k: k.pairwise_distances(batch),
        "batch_hard": lambda k: k.batch_hard(pair, labels),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--gallery", type=int, default=20000)
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--batch", type=int, default=256, help="triplet batch size (multiple of 4)")
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    if compiled is None:
        print("compiled extension not built; timing the numpy fallback only")
    print(f"gallery={args.gallery} dim={args.dim} batch={args.batch} best of {args.repeat}")
    print(f"{'kernel':<20}{'numpy (ms)':>12}{'cython (ms)':>13}{'speedup':>10}")
    for name, fn in cases(args).items():
        t_py = min(timeit.repeat(lambda: fn(pure), number=1, repeat=args.repeat)) * 1e3
        if compiled is None:
            print(f"{name:<20}{t_py:>12.3f}{'-':>13}{'-':>10}")
            continue
        a, b = fn(pure), fn(compiled)
        for x, y in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
            if not np.allclose(x, y, rtol=0, atol=1e-12):
                raise SystemExit(f"{name}: backends disagree")
        t_cy = min(timeit.repeat(lambda: fn(compiled), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<20}{t_py:>12.3f}{t_cy:>13.3f}{t_py / t_cy:>9.2f}x")


if __name__ == "__main__":
    main()
