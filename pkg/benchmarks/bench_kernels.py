"""Compare the compiled particle-filter kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--particles 1000] [--repeat 200]

Also checks that both implementations agree before timing them.
"""
import argparse
import sys
import timeit

import numpy as np

from isacslam import _kernels_py as pure

try:
    from isacslam import _kernels as compiled
except ImportError:
    compiled = None


def make_inputs(n, seed=0):
    rng = np.random.default_rng(seed)
    pa = np.array([0.0, 0.0])
    particles = rng.normal([1.0, 2.0], 0.1, size=(n, 2))
    means = rng.normal([10.0, 0.0], 0.2, size=(n, 2))
    covs = np.tile(np.diag([0.05, 0.05]), (n, 1, 1))
    anchors = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    z = np.array([[1.1, 1.1], [2.9, 0.2], [-1.4, 1.3]])
    var = np.full((3, 2), 0.0016)
    los = np.array([True, False, False])
    w = rng.random(n)
    return dict(pa=pa, particles=particles, means=means, covs=covs, anchors=anchors,
                z=z, var=var, los=los, w=w / w.sum())


def calls(mod, d):
    return {
        "bearing_loglik": lambda: mod.bearing_loglik(d["particles"], d["anchors"], d["pa"], d["z"],
                                                     d["var"], d["los"]),
        "systematic_resample": lambda: mod.systematic_resample(d["w"], 0.37),
        "feature_update": lambda: mod.feature_update(d["particles"], d["means"].copy(), d["covs"].copy(),
                                                     d["pa"], d["z"][1], 0.0016),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--particles", type=int, default=1000)
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args(argv)
    if compiled is None:
        print("compiled extension not built; only the numpy fallback is available")
        return 1
    d = make_inputs(args.particles)
    fast, slow = calls(compiled, d), calls(pure, d)
    print(f"{args.particles} particles, {args.repeat} calls each")
    print(f"{'kernel':22s} {'numpy us':>10s} {'compiled us':>12s} {'speedup':>8s}")
    for name in fast:
        a, b = np.asarray(fast[name]()), np.asarray(slow[name]())
        if not np.allclose(a, b, rtol=1e-9, atol=1e-12):
            print(f"{name}: implementations disagree", file=sys.stderr)
            return 1
        t_slow = min(timeit.repeat(slow[name], number=args.repeat, repeat=3)) / args.repeat
        t_fast = min(timeit.repeat(fast[name], number=args.repeat, repeat=3)) / args.repeat
        print(f"{name:22s} {t_slow * 1e6:10.1f} {t_fast * 1e6:12.1f} {t_slow / t_fast:7.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
