"""Compare the compiled and numpy CRU kernels on a training-sized packed batch.

    python3 benchmarks/bench_kernels.py [--batch 128] [--median-len 4] [--repeat 20]

Both backends get identical inputs; the script checks that they agree before
timing forward and forward+backward passes.
"""
import argparse
import time

import numpy as np

from crn import _pykernels
from crn.cru import cru_shapes

try:
    from crn import _ckernels
except ImportError:
    _ckernels = None


def make_case(rng, batch, median_len, n_a, n_o):
    lengths = np.sort(np.clip(np.round(rng.lognormal(np.log(median_len), 1.0, batch)), 1, 50).astype(int))[::-1]
    T = int(lengths[0])
    n_active = np.array([(lengths > s).sum() for s in range(T)], dtype=np.int64)
    N = int(n_active.sum())
    P = {k: rng.uniform(-0.3, 0.3, size=s) for k, s in cru_shapes(n_a, n_o).items()}
    xa = rng.normal(size=(N, n_a))
    xo = rng.normal(size=(N, n_o))
    a0 = np.zeros((batch, n_a))
    o0 = np.tanh(rng.normal(size=(batch, n_o)))
    dA = rng.normal(size=(T + 1, batch, n_a))
    dO = rng.normal(size=(T + 1, batch, n_o))
    return P, xa, xo, n_active, a0, o0, dA, dO


def timeit(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def run(mod, case, repeat):
    P, xa, xo, n_active, a0, o0, dA, dO = case

    def fwd():
        return mod.cru_forward(P, xa, xo, n_active, a0, o0)

    def both():
        c = mod.cru_forward(P, xa, xo, n_active, a0, o0)
        return mod.cru_backward(P, c, xa, xo, n_active, dA, dO)

    return timeit(fwd, repeat), timeit(both, repeat), both()


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=128)
    ap.add_argument("--median-len", type=float, default=4.0)
    ap.add_argument("--n-a", type=int, default=16)
    ap.add_argument("--n-o", type=int, default=32)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    case = make_case(np.random.default_rng(args.seed), args.batch, args.median_len, args.n_a, args.n_o)
    print(f"batch {args.batch}  steps {len(case[3])}  packed rows {int(case[3].sum())}  "
          f"n_a {args.n_a}  n_o {args.n_o}")
    backends = [("python", _pykernels)] + ([("cython", _ckernels)] if _ckernels is not None else [])
    results = {name: run(mod, case, args.repeat) for name, mod in backends}
    if _ckernels is not None:
        gp, gc = results["python"][2], results["cython"][2]
        err = max(float(np.max(np.abs(gp[0][k] - gc[0][k]))) for k in gp[0])
        err = max(err, *(float(np.max(np.abs(a - b))) for a, b in zip(gp[1:], gc[1:])))
        print(f"max abs gradient difference between backends: {err:.2e}")
    else:
        print("compiled extension not built; timing the numpy kernels only")
    print(f"{'backend':<8} {'forward ms':>11} {'fwd+bwd ms':>11}")
    for name, (tf, tb, _) in results.items():
        print(f"{name:<8} {1e3 * tf:11.3f} {1e3 * tb:11.3f}")
    if _ckernels is not None:
        (pf, pb, _), (cf, cb, _) = results["python"], results["cython"]
        print(f"speedup  {pf / cf:10.2f}x {pb / cb:10.2f}x")


if __name__ == "__main__":
    main()
