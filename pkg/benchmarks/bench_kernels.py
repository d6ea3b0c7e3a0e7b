"""Time one SGD epoch with the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 50]
"""

import argparse
import timeit

import numpy as np

from fedsim import kernels


def cases():
    # (name, n_examples, n_features, hidden)
    yield "logreg n=100 d=16", 100, 16, 0
    yield "logreg n=1000 d=16", 1000, 16, 0
    yield "logreg n=184 d=128", 184, 128, 0
    yield "mlp n=100 d=16 h=32", 100, 16, 32
    yield "mlp n=1000 d=32 h=64", 1000, 32, 64


def bench(backend, n, d, h, repeat, batch=16, lr=0.05):
    rng = np.random.default_rng(0)
    X = rng.normal(size=(n, d))
    y = (rng.random(n) < 0.3).astype(np.float64)
    order = rng.permutation(n).astype(np.intp)
    if h == 0:
        w = np.zeros(d + 1)
        fn = lambda: backend.logreg_sgd_epoch(w, X, y, order, batch, lr)
    else:
        w = rng.normal(0, 0.1, h * d + 2 * h + 1)
        fn = lambda: backend.mlp_sgd_epoch(w, X, y, order, batch, lr, h, kernels.ACT_TANH)
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args()
    available = kernels.backends()
    if "cython" not in available:
        print("compiled kernels not built; only the fallback is timed")
    print(f"{'case':<24}" + "".join(f"{b:>14}" for b in available) + f"{'speedup':>10}")
    for name, n, d, h in cases():
        times = {b: bench(m, n, d, h, args.repeat) for b, m in available.items()}
        ratio = times["python"] / times["cython"] if "cython" in times else float("nan")
        cells = "".join(f"{times[b] * 1e6:>11.1f} us" for b in available)
        print(f"{name:<24}{cells}{ratio:>9.1f}x")


if __name__ == "__main__":
    main()
