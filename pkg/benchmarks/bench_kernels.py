"""Compare the numba and numpy kernel paths.

Usage::

    python3 benchmarks/bench_kernels.py [--n 100] [--resamples 500] [--iterations 10000]

Both paths are timed in one process by calling the backend functions directly,
so ``GFORMULA_NUMBA`` has no effect here. The numba timings exclude the first
(compiling) call. The script also reports the largest difference between the
two paths' outputs.
"""

import argparse
import time

import numpy as np

from gformula import _kernels as K


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def irls_case(n, resamples, seed):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.normal(size=(n, 3))])
    y = (rng.random(n) < 1 / (1 + np.exp(-X @ [0.2, 0.5, -0.4, 0.3]))).astype(float)
    W = rng.multinomial(n, np.full(n, 1 / n), size=resamples).astype(float)
    return X, y, W


def chain_case(n, iterations, seed):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.normal(size=(n, 3))])
    y = (rng.random(n) < 0.4).astype(float)
    d = X.shape[1]
    burn = iterations // 2
    total = iterations
    return (X, y, np.ones(n), K.FAMILY_BERNOULLI, np.full(d, K.PRIOR_NORMAL, dtype=np.int64),
            np.zeros(d), np.full(d, 3.0), np.zeros(d), np.eye(d) * 0.3, 2.38 / np.sqrt(d),
            burn, total - burn, 1, True, 0.3, 50,
            rng.standard_normal((total, d)), rng.random(total))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=100)
    ap.add_argument("--resamples", type=int, default=500)
    ap.add_argument("--iterations", type=int, default=10000)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    if not K._HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")

    X, y, W = irls_case(args.n, args.resamples, args.seed)
    irls_args = (X, y, W, 50, 1e-8, 15.0, 1e-8)
    K.irls_logistic_batch_nb(*irls_args)  # compile
    t_np, out_np = best_of(lambda: K.irls_logistic_batch_np(*irls_args), args.repeat)
    t_nb, out_nb = best_of(lambda: K.irls_logistic_batch_nb(*irls_args), args.repeat)
    diff_irls = float(np.max(np.abs(out_np[0] - out_nb[0])))

    chain_args = chain_case(args.n, args.iterations, args.seed)
    K.rwm_chain_nb(*chain_args)
    c_np, ch_np = best_of(lambda: K.rwm_chain_np(*chain_args), args.repeat)
    c_nb, ch_nb = best_of(lambda: K.rwm_chain_nb(*chain_args), args.repeat)
    diff_chain = float(np.max(np.abs(ch_np[0] - ch_nb[0])))

    print(f"{'kernel':<34}{'numpy s':>10}{'numba s':>10}{'speedup':>9}{'max |diff|':>12}")
    print(f"{f'IRLS batch ({args.resamples} fits, n={args.n})':<34}"
          f"{t_np:>10.3f}{t_nb:>10.3f}{t_np / t_nb:>9.1f}{diff_irls:>12.1e}")
    print(f"{f'RWM chain ({args.iterations} iters, n={args.n})':<34}"
          f"{c_np:>10.3f}{c_nb:>10.3f}{c_np / c_nb:>9.1f}{diff_chain:>12.1e}")


if __name__ == "__main__":
    main()
