"""Benchmark the accelerated solver kernels against their plain-numpy source.

The package compiles its two hot loops (the operator-splitting QP chunk and
the fast-gradient/augmented-Lagrangian loop) with numba when available; the
same functions run as ordinary Python otherwise.  This script times both
paths on problem sizes representative of the shipped controllers and prints
a small table.

Run from the repository root:

    python3 benchmarks/kernel_bench.py
"""
import time

import numpy as np

from mlmpc import _accel
from mlmpc import embedded as emb


def _time(fn, args, repeats=5):
    fn(*args)  # warm-up (triggers JIT compilation on the numba path)
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def _admm_args(rng, n, m, iters):
    A = rng.normal(size=(m, n))
    q = rng.normal(size=n)
    rho = np.full(m, 0.1)
    sigma = 1e-6
    K = np.zeros((n + m, n + m))
    P = np.eye(n) * 2.0
    K[:n, :n] = P + sigma * np.eye(n)
    K[:n, n:] = A.T
    K[n:, :n] = A
    K[n:, n:] = -np.diag(1.0 / rho)
    Kinv = np.linalg.inv(K)
    lo = np.full(m, -1.0)
    hi = np.full(m, 1.0)
    return (Kinv, q, A, lo, hi, rho, sigma, 1.6,
            np.zeros(n), np.zeros(m), np.zeros(m), iters)


def _fgm_args(inner, outer):
    spec = emb.lateral_lti_spec()
    qp = emb.condense(spec)
    settings = emb.AlmFgmSettings.for_qp(qp, inner=inner, outer=outer)
    x = np.array([0.1, 0.05, 0.0])
    n, m = qp.H.shape[0], qp.E.shape[0]
    return (qp.H, qp.gradient(x), qp.E, *qp.bounds(x), qp.u_lo, qp.u_hi,
            np.zeros(m), np.zeros(n), np.zeros(n),
            settings.inv_l, settings.beta, settings.mu, inner, outer)


def main():
    rng = np.random.default_rng(7)
    cases = [
        ("admm_chunk n=150 m=250 iters=200", _accel.admm_chunk,
         _accel._admm_chunk_impl, _admm_args(rng, 150, 250, 200)),
        ("fgm_alm    n=20  m=60  10x5 sweeps x200", _accel.fgm_alm,
         _accel._fgm_alm_impl, _fgm_args(10, 5)),
    ]
    print(f"numba path active: {_accel.USE_NUMBA}")
    print(f"{'kernel':<42}{'accel':>10}{'numpy':>10}{'speedup':>9}")
    for name, fast, plain, args in cases:
        if "x200" in name:
            t_fast = _time(lambda *a: [fast(*a) for _ in range(200)], args)
            t_plain = _time(lambda *a: [plain(*a) for _ in range(200)], args)
        else:
            t_fast = _time(fast, args)
            t_plain = _time(plain, args)
        print(f"{name:<42}{t_fast * 1e3:>8.2f}ms{t_plain * 1e3:>8.2f}ms"
              f"{t_plain / t_fast:>8.1f}x")


if __name__ == "__main__":
    main()
