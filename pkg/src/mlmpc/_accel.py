"""Kernel dispatch: numba-compiled hot loops with a pure-numpy fallback.

Set ``MLMPC_NO_NUMBA=1`` to force the numpy path (useful for debugging and
for the benchmark in ``benchmarks/``). The kernel functions are written in a
numba-compatible numpy subset so the same source serves both paths.
"""

from __future__ import annotations

import os

import numpy as np


def _numba_enabled() -> bool:
    flag = os.environ.get("MLMPC_NO_NUMBA", "").strip().lower()
    if flag in ("1", "true", "yes"):
        return False
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


USE_NUMBA = _numba_enabled()


def maybe_jit(fn):
    if USE_NUMBA:
        from numba import njit

        return njit(cache=True)(fn)
    return fn


def _admm_chunk_impl(Kinv, q, A, lo, hi, rho, sigma, alpha, x, z, y, iters):
    """Run `iters` operator-splitting iterations with a fixed penalty vector.

    Returns the infinity norms of the primal and dual residuals at exit.
    Arrays x, z, y are updated in place.
    """
    n = q.shape[0]
    m = lo.shape[0]
    rhs = np.empty(n + m)
    for _ in range(iters):
        for i in range(n):
            rhs[i] = sigma * x[i] - q[i]
        for j in range(m):
            rhs[n + j] = z[j] - y[j] / rho[j]
        sol = Kinv @ rhs
        for j in range(m):
            ztil = z[j] + (sol[n + j] - y[j]) / rho[j]
            zr = alpha * ztil + (1.0 - alpha) * z[j]
            znew = zr + y[j] / rho[j]
            if znew < lo[j]:
                znew = lo[j]
            elif znew > hi[j]:
                znew = hi[j]
            y[j] = y[j] + rho[j] * (zr - znew)
            z[j] = znew
        for i in range(n):
            x[i] = alpha * sol[i] + (1.0 - alpha) * x[i]
    ax = A @ x
    pri = 0.0
    for j in range(m):
        r = abs(ax[j] - z[j])
        if r > pri:
            pri = r
    return pri


def _fgm_alm_impl(H, grad_lin, E, zlo, zhi, ulo, uhi, lam, u, u_prev,
                  inv_l, beta, mu, inner, outer):
    """Augmented-Lagrangian outer loop with Nesterov fast-gradient inner loop.

    Only multiply/add at iteration level (inv_l and beta precomputed).
    Returns the final constraint residual infinity norm per outer iteration.
    """
    n = u.shape[0]
    m = zlo.shape[0]
    res_hist = np.zeros(outer)
    for k in range(outer):
        for _ in range(inner):
            # extrapolated point
            v = np.empty(n)
            for i in range(n):
                v[i] = u[i] + beta * (u[i] - u_prev[i])
            ev = E @ v
            s = np.empty(m)
            for j in range(m):
                sj = ev[j]
                if sj < zlo[j]:
                    sj = zlo[j]
                elif sj > zhi[j]:
                    sj = zhi[j]
                s[j] = sj
            # gradient of the augmented Lagrangian at v
            w = np.empty(m)
            for j in range(m):
                w[j] = lam[j] + mu * (ev[j] - s[j])
            grad = H @ v + grad_lin + E.T @ w
            for i in range(n):
                u_prev[i] = u[i]
                ui = v[i] - inv_l * grad[i]
                if ui < ulo[i]:
                    ui = ulo[i]
                elif ui > uhi[i]:
                    ui = uhi[i]
                u[i] = ui
        eu = E @ u
        res = 0.0
        for j in range(m):
            sj = eu[j]
            if sj < zlo[j]:
                sj = zlo[j]
            elif sj > zhi[j]:
                sj = zhi[j]
            d = eu[j] - sj
            lam[j] = lam[j] + mu * d
            if abs(d) > res:
                res = abs(d)
        res_hist[k] = res
    return res_hist


admm_chunk = maybe_jit(_admm_chunk_impl)
fgm_alm = maybe_jit(_fgm_alm_impl)
