"""Gaussian process regression with analytic marginal-likelihood gradients.

Kernels expose their hyperparameters in log space; the gram-matrix gradient
is taken with respect to the log-parameters directly, which is what the
bounded gradient-ascent fit works with.
"""

from __future__ import annotations

import math

import numpy as np

from .. import exprgraph as eg

DEFAULT_BOUNDS = (1e-4, 1e4)


class CholeskyFailure(Exception):
    pass


class AllRestartsFailed(Exception):
    pass


def _sqdist(A, B, lengthscales):
    """Pairwise scaled squared distance, columns are points."""
    As = A / lengthscales[:, None]
    Bs = B / lengthscales[:, None]
    a2 = np.sum(As * As, axis=0)
    b2 = np.sum(Bs * Bs, axis=0)
    r = a2[:, None] + b2[None, :] - 2.0 * As.T @ Bs
    return np.maximum(r, 0.0)


class Kernel:
    """Base: log-parameter vector access, gram matrices, gradients."""

    def __call__(self, A, B):
        raise NotImplementedError

    def diag(self, A):
        return np.diag(self(A, A)).copy()

    def log_params(self):
        raise NotImplementedError

    def set_log_params(self, values):
        raise NotImplementedError

    def n_params(self):
        return len(self.log_params())

    def log_bounds(self):
        raise NotImplementedError

    def grad_gram(self, A):
        """List of dK/d(log theta_j) evaluated on the training gram."""
        raise NotImplementedError

    def expr(self, w_exprs, v):
        """Symbolic k(w, v) for a fixed numeric point v."""
        raise NotImplementedError


class SquaredExponential(Kernel):
    def __init__(self, variance=1.0, lengthscales=1.0, n_dim=None, bounds=None):
        ls = np.atleast_1d(np.asarray(lengthscales, dtype=float))
        if n_dim is not None and ls.size == 1:
            ls = np.full(n_dim, ls[0])
        if variance <= 0 or np.any(ls <= 0):
            raise ValueError("variance and lengthscales must be positive")
        self.variance = float(variance)
        self.lengthscales = ls
        self.bounds = bounds or DEFAULT_BOUNDS

    def __call__(self, A, B):
        r = _sqdist(np.atleast_2d(A), np.atleast_2d(B), self.lengthscales)
        return self.variance * np.exp(-0.5 * r)

    def log_params(self):
        return np.log(np.concatenate([[self.variance], self.lengthscales]))

    def set_log_params(self, values):
        values = np.asarray(values, dtype=float)
        self.variance = float(np.exp(values[0]))
        self.lengthscales = np.exp(values[1:])

    def log_bounds(self):
        k = 1 + self.lengthscales.size
        return (
            np.full(k, math.log(self.bounds[0])),
            np.full(k, math.log(self.bounds[1])),
        )

    def grad_gram(self, A):
        A = np.atleast_2d(A)
        K = self(A, A)
        grads = [K.copy()]  # d/d log variance
        for d in range(self.lengthscales.size):
            diff = A[d][:, None] - A[d][None, :]
            grads.append(K * (diff * diff) / self.lengthscales[d] ** 2)
        return grads

    def expr(self, w_exprs, v):
        r = eg.as_expr(0.0)
        for j, wj in enumerate(w_exprs):
            dj = (eg.as_expr(wj) - float(v[j])) / float(self.lengthscales[j])
            r = r + dj * dj
        return self.variance * eg.exp(-0.5 * r)


class RationalQuadratic(Kernel):
    def __init__(self, variance=1.0, lengthscales=1.0, alpha=1.0, n_dim=None, bounds=None):
        ls = np.atleast_1d(np.asarray(lengthscales, dtype=float))
        if n_dim is not None and ls.size == 1:
            ls = np.full(n_dim, ls[0])
        if variance <= 0 or np.any(ls <= 0) or alpha <= 0:
            raise ValueError("variance, lengthscales and alpha must be positive")
        self.variance = float(variance)
        self.lengthscales = ls
        self.alpha = float(alpha)
        self.bounds = bounds or DEFAULT_BOUNDS

    def _base(self, A, B):
        r = _sqdist(np.atleast_2d(A), np.atleast_2d(B), self.lengthscales)
        return r, 1.0 + r / (2.0 * self.alpha)

    def __call__(self, A, B):
        _, base = self._base(A, B)
        return self.variance * base ** (-self.alpha)

    def log_params(self):
        return np.log(
            np.concatenate([[self.variance], self.lengthscales, [self.alpha]])
        )

    def set_log_params(self, values):
        values = np.asarray(values, dtype=float)
        self.variance = float(np.exp(values[0]))
        self.lengthscales = np.exp(values[1:-1])
        self.alpha = float(np.exp(values[-1]))

    def log_bounds(self):
        k = 2 + self.lengthscales.size
        return (
            np.full(k, math.log(self.bounds[0])),
            np.full(k, math.log(self.bounds[1])),
        )

    def grad_gram(self, A):
        A = np.atleast_2d(A)
        r, base = self._base(A, A)
        K = self.variance * base ** (-self.alpha)
        grads = [K.copy()]
        for d in range(self.lengthscales.size):
            diff = A[d][:, None] - A[d][None, :]
            # dK/d log l_d = sigma^2 * base^(-alpha-1) * diff^2 / l_d^2
            grads.append(
                self.variance
                * base ** (-self.alpha - 1.0)
                * (diff * diff)
                / self.lengthscales[d] ** 2
            )
        # dK/d log alpha = K * (-alpha*log(base) + r/(2*base))
        grads.append(K * (-self.alpha * np.log(base) + r / (2.0 * base)))
        return grads

    def expr(self, w_exprs, v):
        r = eg.as_expr(0.0)
        for j, wj in enumerate(w_exprs):
            dj = (eg.as_expr(wj) - float(v[j])) / float(self.lengthscales[j])
            r = r + dj * dj
        base = 1.0 + r / (2.0 * self.alpha)
        return self.variance * base ** (-self.alpha)


class Sum(Kernel):
    def __init__(self, k1, k2):
        self.k1, self.k2 = k1, k2

    def __call__(self, A, B):
        return self.k1(A, B) + self.k2(A, B)

    def log_params(self):
        return np.concatenate([self.k1.log_params(), self.k2.log_params()])

    def set_log_params(self, values):
        n1 = self.k1.n_params()
        self.k1.set_log_params(values[:n1])
        self.k2.set_log_params(values[n1:])

    def log_bounds(self):
        lo1, hi1 = self.k1.log_bounds()
        lo2, hi2 = self.k2.log_bounds()
        return np.concatenate([lo1, lo2]), np.concatenate([hi1, hi2])

    def grad_gram(self, A):
        return self.k1.grad_gram(A) + self.k2.grad_gram(A)

    def expr(self, w_exprs, v):
        return self.k1.expr(w_exprs, v) + self.k2.expr(w_exprs, v)


class Product(Kernel):
    def __init__(self, k1, k2):
        self.k1, self.k2 = k1, k2

    def __call__(self, A, B):
        return self.k1(A, B) * self.k2(A, B)

    def log_params(self):
        return np.concatenate([self.k1.log_params(), self.k2.log_params()])

    def set_log_params(self, values):
        n1 = self.k1.n_params()
        self.k1.set_log_params(values[:n1])
        self.k2.set_log_params(values[n1:])

    def log_bounds(self):
        lo1, hi1 = self.k1.log_bounds()
        lo2, hi2 = self.k2.log_bounds()
        return np.concatenate([lo1, lo2]), np.concatenate([hi1, hi2])

    def grad_gram(self, A):
        K1 = self.k1(A, A)
        K2 = self.k2(A, A)
        return [g * K2 for g in self.k1.grad_gram(A)] + [
            K1 * g for g in self.k2.grad_gram(A)
        ]

    def expr(self, w_exprs, v):
        return self.k1.expr(w_exprs, v) * self.k2.expr(w_exprs, v)


# --- GP model ----------------------------------------------------------------


class GpModel:
    def __init__(self, kernel, V, l, noise_variance=0.0, prior_mean=0.0):
        self.kernel = kernel
        self.V = np.atleast_2d(np.asarray(V, dtype=float))
        self.l = np.asarray(l, dtype=float).ravel()
        if self.V.shape[1] != self.l.size:
            raise ValueError("training inputs and labels disagree in count")
        if noise_variance < 0:
            raise ValueError("noise variance must be nonnegative")
        self.noise_variance = float(noise_variance)
        self.prior_mean = float(prior_mean)
        self._L = None
        self._alpha = None
        self._jitter = 0.0
        self.refresh()

    @property
    def n_d(self):
        return self.l.size

    def _centered_labels(self):
        return self.l - self.prior_mean

    def refresh(self):
        """Rebuild the Cholesky cache, escalating jitter when K is borderline."""
        K = self.kernel(self.V, self.V)
        n = self.n_d
        Kn = K + self.noise_variance * np.eye(n)
        jitter = 1e-10 * np.trace(K) / n
        attempt = 0.0
        while True:
            try:
                L = np.linalg.cholesky(Kn + attempt * np.eye(n))
                break
            except np.linalg.LinAlgError:
                attempt = jitter if attempt == 0.0 else attempt * 10.0
                if attempt > 1e-4:
                    raise CholeskyFailure(
                        "kernel matrix not positive definite even with jitter"
                    )
        self._L = L
        self._jitter = attempt
        y = self._centered_labels()
        self._alpha = np.linalg.solve(L.T, np.linalg.solve(L, y))

    def solve(self, rhs):
        return np.linalg.solve(self._L.T, np.linalg.solve(self._L, rhs))


def gp_log_marginal_likelihood(gp: GpModel) -> float:
    y = gp._centered_labels()
    n = gp.n_d
    return float(
        -0.5 * y @ gp._alpha
        - np.sum(np.log(np.diag(gp._L)))
        - 0.5 * n * math.log(2.0 * math.pi)
    )


def gp_lml_gradient(gp: GpModel, include_noise=True):
    """d LML / d log-hyperparameters (kernel params, then noise if included)."""
    a = gp._alpha
    Kinv = gp.solve(np.eye(gp.n_d))
    M = np.outer(a, a) - Kinv
    grads = [0.5 * np.sum(M * dK) for dK in gp.kernel.grad_gram(gp.V)]
    if include_noise:
        grads.append(0.5 * np.trace(M) * gp.noise_variance)
    return np.array(grads)


def gp_fit(gp: GpModel, restarts=1, max_iters=200, seed=None) -> GpModel:
    """Maximize the LML by bounded gradient ascent in log space.

    The first start uses the current hyperparameters; further restarts draw
    uniformly in the log-bound box. The best run is kept. Noise variance is
    fitted alongside the kernel parameters unless it is exactly zero.
    """
    if restarts == 0:
        gp.refresh()
        return gp
    rng = np.random.default_rng(seed)
    fit_noise = gp.noise_variance > 0.0
    lo, hi = gp.kernel.log_bounds()
    if fit_noise:
        lo = np.append(lo, math.log(DEFAULT_BOUNDS[0]))
        hi = np.append(hi, math.log(DEFAULT_BOUNDS[1]))

    def get_theta():
        theta = gp.kernel.log_params()
        if fit_noise:
            theta = np.append(theta, math.log(gp.noise_variance))
        return theta

    def set_theta(theta):
        if fit_noise:
            gp.kernel.set_log_params(theta[:-1])
            gp.noise_variance = float(math.exp(theta[-1]))
        else:
            gp.kernel.set_log_params(theta)
        gp.refresh()

    starts = [np.clip(get_theta(), lo, hi)]
    for _ in range(restarts - 1):
        starts.append(rng.uniform(lo, hi))

    best_theta = None
    best_lml = -np.inf
    failures = 0
    for theta0 in starts:
        try:
            theta, lml = _ascend(
                gp, theta0, lo, hi, max_iters, set_theta, fit_noise
            )
        except CholeskyFailure:
            failures += 1
            continue
        if lml > best_lml:
            best_lml = lml
            best_theta = theta
    if best_theta is None:
        raise AllRestartsFailed(f"all {failures} restarts failed")
    set_theta(best_theta)
    return gp


def _ascend(gp, theta, lo, hi, max_iters, set_theta, fit_noise):
    set_theta(theta)
    lml = gp_log_marginal_likelihood(gp)
    step = 0.1
    for _ in range(max_iters):
        grad = gp_lml_gradient(gp, include_noise=fit_noise)
        if np.max(np.abs(grad)) < 1e-7:
            break
        improved = False
        while step > 1e-12:
            trial = np.clip(theta + step * grad, lo, hi)
            if np.max(np.abs(trial - theta)) < 1e-14:
                break
            try:
                set_theta(trial)
                trial_lml = gp_log_marginal_likelihood(gp)
            except CholeskyFailure:
                step *= 0.5
                continue
            if trial_lml > lml:
                theta, lml = trial, trial_lml
                step *= 1.5
                improved = True
                break
            step *= 0.5
        if not improved:
            break
    set_theta(theta)
    return theta, lml


def gp_predict(gp: GpModel, w, return_raw_variance=False):
    """Posterior mean and variance at a single test input."""
    w = np.asarray(w, dtype=float).reshape(gp.V.shape[0], 1)
    k_star = gp.kernel(gp.V, w).ravel()
    mean = gp.prior_mean + float(k_star @ gp._alpha)
    v = np.linalg.solve(gp._L, k_star)
    var_raw = float(gp.kernel(w, w)[0, 0] - v @ v)
    var = max(var_raw, 0.0)
    if return_raw_variance:
        return mean, var, var_raw
    return mean, var


def gp_mean_expression(gp: GpModel, feature_exprs):
    """Posterior mean as a symbolic Expression over feature Expressions."""
    if len(feature_exprs) != gp.V.shape[0]:
        raise ValueError(
            f"expected {gp.V.shape[0]} feature expressions, got {len(feature_exprs)}"
        )
    acc = eg.as_expr(gp.prior_mean)
    for i in range(gp.n_d):
        ai = float(gp._alpha[i])
        if ai != 0.0:
            acc = acc + ai * gp.kernel.expr(feature_exprs, gp.V[:, i])
    return acc


# --- text serialization ------------------------------------------------------


def _fmt(a):
    return " ".join(f"{x:.17g}" for x in np.asarray(a, dtype=float).ravel())


def _kernel_lines(k):
    if isinstance(k, SquaredExponential):
        return [f"se {k.variance:.17g} " + _fmt(k.lengthscales)]
    if isinstance(k, RationalQuadratic):
        return [
            f"rq {k.variance:.17g} {k.alpha:.17g} " + _fmt(k.lengthscales)
        ]
    if isinstance(k, Sum):
        return ["sum"] + _kernel_lines(k.k1) + _kernel_lines(k.k2)
    if isinstance(k, Product):
        return ["product"] + _kernel_lines(k.k1) + _kernel_lines(k.k2)
    raise TypeError(f"cannot serialize kernel {type(k).__name__}")


def _parse_kernel(it):
    parts = next(it).split()
    tag = parts[0]
    if tag == "se":
        return SquaredExponential(
            float(parts[1]), [float(x) for x in parts[2:]]
        )
    if tag == "rq":
        return RationalQuadratic(
            float(parts[1]), [float(x) for x in parts[3:]], float(parts[2])
        )
    if tag == "sum":
        return Sum(_parse_kernel(it), _parse_kernel(it))
    if tag == "product":
        return Product(_parse_kernel(it), _parse_kernel(it))
    raise ValueError(f"unknown kernel tag {tag!r}")


def save_gp(gp: GpModel, path):
    lines = ["gp 1"]
    lines += _kernel_lines(gp.kernel)
    lines.append(f"noise {gp.noise_variance:.17g}")
    lines.append(f"prior_mean {gp.prior_mean:.17g}")
    lines.append(f"dims {gp.V.shape[0]} {gp.V.shape[1]}")
    lines.append("V " + _fmt(gp.V))
    lines.append("l " + _fmt(gp.l))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_gp(path) -> GpModel:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    it = iter(lines)
    if not next(it).startswith("gp "):
        raise ValueError(f"not a gp file: {path}")
    kernel = _parse_kernel(it)
    noise = float(next(it).split()[1])
    prior = float(next(it).split()[1])
    n_v, n_d = (int(x) for x in next(it).split()[1:])
    V = np.array([float(x) for x in next(it).split()[1:]]).reshape(n_v, n_d)
    l = np.array([float(x) for x in next(it).split()[1:]])
    return GpModel(kernel, V, l, noise, prior)
