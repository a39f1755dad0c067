"""State and parameter estimation.

Moving-horizon estimation solves a least-squares problem over a shooting
window (arrival cost + measurement and process-noise penalties); the Kalman
family covers the linear filter, the extended variant using symbolic
Jacobians, and the unscented variant with Wan-van der Merwe sigma points.
A bootstrap particle filter with systematic resampling rounds things off.
All filter steps are pure ``state -> state`` transitions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import exprgraph as eg
from . import model as md
from . import nlp
from .exprgraph import Var, Variable


class EstimationError(Exception):
    pass


class SingularInnovation(EstimationError):
    """The innovation covariance cannot be inverted."""


class CholeskyFailure(EstimationError):
    pass


class SolverFailure(EstimationError):
    pass


# ---------------------------------------------------------------------------
# covariance hygiene


def _symmetrize(P):
    return 0.5 * (P + P.T)


def _check_covariance(P, what="covariance"):
    P = _symmetrize(np.asarray(P, dtype=float))
    w = np.linalg.eigvalsh(P)
    if w.min(initial=0.0) < -1e-10:
        raise EstimationError(f"{what} has eigenvalue {w.min():.3e} < -1e-10")
    return P


def _solve_innovation(S, rhs):
    S = np.atleast_2d(np.asarray(S, dtype=float))
    try:
        cond = np.linalg.cond(S)
    except np.linalg.LinAlgError:  # pragma: no cover - cond rarely raises
        raise SingularInnovation("innovation covariance is not finite") from None
    if not np.isfinite(cond) or cond > 1e14:
        raise SingularInnovation(
            f"innovation covariance is singular (cond {cond:.2e})"
        )
    return np.linalg.solve(S, rhs)


# ---------------------------------------------------------------------------
# Kalman filters


@dataclass
class FilterState:
    """Estimate, covariance, and the noise model carried between steps."""

    x: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).ravel()
        n = self.x.size
        self.P = _check_covariance(np.asarray(self.P, dtype=float).reshape(n, n), "P")
        self.Q = _check_covariance(np.asarray(self.Q, dtype=float).reshape(n, n), "Q")
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        self.R = _check_covariance(R, "R")


def _kalman_update(x_pred, P_pred, y, y_pred, C, R):
    S = C @ P_pred @ C.T + R
    K = _solve_innovation(S, C @ P_pred.T).T
    x = x_pred + K @ (np.asarray(y, dtype=float).ravel() - y_pred)
    P = P_pred - K @ S @ K.T
    return x, _check_covariance(P, "P")


def kf_step(state: FilterState, A, B, C, u, y) -> FilterState:
    """One predict/update cycle of the linear Kalman filter."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    u = np.asarray(u, dtype=float).ravel()

    x_pred = A @ state.x + B @ u
    P_pred = _symmetrize(A @ state.P @ A.T + state.Q)
    x, P = _kalman_update(x_pred, P_pred, y, C @ x_pred, C, state.R)
    return FilterState(x=x, P=P, Q=state.Q, R=state.R)


def _ekf_jacobians(model):
    """Compiled d f/d x and d h/d x in the model's packed argument order."""
    cache = getattr(model, "_ekf_jac", None)
    if cache is None:
        order = model._var_order()
        ja = eg.jacobian(model.f, model.states)
        jc = eg.jacobian(model.h, model.states)
        cache = (
            eg.compile_function([e for row in ja for e in row], order),
            eg.compile_function([e for row in jc for e in row], order),
        )
        model._ekf_jac = cache
    return cache


def ekf_step(state: FilterState, model, u, y, p=(), t=0.0) -> FilterState:
    """Extended Kalman filter step; Jacobians come from the expression graph."""
    if model.time_domain != "discrete":
        raise EstimationError("ekf_step needs a discrete model; discretize first")
    if model.n_z:
        raise EstimationError("ekf_step does not support algebraic states")
    a_fun, c_fun = _ekf_jacobians(model)
    n = model.n_x
    u = np.asarray(u, dtype=float).ravel()

    packed = model._pack(state.x, (), u, p, t)
    A = np.array(a_fun(packed)).reshape(n, n)
    x_pred = model.step(state.x, u, p, t)[0]
    P_pred = _symmetrize(A @ state.P @ A.T + state.Q)

    packed = model._pack(x_pred, (), u, p, t)
    C = np.array(c_fun(packed)).reshape(model.n_y, n)
    y_pred = model.measure(x_pred, u, p, t)
    x, P = _kalman_update(x_pred, P_pred, y, y_pred, C, state.R)
    return FilterState(x=x, P=P, Q=state.Q, R=state.R)


@dataclass
class UkfParams:
    alpha: float = 1e-3
    beta: float = 2.0
    kappa: float = 0.0

    def weights(self, n):
        if not 0.0 < self.alpha <= 1.0:
            raise EstimationError("alpha must be in (0, 1]")
        lam = self.alpha**2 * (n + self.kappa) - n
        if n + lam <= 0:
            raise EstimationError("alpha/kappa give n + lambda <= 0")
        w_mean = np.full(2 * n + 1, 0.5 / (n + lam))
        w_cov = w_mean.copy()
        w_mean[0] = lam / (n + lam)
        w_cov[0] = lam / (n + lam) + (1 - self.alpha**2 + self.beta)
        return lam, w_mean, w_cov


def _sigma_points(x, P, lam):
    n = x.size
    scaled = (n + lam) * P
    jitter = 0.0
    for _ in range(8):
        try:
            L = np.linalg.cholesky(scaled + jitter * np.eye(n))
            break
        except np.linalg.LinAlgError:
            jitter = max(jitter * 10.0, 1e-12)
    else:
        raise CholeskyFailure("sigma-point covariance is not positive definite")
    pts = np.empty((2 * n + 1, n))
    pts[0] = x
    for i in range(n):
        pts[1 + i] = x + L[:, i]
        pts[1 + n + i] = x - L[:, i]
    return pts


def ukf_step(state: FilterState, model, params: UkfParams, u, y, p=(), t=0.0) -> FilterState:
    """Unscented Kalman filter step (additive-noise form)."""
    if model.time_domain != "discrete":
        raise EstimationError("ukf_step needs a discrete model; discretize first")
    if model.n_z:
        raise EstimationError("ukf_step does not support algebraic states")
    n = model.n_x
    u = np.asarray(u, dtype=float).ravel()
    lam, w_mean, w_cov = params.weights(n)

    pts = _sigma_points(state.x, state.P, lam)
    prop = np.array([model.step(pt, u, p, t)[0] for pt in pts])
    x_pred = w_mean @ prop
    dx = prop - x_pred
    P_pred = _symmetrize((dx.T * w_cov) @ dx + state.Q)

    # redraw sigma points so the measurement transform sees the process noise
    pts = _sigma_points(x_pred, P_pred, lam)
    dx = pts - x_pred
    ys = np.array([model.measure(pt, u, p, t) for pt in pts])
    y_pred = w_mean @ ys
    dy = ys - y_pred
    S = (dy.T * w_cov) @ dy + state.R
    P_xy = (dx.T * w_cov) @ dy

    K = _solve_innovation(S, P_xy.T).T
    x = x_pred + K @ (np.asarray(y, dtype=float).ravel() - y_pred)
    P = _check_covariance(P_pred - K @ S @ K.T, "P")
    return FilterState(x=x, P=P, Q=state.Q, R=state.R)


# ---------------------------------------------------------------------------
# particle filter


@dataclass
class ParticleSet:
    """Weighted particle cloud; columns of ``particles`` are particles."""

    particles: np.ndarray
    weights: np.ndarray
    resampled: bool = False
    degenerate: bool = False

    def __post_init__(self):
        self.particles = np.atleast_2d(np.asarray(self.particles, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float).ravel()
        if self.particles.shape[1] != self.weights.size:
            raise EstimationError("one weight per particle required")
        if self.particles.shape[1] < 2:
            raise EstimationError("need at least 2 particles")
        if np.any(self.weights < 0):
            raise EstimationError("weights must be nonnegative")
        total = self.weights.sum()
        if total > 0:
            self.weights = self.weights / total


def _systematic_resample(particles, weights, rng):
    n = weights.size
    positions = (rng.random() + np.arange(n)) / n
    idx = np.searchsorted(np.cumsum(weights), positions)
    idx = np.minimum(idx, n - 1)
    return particles[:, idx]


def pf_step(
    pset: ParticleSet,
    model,
    u,
    y,
    process_std,
    meas_std,
    seed=None,
    rng=None,
    p=(),
    t=0.0,
):
    """Bootstrap particle filter step.

    Propagates every particle with sampled process noise, weights by the
    Gaussian measurement likelihood, and resamples systematically once the
    effective sample size drops below half the particle count. Pass either a
    ``numpy.random.Generator`` or a seed (PCG64) for reproducible runs.

    Returns ``(new_set, estimate)`` with the weighted mean as point estimate.
    """
    if model.time_domain != "discrete":
        raise EstimationError("pf_step needs a discrete model; discretize first")
    if rng is None:
        rng = np.random.Generator(np.random.PCG64(seed))
    u = np.asarray(u, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    process_std = np.broadcast_to(
        np.asarray(process_std, dtype=float).ravel(), (model.n_x,)
    )
    meas_std = np.broadcast_to(np.asarray(meas_std, dtype=float).ravel(), (model.n_y,))

    n_part = pset.particles.shape[1]
    prop = np.empty_like(pset.particles)
    for i in range(n_part):
        prop[:, i] = model.step(pset.particles[:, i], u, p, t)[0]
    noisy = process_std > 0
    if np.any(noisy):
        prop[noisy, :] += rng.normal(
            size=(int(noisy.sum()), n_part)
        ) * process_std[noisy, None]

    # relative likelihood of each propagated particle
    log_lik = np.zeros(n_part)
    for j in range(model.n_y):
        pred = np.array(
            [model.measure(prop[:, i], u, p, t + model.dt)[j] for i in range(n_part)]
        )
        if meas_std[j] > 0:
            log_lik += -0.5 * ((y[j] - pred) / meas_std[j]) ** 2
        else:
            log_lik += np.where(np.isclose(pred, y[j], atol=1e-12), 0.0, -np.inf)

    degenerate = not np.any(np.isfinite(log_lik))
    if degenerate:
        q = pset.weights.copy()  # uniform reset keeps the prior weighting
        if q.sum() == 0:
            q = np.full(n_part, 1.0 / n_part)
    else:
        shifted = log_lik - np.max(log_lik[np.isfinite(log_lik)])
        q = pset.weights * np.exp(np.where(np.isfinite(shifted), shifted, -np.inf))
        if q.sum() == 0.0:
            degenerate = True
            q = np.full(n_part, 1.0 / n_part)
    q = q / q.sum()

    estimate = prop @ q
    ess = 1.0 / np.sum(q**2)
    resampled = ess < n_part / 2.0
    if resampled:
        prop = _systematic_resample(prop, q, rng)
        q = np.full(n_part, 1.0 / n_part)

    out = ParticleSet(
        particles=prop, weights=q, resampled=resampled, degenerate=degenerate
    )
    return out, estimate


# ---------------------------------------------------------------------------
# moving-horizon estimation


def _expand_weight(w, n, name):
    w = np.broadcast_to(np.asarray(w, dtype=float).ravel(), (n,)).copy()
    if np.any(w < 0):
        raise EstimationError(f"{name} weights must be >= 0")
    return w


@dataclass
class MheConfig:
    window: int = 10
    R: float | np.ndarray = 10.0  # per-output measurement weight
    W: float | np.ndarray = 10.0  # per-state process-noise weight
    P_arrival: float | np.ndarray = 10.0  # per-(state, parameter) arrival weight
    x_guess: np.ndarray | None = None
    p_guess: np.ndarray | None = None
    estimate_parameters: bool = False
    rk_method: str = "rk4"
    x_bounds: tuple | None = None
    p_bounds: tuple | None = None
    # extra inequality constraints applied at every window node
    constraints: list = field(default_factory=list)
    sqp_settings: nlp.SqpSettings = field(default_factory=nlp.SqpSettings)

    def add_constraint(self, expr, lo=-np.inf, hi=np.inf):
        self.constraints.append((eg.as_expr(expr), float(lo), float(hi)))


class Mhe:
    """Moving-horizon estimator over a multiple-shooting window.

    Decision variables are the window states, one additive process-noise
    vector per interval, and (optionally) the model parameters, held constant
    across the window. Measurement noise is eliminated by substituting
    v = y_measured - h(x). The window grows until ``config.window`` intervals
    of data have accumulated, then slides; the arrival-cost anchor is the
    node-1 state of the previous solution.
    """

    def __init__(self, model, config: MheConfig | None = None, p=()):
        self.config = config or MheConfig()
        cfg = self.config
        if cfg.window < 1:
            raise EstimationError("window must be >= 1")
        if model.time_domain != "discrete":
            if model.q:
                raise EstimationError("MHE supports explicit algebraics only")
            model = md.discretize(model, cfg.rk_method)
        if model.n_z:
            raise EstimationError("MHE does not support residual algebraic states")
        self.model = model
        self.p_fixed = np.asarray(p, dtype=float).ravel()
        if not cfg.estimate_parameters and self.p_fixed.size != model.n_p:
            raise EstimationError(
                f"model has {model.n_p} parameters; pass values via p="
            )

        self.n_p_est = model.n_p if cfg.estimate_parameters else 0
        self.w_R = _expand_weight(cfg.R, model.n_y, "R")
        self.w_W = _expand_weight(cfg.W, model.n_x, "W")
        self.w_P = _expand_weight(cfg.P_arrival, model.n_x + self.n_p_est, "P")
        if not np.any(self.w_R > 0):
            raise EstimationError("at least one measurement weight must be > 0")

        x0 = cfg.x_guess if cfg.x_guess is not None else model.x0
        self.x_prior = (
            np.zeros(model.n_x) if x0 is None else np.asarray(x0, dtype=float).ravel()
        )
        self.p_prior = (
            np.asarray(
                cfg.p_guess if cfg.p_guess is not None else np.zeros(self.n_p_est),
                dtype=float,
            ).ravel()
            if self.n_p_est
            else np.zeros(0)
        )
        self.p_hat = self.p_prior.copy()
        self.x_hat = self.x_prior.copy()
        self.status = "idle"
        self.last_result = None

        self._y_buf = []
        self._u_buf = []
        self._t0 = 0.0
        self._problems = {}
        self._prev_solution = None

    # -- window problem ----------------------------------------------------

    def _problem(self, m):
        """NLP over ``m`` intervals (m+1 measured nodes); cached per size."""
        if m in self._problems:
            return self._problems[m]
        mod = self.model
        n_x, n_u, n_y = mod.n_x, mod.n_u, mod.n_y
        cfg = self.config

        tr_vars, lb, ub = [], [], []
        x_lo, x_hi = nlp._expand_bounds(cfg.x_bounds, n_x)
        nodes = []
        for i in range(m + 1):
            node = []
            for j, sv in enumerate(mod.states):
                v = Variable(f"{sv.name}@{i}", "state", i * n_x + j)
                tr_vars.append(v)
                lb.append(x_lo[j])
                ub.append(x_hi[j])
                node.append(v)
            nodes.append(node)
        noises = []
        for i in range(m):
            nv = []
            for j, sv in enumerate(mod.states):
                v = Variable(f"w_{sv.name}@{i}", "state", -1)
                tr_vars.append(v)
                lb.append(-np.inf)
                ub.append(np.inf)
                nv.append(v)
            noises.append(nv)
        p_vars = []
        if self.n_p_est:
            p_lo, p_hi = nlp._expand_bounds(cfg.p_bounds, self.n_p_est)
            for j, pv in enumerate(mod.parameters):
                v = Variable(f"{pv.name}@est", "parameter", j)
                tr_vars.append(v)
                lb.append(p_lo[j])
                ub.append(p_hi[j])
                p_vars.append(v)

        y_data = [
            [Variable(f"y{j}@{i}", "parameter", -1) for j in range(n_y)]
            for i in range(m + 1)
        ]
        u_data = [
            [Variable(f"u{j}@{i}", "parameter", -1) for j in range(n_u)]
            for i in range(m)
        ]
        xp_data = [Variable(f"{sv.name}@prior", "parameter", -1) for sv in mod.states]
        pp_data = [
            Variable(f"{pv.name}@prior", "parameter", -1)
            for pv in (mod.parameters if self.n_p_est else [])
        ]
        t0_data = Variable("t0@data", "parameter", -1)
        data_vars = (
            [v for row in y_data for v in row]
            + [v for row in u_data for v in row]
            + xp_data
            + pp_data
            + [t0_data]
        )

        def node_subs(i):
            subs = {}
            for sv, v in zip(mod.states, nodes[i]):
                subs[sv] = Var(v)
            ui = u_data[min(i, m - 1)] if m else []
            for uv, v in zip(mod.inputs, ui):
                subs[uv] = Var(v)
            if self.n_p_est:
                for pv, v in zip(mod.parameters, p_vars):
                    subs[pv] = Var(v)
            else:
                for pv, val in zip(mod.parameters, self.p_fixed):
                    subs[pv] = eg.as_expr(float(val))
            subs[mod.time_variable] = Var(t0_data) + i * mod.dt
            return subs

        residuals = []
        for j in range(n_x):
            residuals.append(
                (self.w_P[j], Var(nodes[0][j]) - Var(xp_data[j]))
            )
        for j in range(self.n_p_est):
            residuals.append(
                (self.w_P[n_x + j], Var(p_vars[j]) - Var(pp_data[j]))
            )
        for i in range(m + 1):
            subs = node_subs(i)
            for j, h in enumerate(mod.h):
                if self.w_R[j] > 0:
                    residuals.append(
                        (self.w_R[j], Var(y_data[i][j]) - eg.substitute(h, subs))
                    )
        for i in range(m):
            for j in range(n_x):
                if self.w_W[j] > 0:
                    residuals.append((self.w_W[j], Var(noises[i][j])))

        equalities = []
        for i in range(m):
            subs = node_subs(i)
            for j, f in enumerate(mod.f):
                equalities.append(
                    Var(nodes[i + 1][j])
                    - eg.substitute(f, subs)
                    - Var(noises[i][j])
                )

        inequalities = []
        for i in range(m + 1):
            subs = node_subs(i)
            for expr, lo, hi in cfg.constraints:
                inequalities.append((eg.substitute(expr, subs), lo, hi))

        objective = eg.ZERO
        for w, r in residuals:
            objective = objective + w * r * r

        prob = nlp.NlpProblem(
            variables=tr_vars,
            objective=objective,
            eq_constraints=equalities,
            ineq_constraints=inequalities,
            lb=np.array(lb),
            ub=np.array(ub),
            residuals=residuals,
            data_vars=data_vars,
        )
        layout = {"m": m, "n_x": n_x, "n_w": m * n_x, "p_off": (m + 1) * n_x + m * n_x}
        self._problems[m] = (prob, layout)
        return prob, layout

    # -- stepping ----------------------------------------------------------

    def add_measurement(self, y, u=None, t=None):
        """Record a measured output sample and the input held since the
        previous sample (ignored for the very first sample)."""
        y = np.asarray(y, dtype=float).ravel()
        if y.size != self.model.n_y:
            raise EstimationError(f"expected {self.model.n_y} outputs, got {y.size}")
        if self._y_buf:
            u = np.zeros(self.model.n_u) if u is None else np.asarray(u, float).ravel()
            if u.size != self.model.n_u:
                raise EstimationError(
                    f"expected {self.model.n_u} inputs, got {u.size}"
                )
            self._u_buf.append(u)
        self._y_buf.append(y)
        if len(self._y_buf) > self.config.window + 1:
            self._y_buf.pop(0)
            self._u_buf.pop(0)
            self._t0 += self.model.dt

    def estimate(self):
        """Solve the current window; returns the state estimate at its end."""
        if not self._y_buf:
            raise EstimationError("no measurements recorded")
        m = len(self._u_buf)
        prob, layout = self._problem(m)
        n_x = self.model.n_x

        data = np.concatenate(
            [np.concatenate(self._y_buf)]
            + ([np.concatenate(self._u_buf)] if self._u_buf else [])
            + [self.x_prior, self.p_prior, [self._t0]]
        )
        guess = self._initial_guess(m, layout)
        try:
            res = nlp.solve_sqp(
                prob, guess, data=data, settings=self.config.sqp_settings
            )
        except nlp.SqpError as exc:
            self.status = "failed"
            self.last_result = getattr(exc, "result", None)
            return self.x_hat

        self.status = "solved"
        self.last_result = res
        sol = res.x
        self.x_hat = sol[m * n_x : (m + 1) * n_x].copy()
        if self.n_p_est:
            self.p_hat = sol[layout["p_off"] :].copy()
            self.p_prior = self.p_hat.copy()
        # slide the arrival anchor along the previous solution once full
        if m == self.config.window:
            self.x_prior = sol[n_x : 2 * n_x].copy()
        self._prev_solution = (m, sol.copy())
        return self.x_hat.copy()

    def step(self, y, u=None):
        """Convenience: record a sample and re-estimate."""
        self.add_measurement(y, u)
        return self.estimate()

    def _initial_guess(self, m, layout):
        prob, _ = self._problems[m]
        n_x = self.model.n_x
        g = np.zeros(prob.n)
        if self._prev_solution is not None:
            m_prev, sol = self._prev_solution
            states = sol[: (m_prev + 1) * n_x].reshape(m_prev + 1, n_x)
        else:
            states = self.x_prior[None, :]
        filled = np.empty((m + 1, n_x))
        if states.shape[0] >= m + 1:
            # window slid by one: drop the oldest node, duplicate the newest
            if m:
                filled[:-1] = states[-m:]
            filled[-1] = states[-1]
        else:
            filled[: states.shape[0]] = states
            filled[states.shape[0] :] = states[-1]
        g[: (m + 1) * n_x] = filled.ravel()
        if self.n_p_est:
            g[layout["p_off"] :] = self.p_prior
        return np.clip(g, prob.lb, prob.ub)


def mhe_estimate(model, config, y_buffer, u_buffer, p=()):
    """Solve one full-window MHE problem from raw buffers.

    ``y_buffer`` holds the measured outputs per node (length m+1) and
    ``u_buffer`` the inputs per interval (length m). Returns
    ``(x_hat, p_hat, window_solution)``.
    """
    y_buffer = [np.asarray(y, dtype=float).ravel() for y in y_buffer]
    u_buffer = [np.asarray(u, dtype=float).ravel() for u in u_buffer]
    if len(y_buffer) < 1:
        raise EstimationError("need at least one measurement")
    if len(u_buffer) != len(y_buffer) - 1:
        raise EstimationError("need one input per interval (len(y) - 1)")
    est = Mhe(model, config, p=p)
    for i, y in enumerate(y_buffer):
        est.add_measurement(y, u_buffer[i - 1] if i else None)
    x_hat = est.estimate()
    if est.status != "solved":
        raise SolverFailure("MHE window solve failed")
    return x_hat, est.p_hat.copy(), est.last_result.x.copy()
