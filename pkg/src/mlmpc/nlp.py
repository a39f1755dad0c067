"""Dense NLP machinery: multiple-shooting transcription, an operator-splitting
dense QP solver, and a line-search SQP method.

The QP solver doubles as the repo's dense QP oracle. It solves

    min 1/2 x'Hx + g'x   s.t.  l <= Ax <= u

by an ADMM/operator-splitting iteration with over-relaxation and adaptive
penalty, followed by an active-set polish for high-accuracy primal/dual pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _accel
from . import exprgraph as eg
from .exprgraph import Expression, Var, Variable


class NlpError(Exception):
    pass


class InvalidHorizon(NlpError):
    pass


class QpError(NlpError):
    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class MaxIterations(QpError):
    pass


class DetectedInfeasible(QpError):
    pass


class SqpError(NlpError):
    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class LineSearchFailure(SqpError):
    pass


class QpSubproblemFailure(SqpError):
    pass


# --- dense QP ----------------------------------------------------------------


@dataclass
class DenseQp:
    """min 1/2 x'Hx + g'x s.t. A_eq x = b_eq, lb_in <= A_in x <= ub_in,
    lb <= x <= ub."""

    H: np.ndarray
    g: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    A_in: np.ndarray | None = None
    lb_in: np.ndarray | None = None
    ub_in: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=float)
        self.g = np.asarray(self.g, dtype=float)
        n = self.g.shape[0]
        if self.H.shape != (n, n):
            raise NlpError("H/g dimension mismatch")
        if not np.allclose(self.H, self.H.T, atol=1e-12):
            raise NlpError("H must be symmetric")
        if self.A_eq is None:
            self.A_eq = np.zeros((0, n))
            self.b_eq = np.zeros(0)
        if self.A_in is None:
            self.A_in = np.zeros((0, n))
            self.lb_in = np.zeros(0)
            self.ub_in = np.zeros(0)
        if self.lb is None:
            self.lb = np.full(n, -np.inf)
        if self.ub is None:
            self.ub = np.full(n, np.inf)
        for name in ("A_eq", "b_eq", "A_in", "lb_in", "ub_in", "lb", "ub"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))

    @property
    def n(self):
        return self.g.shape[0]


@dataclass
class QpResult:
    x: np.ndarray
    y_eq: np.ndarray
    y_in: np.ndarray
    y_bounds: np.ndarray
    status: str
    iterations: int
    pri_res: float
    dua_res: float

    @property
    def duals(self):
        return np.concatenate([self.y_eq, self.y_in, self.y_bounds])


@dataclass
class QpSettings:
    rho: float = 1.0
    rho_eq_scale: float = 1e3
    sigma: float = 1e-6
    alpha: float = 1.6
    eps_abs: float = 1e-8
    eps_rel: float = 1e-8
    max_iter: int = 4000
    check_every: int = 25
    polish: bool = True


def _stack_constraints(qp: DenseQp):
    n = qp.n
    A = np.vstack([qp.A_eq, qp.A_in, np.eye(n)])
    lo = np.concatenate([qp.b_eq, qp.lb_in, qp.lb])
    hi = np.concatenate([qp.b_eq, qp.ub_in, qp.ub])
    return A, lo, hi


def _ruiz_equilibrate(H, A, g, iters=10):
    """Symmetric diagonal scaling of the KKT data (infinity-norm Ruiz).

    Returns (d, e, c): variable scaling, constraint-row scaling, cost scaling.
    H, A, g are modified in place.
    """
    n = H.shape[0]
    m = A.shape[0]
    d = np.ones(n)
    e = np.ones(m)
    c = 1.0
    for _ in range(iters):
        col = np.max(np.abs(H), axis=0, initial=0.0)
        if m:
            col = np.maximum(col, np.max(np.abs(A), axis=0))
        col = np.sqrt(np.where(col > 0, col, 1.0))
        H /= col[None, :]
        H /= col[:, None]
        g /= col
        if m:
            A /= col[None, :]
            row = np.sqrt(
                np.where(np.max(np.abs(A), axis=1) > 0, np.max(np.abs(A), axis=1), 1.0)
            )
            A /= row[:, None]
            e /= row
        d /= col
        # cost normalization keeps the objective on the same footing as A
        gamma = max(np.mean(np.max(np.abs(H), axis=0)), np.max(np.abs(g), initial=0.0))
        if gamma > 0:
            gamma = 1.0 / math.sqrt(gamma) if gamma > 1.0 else 1.0
            H *= gamma
            g *= gamma
            c *= gamma
    return d, e, c


def solve_qp(qp: DenseQp, warm_start=None, settings: QpSettings | None = None) -> QpResult:
    """Solve a dense QP; raises MaxIterations/DetectedInfeasible on failure."""
    s = settings or QpSettings()
    n = qp.n
    A0, lo0, hi0 = _stack_constraints(qp)
    if np.any(lo0 > hi0 + 1e-12):
        raise DetectedInfeasible("crossing bounds detected")
    m = A0.shape[0]
    m_eq = qp.A_eq.shape[0]
    m_in = qp.A_in.shape[0]

    # work on an equilibrated copy; termination uses unscaled residuals
    Hs = qp.H.copy()
    gs = qp.g.copy()
    As = A0.copy()
    d, e, c_cost = _ruiz_equilibrate(Hs, As, gs)
    lo = e * lo0
    hi = e * hi0

    rho = s.rho
    rho_vec = np.full(m, rho)
    rho_vec[:m_eq] *= s.rho_eq_scale

    if warm_start is not None:
        x = np.array(warm_start[0], dtype=float) / d
        y = (
            c_cost * np.array(warm_start[1], dtype=float) / e
            if len(warm_start) > 1 and warm_start[1] is not None
            else np.zeros(m)
        )
    else:
        x = np.zeros(n)
        y = np.zeros(m)
    z = np.clip(As @ x, lo, hi)

    def factor():
        kkt = np.zeros((n + m, n + m))
        kkt[:n, :n] = Hs + s.sigma * np.eye(n)
        kkt[:n, n:] = As.T
        kkt[n:, :n] = As
        kkt[n:, n:] = -np.diag(1.0 / rho_vec)
        return np.linalg.inv(kkt)

    def unscale():
        return d * x, (e / c_cost) * y

    kinv = factor()
    it = 0
    status = "max_iter"
    y_last = y.copy()
    pri = dua = np.inf
    while it < s.max_iter:
        chunk = min(s.check_every, s.max_iter - it)
        _accel.admm_chunk(
            kinv, gs, As, lo, hi, rho_vec, s.sigma, s.alpha, x, z, y, chunk
        )
        it += chunk
        xu, yu = unscale()
        axu = A0 @ xu
        zu = z / e
        pri = np.max(np.abs(axu - zu), initial=0.0)
        dua = np.max(np.abs(qp.H @ xu + qp.g + A0.T @ yu), initial=0.0)
        eps_pri = s.eps_abs + s.eps_rel * max(
            np.max(np.abs(axu), initial=0.0), np.max(np.abs(zu), initial=0.0)
        )
        eps_dua = s.eps_abs + s.eps_rel * max(
            np.max(np.abs(qp.H @ xu), initial=0.0),
            np.max(np.abs(qp.g), initial=0.0),
            np.max(np.abs(A0.T @ yu), initial=0.0),
        )
        if pri <= eps_pri and dua <= eps_dua:
            status = "solved"
            break
        # primal infeasibility certificate on the dual increment
        dy = y - y_last
        norm_dy = np.max(np.abs(dy), initial=0.0)
        if norm_dy > 1e-12:
            if np.max(np.abs(As.T @ dy), initial=0.0) <= 1e-10 * norm_dy:
                support = np.where(dy > 0, np.where(np.isfinite(hi), hi, 0.0), 0.0)
                support += np.where(dy < 0, np.where(np.isfinite(lo), lo, 0.0), 0.0)
                gap = float(dy @ support)
                if gap < -1e-10 * norm_dy:
                    raise DetectedInfeasible("primal infeasibility certificate found")
        y_last = y.copy()
        # OSQP-style penalty adaptation toward balanced scaled residuals
        pri_s = np.max(np.abs(As @ x - z), initial=0.0) / max(
            np.max(np.abs(As @ x), initial=0.0), np.max(np.abs(z), initial=0.0), 1e-30
        )
        dua_s = np.max(np.abs(Hs @ x + gs + As.T @ y), initial=0.0) / max(
            np.max(np.abs(Hs @ x), initial=0.0),
            np.max(np.abs(gs), initial=0.0),
            np.max(np.abs(As.T @ y), initial=0.0),
            1e-30,
        )
        new_rho = rho * math.sqrt(max(pri_s, 1e-30) / max(dua_s, 1e-30))
        new_rho = min(max(new_rho, 1e-6), 1e6)
        if new_rho > 5.0 * rho or new_rho < rho / 5.0:
            rho = new_rho
            rho_vec = np.full(m, rho)
            rho_vec[:m_eq] *= s.rho_eq_scale
            kinv = factor()

    x, y = unscale()
    if s.polish:
        x, y = _polish(qp, A0, lo0, hi0, x, y)
        ax = A0 @ x
        pri = np.max(np.abs(ax - np.clip(ax, lo0, hi0)), initial=0.0)
        dua = np.max(np.abs(qp.H @ x + qp.g + A0.T @ y), initial=0.0)
        if status != "solved" and pri <= 1e-7 and dua <= 1e-7:
            status = "solved"

    result = QpResult(
        x=x,
        y_eq=y[:m_eq],
        y_in=y[m_eq : m_eq + m_in],
        y_bounds=y[m_eq + m_in :],
        status=status,
        iterations=it,
        pri_res=float(pri),
        dua_res=float(dua),
    )
    if status != "solved":
        raise MaxIterations(
            f"QP did not converge in {s.max_iter} iterations "
            f"(pri {pri:.2e}, dua {dua:.2e})",
            result,
        )
    return result


def _polish(qp: DenseQp, A, lo, hi, x, y):
    """Refine to an exact KKT pair on the active set implied by (x, y)."""
    m_eq = qp.A_eq.shape[0]
    ax = A @ x
    tol = 1e-7 * (1.0 + np.max(np.abs(ax), initial=0.0))
    active_lo = (np.abs(ax - lo) < tol) | (y < -1e-9)
    active_hi = (np.abs(ax - hi) < tol) | (y > 1e-9)
    active = active_lo | active_hi
    active[:m_eq] = True
    rows = np.where(active)[0]
    if rows.size == 0:
        try:
            x_new = np.linalg.solve(qp.H, -qp.g)
        except np.linalg.LinAlgError:
            return x, y
        if np.all(A @ x_new >= lo - 1e-9) and np.all(A @ x_new <= hi + 1e-9):
            return x_new, np.zeros_like(y)
        return x, y
    A_act = A[rows]
    # for equality rows lo == hi == b_eq, so this covers them too
    b_act = np.where(active_hi[rows], hi[rows], lo[rows])
    n = qp.n
    k = len(rows)
    kkt = np.zeros((n + k, n + k))
    kkt[:n, :n] = qp.H
    kkt[:n, n:] = A_act.T
    kkt[n:, :n] = A_act
    rhs = np.concatenate([-qp.g, b_act])
    try:
        sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
    except np.linalg.LinAlgError:
        return x, y
    x_new = sol[:n]
    y_new = np.zeros_like(y)
    y_new[rows] = sol[n:]
    # accept only if feasibility does not degrade and duals have valid signs
    ax_new = A @ x_new
    viol_new = np.max(np.abs(ax_new - np.clip(ax_new, lo, hi)), initial=0.0)
    viol_old = np.max(np.abs(ax - np.clip(ax, lo, hi)), initial=0.0)
    dua_new = np.max(np.abs(qp.H @ x_new + qp.g + A.T @ y_new), initial=0.0)
    dua_old = np.max(np.abs(qp.H @ x + qp.g + A.T @ y), initial=0.0)
    sign_ok = True
    for r, yr in zip(rows, y_new[rows]):
        if r < m_eq:
            continue
        if yr > 1e-7 and not active_hi[r]:
            sign_ok = False
        if yr < -1e-7 and not active_lo[r]:
            sign_ok = False
    if sign_ok and viol_new <= viol_old + 1e-9 and dua_new <= max(dua_old, 1e-9):
        return x_new, y_new
    return x, y


# --- NLP problem -------------------------------------------------------------


@dataclass
class NlpProblem:
    """Flattened NLP over symbolic expressions.

    ``residuals`` optionally declares the objective as sum of w_i * r_i^2,
    enabling the Gauss-Newton Hessian. ``data_vars`` are fixed per solve
    (e.g. current state, time origin) and appended to the compiled argument
    vector after the decision variables.
    """

    variables: list[Variable]
    objective: Expression
    eq_constraints: list[Expression] = field(default_factory=list)
    ineq_constraints: list[tuple[Expression, float, float]] = field(default_factory=list)
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    residuals: list[tuple[float, Expression]] | None = None
    data_vars: list[Variable] = field(default_factory=list)
    segments: dict[str, slice] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.variables)
        self.lb = np.full(n, -np.inf) if self.lb is None else np.asarray(self.lb, float)
        self.ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, float)
        self._compiled = None

    @property
    def n(self):
        return len(self.variables)

    def compiled(self):
        if self._compiled is None:
            self._compiled = _CompiledNlp(self)
        return self._compiled


class _CompiledNlp:
    def __init__(self, nlp: NlpProblem):
        self.nlp = nlp
        order = list(nlp.variables) + list(nlp.data_vars)
        dec = nlp.variables
        self.n = len(dec)
        self.m_eq = len(nlp.eq_constraints)
        self.m_in = len(nlp.ineq_constraints)

        self.f_fun = eg.compile_function([nlp.objective], order)
        grad = eg.gradient(nlp.objective, dec)
        self.grad_fun = eg.compile_function(grad, order)

        ceq = nlp.eq_constraints
        self.ceq_fun = eg.compile_function(ceq, order) if ceq else None
        if ceq:
            J = eg.jacobian(ceq, dec)
            self.jeq_fun = eg.compile_function([e for r in J for e in r], order)
        cin = [e for e, _, _ in nlp.ineq_constraints]
        self.cin_fun = eg.compile_function(cin, order) if cin else None
        if cin:
            J = eg.jacobian(cin, dec)
            self.jin_fun = eg.compile_function([e for r in J for e in r], order)
        self.in_lo = np.array([lo for _, lo, _ in nlp.ineq_constraints], float)
        self.in_hi = np.array([hi for _, _, hi in nlp.ineq_constraints], float)

        if nlp.residuals:
            self.res_w = np.array([w for w, _ in nlp.residuals], float)
            res = [r for _, r in nlp.residuals]
            self.res_fun = eg.compile_function(res, order)
            J = eg.jacobian(res, dec)
            self.jres_fun = eg.compile_function([e for r in J for e in r], order)
        else:
            self.res_fun = None

    def pack(self, x, data):
        return list(x) + list(data)

    def f(self, x, data):
        return self.f_fun(self.pack(x, data))[0]

    def grad(self, x, data):
        return np.array(self.grad_fun(self.pack(x, data)))

    def ceq(self, x, data):
        if self.ceq_fun is None:
            return np.zeros(0)
        return np.array(self.ceq_fun(self.pack(x, data)))

    def jeq(self, x, data):
        if self.ceq_fun is None:
            return np.zeros((0, self.n))
        return np.array(self.jeq_fun(self.pack(x, data))).reshape(self.m_eq, self.n)

    def cin(self, x, data):
        if self.cin_fun is None:
            return np.zeros(0)
        return np.array(self.cin_fun(self.pack(x, data)))

    def jin(self, x, data):
        if self.cin_fun is None:
            return np.zeros((0, self.n))
        return np.array(self.jin_fun(self.pack(x, data))).reshape(self.m_in, self.n)

    def gauss_newton(self, x, data):
        packed = self.pack(x, data)
        J = np.array(self.jres_fun(packed)).reshape(len(self.res_w), self.n)
        return 2.0 * (J.T * self.res_w) @ J


@dataclass
class SqpSettings:
    kkt_tol: float = 1e-6
    max_iter: int = 100
    hessian: str = "gauss_newton"  # or "damped_bfgs"
    armijo_c: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 40
    penalty_margin: float = 1.1
    qp_settings: QpSettings = field(default_factory=QpSettings)
    hessian_reg: float = 1e-8
    # steps shorter than this fraction of the search direction count as a
    # line-search failure, which escalates the Hessian regularization
    min_step: float = 1e-4


@dataclass
class SqpResult:
    x: np.ndarray
    lam_eq: np.ndarray
    mu_in: np.ndarray
    nu_bounds: np.ndarray
    iterations: int
    kkt_residual: float
    status: str
    objective: float = 0.0
    log: list = field(default_factory=list)


def _kkt_residuals(c, x, lam, mu, nu, data, lb, ub, in_lo, in_hi):
    g = c.grad(x, data)
    ceq = c.ceq(x, data)
    cin = c.cin(x, data)
    stat = g.copy()
    if ceq.size:
        stat += c.jeq(x, data).T @ lam
    if cin.size:
        stat += c.jin(x, data).T @ mu
    stat += nu
    stat_res = np.max(np.abs(stat), initial=0.0)

    feas = np.max(np.abs(ceq), initial=0.0)
    if cin.size:
        feas = max(
            feas,
            np.max(np.maximum(in_lo - cin, 0.0), initial=0.0),
            np.max(np.maximum(cin - in_hi, 0.0), initial=0.0),
        )
    feas = max(
        feas,
        np.max(np.maximum(lb - x, 0.0), initial=0.0),
        np.max(np.maximum(x - ub, 0.0), initial=0.0),
    )

    comp = 0.0
    for j in range(cin.size):
        if mu[j] == 0.0:
            continue
        d_lo = cin[j] - in_lo[j] if np.isfinite(in_lo[j]) else np.inf
        d_hi = in_hi[j] - cin[j] if np.isfinite(in_hi[j]) else np.inf
        comp = max(comp, abs(mu[j]) * max(min(d_lo, d_hi), 0.0))
    for i in range(x.size):
        if nu[i] == 0.0:
            continue
        d_lo = x[i] - lb[i] if np.isfinite(lb[i]) else np.inf
        d_hi = ub[i] - x[i] if np.isfinite(ub[i]) else np.inf
        comp = max(comp, abs(nu[i]) * max(min(d_lo, d_hi), 0.0))
    return stat_res, feas, comp


def _merit(c, x, data, penalty, in_lo, in_hi, lb, ub):
    val = c.f(x, data)
    viol = np.sum(np.abs(c.ceq(x, data)))
    cin = c.cin(x, data)
    if cin.size:
        viol += np.sum(np.maximum(in_lo - cin, 0.0))
        viol += np.sum(np.maximum(cin - in_hi, 0.0))
    viol += np.sum(np.maximum(lb - x, 0.0)) + np.sum(np.maximum(x - ub, 0.0))
    return val + penalty * viol, viol


def solve_sqp(
    nlp: NlpProblem,
    x0,
    data=(),
    settings: SqpSettings | None = None,
    log: Callable | None = None,
) -> SqpResult:
    """Line-search SQP with l1 merit function.

    Uses the Gauss-Newton Hessian when the objective is declared as a sum of
    squares, damped BFGS otherwise.
    """
    s = settings or SqpSettings()
    c = nlp.compiled()
    x = np.array(x0, dtype=float)
    if x.shape != (nlp.n,):
        raise NlpError(f"initial guess must have length {nlp.n}")
    data = np.asarray(data, dtype=float)
    lb, ub = nlp.lb, nlp.ub
    x = np.clip(x, lb, ub)

    use_gn = s.hessian == "gauss_newton" and c.res_fun is not None
    B = np.eye(nlp.n)
    lam = np.zeros(c.m_eq)
    mu = np.zeros(c.m_in)
    nu = np.zeros(nlp.n)
    penalty = 1.0
    reg = s.hessian_reg
    g_prev = None
    x_prev = None
    history = []

    for it in range(s.max_iter):
        stat, feas, comp = _kkt_residuals(
            c, x, lam, mu, nu, data, lb, ub, c.in_lo, c.in_hi
        )
        kkt = max(stat, feas, comp)
        if log:
            log(it, c.f(x, data), kkt)
        history.append((it, c.f(x, data), kkt))
        if kkt <= s.kkt_tol:
            return SqpResult(
                x=x,
                lam_eq=lam,
                mu_in=mu,
                nu_bounds=nu,
                iterations=it,
                kkt_residual=kkt,
                status="solved",
                objective=c.f(x, data),
                log=history,
            )

        g = c.grad(x, data)
        if use_gn:
            B = c.gauss_newton(x, data)
        elif g_prev is not None:
            B = _bfgs_update(B, x - x_prev, g - g_prev)
        ceq = c.ceq(x, data)
        jeq = c.jeq(x, data)
        cin = c.cin(x, data)
        jin = c.jin(x, data)

        # adaptive regularization: escalate when the line search rejects the
        # direction (Gauss-Newton ignores constraint curvature)
        accepted = False
        for _ in range(8):
            H = 0.5 * (B + B.T)
            H[np.diag_indices_from(H)] += reg
            qp = DenseQp(
                H=H,
                g=g,
                A_eq=jeq,
                b_eq=-ceq,
                A_in=jin if cin.size else None,
                lb_in=(c.in_lo - cin) if cin.size else None,
                ub_in=(c.in_hi - cin) if cin.size else None,
                lb=lb - x,
                ub=ub - x,
            )
            try:
                qp_res = solve_qp(qp, warm_start=None, settings=s.qp_settings)
            except MaxIterations as exc:
                if exc.result is not None and exc.result.pri_res < 1e-5:
                    qp_res = exc.result
                else:
                    raise QpSubproblemFailure(
                        f"QP subproblem failed at iteration {it}: {exc}",
                        _result_from(x, lam, mu, nu, it, kkt, c, data, history),
                    ) from exc
            except DetectedInfeasible as exc:
                raise QpSubproblemFailure(
                    f"QP subproblem infeasible at iteration {it}",
                    _result_from(x, lam, mu, nu, it, kkt, c, data, history),
                ) from exc

            d = qp_res.x
            lam_new, mu_new, nu_new = qp_res.y_eq, qp_res.y_in, qp_res.y_bounds

            dual_max = max(
                np.max(np.abs(lam_new), initial=0.0),
                np.max(np.abs(mu_new), initial=0.0),
                np.max(np.abs(nu_new), initial=0.0),
            )
            penalty = max(penalty, s.penalty_margin * dual_max, 1.0)

            phi0, viol0 = _merit(c, x, data, penalty, c.in_lo, c.in_hi, lb, ub)
            ddir = float(g @ d) - penalty * viol0
            if ddir > 0:
                ddir = -penalty * viol0 if viol0 > 0 else float(g @ d)

            alpha = 1.0
            for _ in range(s.max_backtracks):
                if alpha < s.min_step:
                    # a step this short makes no real progress; treat it as a
                    # rejection so the regularization shrinks the direction
                    break
                x_trial = x + alpha * d
                phi_trial, _ = _merit(
                    c, x_trial, data, penalty, c.in_lo, c.in_hi, lb, ub
                )
                if phi_trial <= phi0 + s.armijo_c * alpha * ddir + 1e-14 * abs(phi0):
                    accepted = True
                    break
                alpha *= s.backtrack
            if accepted:
                reg = max(reg / 10.0, s.hessian_reg)
                break
            reg = max(reg * 100.0, 1e-4)
        if not accepted:
            if kkt <= 10 * s.kkt_tol:
                # stalled in the last digits; report honestly as max_iter
                break
            raise LineSearchFailure(
                f"merit line search failed at iteration {it}",
                _result_from(x, lam, mu, nu, it, kkt, c, data, history),
            )

        g_prev, x_prev = g, x.copy()
        x = x + alpha * d
        lam, mu, nu = lam_new, mu_new, nu_new

    stat, feas, comp = _kkt_residuals(c, x, lam, mu, nu, data, lb, ub, c.in_lo, c.in_hi)
    kkt = max(stat, feas, comp)
    result = _result_from(x, lam, mu, nu, s.max_iter, kkt, c, data, history)
    if kkt <= s.kkt_tol:
        result.status = "solved"
        return result
    raise MaxIterationsSqp(
        f"SQP reached max_iter with KKT residual {kkt:.2e}", result
    )


class MaxIterationsSqp(SqpError):
    pass


def _result_from(x, lam, mu, nu, it, kkt, c, data, history):
    return SqpResult(
        x=x,
        lam_eq=lam,
        mu_in=mu,
        nu_bounds=nu,
        iterations=it,
        kkt_residual=kkt,
        status="max_iter",
        objective=c.f(x, data),
        log=history,
    )


def _bfgs_update(B, s_vec, y_vec):
    """Damped BFGS (Powell damping, threshold 0.2)."""
    sBs = float(s_vec @ B @ s_vec)
    if sBs <= 0 or np.linalg.norm(s_vec) < 1e-14:
        return B
    sy = float(s_vec @ y_vec)
    if sy < 0.2 * sBs:
        theta = 0.8 * sBs / (sBs - sy)
        y_vec = theta * y_vec + (1 - theta) * (B @ s_vec)
        sy = float(s_vec @ y_vec)
    Bs = B @ s_vec
    return B - np.outer(Bs, Bs) / sBs + np.outer(y_vec, y_vec) / sy


# --- multiple-shooting transcription ----------------------------------------


@dataclass
class Transcription:
    """Decision layout produced by :func:`transcribe`; extendable by callers
    (costs, slacks, extra constraints) before :meth:`finalize`."""

    variables: list[Variable]
    lb: list[float]
    ub: list[float]
    equalities: list[Expression]
    inequalities: list[tuple[Expression, float, float]]
    residuals: list[tuple[float, Expression]]
    extra_objective: Expression | None
    data_vars: list[Variable]
    node_states: list[list[Variable]]  # N+1 lists of n_x variables
    interval_inputs: list[list[Variable]]  # N lists (aliased beyond N_c-1)
    x0_data: list[Variable]
    t0_data: Variable
    N: int
    N_c: int
    dt: float
    segments: dict[str, slice] = field(default_factory=dict)

    def add_variable(self, var: Variable, lo=-np.inf, hi=np.inf) -> Variable:
        self.variables.append(var)
        self.lb.append(lo)
        self.ub.append(hi)
        return var

    def finalize(self) -> NlpProblem:
        objective = eg.ZERO
        for w, r in self.residuals:
            objective = objective + w * r * r
        if self.extra_objective is not None:
            objective = objective + self.extra_objective
        return NlpProblem(
            variables=list(self.variables),
            objective=objective,
            eq_constraints=list(self.equalities),
            ineq_constraints=list(self.inequalities),
            lb=np.array(self.lb),
            ub=np.array(self.ub),
            residuals=list(self.residuals) if self.residuals else None,
            data_vars=list(self.data_vars),
            segments=dict(self.segments),
        )


def transcribe(
    step_map: Sequence[Expression],
    state_vars: Sequence[Variable],
    input_vars: Sequence[Variable],
    N: int,
    N_c: int | None = None,
    dt: float = 1.0,
    time_variable: Variable | None = None,
    x_bounds=None,
    u_bounds=None,
) -> Transcription:
    """Direct multiple shooting: states at nodes 0..N and inputs at intervals
    0..N_c-1 become decision variables; continuity and the initial-state
    equality become constraints. Inputs beyond N_c-1 alias u_{N_c-1}.
    """
    if N < 1:
        raise InvalidHorizon("N must be >= 1")
    N_c = N if N_c is None else N_c
    if not 1 <= N_c <= N:
        raise InvalidHorizon("need 1 <= N_c <= N")
    n_x = len(state_vars)
    n_u = len(input_vars)

    tr = Transcription(
        variables=[],
        lb=[],
        ub=[],
        equalities=[],
        inequalities=[],
        residuals=[],
        extra_objective=None,
        data_vars=[],
        node_states=[],
        interval_inputs=[],
        x0_data=[],
        t0_data=Variable("t0@data", "parameter", 0),
        N=N,
        N_c=N_c,
        dt=dt,
        segments={},
    )
    x_lo, x_hi = _expand_bounds(x_bounds, n_x)
    u_lo, u_hi = _expand_bounds(u_bounds, n_u)

    start = 0
    for i in range(N + 1):
        node = []
        for j, sv in enumerate(state_vars):
            v = Variable(f"{sv.name}@{i}", "state", i * n_x + j)
            tr.add_variable(v, x_lo[j], x_hi[j])
            node.append(v)
        tr.node_states.append(node)
    tr.segments["states"] = slice(start, len(tr.variables))

    start = len(tr.variables)
    real_inputs = []
    for i in range(N_c):
        iv = []
        for j, uv in enumerate(input_vars):
            v = Variable(f"{uv.name}@{i}", "input", i * n_u + j)
            tr.add_variable(v, u_lo[j], u_hi[j])
            iv.append(v)
        real_inputs.append(iv)
    for i in range(N):
        tr.interval_inputs.append(real_inputs[min(i, N_c - 1)])
    tr.segments["inputs"] = slice(start, len(tr.variables))

    tr.x0_data = [Variable(f"{sv.name}@init", "parameter", j) for j, sv in enumerate(state_vars)]
    tr.data_vars = list(tr.x0_data) + [tr.t0_data]

    # initial-state equality x_0 = x_hat
    for sv, dv in zip(tr.node_states[0], tr.x0_data):
        tr.equalities.append(Var(sv) - Var(dv))

    # continuity: x_{i+1} = F(x_i, u_i, t_i)
    for i in range(N):
        subs = {}
        for sv, nv in zip(state_vars, tr.node_states[i]):
            subs[sv] = Var(nv)
        for uv, nv in zip(input_vars, tr.interval_inputs[i]):
            subs[uv] = Var(nv)
        if time_variable is not None:
            subs[time_variable] = Var(tr.t0_data) + i * dt
        for j, fx in enumerate(step_map):
            nxt = eg.substitute(fx, subs, check_cycles=False)
            tr.equalities.append(Var(tr.node_states[i + 1][j]) - nxt)
    return tr


def _expand_bounds(bounds, n):
    if bounds is None:
        return np.full(n, -np.inf), np.full(n, np.inf)
    lo, hi = bounds
    lo = np.full(n, -np.inf) if lo is None else np.broadcast_to(np.asarray(lo, float), (n,))
    hi = np.full(n, np.inf) if hi is None else np.broadcast_to(np.asarray(hi, float), (n,))
    return np.array(lo), np.array(hi)
