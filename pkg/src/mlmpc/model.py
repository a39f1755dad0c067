"""Dynamic-model container and simulator.

Holds semi-explicit index-1 DAE models (continuous or discrete), integrates
them with explicit Runge-Kutta methods, linearizes them around operating
points, and accumulates simulation results in a stored solution.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import exprgraph as eg
from .eqparser import ParsedModel, algebraic_order
from .exprgraph import Expression, Var, Variable


class ModelError(Exception):
    pass


class DimensionMismatch(ModelError):
    pass


class AlreadyDiscrete(ModelError):
    pass


class NewtonDivergence(ModelError):
    def __init__(self, step):
        super().__init__(f"algebraic Newton solve diverged at step {step}")
        self.step = step


class NonFiniteState(ModelError):
    def __init__(self, step):
        super().__init__(f"non-finite state encountered at step {step}")
        self.step = step


class SingularAlgebraicJacobian(ModelError):
    pass


@dataclass(frozen=True)
class ButcherTableau:
    """Explicit Runge-Kutta tableau (strictly lower triangular A)."""

    A: tuple
    b: tuple
    c: tuple
    order: int

    def __post_init__(self):
        s = len(self.b)
        if len(self.c) != s or len(self.A) != s:
            raise DimensionMismatch("inconsistent tableau dimensions")
        for i, row in enumerate(self.A):
            for j, a in enumerate(row):
                if j >= i and a != 0.0:
                    raise ValueError("tableau is not explicit")
        if abs(sum(self.b) - 1.0) > 1e-12:
            raise ValueError("tableau weights must sum to 1")


TABLEAUS = {
    "euler": ButcherTableau(A=((0.0,),), b=(1.0,), c=(0.0,), order=1),
    "heun": ButcherTableau(
        A=((0.0, 0.0), (1.0, 0.0)), b=(0.5, 0.5), c=(0.0, 1.0), order=2
    ),
    "rk4": ButcherTableau(
        A=(
            (0.0, 0.0, 0.0, 0.0),
            (0.5, 0.0, 0.0, 0.0),
            (0.0, 0.5, 0.0, 0.0),
            (0.0, 0.0, 1.0, 0.0),
        ),
        b=(1 / 6, 1 / 3, 1 / 3, 1 / 6),
        c=(0.0, 0.5, 0.5, 1.0),
        order=4,
    ),
}


@dataclass
class Trajectory:
    """Time-indexed record of a simulation or estimator/controller run."""

    t_grid: np.ndarray
    x: np.ndarray  # n_x x K
    z: np.ndarray  # n_z x K
    u: np.ndarray  # n_u x (K-1)
    y: np.ndarray  # n_y x K
    p: np.ndarray
    state_names: list[str] = field(default_factory=list)
    algebraic_names: list[str] = field(default_factory=list)
    input_names: list[str] = field(default_factory=list)
    output_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        k = len(self.t_grid)
        if self.x.shape[1] != k or self.y.shape[1] != k:
            raise DimensionMismatch("column counts inconsistent with t_grid")
        if np.any(np.diff(self.t_grid) <= 0):
            raise ValueError("t_grid must be strictly increasing")

    def to_csv(self, path):
        """Write the trajectory as CSV: t, states, algebraics, inputs, outputs."""
        header = (
            ["t"]
            + list(self.state_names)
            + list(self.algebraic_names)
            + [f"u:{n}" for n in self.input_names]
            + [f"y:{n}" for n in self.output_names]
        )
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for k, t in enumerate(self.t_grid):
                row = [repr(float(t))]
                row += [repr(float(v)) for v in self.x[:, k]]
                row += [repr(float(v)) for v in self.z[:, k]]
                if k < self.u.shape[1]:
                    row += [repr(float(v)) for v in self.u[:, k]]
                else:
                    row += [""] * self.u.shape[0]
                row += [repr(float(v)) for v in self.y[:, k]]
                writer.writerow(row)


@dataclass
class LinearModel:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    x_eq: np.ndarray
    u_eq: np.ndarray
    p: np.ndarray


class Model:
    """Finalized dynamic model.

    Explicit algebraic assignments are substituted into the dynamics at setup;
    residual-form algebraic equations (0 = q) keep their algebraic variables
    and are solved with damped Newton during simulation.
    """

    def __init__(
        self,
        states,
        odes,
        inputs=(),
        parameters=(),
        dt=1.0,
        algebraic_assignments=(),
        algebraic_residuals=(),
        residual_variables=(),
        measurements=None,
        time_variable=None,
        discrete=False,
        x0=None,
        name="model",
    ):
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.name = name
        self.states = list(states)
        self.inputs = list(inputs)
        self.parameters = list(parameters)
        self.dt = float(dt)
        self.time_domain = "discrete" if discrete else "continuous"
        self.time_variable = time_variable or Variable("t", "time", 0)
        self.x0 = None if x0 is None else np.asarray(x0, dtype=float)

        odes = [eg.as_expr(e) for e in odes]
        if len(odes) != len(self.states):
            raise DimensionMismatch(
                f"{len(self.states)} states but {len(odes)} equations"
            )

        # substitute explicit algebraic assignments (already topologically
        # ordered by the caller) into dynamics and measurements
        self.algebraic_assignments = [
            (v, eg.as_expr(e)) for v, e in algebraic_assignments
        ]
        subs = {}
        for var, expr in self.algebraic_assignments:
            subs[var] = eg.substitute(expr, subs)
        self._alg_subs = subs

        self.f = [eg.substitute(e, subs) for e in odes]
        self.residual_variables = list(residual_variables)
        self.q = [eg.substitute(eg.as_expr(e), subs) for e in algebraic_residuals]
        if len(self.q) != len(self.residual_variables):
            raise DimensionMismatch("each residual needs one algebraic variable")

        if measurements is None:
            self.h = [Var(s) for s in self.states]
            self.output_names = [s.name for s in self.states]
        else:
            self.h = [eg.substitute(eg.as_expr(e), subs) for e in measurements]
            self.output_names = [f"y{i}" for i in range(len(self.h))]

        self._compile()
        self.solution: Trajectory | None = None

    # ---- dimensions

    @property
    def n_x(self):
        return len(self.states)

    @property
    def n_z(self):
        return len(self.residual_variables)

    @property
    def n_u(self):
        return len(self.inputs)

    @property
    def n_p(self):
        return len(self.parameters)

    @property
    def n_y(self):
        return len(self.h)

    # ---- compiled callables

    def _var_order(self):
        return (
            self.states
            + self.residual_variables
            + self.inputs
            + self.parameters
            + [self.time_variable]
        )

    def _compile(self):
        order = self._var_order()
        self._f_fun = eg.compile_function(self.f, order)
        self._h_fun = eg.compile_function(self.h, order)
        if self.q:
            self._q_fun = eg.compile_function(self.q, order)
            jq = eg.jacobian(self.q, self.residual_variables)
            self._jq_fun = eg.compile_function([e for row in jq for e in row], order)
        # explicit algebraics as functions of states/inputs/params for records
        self._alg_order = [v for v, _ in self.algebraic_assignments]
        alg_exprs = [self._alg_subs[v] for v in self._alg_order]
        self._alg_fun = eg.compile_function(alg_exprs, order)

    def _pack(self, x, z, u, p, t):
        return list(x) + list(z) + list(u) + list(p) + [t]

    def ode_rhs(self, x, z, u, p, t=0.0):
        return np.array(self._f_fun(self._pack(x, z, u, p, t)))

    def measure(self, x, u=None, p=(), t=0.0, z=()):
        u = np.zeros(self.n_u) if u is None else u
        z = list(z) if len(list(z)) == self.n_z else [0.0] * self.n_z
        return np.array(self._h_fun(self._pack(x, z, u, p, t)))

    def algebraic_values(self, x, u, p, t=0.0, z=()):
        z = list(z) if len(list(z)) == self.n_z else [0.0] * self.n_z
        return np.array(self._alg_fun(self._pack(x, z, u, p, t)))

    def solve_algebraics(self, x, u, p, t=0.0, z_guess=None, tol=1e-10, max_iter=50):
        """Damped Newton on the residual system 0 = q(x, z, u, p, t)."""
        n_z = self.n_z
        if n_z == 0:
            return np.zeros(0)
        z = np.zeros(n_z) if z_guess is None else np.asarray(z_guess, dtype=float)
        for _ in range(max_iter):
            res = np.array(self._q_fun(self._pack(x, z, u, p, t)))
            if np.max(np.abs(res)) < tol:
                return z
            jac = np.array(self._jq_fun(self._pack(x, z, u, p, t))).reshape(n_z, n_z)
            try:
                delta = np.linalg.solve(jac, -res)
            except np.linalg.LinAlgError:
                raise SingularAlgebraicJacobian(
                    "algebraic Jacobian is singular"
                ) from None
            # damped update: backtrack until the residual decreases
            alpha = 1.0
            base = np.max(np.abs(res))
            for _ in range(30):
                z_new = z + alpha * delta
                res_new = np.array(self._q_fun(self._pack(x, z_new, u, p, t)))
                if np.max(np.abs(res_new)) < base or alpha < 1e-8:
                    break
                alpha *= 0.5
            z = z_new
        res = np.array(self._q_fun(self._pack(x, z, u, p, t)))
        if np.max(np.abs(res)) < tol:
            return z
        raise NewtonDivergence(-1)

    # ---- one step

    def step(self, x, u, p=(), t=0.0, method="rk4", z_guess=None):
        """Advance one sampling interval with input held constant."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if self.time_domain == "discrete":
            z = self.solve_algebraics(x, u, p, t, z_guess) if self.q else np.zeros(0)
            packed = self._pack(x, z, u, p, t)
            return np.array(self._f_fun(packed)), z
        tab = TABLEAUS[method]
        s = len(tab.b)
        ks = []
        z = np.zeros(self.n_z)
        for i in range(s):
            xi = x.copy()
            for j in range(i):
                if tab.A[i][j] != 0.0:
                    xi = xi + self.dt * tab.A[i][j] * ks[j]
            ti = t + tab.c[i] * self.dt
            if self.q:
                z = self.solve_algebraics(xi, u, p, ti, z_guess=z)
            ks.append(np.array(self._f_fun(self._pack(xi, z, u, p, ti))))
        x_next = x.copy()
        for i in range(s):
            x_next = x_next + self.dt * tab.b[i] * ks[i]
        if self.q:
            z = self.solve_algebraics(x_next, u, p, t + self.dt, z_guess=z)
        return x_next, z


def model_setup(parsed, dt, measurements=None, x0=None, name=None):
    """Finalize a :class:`ParsedModel` into an immutable :class:`Model`."""
    if isinstance(parsed, ParsedModel):
        order = algebraic_order(parsed)
        exprs = dict(parsed.algebraics)
        assignments = [(parsed.symbols[nm], exprs[nm]) for nm in order]
        return Model(
            states=[parsed.symbols[nm] for nm in parsed.states],
            odes=[e for _, e in parsed.odes],
            inputs=[parsed.symbols[nm] for nm in parsed.inputs],
            parameters=[parsed.symbols[nm] for nm in parsed.parameters],
            dt=dt,
            algebraic_assignments=assignments,
            measurements=measurements,
            time_variable=parsed.time_variable,
            x0=x0,
            name=name or "model",
        )
    raise TypeError("expected a ParsedModel; use Model(...) for programmatic setup")


def simulate(model: Model, x0, u_seq, p=(), steps=None, t0=0.0, method="rk4"):
    """Integrate `steps` sampling intervals and append to the stored solution.

    ``u_seq`` is an n_u x steps array (a single column is broadcast).
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (model.n_x,):
        raise DimensionMismatch(f"x0 must have length {model.n_x}")
    u_seq = np.atleast_2d(np.asarray(u_seq, dtype=float))
    if model.n_u == 0:
        u_seq = np.zeros((0, steps or 1))
    elif u_seq.shape[0] != model.n_u:
        u_seq = u_seq.T
    if steps is None:
        steps = u_seq.shape[1]
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if u_seq.shape[1] == 1 and steps > 1:
        u_seq = np.repeat(u_seq, steps, axis=1)
    if model.n_u and u_seq.shape[1] != steps:
        raise DimensionMismatch("u_seq columns must match steps")

    p = np.asarray(p, dtype=float)
    xs = np.empty((model.n_x, steps + 1))
    zs = np.empty((model.n_z, steps + 1))
    ys = np.empty((model.n_y, steps + 1))
    ts = t0 + model.dt * np.arange(steps + 1)
    xs[:, 0] = x0
    z = model.solve_algebraics(x0, u_seq[:, 0] if model.n_u else (), p, t0) if model.q else np.zeros(0)
    zs[:, 0] = z
    ys[:, 0] = model._h_fun(model._pack(x0, z, u_seq[:, 0] if model.n_u else (), p, t0))
    for k in range(steps):
        u = u_seq[:, k] if model.n_u else np.zeros(0)
        try:
            x_next, z = model.step(xs[:, k], u, p, t=ts[k], method=method, z_guess=z)
        except NewtonDivergence:
            raise NewtonDivergence(k) from None
        if not np.all(np.isfinite(x_next)):
            raise NonFiniteState(k)
        xs[:, k + 1] = x_next
        zs[:, k + 1] = z
        ys[:, k + 1] = model._h_fun(model._pack(x_next, z, u, p, ts[k + 1]))

    traj = Trajectory(
        t_grid=ts,
        x=xs,
        z=np.vstack(
            [
                np.array(
                    [
                        model.algebraic_values(xs[:, k], u_seq[:, min(k, steps - 1)] if model.n_u else (), p, ts[k], zs[:, k])
                        for k in range(steps + 1)
                    ]
                ).T
                if model.algebraic_assignments
                else np.empty((0, steps + 1)),
                zs,
            ]
        ),
        u=u_seq,
        y=ys,
        p=p,
        state_names=[v.name for v in model.states],
        algebraic_names=[v.name for v, _ in model.algebraic_assignments]
        + [v.name for v in model.residual_variables],
        input_names=[v.name for v in model.inputs],
        output_names=model.output_names,
    )
    _append_solution(model, traj)
    return traj


def _append_solution(model: Model, traj: Trajectory):
    if model.solution is None:
        model.solution = Trajectory(
            t_grid=traj.t_grid.copy(),
            x=traj.x.copy(),
            z=traj.z.copy(),
            u=traj.u.copy(),
            y=traj.y.copy(),
            p=traj.p,
            state_names=traj.state_names,
            algebraic_names=traj.algebraic_names,
            input_names=traj.input_names,
            output_names=traj.output_names,
        )
        return
    sol = model.solution
    shift = 0.0
    if len(sol.t_grid) and traj.t_grid[0] <= sol.t_grid[-1]:
        shift = sol.t_grid[-1] - traj.t_grid[0] + (traj.t_grid[1] - traj.t_grid[0])
    sol.t_grid = np.concatenate([sol.t_grid, traj.t_grid + shift])
    sol.x = np.hstack([sol.x, traj.x])
    sol.z = np.hstack([sol.z, traj.z])
    sol.u = np.hstack([sol.u, traj.u])
    sol.y = np.hstack([sol.y, traj.y])


def discretize(model: Model, method="rk4") -> Model:
    """Build a discrete model whose one-step map is the chosen RK applied
    over the sampling time (symbolically)."""
    if model.time_domain == "discrete":
        raise AlreadyDiscrete("model is already discrete")
    if model.q:
        raise ModelError("symbolic discretization requires explicit algebraics only")
    tab = TABLEAUS[method]
    dt = model.dt
    svars = model.states
    t = model.time_variable
    s = len(tab.b)
    stage_exprs: list[list[Expression]] = []
    for i in range(s):
        subs = {}
        for m, sv in enumerate(svars):
            acc = Var(sv)
            for j in range(i):
                if tab.A[i][j] != 0.0:
                    acc = acc + dt * tab.A[i][j] * stage_exprs[j][m]
            subs[sv] = acc
        if tab.c[i] != 0.0:
            subs[t] = Var(t) + tab.c[i] * dt
        stage_exprs.append(
            [eg.substitute(fi, subs, check_cycles=False) for fi in model.f]
        )
    next_state = []
    for m, sv in enumerate(svars):
        acc = Var(sv)
        for i in range(s):
            if tab.b[i] != 0.0:
                acc = acc + dt * tab.b[i] * stage_exprs[i][m]
        next_state.append(acc)
    out = Model(
        states=svars,
        odes=next_state,
        inputs=model.inputs,
        parameters=model.parameters,
        dt=dt,
        measurements=model.h,
        time_variable=t,
        discrete=True,
        x0=model.x0,
        name=model.name + f"_{method}",
    )
    out.rk_order = tab.order
    out.output_names = model.output_names
    return out


def linearize(model: Model, x_eq, u_eq, p=(), z_eq=None, warn=None):
    """Jacobian linearization at an operating point.

    Returns a :class:`LinearModel`. If the point is not an equilibrium
    (||f||_inf >= 1e-8) a warning is issued via ``warn`` (or ``warnings``).
    """
    import warnings as _warnings

    x_eq = np.asarray(x_eq, dtype=float)
    u_eq = np.asarray(u_eq, dtype=float)
    p = np.asarray(p, dtype=float)
    if model.q:
        raise ModelError("linearize supports explicit-assignment models")
    packed = model._pack(x_eq, (), u_eq, p, 0.0)
    fval = np.array(model._f_fun(packed))
    if np.max(np.abs(fval), initial=0.0) >= 1e-8:
        msg = f"linearization point is not an equilibrium (|f|={np.max(np.abs(fval)):.3g})"
        (warn or _warnings.warn)(msg)

    def jac_at(exprs, variables):
        rows = eg.jacobian(exprs, variables)
        flat = eg.compile_function([e for row in rows for e in row], model._var_order())
        vals = np.array(flat(packed))
        return vals.reshape(len(exprs), len(variables)) if exprs and variables else np.zeros((len(exprs), len(variables)))

    A = jac_at(model.f, model.states)
    B = jac_at(model.f, model.inputs)
    C = jac_at(model.h, model.states)
    D = jac_at(model.h, model.inputs)
    return LinearModel(A=A, B=B, C=C, D=D, x_eq=x_eq, u_eq=u_eq, p=p)
