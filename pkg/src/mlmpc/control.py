"""NMPC construction and closed-loop use, plus a PID controller.

Cost terms are declared per variable group with one of three reference
forms: constants (setpoint tracking), expressions of time (trajectory
tracking), or expressions of a virtual path state (path following). Path
terms augment the model with theta' = u_pf, theta(t0) = 0 and a
nonnegative virtual input. Soft constraints add bounded slack variables
with quadratic penalties.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import exprgraph as eg
from . import model as md
from . import nlp
from .exprgraph import Var, Variable


class ControlError(Exception):
    pass


class UnknownVariable(ControlError):
    def __init__(self, name):
        super().__init__(f"{name!r} does not name a model variable")
        self.name = name


class ConflictingModes(ControlError):
    pass


class SolverFailure(ControlError):
    def __init__(self, message, best_input=None, status="failed"):
        super().__init__(message)
        self.best_input = best_input
        self.status = status


@dataclass
class QuadCostTerm:
    target: str  # states | inputs | outputs | path_speed
    names: list
    refs: list  # floats or Expressions of t / theta
    weights: list
    trajectory: bool = False
    path_following: bool = False

    @property
    def mode(self):
        if self.path_following:
            return "path"
        if self.trajectory:
            return "trajectory"
        return "constant"


class QuadCost:
    """Collects quadratic cost terms for one cost (stage or terminal)."""

    def __init__(self):
        self.terms: list[QuadCostTerm] = []

    def _add(self, target, names, ref, weights, trajectory, path_following):
        if isinstance(names, str):
            names = [names]
        names = list(names)
        refs = ref if isinstance(ref, (list, tuple)) else [ref] * len(names)
        w = (
            list(weights)
            if isinstance(weights, (list, tuple, np.ndarray))
            else [weights] * len(names)
        )
        if len(refs) != len(names) or len(w) != len(names):
            raise ControlError("names, refs and weights must have equal length")
        if any(wi <= 0 for wi in w):
            raise ControlError("cost weights must be positive")
        if trajectory and path_following:
            raise ConflictingModes("a term cannot be both trajectory and path mode")
        self.terms.append(
            QuadCostTerm(target, names, list(refs), w, trajectory, path_following)
        )

    def add_states(self, names, ref, weights, trajectory=False, path_following=False):
        self._add("states", names, ref, weights, trajectory, path_following)

    def add_inputs(self, names, ref, weights, trajectory=False, path_following=False):
        self._add("inputs", names, ref, weights, trajectory, path_following)

    def add_outputs(self, names, ref, weights, trajectory=False, path_following=False):
        self._add("outputs", names, ref, weights, trajectory, path_following)


@dataclass
class SoftSettings:
    weight: float = 1e4
    cap: float = np.inf


class NmpcConfig:
    def __init__(self, horizon, control_horizon=None):
        if horizon < 1:
            raise ControlError("horizon must be >= 1")
        self.horizon = int(horizon)
        self.control_horizon = (
            int(control_horizon) if control_horizon is not None else self.horizon
        )
        self.stage_cost = QuadCost()
        self.terminal_cost = QuadCost()
        self.x_bounds = None  # (lo, hi) arrays or None
        self.u_bounds = None
        # (expr, lo, hi, soft: SoftSettings | None)
        self.stage_constraints: list = []
        self.terminal_constraints: list = []
        self.path_variable: Variable | None = None
        self.u_pf_min = 0.0
        self.u_pf_max = np.inf
        self.u_pf_ref = None
        self.u_pf_weight = 1.0
        self.rk_method = "rk4"

    def create_path_variable(self, name="theta"):
        if self.path_variable is not None:
            raise ControlError("one path variable per controller")
        self.path_variable = Variable(name, "state", -1)
        return Var(self.path_variable)

    def set_path_input(self, u_pf_min=0.0, u_pf_max=np.inf, ref=None, weight=1.0):
        if u_pf_min < 0:
            raise ControlError("u_pf lower bound must be nonnegative")
        self.u_pf_min = u_pf_min
        self.u_pf_max = u_pf_max
        self.u_pf_ref = ref
        self.u_pf_weight = weight

    def add_stage_constraint(self, expr, lo=-np.inf, hi=0.0, soft=None):
        if soft is not None and not np.isfinite(hi) and not np.isfinite(lo):
            raise ControlError("soft constraints need a finite bound")
        self.stage_constraints.append((eg.as_expr(expr), lo, hi, soft))

    def add_terminal_constraint(self, expr, lo=-np.inf, hi=0.0, soft=None):
        if soft is not None and not np.isfinite(hi) and not np.isfinite(lo):
            raise ControlError("soft constraints need a finite bound")
        self.terminal_constraints.append((eg.as_expr(expr), lo, hi, soft))


class Nmpc:
    """Transcribed NMPC controller; call optimize(x_hat, t0) each sample."""

    def __init__(self, model, config: NmpcConfig, p=()):
        self.config = config
        self.base_model = model
        self.dt = model.dt
        self.n_u_real = model.n_u
        self.p = np.asarray(p, dtype=float).ravel()
        if model.n_p != self.p.size:
            raise ControlError(
                f"model has {model.n_p} parameters, got {self.p.size} values"
            )
        self._check_modes()
        self._build()
        self._prev_solution = None
        self._theta0 = 0.0
        self.prev_input = None
        self.status = "idle"
        self.prediction: md.Trajectory | None = None
        self.last_result = None

    # ---- construction

    def _check_modes(self):
        modes = {}
        uses_path = False
        for cost in (self.config.stage_cost, self.config.terminal_cost):
            for term in cost.terms:
                uses_path |= term.path_following
                for name in term.names:
                    key = (term.target, name)
                    if key in modes and modes[key] != term.mode:
                        raise ConflictingModes(
                            f"{name!r} referenced in both {modes[key]} and "
                            f"{term.mode} mode"
                        )
                    modes[key] = term.mode
        self._uses_path = uses_path
        if uses_path and self.config.path_variable is None:
            raise ControlError(
                "path-following terms need a path variable (create_path_variable)"
            )

    def _augmented_model(self):
        m = self.base_model
        if not self._uses_path:
            return m, None
        theta = self.config.path_variable
        if any(v.name == theta.name for v in m.states + m.inputs + m.parameters):
            raise ControlError(f"model already has a variable named {theta.name!r}")
        u_pf = Variable("u_pf", "input", m.n_u)
        if m.time_domain == "discrete":
            theta_next = Var(theta) + m.dt * Var(u_pf)
            aug = md.Model(
                states=m.states + [theta],
                odes=list(m.f) + [theta_next],
                inputs=m.inputs + [u_pf],
                parameters=m.parameters,
                dt=m.dt,
                measurements=m.h,
                time_variable=m.time_variable,
                discrete=True,
                name=m.name + "_path",
            )
        else:
            aug = md.Model(
                states=m.states + [theta],
                odes=list(m.f) + [Var(u_pf)],
                inputs=m.inputs + [u_pf],
                parameters=m.parameters,
                dt=m.dt,
                measurements=m.h,
                time_variable=m.time_variable,
                name=m.name + "_path",
            )
        aug.output_names = list(m.output_names)
        return aug, u_pf

    def _build(self):
        cfg = self.config
        aug, u_pf = self._augmented_model()
        if aug.time_domain != "discrete":
            if aug.q:
                raise ControlError(
                    "NMPC transcription requires explicit algebraics only"
                )
            dmodel = md.discretize(aug, cfg.rk_method)
        else:
            dmodel = aug
        self.dmodel = dmodel
        self.u_pf = u_pf

        # bake numeric parameters into the one-step map and outputs
        psubs = {pv: eg.as_expr(float(val)) for pv, val in zip(dmodel.parameters, self.p)}
        step_map = [eg.substitute(e, psubs) for e in dmodel.f]
        h_exprs = [eg.substitute(e, psubs) for e in dmodel.h]

        n_x = dmodel.n_x
        n_u = dmodel.n_u
        x_lo, x_hi = self._expand(cfg.x_bounds, self.base_model.n_x)
        u_lo, u_hi = self._expand(cfg.u_bounds, self.n_u_real)
        if self._uses_path:
            x_lo = np.append(x_lo, -np.inf)
            x_hi = np.append(x_hi, np.inf)
            u_lo = np.append(u_lo, cfg.u_pf_min)
            u_hi = np.append(u_hi, cfg.u_pf_max)

        tr = nlp.transcribe(
            step_map,
            dmodel.states,
            dmodel.inputs,
            N=cfg.horizon,
            N_c=cfg.control_horizon,
            dt=self.dt,
            time_variable=dmodel.time_variable,
            x_bounds=(x_lo, x_hi),
            u_bounds=(u_lo, u_hi),
        )
        self.tr = tr
        N = cfg.horizon

        name_to_state = {v.name: j for j, v in enumerate(dmodel.states)}
        name_to_input = {v.name: j for j, v in enumerate(dmodel.inputs)}
        name_to_output = {n: j for j, n in enumerate(dmodel.output_names)}
        theta_idx = name_to_state[cfg.path_variable.name] if self._uses_path else None
        self._theta_idx = theta_idx

        def node_subs(i):
            """Substitution of model variables by node-i decision variables."""
            subs = {}
            for sv, nv in zip(dmodel.states, tr.node_states[i]):
                subs[sv] = Var(nv)
            u_node = tr.interval_inputs[min(i, N - 1)]
            for uv, nv in zip(dmodel.inputs, u_node):
                subs[uv] = Var(nv)
            subs[dmodel.time_variable] = Var(tr.t0_data) + i * self.dt
            return subs

        def ref_expr(ref, i):
            r = eg.as_expr(ref)
            subs = {dmodel.time_variable: Var(tr.t0_data) + i * self.dt}
            if self._uses_path:
                subs[cfg.path_variable] = Var(tr.node_states[i][theta_idx])
            return eg.substitute(r, subs)

        def add_term(term, i, terminal):
            for name, ref, w in zip(term.names, term.refs, term.weights):
                if term.target == "states":
                    if name not in name_to_state:
                        raise UnknownVariable(name)
                    val = Var(tr.node_states[i][name_to_state[name]])
                elif term.target == "inputs":
                    if terminal:
                        raise ControlError("terminal cost cannot involve inputs")
                    if name not in name_to_input:
                        raise UnknownVariable(name)
                    val = Var(tr.interval_inputs[i][name_to_input[name]])
                elif term.target == "outputs":
                    if name not in name_to_output:
                        raise UnknownVariable(name)
                    val = eg.substitute(h_exprs[name_to_output[name]], node_subs(i))
                else:
                    raise ControlError(f"unknown cost target {term.target!r}")
                tr.residuals.append((w, val - ref_expr(ref, i)))

        for term in cfg.stage_cost.terms:
            for i in range(N):
                add_term(term, i, terminal=False)
        for term in cfg.terminal_cost.terms:
            add_term(term, N, terminal=True)

        if self._uses_path and cfg.u_pf_ref is not None:
            for i in range(cfg.control_horizon):
                v = Var(tr.interval_inputs[i][n_u - 1])
                tr.residuals.append((cfg.u_pf_weight, v - cfg.u_pf_ref))

        # general constraints; soft ones get one slack per constraint row
        for kind, cons in (("p", cfg.stage_constraints), ("T", cfg.terminal_constraints)):
            for ci, (expr, lo, hi, soft) in enumerate(cons):
                if soft is None:
                    nodes = range(N) if kind == "p" else [N]
                    for i in nodes:
                        tr.inequalities.append(
                            (eg.substitute(expr, node_subs(i)), lo, hi)
                        )
                    continue
                slack = tr.add_variable(
                    Variable(f"eps_{kind}{ci}", "parameter", -1), 0.0, soft.cap
                )
                s = Var(slack)
                # penalty as a weighted residual so it enters the
                # Gauss-Newton Hessian; otherwise the QP subproblems are
                # near-singular in the slack directions
                tr.residuals.append((soft.weight, s))
                nodes = range(N) if kind == "p" else [N]
                for i in nodes:
                    g = eg.substitute(expr, node_subs(i))
                    if np.isfinite(hi):
                        tr.inequalities.append((g - s, -np.inf, hi))
                    if np.isfinite(lo):
                        tr.inequalities.append((g + s, lo, np.inf))

        self.nlp_problem = tr.finalize()
        self._n_nodes_flat = (N + 1) * n_x
        self._n_inputs_flat = cfg.control_horizon * n_u
        self.sqp_settings = nlp.SqpSettings()

    @staticmethod
    def _expand(bounds, n):
        if bounds is None:
            return np.full(n, -np.inf), np.full(n, np.inf)
        lo, hi = bounds
        lo = np.broadcast_to(np.asarray(lo, float), (n,)).copy()
        hi = np.broadcast_to(np.asarray(hi, float), (n,)).copy()
        if np.any(lo > hi):
            raise ControlError("lower bound exceeds upper bound")
        return lo, hi

    # ---- solving

    def _initial_guess(self, x_aug):
        prob = self.nlp_problem
        n_x = self.dmodel.n_x
        n_u = self.dmodel.n_u
        N = self.config.horizon
        g = np.zeros(prob.n)
        g[: self._n_nodes_flat] = np.tile(x_aug, N + 1)
        u0 = np.clip(0.0, prob.lb, prob.ub)
        g[self._n_nodes_flat : self._n_nodes_flat + self._n_inputs_flat] = u0[
            self._n_nodes_flat : self._n_nodes_flat + self._n_inputs_flat
        ]
        g = np.clip(g, prob.lb, prob.ub)
        return g

    def _shift(self, sol):
        n_x = self.dmodel.n_x
        n_u = self.dmodel.n_u
        N = self.config.horizon
        N_c = self.config.control_horizon
        out = sol.copy()
        states = out[: self._n_nodes_flat].reshape(N + 1, n_x)
        states[:-1] = states[1:]
        inputs = out[
            self._n_nodes_flat : self._n_nodes_flat + self._n_inputs_flat
        ].reshape(N_c, n_u)
        if N_c > 1:
            inputs[:-1] = inputs[1:]
        return out

    def optimize(self, x_hat, t0=0.0, on_failure="reuse"):
        """Solve for the current state; returns the first (real) input.

        on_failure="reuse" returns the previously applied input and sets
        status="failed"; "raise" propagates SolverFailure instead.
        """
        x_hat = np.asarray(x_hat, dtype=float).ravel()
        if x_hat.size != self.base_model.n_x or not np.all(np.isfinite(x_hat)):
            raise ControlError("current state must be finite and full-dimensional")
        # the path state starts at zero and carries its progress across solves
        x_aug = np.append(x_hat, self._theta0) if self._uses_path else x_hat
        data = np.append(x_aug, t0)

        if self._prev_solution is not None:
            guess = self._shift(self._prev_solution)
            guess[: self.dmodel.n_x] = x_aug
        else:
            guess = self._initial_guess(x_aug)

        try:
            res = nlp.solve_sqp(
                self.nlp_problem, guess, data=data, settings=self.sqp_settings
            )
        except nlp.SqpError as exc:
            self.status = "failed"
            self.last_result = getattr(exc, "result", None)
            if on_failure == "raise" or self.prev_input is None:
                best = None
                if self.last_result is not None:
                    best = self._first_input(self.last_result.x)
                raise SolverFailure(str(exc), best_input=best) from exc
            return self.prev_input

        self.status = "solved"
        self.last_result = res
        self._prev_solution = res.x
        if self._theta_idx is not None:
            # next sample's path progress: the predicted value one node ahead
            self._theta0 = float(
                res.x[self.dmodel.n_x + self._theta_idx]
            )
        self._store_prediction(res.x, x_aug, t0)
        u0 = self._first_input(res.x)
        self.prev_input = u0
        return u0

    def _first_input(self, sol):
        n_u = self.dmodel.n_u
        u = sol[self._n_nodes_flat : self._n_nodes_flat + n_u]
        return np.array(u[: self.n_u_real])

    def _store_prediction(self, sol, x_aug, t0):
        """Predicted trajectory by forward simulation with the solved inputs
        projected into their bounds; keeps the path state exactly monotone."""
        N = self.config.horizon
        N_c = self.config.control_horizon
        n_x = self.dmodel.n_x
        n_u = self.dmodel.n_u
        prob = self.nlp_problem
        inputs = np.clip(
            sol[self._n_nodes_flat : self._n_nodes_flat + self._n_inputs_flat],
            prob.lb[self._n_nodes_flat : self._n_nodes_flat + self._n_inputs_flat],
            prob.ub[self._n_nodes_flat : self._n_nodes_flat + self._n_inputs_flat],
        ).reshape(N_c, n_u)
        u_full = np.vstack([inputs, np.tile(inputs[-1], (N - N_c, 1))])
        xs = np.empty((n_x, N + 1))
        xs[:, 0] = x_aug
        for i in range(N):
            xs[:, i + 1], _ = self.dmodel.step(
                xs[:, i], u_full[i], self.p, t0 + i * self.dt
            )
        self.prediction = md.Trajectory(
            t_grid=t0 + self.dt * np.arange(N + 1),
            x=xs,
            z=np.zeros((0, N + 1)),
            u=u_full.T,
            y=np.zeros((0, N + 1)),
            p=self.p,
            state_names=[v.name for v in self.dmodel.states],
            input_names=[v.name for v in self.dmodel.inputs],
        )

    def reset(self):
        self._prev_solution = None
        self._theta0 = 0.0
        self.prev_input = None
        self.status = "idle"
        self.prediction = None

    def dump_prediction(self, path):
        if self.prediction is None:
            raise ControlError("no prediction stored yet")
        self.prediction.to_csv(path)


def nmpc_setup(model, config: NmpcConfig, p=()) -> Nmpc:
    return Nmpc(model, config, p)


def nmpc_optimize(controller: Nmpc, x_hat, t0=0.0, on_failure="reuse"):
    return controller.optimize(x_hat, t0, on_failure)


# --- PID ---------------------------------------------------------------------


@dataclass
class PidConfig:
    kp: float = 0.0
    ki: float = 0.0
    kd: float = 0.0
    dt: float = 1.0
    out_min: float = -np.inf
    out_max: float = np.inf

    def __post_init__(self):
        if self.dt <= 0:
            raise ControlError("dt must be positive")


class Pid:
    """Positional PID: trapezoidal integral, derivative on the measurement,
    conditional-integration anti-windup."""

    def __init__(self, config: PidConfig):
        self.config = config
        self.reset()

    def reset(self):
        self.integral = 0.0
        self._prev_error = 0.0
        self._prev_measurement = None

    def step(self, setpoint, measurement):
        c = self.config
        error = setpoint - measurement
        integral_new = self.integral + c.dt * (error + self._prev_error) / 2.0
        if self._prev_measurement is None:
            derivative = 0.0
        else:
            derivative = -(measurement - self._prev_measurement) / c.dt
        raw = c.kp * error + c.ki * integral_new + c.kd * derivative
        out = min(max(raw, c.out_min), c.out_max)
        # freeze the integral when pushing further into saturation
        saturating = (raw > c.out_max and error > 0) or (raw < c.out_min and error < 0)
        if not saturating:
            self.integral = integral_new
        self._prev_error = error
        self._prev_measurement = measurement
        return out


def pid_step(pid: Pid, setpoint, measurement):
    return pid.step(setpoint, measurement)
