"""Scenario runner and command-line entry points.

A scenario is a closed-schema key-value tree (YAML) describing model,
controller, estimator, and simulation settings; running one executes the
measure -> estimate -> optimize -> apply -> simulate loop and writes
truth/estimate/prediction CSVs. Built-in scenarios cover four demo
applications: bike speed setpoint, race car with learned drag correction,
cooperative robots with a GP reference, spring-damper with a learned
controller, and the embedded lateral controller.

Built-in example parameters without a canonical source
(race-car masses and tire coefficients, wind profile, noise levels) are
harness defaults chosen for well-conditioned desk-scale runs, not claims
about any particular vehicle.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np
import yaml

from . import control as ctl
from . import embedded as emb
from . import eqparser as ep
from . import estimation as est
from . import exprgraph as eg
from . import model as md
from . import nlp
from .learning import ann as la
from .learning import gp as lgp
from .learning.data import Dataset
from .learning.hybrid import hybridize

log = logging.getLogger("mlmpc")


class ValidationError(Exception):
    """Scenario schema violation, qualified with the path to the bad key."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


class ScenarioRuntimeError(Exception):
    """Failure inside the simulation loop, qualified with the step index."""

    def __init__(self, step, cause):
        super().__init__(f"step {step}: {cause}")
        self.step = step


# --- built-in models ---------------------------------------------------------

BIKE_EQUATIONS = """
dpx/dt = v(t)*cos(phi(t) + beta)
dpy/dt = v(t)*sin(phi(t) + beta)
dv/dt = a(k)
dphi/dt = v(t)/lr*sin(beta)
beta = arctan(lr/(lr + lf)*tan(delta(k)))
"""

BIKE_PARAMS = {"lr": 1.4, "lf": 1.8}

# Single-track car with Pacejka-style tires, drive-train map, and lateral
# wind drag. The no-drag variant keeps v_wind as a (vanishing) parameter so
# the learned correction can use it as a feature.
_RACE_CAR_TEMPLATE = """
dpx/dt = vx(t)*cos(psi(t)) - vy(t)*sin(psi(t))
dpy/dt = vx(t)*sin(psi(t)) + vy(t)*cos(psi(t))
dpsi/dt = omega(t)
dvx/dt = (F_rx - F_ax - (F_fy - F_ay)*sin(delta(k)) + mass*vy(t)*omega(t))/mass
dvy/dt = (F_ry - F_ay + (F_fy - F_ay)*cos(delta(k)) - mass*vx(t)*omega(t))/mass
domega/dt = (F_fy*l_f*cos(delta(k)) - F_ry*l_r)/I_z
F_fy = D_f*sin(C_f*arctan(B_f*alpha_f))
F_ry = D_r*sin(C_r*arctan(B_r*alpha_r))
F_rx = (C_m1 - C_m2*vx(t))*d(k) - c_roll - C_d*vx(t)^2
alpha_f = -arctan((omega(t)*l_f + vy(t))/vx(t)) + delta(k)
alpha_r = arctan((omega(t)*l_r - vy(t))/vx(t))
F_ax = c_air*vx(t)
F_ay = {f_ay}
"""

RACE_CAR_EQUATIONS = _RACE_CAR_TEMPLATE.format(f_ay="c_air*v_wind")
RACE_CAR_NO_DRAG_EQUATIONS = _RACE_CAR_TEMPLATE.format(f_ay="0*v_wind")

RACE_CAR_PARAMS = {
    "mass": 1.0,
    "I_z": 0.3,
    "l_f": 0.5,
    "l_r": 0.5,
    "B_f": 1.2,
    "C_f": 1.25,
    "D_f": 3.0,
    "B_r": 1.3,
    "C_r": 1.3,
    "D_r": 3.2,
    "C_m1": 5.0,
    "C_m2": 0.8,
    "c_roll": 0.3,
    "C_d": 0.1,
    "c_air": 0.5,
    "v_wind": 1.0,
}

ROBOT_EQUATIONS = """
dx1/dt = u1(k)*sin(x3(t))
dx2/dt = u1(k)*cos(x3(t))
dx3/dt = u2(k)
"""

MSD_EQUATIONS = """
dx1/dt = x2(t)
dx2/dt = (u(k) - k_s*x1(t) - d_c*x2(t))/mass
"""

MSD_PARAMS = {"mass": 1.0, "k_s": 1.0, "d_c": 0.8}

LATERAL_EQUATIONS = """
dp_y/dt = speed*psi(t)
dpsi/dt = omega(t)
domega/dt = steer_gain*delta(k)
"""

LATERAL_PARAMS = {"speed": 2.0, "steer_gain": 10.0}

_BUILTIN_MODELS = {
    "bike": (BIKE_EQUATIONS, BIKE_PARAMS, 0.05),
    "race_car": (RACE_CAR_EQUATIONS, RACE_CAR_PARAMS, 0.05),
    "race_car_hybrid": (None, RACE_CAR_PARAMS, 0.05),
    "robots": (ROBOT_EQUATIONS, {}, 0.1),
    "msd": (MSD_EQUATIONS, MSD_PARAMS, 0.1),
    "lateral_lti": (LATERAL_EQUATIONS, LATERAL_PARAMS, 0.015),
}


def builtin_model(name, dt=None, parameters=None):
    """Instantiate a built-in model; returns (model, parameter value dict)."""
    if name not in _BUILTIN_MODELS:
        raise ValidationError("model.builtin", f"unknown builtin {name!r}")
    text, defaults, default_dt = _BUILTIN_MODELS[name]
    params = dict(defaults)
    params.update(parameters or {})
    dt = default_dt if dt is None else dt
    if name == "race_car_hybrid":
        model = _drag_corrected_model(dt=dt, seed=0)
    else:
        model = md.model_setup(ep.parse_equations(text), dt=dt, name=name)
    return model, params


def _param_vector(model, values, path="parameters"):
    out = []
    known = {v.name for v in model.parameters}
    for key in values:
        if key not in known:
            raise ValidationError(f"{path}.{key}", "not a model parameter")
    for v in model.parameters:
        if v.name not in values:
            raise ValidationError(f"{path}.{v.name}", "missing value")
        out.append(float(values[v.name]))
    return np.array(out)


# --- scenario validation -----------------------------------------------------


def _reject_unknown(node, allowed, path):
    if not isinstance(node, dict):
        raise ValidationError(path, f"expected a mapping, got {type(node).__name__}")
    for key in node:
        if key not in allowed:
            raise ValidationError(f"{path}.{key}", "unknown key")


def _floats(value, path):
    try:
        out = [float(v) for v in value]
    except (TypeError, ValueError):
        raise ValidationError(path, "expected a list of numbers") from None
    return out


def _bounds(node, path):
    if node is None:
        return None
    _reject_unknown(node, {"lo", "hi"}, path)
    if "lo" not in node or "hi" not in node:
        raise ValidationError(path, "bounds need both 'lo' and 'hi'")
    return _floats(node["lo"], f"{path}.lo"), _floats(node["hi"], f"{path}.hi")


def _cost_terms(terms, path):
    if terms is None:
        return []
    out = []
    for i, term in enumerate(terms):
        tp = f"{path}[{i}]"
        _reject_unknown(term, {"target", "names", "ref", "weights"}, tp)
        target = term.get("target", "states")
        if target not in ("states", "inputs", "outputs"):
            raise ValidationError(f"{tp}.target", f"unknown target {target!r}")
        names = term.get("names")
        if not names or not all(isinstance(n, str) for n in names):
            raise ValidationError(f"{tp}.names", "expected a list of names")
        out.append(
            (
                target,
                list(names),
                _floats(term.get("ref", [0.0] * len(names)), f"{tp}.ref"),
                _floats(term.get("weights", [1.0] * len(names)), f"{tp}.weights"),
            )
        )
    return out


def validate_scenario(raw):
    """Check the scenario tree against the closed schema; returns it normalized."""
    _reject_unknown(
        raw,
        {"model", "parameters", "controller", "estimator", "simulation", "outputs"},
        "scenario",
    )
    for key in ("model", "controller", "simulation"):
        if key not in raw:
            raise ValidationError(f"scenario.{key}", "required section missing")

    model_node = raw["model"]
    _reject_unknown(model_node, {"builtin", "equations", "dt"}, "model")
    if ("builtin" in model_node) == ("equations" in model_node):
        raise ValidationError("model", "give exactly one of 'builtin' or 'equations'")
    if "builtin" in model_node and model_node["builtin"] not in _BUILTIN_MODELS:
        raise ValidationError(
            "model.builtin", f"unknown builtin {model_node['builtin']!r}"
        )

    params = raw.get("parameters") or {}
    if not isinstance(params, dict):
        raise ValidationError("parameters", "expected a mapping")

    con = raw["controller"]
    _reject_unknown(
        con,
        {
            "horizon",
            "control_horizon",
            "stage_cost",
            "terminal_cost",
            "input_bounds",
            "state_bounds",
        },
        "controller",
    )
    if "horizon" not in con:
        raise ValidationError("controller.horizon", "required key missing")
    if int(con["horizon"]) < 1:
        raise ValidationError("controller.horizon", "must be >= 1")
    _cost_terms(con.get("stage_cost"), "controller.stage_cost")
    _cost_terms(con.get("terminal_cost"), "controller.terminal_cost")
    _bounds(con.get("input_bounds"), "controller.input_bounds")
    _bounds(con.get("state_bounds"), "controller.state_bounds")

    estm = raw.get("estimator")
    if estm is not None:
        _reject_unknown(estm, {"type", "P0", "Q", "R"}, "estimator")
        kind = estm.get("type", "none")
        if kind not in ("none", "ekf", "ukf"):
            raise ValidationError("estimator.type", f"unknown estimator {kind!r}")
        if kind != "none":
            for key in ("P0", "Q", "R"):
                if key not in estm:
                    raise ValidationError(f"estimator.{key}", "required key missing")
                _floats(estm[key], f"estimator.{key}")

    sim = raw["simulation"]
    _reject_unknown(
        sim, {"steps", "seed", "t0", "x0", "measurement_noise"}, "simulation"
    )
    if "steps" not in sim or int(sim["steps"]) < 1:
        raise ValidationError("simulation.steps", "need steps >= 1")
    if "x0" not in sim:
        raise ValidationError("simulation.x0", "required key missing")
    _floats(sim["x0"], "simulation.x0")
    if "measurement_noise" in sim:
        _floats(sim["measurement_noise"], "simulation.measurement_noise")

    out = raw.get("outputs")
    if out is not None:
        _reject_unknown(out, {"csv", "log"}, "outputs")
        if "log" in out and out["log"] not in ("quiet", "info", "debug"):
            raise ValidationError("outputs.log", f"unknown level {out['log']!r}")
    return raw


def load_scenario(path):
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ValidationError("scenario", "file does not hold a mapping")
    return validate_scenario(raw)


# --- generic closed loop -----------------------------------------------------


def _build_controller(model, con, p):
    cfg = ctl.NmpcConfig(
        int(con["horizon"]),
        int(con["control_horizon"]) if con.get("control_horizon") else None,
    )
    for target, names, refs, weights in _cost_terms(
        con.get("stage_cost"), "controller.stage_cost"
    ):
        getattr(cfg.stage_cost, f"add_{target}")(names, refs, weights)
    for target, names, refs, weights in _cost_terms(
        con.get("terminal_cost"), "controller.terminal_cost"
    ):
        getattr(cfg.terminal_cost, f"add_{target}")(names, refs, weights)
    bounds = _bounds(con.get("input_bounds"), "controller.input_bounds")
    if bounds is not None:
        cfg.u_bounds = bounds
    bounds = _bounds(con.get("state_bounds"), "controller.state_bounds")
    if bounds is not None:
        cfg.x_bounds = bounds
    return ctl.nmpc_setup(model, cfg, p=p)


def _make_trajectory(model, t0, dt, xs, us, p):
    k = xs.shape[1]
    return md.Trajectory(
        t_grid=t0 + dt * np.arange(k),
        x=xs,
        z=np.zeros((0, k)),
        u=us,
        y=np.zeros((0, k)),
        p=np.asarray(p, dtype=float),
        state_names=[v.name for v in model.states],
        input_names=[v.name for v in model.inputs],
    )


def run_scenario(scenario, csv_base=None):
    """Run the closed loop a scenario describes; returns a summary dict.

    ``csv_base`` overrides ``outputs.csv``; when set, truth, estimate, and
    final-prediction CSVs are written next to it with matching suffixes.
    """
    if isinstance(scenario, str):
        scenario = load_scenario(scenario)
    else:
        scenario = validate_scenario(scenario)

    model_node = scenario["model"]
    params = scenario.get("parameters") or {}
    if "builtin" in model_node:
        model, defaults = builtin_model(
            model_node["builtin"], dt=model_node.get("dt")
        )
        merged = dict(defaults)
        merged.update(params)
        params = merged
    else:
        model = md.model_setup(
            ep.parse_equations(model_node["equations"]),
            dt=float(model_node.get("dt", 1.0)),
        )
    p = _param_vector(model, params)

    sim = scenario["simulation"]
    steps = int(sim["steps"])
    dt = model.dt
    t0 = float(sim.get("t0", 0.0))
    rng = np.random.default_rng(sim.get("seed", 0))
    x = np.array(_floats(sim["x0"], "simulation.x0"))
    if x.size != model.n_x:
        raise ValidationError(
            "simulation.x0", f"model has {model.n_x} states, got {x.size}"
        )
    noise_std = np.array(
        _floats(sim.get("measurement_noise", [0.0] * model.n_y),
                "simulation.measurement_noise")
    )

    controller = _build_controller(model, scenario["controller"], p)

    estm = scenario.get("estimator") or {"type": "none"}
    kind = estm.get("type", "none")
    filt = None
    dmodel = None
    if kind != "none":
        dmodel = model if model.time_domain == "discrete" else md.discretize(model)
        filt = est.FilterState(
            x=x.copy(),
            P=np.diag(_floats(estm["P0"], "estimator.P0")),
            Q=np.diag(_floats(estm["Q"], "estimator.Q")),
            R=np.diag(_floats(estm["R"], "estimator.R")),
        )
    ukf_params = est.UkfParams()

    xs = np.empty((model.n_x, steps + 1))
    x_hats = np.empty((model.n_x, steps + 1))
    us = np.empty((model.n_u, steps))
    xs[:, 0] = x
    u_prev = np.zeros(model.n_u)
    for k in range(steps):
        t = t0 + k * dt
        try:
            y = model.measure(x, u_prev, p, t) + noise_std * rng.standard_normal(
                model.n_y
            )
            if filt is None:
                x_hat = x
            elif k == 0:
                x_hat = filt.x
            else:
                step_fn = est.ukf_step if kind == "ukf" else est.ekf_step
                args = (dmodel, ukf_params) if kind == "ukf" else (dmodel,)
                filt = step_fn(filt, *args, u_prev, y, p=p, t=t - dt)
                x_hat = filt.x
            x_hats[:, k] = x_hat
            u = controller.optimize(x_hat, t0=t)
            x, _ = model.step(x, u, p, t)
        except (ctl.ControlError, est.EstimationError, md.ModelError) as exc:
            raise ScenarioRuntimeError(k, exc) from exc
        us[:, k] = u
        u_prev = u
        xs[:, k + 1] = x
        log.debug("step %d: x=%s u=%s", k, x, u)
    x_hats[:, steps] = x_hats[:, steps - 1] if filt is not None else x

    written = []
    base = csv_base or (scenario.get("outputs") or {}).get("csv")
    if base:
        truth = _make_trajectory(model, t0, dt, xs, us, p)
        truth.to_csv(f"{base}_truth.csv")
        estimate = _make_trajectory(model, t0, dt, x_hats, us, p)
        estimate.to_csv(f"{base}_estimate.csv")
        controller.dump_prediction(f"{base}_prediction.csv")
        written = [f"{base}_{s}.csv" for s in ("truth", "estimate", "prediction")]
    return {
        "steps": steps,
        "terminal_state": xs[:, -1].copy(),
        "states": xs,
        "inputs": us,
        "estimates": x_hats,
        "csv": written,
    }


# --- built-in scenario: bike speed setpoint ----------------------------------


def bike_scenario(steps=100, seed=0):
    """Speed-setpoint scenario: horizon 20, reference v = 2, weight 10."""
    return {
        "model": {"builtin": "bike"},
        "parameters": dict(BIKE_PARAMS),
        "controller": {
            "horizon": 20,
            "stage_cost": [
                {"target": "states", "names": ["v"], "ref": [2.0], "weights": [10.0]},
                {
                    "target": "inputs",
                    "names": ["a", "delta"],
                    "ref": [0.0, 0.0],
                    "weights": [0.01, 0.01],
                },
            ],
            "terminal_cost": [
                {"target": "states", "names": ["v"], "ref": [2.0], "weights": [10.0]}
            ],
            "input_bounds": {"lo": [-2.0, -0.5], "hi": [2.0, 0.5]},
        },
        "simulation": {"steps": steps, "seed": seed, "x0": [0.0, 0.0, 0.0, 0.0]},
    }


def run_bike(seed=0, steps=100, csv_base=None):
    out = run_scenario(bike_scenario(steps=steps, seed=seed), csv_base=csv_base)
    out["terminal_speed_error"] = abs(out["terminal_state"][2] - 2.0)
    log.info("bike: terminal |v - 2| = %.3g", out["terminal_speed_error"])
    return out


# --- built-in scenario: cooperative robots -----------------------------------


def run_robots(seed=0, steps=60, csv_base=None):
    """Follower robot tracking the GP-learned trajectory of a leader."""
    dt = 0.1
    model = md.model_setup(ep.parse_equations(ROBOT_EQUATIONS), dt=dt, name="robot")

    # leader run: known inputs, recorded positions are the training data
    t_leader = np.arange(0, 10.0 + 1e-9, 0.2)
    x_leader = np.zeros(3)
    leader_pos = [x_leader[:2].copy()]
    for i in range(len(t_leader) - 1):
        tl = t_leader[i]
        u_leader = [2 + 0.1 * np.sin(tl), 0.5 + np.sin(tl)]
        for _ in range(2):  # leader sampled every other integration step
            x_leader, _ = model.step(x_leader, u_leader, t=tl)
        leader_pos.append(x_leader[:2].copy())
    leader_pos = np.array(leader_pos).T

    rng = np.random.default_rng(seed)
    noisy = leader_pos + 0.01 * rng.standard_normal(leader_pos.shape)
    gps = []
    for coord in range(2):
        gp = lgp.GpModel(
            lgp.SquaredExponential(variance=1.0, lengthscales=1.0),
            t_leader[None, :],
            noisy[coord],
            noise_variance=1e-4,
            prior_mean=float(noisy[coord].mean()),
        )
        gps.append(lgp.gp_fit(gp, restarts=1, max_iters=150, seed=seed))

    t_var = eg.Var(model.time_variable)
    refs = [lgp.gp_mean_expression(gp, [t_var]) for gp in gps]

    cfg = ctl.NmpcConfig(horizon=8)
    cfg.stage_cost.add_states(
        ["x1", "x2"], ref=refs, weights=[10.0, 10.0], trajectory=True
    )
    cfg.stage_cost.add_inputs(["u1", "u2"], ref=0.0, weights=1e-2)
    cfg.u_bounds = ([0.0, -4.0], [4.0, 4.0])
    controller = ctl.nmpc_setup(model, cfg)

    x = np.zeros(3)
    xs = np.empty((3, steps + 1))
    us = np.empty((2, steps))
    xs[:, 0] = x
    for k in range(steps):
        t = k * dt
        u = controller.optimize(x, t0=t)
        x, _ = model.step(x, u, t=t)
        us[:, k] = u
        xs[:, k + 1] = x

    t_grid = dt * np.arange(steps + 1)
    ref_track = np.array(
        [[lgp.gp_predict(gp, [t])[0] for t in t_grid] for gp in gps]
    )
    errors = np.linalg.norm(xs[:2] - ref_track, axis=0)
    if csv_base:
        _make_trajectory(model, 0.0, dt, xs, us, ()).to_csv(f"{csv_base}_truth.csv")
    result = {
        "states": xs,
        "inputs": us,
        "reference": ref_track,
        "tracking_error": errors,
        "gp_models": gps,
    }
    log.info("robots: mean tracking error %.3g", errors[5:].mean())
    return result


# --- built-in scenario: learned spring-damper controller ---------------------


def _msd_controller(model, p):
    cfg = ctl.NmpcConfig(horizon=15)
    cfg.stage_cost.add_states(["x1", "x2"], ref=[1.0, 0.0], weights=[10.0, 1.0])
    cfg.stage_cost.add_inputs("u", ref=0.0, weights=1e-3)
    cfg.terminal_cost.add_states(["x1", "x2"], ref=[1.0, 0.0], weights=[10.0, 1.0])
    cfg.u_bounds = ([-50.0], [50.0])
    return ctl.nmpc_setup(model, cfg, p=p)


def _msd_rollout(model, controller, p, x0, steps):
    controller.reset()
    x = np.asarray(x0, dtype=float)
    xs, us = [x.copy()], []
    for k in range(steps):
        u = controller.optimize(x, t0=k * model.dt)
        x, _ = model.step(x, u, p, t=k * model.dt)
        us.append(u.copy())
        xs.append(x.copy())
    return np.array(xs).T, np.array(us).T


def run_msd(seed=0, steps=80, csv_base=None):
    """Learn the spring-damper MPC law offline, then deploy the network.

    Training data: 23 closed-loop runs of 29 steps from spread-out initial
    positions (667 state/input pairs). The 3x10 network maps (x1, x2) to u;
    the learned controller is then started from (10, 0), which is not among
    the training starts.
    """
    model = md.model_setup(ep.parse_equations(MSD_EQUATIONS), dt=0.1, name="msd")
    p = _param_vector(model, MSD_PARAMS)
    controller = _msd_controller(model, p)

    features, labels = [], []
    for x1_start in np.linspace(-2.0, 12.0, 23):
        xs, us = _msd_rollout(model, controller, p, [x1_start, 0.0], 29)
        features.append(xs[:, :-1])
        labels.append(us)
    data = Dataset(
        np.hstack(features), np.hstack(labels), ["x1", "x2"], ["u"]
    )
    log.info("msd: %d training points", data.n_d)

    spec = la.ann_init(
        2, [(10, "tanh"), (10, "tanh"), (10, "tanh"), (1, "linear")], seed=seed
    )
    spec, history = la.ann_train(
        spec, data, batch_size=32, epochs=600, seed=seed, lr=3e-3
    )

    # deploy the learned controller from the held-out start
    x = np.array([10.0, 0.0])
    xs_ann, us_ann = [x.copy()], []
    for k in range(steps):
        u = np.clip(la.ann_forward(spec, x), -50.0, 50.0)
        x, _ = model.step(x, u, p, t=k * model.dt)
        us_ann.append(u.copy())
        xs_ann.append(x.copy())
    xs_ann = np.array(xs_ann).T
    us_ann = np.array(us_ann).T
    xs_mpc, us_mpc = _msd_rollout(model, controller, p, [10.0, 0.0], steps)

    if csv_base:
        _make_trajectory(model, 0.0, model.dt, xs_ann, us_ann, p).to_csv(
            f"{csv_base}_learned.csv"
        )
        _make_trajectory(model, 0.0, model.dt, xs_mpc, us_mpc, p).to_csv(
            f"{csv_base}_exact.csv"
        )
    result = {
        "ann": spec,
        "history": history,
        "learned_states": xs_ann,
        "exact_states": xs_mpc,
        "terminal_error": np.abs(xs_ann[:, -1] - [1.0, 0.0]),
        "endpoint_gap": np.abs(xs_ann[:, -1] - xs_mpc[:, -1]),
    }
    log.info(
        "msd: learned endpoint %s, exact endpoint %s",
        xs_ann[:, -1],
        xs_mpc[:, -1],
    )
    return result


# --- built-in scenario: race car ---------------------------------------------

# oval substitute for the spline track: theta parameterizes the center line
def oval_path(theta):
    return 30 - 14 * np.cos(theta), 30 - 16 * np.sin(theta)


def path_deviation(px, py):
    """Max distance of a position trace from the oval center line."""
    th = np.linspace(-0.6, 1.8, 2400)
    ox, oy = oval_path(th)
    d = np.sqrt(
        (px[:, None] - ox[None, :]) ** 2 + (py[:, None] - oy[None, :]) ** 2
    )
    return float(d.min(axis=1).max())


_RC_STATE_NAMES = ["px", "py", "psi", "vx", "vy", "omega"]


def _race_car_models(dt):
    truth = md.model_setup(
        ep.parse_equations(RACE_CAR_EQUATIONS), dt=dt, name="race_car"
    )
    no_drag = md.model_setup(
        ep.parse_equations(RACE_CAR_NO_DRAG_EQUATIONS), dt=dt, name="race_car_no_drag"
    )
    return truth, no_drag


def _drag_training_data(truth, no_drag, params, seed, n_samples=800):
    """One-step residuals (truth minus drag-free prediction) on sampled states.

    States, inputs, and wind speeds are drawn around the operating envelope
    of the lap runs. Features are the wind speed and vx; labels are the
    corrections the drag-free one-step map needs on psi, vx, vy, omega.
    """
    rng = np.random.default_rng(seed)
    dn = md.discretize(no_drag)
    idx = [2, 3, 4, 5]
    feats, labs = [], []
    for _ in range(n_samples):
        wind = rng.uniform(0.0, 2.5)
        x = np.array(
            [
                rng.uniform(14.0, 46.0),
                rng.uniform(12.0, 48.0),
                rng.uniform(-np.pi, np.pi),
                rng.uniform(0.8, 2.2),
                -0.05 + 0.05 * rng.standard_normal(),
                0.1 + 0.05 * rng.standard_normal(),
            ]
        )
        u = np.array([rng.uniform(-0.1, 0.4), rng.uniform(0.2, 0.45)])
        pv = dict(params, v_wind=wind)
        x_next, _ = truth.step(x, u, _param_vector(truth, pv), 0.0)
        x_pred, _ = dn.step(x, u, _param_vector(no_drag, pv), 0.0)
        feats.append([wind, x[3]])
        labs.append(x_next[idx] - x_pred[idx])
    return Dataset(
        np.array(feats).T,
        np.array(labs).T,
        ["v_wind", "vx"],
        ["dpsi", "dvx", "dvy", "domega"],
    )


def _drag_corrected_model(dt=0.05, seed=0):
    """Drag-free single-track model plus a trained additive correction net."""
    truth, no_drag = _race_car_models(dt)
    data = _drag_training_data(truth, no_drag, RACE_CAR_PARAMS, seed)
    spec = la.ann_init(2, [(10, "tanh"), (10, "tanh"), (4, "linear")], seed=seed)
    spec, _ = la.ann_train(spec, data, batch_size=32, epochs=400, seed=seed, lr=3e-3)
    B = np.zeros((4, 6))
    for row, col in enumerate([2, 3, 4, 5]):
        B[row, col] = 1.0
    return hybridize(
        md.discretize(no_drag), spec, "additive", ["v_wind", "vx"], B=B
    )


def _race_car_controller(model, p):
    cfg = ctl.NmpcConfig(horizon=16)
    theta = cfg.create_path_variable()
    cfg.stage_cost.add_states(
        ["px", "py"],
        ref=[30 - 14 * eg.cos(theta), 30 - 16 * eg.sin(theta)],
        weights=[8.0, 8.0],
        path_following=True,
    )
    cfg.stage_cost.add_states("vx", ref=1.5, weights=2.0)
    cfg.stage_cost.add_inputs(["d", "delta"], ref=0.0, weights=1e-2)
    cfg.u_bounds = ([-1.0, -0.5], [1.0, 0.5])
    cfg.set_path_input(u_pf_min=0.0, u_pf_max=0.3, ref=0.095, weight=2.0)
    controller = ctl.nmpc_setup(model, cfg, p=p)
    # the stiff tire dynamics slow tail convergence; loop-level accuracy
    # does not need the last three digits of the KKT residual
    controller.sqp_settings = nlp.SqpSettings(kkt_tol=1e-4, max_iter=200)
    return controller


RACE_CAR_VARIANTS = ("perfect", "hybrid", "no_drag")


def run_race_car(variant, seed=0, wind=1.0, steps=100, csv_base=None):
    """Path-following lap segment with UKF state estimation under noise.

    The plant always carries the lateral wind drag; the controller and
    filter use the perfect model, the drag-free model, or the drag-free
    model plus the learned correction, depending on ``variant``.
    """
    if variant not in RACE_CAR_VARIANTS:
        raise ValidationError("variant", f"unknown race-car variant {variant!r}")
    dt = 0.05
    truth, no_drag = _race_car_models(dt)
    params = dict(RACE_CAR_PARAMS, v_wind=wind)
    p_truth = _param_vector(truth, params)

    if variant == "perfect":
        cmodel = truth
    elif variant == "no_drag":
        cmodel = no_drag
    else:
        cmodel = _drag_corrected_model(dt=dt, seed=seed)
    p_ctl = _param_vector(cmodel, params)
    controller = _race_car_controller(cmodel, p_ctl)
    dmodel = cmodel if cmodel.time_domain == "discrete" else md.discretize(cmodel)

    rng = np.random.default_rng(seed)
    noise_std = np.array([0.01, 0.01, 0.005, 0.01, 0.01, 0.01])
    x = np.array([16.0, 30.0, -np.pi / 2, 1.5, 0.0, 0.0])
    # position channels of Q are inflated so the filter discounts the slow
    # position bias a mismatched prediction model accumulates, instead of
    # folding it into the state estimate
    filt = est.FilterState(
        x=x.copy(),
        P=1e-3 * np.eye(6),
        Q=np.diag([5e-5, 5e-5, 1e-5, 1e-5, 1e-5, 1e-5]),
        R=np.diag(noise_std**2),
    )
    ukf = est.UkfParams()

    xs = np.empty((6, steps + 1))
    us = np.empty((2, steps))
    xs[:, 0] = x
    u_prev = np.zeros(2)
    for k in range(steps):
        t = k * dt
        y = x + noise_std * rng.standard_normal(6)
        if k > 0:
            filt = est.ukf_step(filt, dmodel, ukf, u_prev, y, p=p_ctl, t=t - dt)
        u = controller.optimize(filt.x, t0=t)
        x, _ = truth.step(x, u, p_truth, t)
        us[:, k] = u
        u_prev = u
        xs[:, k + 1] = x

    deviation = path_deviation(xs[0], xs[1])
    if csv_base:
        _make_trajectory(truth, 0.0, dt, xs, us, p_truth).to_csv(
            f"{csv_base}_{variant}.csv"
        )
    log.info("race car %s: max path deviation %.3g", variant, deviation)
    return {"variant": variant, "states": xs, "inputs": us, "deviation": deviation}


# --- training and codegen entry points ---------------------------------------


def train_ann_from_config(config):
    _reject_unknown(
        config,
        {
            "data",
            "features",
            "labels",
            "layers",
            "epochs",
            "batch_size",
            "seed",
            "out",
        },
        "train-ann",
    )
    for key in ("data", "features", "labels", "layers", "out"):
        if key not in config:
            raise ValidationError(f"train-ann.{key}", "required key missing")
    data = Dataset.from_csv(config["data"], config["features"], config["labels"])
    layers = [(int(w), str(act)) for w, act in config["layers"]]
    spec = la.ann_init(data.n_v, layers, seed=config.get("seed"))
    spec, history = la.ann_train(
        spec,
        data,
        batch_size=int(config.get("batch_size", 32)),
        epochs=int(config.get("epochs", 300)),
        seed=config.get("seed"),
    )
    la.save_ann(spec, config["out"])
    log.info("trained network saved to %s", config["out"])
    return spec, history


def train_gp_from_config(config):
    _reject_unknown(
        config,
        {
            "data",
            "features",
            "labels",
            "variance",
            "lengthscales",
            "noise_variance",
            "restarts",
            "seed",
            "out",
        },
        "train-gp",
    )
    for key in ("data", "features", "labels", "out"):
        if key not in config:
            raise ValidationError(f"train-gp.{key}", "required key missing")
    if len(config["labels"]) != 1:
        raise ValidationError("train-gp.labels", "GP regression takes one label")
    data = Dataset.from_csv(config["data"], config["features"], config["labels"])
    kernel = lgp.SquaredExponential(
        variance=float(config.get("variance", 1.0)),
        lengthscales=config.get("lengthscales", 1.0),
        n_dim=data.n_v,
    )
    gp = lgp.GpModel(
        kernel,
        data.features,
        data.labels[0],
        noise_variance=float(config.get("noise_variance", 1e-4)),
        prior_mean=float(data.labels[0].mean()),
    )
    gp = lgp.gp_fit(
        gp, restarts=int(config.get("restarts", 2)), seed=config.get("seed")
    )
    lgp.save_gp(gp, config["out"])
    log.info("trained GP saved to %s", config["out"])
    return gp


def codegen_from_config(source, out_dir, float_type="double"):
    """Generate the embedded solver tree from a spec file or builtin name."""
    if source == "lateral_lti":
        spec = emb.lateral_lti_spec()
        inner, outer, seed = 10, 5, 2024
    else:
        with open(source) as fh:
            raw = yaml.safe_load(fh)
        _reject_unknown(
            raw,
            {"A", "B", "Q", "R", "P", "N", "u_lo", "u_hi", "x_lo", "x_hi",
             "inner", "outer", "seed"},
            "codegen",
        )
        for key in ("A", "B", "Q", "R", "N"):
            if key not in raw:
                raise ValidationError(f"codegen.{key}", "required key missing")
        n_x = len(raw["A"])
        n_u = len(raw["B"][0])
        big = [1e30] * n_x
        spec = emb.LtiMpcSpec(
            A=raw["A"],
            B=raw["B"],
            Q=raw["Q"],
            R=raw["R"],
            P=raw.get("P", raw["Q"]),
            N=int(raw["N"]),
            u_lo=raw.get("u_lo", [-1e30] * n_u),
            u_hi=raw.get("u_hi", [1e30] * n_u),
            x_lo=raw.get("x_lo", [-b for b in big]),
            x_hi=raw.get("x_hi", big),
        )
        inner = int(raw.get("inner", 10))
        outer = int(raw.get("outer", 5))
        seed = int(raw.get("seed", 2024))
    qp = emb.condense(spec)
    settings = emb.AlmFgmSettings.for_qp(qp, inner=inner, outer=outer)
    emb.generate_runtime(
        qp, settings, out_dir, float_type=float_type, manifest_seed=seed
    )
    log.info("generated solver written to %s", out_dir)
    return out_dir


# --- command line ------------------------------------------------------------

_EXAMPLES = {
    "bike": lambda seed, out: run_bike(seed=seed, csv_base=out),
    "robots": lambda seed, out: run_robots(seed=seed, csv_base=out),
    "msd": lambda seed, out: run_msd(seed=seed, csv_base=out),
    "race_car": lambda seed, out: {
        v: run_race_car(v, seed=seed, csv_base=out) for v in RACE_CAR_VARIANTS
    },
    "lateral_lti": lambda seed, out: codegen_from_config(
        "lateral_lti", out or "generated_mpc"
    ),
}


def _configure_logging():
    level = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}[
        os.environ.get("MLMPC_LOG", "quiet")
    ]
    logging.basicConfig(level=level, format="%(name)s: %(message)s")
    log.setLevel(level)


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="mlmpc", description="MPC/estimation toolkit command line"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a scenario file")
    sim.add_argument("scenario")
    sim.add_argument("--csv", default=None, help="base path for output CSVs")

    for name in ("train-ann", "train-gp"):
        tp = sub.add_parser(name, help=f"{name.split('-')[1].upper()} training")
        tp.add_argument("config")

    cg = sub.add_parser("codegen", help="emit the embedded solver sources")
    cg.add_argument("--spec", required=True,
                    help="codegen spec file, or the builtin name lateral_lti")
    cg.add_argument("--out", required=True)
    cg.add_argument("--float", dest="float_type", default="double",
                    choices=("single", "double"))

    ex = sub.add_parser("example", help="run a built-in example")
    ex.add_argument("name", choices=sorted(_EXAMPLES))
    ex.add_argument("--seed", type=int, default=0)
    ex.add_argument("--out", default=None, help="base path for output CSVs")
    return parser


def main(argv=None):
    _configure_logging()
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            result = run_scenario(args.scenario, csv_base=args.csv)
            print(f"ran {result['steps']} steps; "
                  f"terminal state {result['terminal_state']}")
        elif args.command == "train-ann":
            with open(args.config) as fh:
                train_ann_from_config(yaml.safe_load(fh))
        elif args.command == "train-gp":
            with open(args.config) as fh:
                train_gp_from_config(yaml.safe_load(fh))
        elif args.command == "codegen":
            codegen_from_config(args.spec, args.out, args.float_type)
        elif args.command == "example":
            _EXAMPLES[args.name](args.seed, args.out)
    except (ValidationError, ScenarioRuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
