"""Acceptance gate: one test per release criterion, each at its stated
tolerance. Run with ``pytest -v tests/test_acceptance.py`` to get one
pass/fail line per criterion; each test also prints a summary line.

The oracles here are deliberately independent of the implementation under
test: finite differences, brute-force active-set enumeration, closed-form
hand values, textbook filter recursions, and (for the generated C runtime)
a differential run against the host solver.
"""
import filecmp
import math
import shutil
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from mlmpc import cli
from mlmpc import control as ctl
from mlmpc import embedded as emb
from mlmpc import eqparser as ep
from mlmpc import estimation as est
from mlmpc import exprgraph as eg
from mlmpc import model as md
from mlmpc import nlp
from mlmpc.learning import gp as lgp

ROOT = Path(__file__).resolve().parent.parent


def _report(number, name):
    print(f"criterion {number:2d} ({name}): pass")


# --- 1: reverse-mode gradients vs central finite differences -----------------


def _random_expression(rng, variables, depth=0):
    unary_ops = [eg.sin, eg.cos, eg.tanh, eg.arctan, lambda e: eg.exp(0.3 * e)]
    if depth >= 4 or (depth > 1 and rng.random() < 0.3):
        if rng.random() < 0.7:
            return eg.Var(variables[rng.integers(len(variables))])
        return eg.as_expr(float(rng.uniform(-2, 2)))
    roll = rng.random()
    if roll < 0.4:
        return unary_ops[rng.integers(len(unary_ops))](
            _random_expression(rng, variables, depth + 1)
        )
    a = _random_expression(rng, variables, depth + 1)
    b = _random_expression(rng, variables, depth + 1)
    return [a + b, a - b, a * b][rng.integers(3)]


def test_criterion_01_autodiff_matches_finite_differences():
    rng = np.random.default_rng(2024)
    t_start = time.perf_counter()
    checked = 0
    while checked < 100:
        n = int(rng.integers(2, 6))
        variables = [eg.Variable(f"v{i}", "state", i) for i in range(n)]
        expr = _random_expression(rng, variables)
        free = sorted(eg.free_variables(expr), key=lambda v: v.name)
        if not free:
            continue
        point = {v: float(rng.uniform(-1.5, 1.5)) for v in free}
        grads = eg.gradient(expr, free)
        h = 1e-6
        for v, g in zip(free, grads):
            up = dict(point)
            up[v] = point[v] + h
            dn = dict(point)
            dn[v] = point[v] - h
            fd = (eg.evaluate(expr, up) - eg.evaluate(expr, dn)) / (2 * h)
            g_val = eg.evaluate(g, point)
            assert abs(g_val - fd) <= 1e-6 * max(1.0, abs(g_val))
        checked += 1
    elapsed = time.perf_counter() - t_start
    assert elapsed < 5.0
    _report(1, "autodiff vs central differences, 100 expressions")


# --- 2: integrator order -----------------------------------------------------


def test_criterion_02_rk4_accuracy_and_order():
    def err(dt):
        m = md.model_setup(ep.parse_equations("dx/dt = -x(t)"), dt=dt)
        steps = round(1.0 / dt)
        traj = md.simulate(m, [1.0], np.zeros((0, steps)), steps=steps)
        return abs(traj.x[0, -1] - math.exp(-1.0))

    assert err(0.01) <= 1e-8
    ratio = err(0.01) / err(0.005)
    assert 14 <= ratio <= 18
    _report(2, "RK4 error 1e-8 at dt=0.01, halving ratio in [14,18]")


# --- 3: equation parser on the bike model ------------------------------------


def test_criterion_03_parser_bike_structure_and_round_trip():
    pm = ep.parse_equations(cli.BIKE_EQUATIONS)
    assert len(pm.odes) == 4
    assert len(pm.algebraics) == 1
    assert set(pm.inputs) == {"a", "delta"}
    assert set(pm.parameters) == {"lr", "lf"}

    pm2 = ep.parse_equations(ep.print_equations(pm))
    assert [n for n, _ in pm2.odes] == [n for n, _ in pm.odes]
    assert pm2.algebraic_names == pm.algebraic_names
    assert set(pm2.inputs) == set(pm.inputs)
    assert set(pm2.parameters) == set(pm.parameters)
    rng = np.random.default_rng(3)
    values = {name: float(rng.uniform(0.2, 1.0)) for name in sorted(pm.symbols)}
    b1 = {sym: values[name] for name, sym in pm.symbols.items()}
    b2 = {sym: values[name] for name, sym in pm2.symbols.items()}
    for (n1, e1), (n2, e2) in zip(pm.odes, pm2.odes):
        assert n1 == n2
        assert eg.evaluate(e1, b1) == pytest.approx(eg.evaluate(e2, b2), rel=1e-12)
    _report(3, "bike equations parse structure and round-trip")


# --- 4: QP solver vs active-set enumeration oracle ---------------------------


def _enumerate_box_qp(H, g, lo, hi):
    """Try all 3^n lower/upper/inactive patterns; keep the KKT-consistent
    minimum. Independent brute-force oracle."""
    n = len(g)
    best, best_val = None, np.inf
    for code in range(3**n):
        pattern, c = [], code
        for _ in range(n):
            pattern.append(c % 3)
            c //= 3
        act = [j for j in range(n) if pattern[j] != 0]
        fixed = np.array([lo[j] if pattern[j] == 1 else hi[j] for j in act])
        free = [j for j in range(n) if pattern[j] == 0]
        x = np.empty(n)
        for idx, j in enumerate(act):
            x[j] = fixed[idx]
        if free:
            rhs = -g[free] - H[np.ix_(free, act)] @ fixed if act else -g[free]
            try:
                x[free] = np.linalg.solve(H[np.ix_(free, free)], rhs)
            except np.linalg.LinAlgError:
                continue
        if np.any(x < lo - 1e-9) or np.any(x > hi + 1e-9):
            continue
        grad = H @ x + g
        ok = True
        for j in act:
            if pattern[j] == 1 and grad[j] < -1e-9:
                ok = False
            if pattern[j] == 2 and grad[j] > 1e-9:
                ok = False
        if not ok:
            continue
        val = 0.5 * x @ H @ x + g @ x
        if val < best_val - 1e-12:
            best_val, best = val, x
    return best


def test_criterion_04_qp_matches_enumeration_oracle():
    rng = np.random.default_rng(44)
    t_start = time.perf_counter()
    for case in range(200):
        n = int(rng.integers(1, 7))
        M = rng.standard_normal((n, n))
        H = M @ M.T + n * np.eye(n)
        g = rng.standard_normal(n)
        if case % 4 == 0:
            # equality-constrained: oracle is the KKT factorization
            m_eq = int(rng.integers(1, n + 1))
            A = rng.standard_normal((m_eq, n))
            b = rng.standard_normal(m_eq)
            kkt = np.block([[H, A.T], [A, np.zeros((m_eq, m_eq))]])
            x_ref = np.linalg.solve(kkt, np.concatenate([-g, b]))[:n]
            res = nlp.solve_qp(nlp.DenseQp(H=H, g=g, A_eq=A, b_eq=b))
        else:
            lb = -rng.uniform(0.1, 1.0, n)
            ub = rng.uniform(0.1, 1.0, n)
            x_ref = _enumerate_box_qp(H, g, lb, ub)
            res = nlp.solve_qp(nlp.DenseQp(H=H, g=g, lb=lb, ub=ub))
        assert np.allclose(res.x, x_ref, atol=1e-6)
    assert time.perf_counter() - t_start < 30.0
    _report(4, "200 QPs vs active-set enumeration / KKT oracle")


# --- 5: SQP battery ----------------------------------------------------------


def test_criterion_05_sqp_battery():
    xs = [eg.Variable(n, "state", i) for i, n in enumerate(("a", "b"))]
    a, b = (eg.Var(v) for v in xs)

    prob = nlp.NlpProblem(
        variables=xs,
        objective=(a - 2) * (a - 2) + (b - 2) * (b - 2),
        eq_constraints=[a + b - 1],
        residuals=[(1.0, a - 2), (1.0, b - 2)],
    )
    res = nlp.solve_sqp(prob, [0.0, 0.0])
    assert res.status == "solved"
    assert res.kkt_residual <= 1e-6
    assert np.allclose(res.x, [0.5, 0.5], atol=1e-6)

    r1, r2 = 10 * (b - a * a), 1 - a
    rosen = nlp.NlpProblem(
        variables=xs,
        objective=r1 * r1 + r2 * r2,
        residuals=[(1.0, r1), (1.0, r2)],
    )
    res = nlp.solve_sqp(rosen, [-1.2, 1.0])
    assert res.status == "solved"
    assert res.kkt_residual <= 1e-6
    assert np.allclose(res.x, [1.0, 1.0], atol=1e-6)
    _report(5, "SQP equality battery and Rosenbrock to (1,1)")


# --- 6: NMPC speed setpoint --------------------------------------------------


def test_criterion_06_nmpc_speed_setpoint():
    t_start = time.perf_counter()
    out = cli.run_bike(steps=100)
    v = out["states"][2]
    assert np.all(np.abs(v[60:] - 2.0) < 0.05)
    assert time.perf_counter() - t_start < 60.0
    _report(6, "bike closed loop |v-2| < 0.05 from step 60")


# --- 7: path following and soft constraints ----------------------------------


def test_criterion_07_path_mode_theta_monotone_and_soft_slacks():
    # path-mode bike: theta nondecreasing inside every solution
    m = md.model_setup(ep.parse_equations(cli.BIKE_EQUATIONS), dt=0.05)
    p = [1.4 if v.name == "lr" else 1.8 for v in m.parameters]
    cfg = ctl.NmpcConfig(horizon=10)
    theta = cfg.create_path_variable()
    cfg.stage_cost.add_states(
        ["px", "py"], ref=[theta, 0.1 * theta], weights=[5.0, 5.0],
        path_following=True,
    )
    cfg.stage_cost.add_inputs(["a", "delta"], ref=[0.0, 0.0],
                              weights=[0.01, 0.01])
    cfg.set_path_input(u_pf_min=0.0, ref=1.0, weight=0.5)
    cfg.u_bounds = ([-2.0, -0.5], [2.0, 0.5])
    c = ctl.nmpc_setup(m, cfg, p=p)
    x = np.zeros(4)
    for k in range(8):
        u = c.optimize(x, t0=0.05 * k, on_failure="raise")
        th = c.prediction.x[c.dmodel.n_x - 1]
        assert np.all(np.diff(th) >= -1e-12)
        x, _ = m.step(x, u, p, t=0.05 * k)

    # feasible soft constraint, slack weight 1e8 >= 1e6 * max cost weight (1)
    mi = md.model_setup(ep.parse_equations("dx/dt = u(k)"), dt=0.5)
    cfg = ctl.NmpcConfig(horizon=5)
    cfg.stage_cost.add_states("x", ref=10.0, weights=1.0)
    cfg.stage_cost.add_inputs("u", ref=0.0, weights=1.0)
    x_var = eg.Var(mi.states[0])
    cfg.add_stage_constraint(x_var, hi=2.0, soft=ctl.SoftSettings(weight=1e8))
    cfg.add_terminal_constraint(x_var, hi=2.0, soft=ctl.SoftSettings(weight=1e8))
    c = ctl.nmpc_setup(mi, cfg)
    c.optimize([0.0], on_failure="raise")
    sol = c.last_result.x
    slack_idx = [i for i, v in enumerate(c.tr.variables)
                 if v.name.startswith("eps_")]
    assert slack_idx
    assert np.all(np.abs(sol[slack_idx]) <= 1e-6)
    _report(7, "theta monotone per solve; feasible soft slacks <= 1e-6")


# --- 8: Gaussian process suite -----------------------------------------------


def test_criterion_08_gp_suite():
    # closed-form single-point log marginal likelihood
    gp0 = lgp.GpModel(lgp.SquaredExponential(1.0, 1.0), [[0.0]], [0.0],
                      noise_variance=1.0)
    assert lgp.gp_log_marginal_likelihood(gp0) == pytest.approx(
        -1.2655121, abs=1e-6
    )

    rng = np.random.default_rng(8)
    V = rng.uniform(-2, 2, (2, 12))
    y = np.sin(V[0]) + 0.5 * V[1]
    gp = lgp.GpModel(lgp.SquaredExponential(1.5, [0.8, 1.2]), V, y,
                     noise_variance=1e-12)

    # noiseless interpolation at every training point
    for i in range(V.shape[1]):
        mean, _ = lgp.gp_predict(gp, V[:, i])
        assert abs(mean - y[i]) <= 1e-6

    # LML gradient vs finite differences in log-parameter space
    gp_n = lgp.GpModel(lgp.SquaredExponential(1.5, [0.8, 1.2]), V, y,
                       noise_variance=0.05)
    grad = lgp.gp_lml_gradient(gp_n)
    theta0 = np.concatenate(
        [gp_n.kernel.log_params(), [math.log(gp_n.noise_variance)]]
    )
    h = 1e-6
    for j in range(theta0.size):
        fd_vals = []
        for sign in (+1, -1):
            th = theta0.copy()
            th[j] += sign * h
            probe = lgp.GpModel(
                lgp.SquaredExponential(1.5, [0.8, 1.2]), V, y,
                noise_variance=math.exp(th[-1]),
            )
            probe.kernel.set_log_params(th[:-1])
            probe.refresh()
            fd_vals.append(lgp.gp_log_marginal_likelihood(probe))
        fd = (fd_vals[0] - fd_vals[1]) / (2 * h)
        assert abs(grad[j] - fd) <= 1e-5 * max(1.0, abs(fd))

    # posterior variance is nonnegative before clamping
    for _ in range(50):
        w = rng.uniform(-3, 3, 2)
        _, _, raw = lgp.gp_predict(gp, w, return_raw_variance=True)
        assert raw >= -1e-10
    _report(8, "GP closed-form LML, interpolation, gradient, variance")


# --- 9: filters --------------------------------------------------------------


def test_criterion_09_filters():
    # scalar hand values: P 1 -> 0.5, gain 0.5
    s = est.FilterState(x=[0.0], P=[[1.0]], Q=[[0.0]], R=[[1.0]])
    out = est.kf_step(s, A=[[1.0]], B=[[0.0]], C=[[1.0]], u=[0.0], y=[0.0])
    assert abs(out.P[0, 0] - 0.5) <= 1e-12
    out2 = est.kf_step(s, A=[[1.0]], B=[[0.0]], C=[[1.0]], u=[0.0], y=[1.0])
    assert abs(out2.x[0] - 0.5) <= 1e-12

    # UKF equals KF on a linear Gaussian system; covariances stay sym. PSD
    A = np.array([[0.95, 0.1], [0.0, 0.9]])
    B = np.array([[0.0], [0.5]])
    C = np.array([[1.0, 0.0]])
    states = [eg.Variable(f"x{i}", "state", i) for i in range(2)]
    inputs = [eg.Variable("u0", "input", 0)]
    xs = [eg.Var(v) for v in states]
    u0 = eg.Var(inputs[0])
    m = md.Model(
        states=states,
        odes=[0.95 * xs[0] + 0.1 * xs[1], 0.9 * xs[1] + 0.5 * u0],
        inputs=inputs,
        dt=1.0,
        discrete=True,
        measurements=[1.0 * xs[0]],
    )
    Q = 0.05 * np.eye(2)
    R = np.array([[0.2]])
    kf = est.FilterState(x=[1.0, 0.0], P=np.eye(2), Q=Q, R=R)
    uk = est.FilterState(x=[1.0, 0.0], P=np.eye(2), Q=Q, R=R)
    params = est.UkfParams()
    rng = np.random.default_rng(11)
    for _ in range(50):
        u = rng.normal(size=1)
        y = rng.normal(size=1)
        kf = est.kf_step(kf, A, B, C, u, y)
        uk = est.ukf_step(uk, m, params, u, y)
        assert np.allclose(uk.x, kf.x, atol=1e-8)
        assert np.allclose(uk.P, kf.P, atol=1e-8)
        for P in (kf.P, uk.P):
            assert np.max(np.abs(P - P.T)) <= 1e-12
            assert np.linalg.eigvalsh(P).min() >= -1e-10
    _report(9, "KF hand values, UKF = KF linear, covariances PSD")


# --- 10: moving-horizon estimation -------------------------------------------


def test_criterion_10_mhe():
    m = md.model_setup(ep.parse_equations(cli.BIKE_EQUATIONS), dt=0.05)
    p = [1.4 if v.name == "lr" else 1.8 for v in m.parameters]
    dm = md.discretize(m, "rk4")
    window = 5
    # small arrival weight: the noiseless window determines the state, so
    # the deliberately wrong initial guess is forgotten within one window
    cfg = est.MheConfig(window=window, R=10.0, W=10.0, P_arrival=1e-8,
                        x_guess=[0.5, -0.5, 0.5, 0.0])
    mhe = est.Mhe(dm, cfg, p=p)
    x = np.array([0.0, 0.0, 1.0, 0.1])
    rng = np.random.default_rng(9)
    mhe.add_measurement(dm.measure(x, [0.0, 0.0], p))
    for k in range(2 * window):
        u = np.array([0.2 * rng.standard_normal(),
                      0.05 * rng.standard_normal()])
        x = dm.step(x, u, p, t=0.05 * k)[0]
        xhat = mhe.step(dm.measure(x, u, p), u)
        assert mhe.status == "solved"
        if k >= window:  # within one full window of noiseless data
            assert np.max(np.abs(xhat - x)) < 1e-6

    # scalar parameter recovery vs the log-linear regression oracle
    m1 = md.model_setup(ep.parse_equations("dx/dt = -p_d*x(t)"), dt=0.1)
    dm1 = md.discretize(m1, "rk4")
    p_true = 0.5
    xs = [np.array([2.0])]
    for k in range(8):
        xs.append(dm1.step(xs[-1], [], [p_true], t=0.1 * k)[0])
    vals = np.array([x[0] for x in xs])
    p_oracle = -np.polyfit(0.1 * np.arange(vals.size), np.log(vals), 1)[0]
    cfg = est.MheConfig(window=8, estimate_parameters=True, x_guess=[2.0],
                        p_guess=[1.0], P_arrival=[10.0, 1e-6])
    _, phat, _ = est.mhe_estimate(dm1, cfg, xs, [[]] * 8)
    assert abs(phat[0] - p_oracle) <= 1e-4
    _report(10, "MHE noiseless bike < 1e-6; parameter vs LS oracle")


# --- 11: embedded host path --------------------------------------------------


def test_criterion_11_embedded_host_path():
    rng = np.random.default_rng(8)
    for _ in range(10):
        n_x, n_u, N = int(rng.integers(1, 4)), int(rng.integers(1, 3)), 4
        spec = emb.LtiMpcSpec(
            A=rng.normal(size=(n_x, n_x)) * 0.5,
            B=rng.normal(size=(n_x, n_u)),
            Q=np.diag(rng.uniform(0.5, 2.0, n_x)),
            R=np.diag(rng.uniform(0.5, 2.0, n_u)),
            P=np.diag(rng.uniform(0.5, 2.0, n_x)),
            N=N,
            u_lo=[-1.0] * n_u, u_hi=[1.0] * n_u,
            x_lo=[-np.inf] * n_x, x_hi=[np.inf] * n_x,
        )
        qp = emb.condense(spec)
        x = rng.normal(size=n_x)
        u = rng.normal(size=N * n_u)
        lhs = 0.5 * u @ qp.H @ u + u @ qp.gradient(x)
        xs, obj = x.copy(), 0.0
        for j in range(N):
            uj = u[j * n_u:(j + 1) * n_u]
            obj += uj @ spec.R @ uj
            xs = spec.A @ xs + spec.B @ uj
            W = spec.P if j == N - 1 else spec.Q
            obj += xs @ W @ xs
        xs0, c0 = x.copy(), 0.0
        for j in range(N):
            xs0 = spec.A @ xs0
            W = spec.P if j == N - 1 else spec.Q
            c0 += xs0 @ W @ xs0
        assert lhs + c0 == pytest.approx(obj, abs=1e-9 * max(1.0, abs(obj)))

    # fixed-iteration first input vs the dense QP solver on the demo problem
    qp = emb.condense(emb.lateral_lti_spec())
    settings = emb.AlmFgmSettings.for_qp(qp, inner=200, outer=40)
    rng = np.random.default_rng(17)
    for _ in range(20):
        x = np.array([0.4 * rng.standard_normal(),
                      0.05 * (2 * rng.random() - 1),
                      0.05 * rng.standard_normal()])
        res = emb.alm_fgm_solve(qp, x, settings)
        z_lo, z_hi = qp.bounds(x)
        finite = np.isfinite(z_lo) | np.isfinite(z_hi)
        dense = nlp.DenseQp(
            H=qp.H, g=qp.gradient(x),
            A_in=qp.E[finite], lb_in=z_lo[finite], ub_in=z_hi[finite],
            lb=qp.u_lo, ub=qp.u_hi,
        )
        u0_ref = nlp.solve_qp(dense).x[: qp.n_u]
        assert np.allclose(res.u0, u0_ref, atol=1e-4)
        assert np.all(res.u >= qp.u_lo)
        assert np.all(res.u <= qp.u_hi)
    _report(11, "condensed identity 1e-9; ALM/FGM vs dense QP 1e-4")


# --- 12: example reproductions -----------------------------------------------


@pytest.fixture(scope="module")
def race_car_runs():
    return {v: cli.run_race_car(v) for v in cli.RACE_CAR_VARIANTS}


def test_criterion_12_examples(race_car_runs):
    d = {v: r["deviation"] for v, r in race_car_runs.items()}
    assert d["hybrid"] <= 1.5 * d["perfect"], d
    assert d["no_drag"] >= 3.0 * d["perfect"], d

    msd = cli.run_msd()
    assert np.max(msd["terminal_error"]) <= 0.05
    assert np.max(msd["endpoint_gap"]) <= 0.1
    _report(12, "race-car deviation ordering; msd learned controller")


# --- 13: generated C runtime -------------------------------------------------


@pytest.mark.skipif(
    shutil.which("gcc") is None or shutil.which("make") is None,
    reason="needs a C toolchain and make",
)
def test_criterion_13_generated_runtime(tmp_path):
    def codegen(out, float_type):
        subprocess.run(
            [sys.executable, "-m", "mlmpc", "codegen", "--spec", "lateral_lti",
             "--out", str(out), "--float", float_type],
            check=True, cwd=ROOT,
        )

    work = tmp_path / "runtime"
    shutil.copytree(ROOT / "runtime", work,
                    ignore=shutil.ignore_patterns("run"))
    for float_type in ("double", "single"):
        gen = tmp_path / float_type
        codegen(gen, float_type)
        subprocess.run(
            [shutil.which("make"), f"GEN={gen}",
             f"TEMPLATES={ROOT / 'src/mlmpc/templates'}", "-B",
             "conformance", "sil"],
            check=True, cwd=work, stdout=subprocess.PIPE,
        )
        out = subprocess.run(
            [str(work / "conformance"), str(gen / "mpc_conformance.txt")],
            capture_output=True, text=True,
        )
        assert out.returncode == 0, out.stdout + out.stderr
        assert "20/20 vectors pass" in out.stdout

    # 100-step SIL (double build from the last loop iteration is single;
    # rebuild double for the host comparison)
    gen = tmp_path / "double"
    subprocess.run(
        [shutil.which("make"), f"GEN={gen}",
         f"TEMPLATES={ROOT / 'src/mlmpc/templates'}", "-B", "sil"],
        check=True, cwd=work, stdout=subprocess.PIPE,
    )
    x0 = [0.1, 0.05, 0.0]
    out = subprocess.run(
        [str(work / "sil"), "100"] + [repr(v) for v in x0],
        capture_output=True, text=True, check=True,
    )
    rows = np.array([[float(v) for v in line.split(",")[1:]]
                     for line in out.stdout.strip().splitlines()[1:]])
    spec = emb.lateral_lti_spec()
    qp = emb.condense(spec)
    settings = emb.AlmFgmSettings.for_qp(qp, inner=10, outer=5)
    x, res = np.array(x0), None
    for k in range(100):
        res = emb.alm_fgm_solve(qp, x, settings, warm_start=res)
        assert np.max(np.abs(rows[k, :3] - x)) < 1e-3
        assert np.max(np.abs(rows[k, 3:] - res.u0)) < 1e-3
        x = spec.A @ x + spec.B @ res.u0
    assert np.all(np.abs(rows[:, 3]) <= 0.1 + 1e-12)

    # regeneration is byte-identical
    again = tmp_path / "again"
    codegen(again, "double")
    names = sorted(p.name for p in gen.iterdir())
    match, mismatch, errors = filecmp.cmpfiles(gen, again, names,
                                               shallow=False)
    assert not mismatch and not errors
    _report(13, "conformance, SIL vs host, byte-stable regeneration")
