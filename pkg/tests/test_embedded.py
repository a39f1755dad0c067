import os

import numpy as np
import pytest

from mlmpc import embedded as emb
from mlmpc import nlp


def _random_spec(rng, n_x=None, n_u=None, N=None, bounded=True):
    n_x = n_x or rng.integers(1, 4)
    n_u = n_u or rng.integers(1, 3)
    N = N or rng.integers(2, 6)
    A = rng.normal(size=(n_x, n_x)) * 0.5
    B = rng.normal(size=(n_x, n_u))
    q = rng.uniform(0.5, 2.0, n_x)
    r = rng.uniform(0.5, 2.0, n_u)
    return emb.LtiMpcSpec(
        A=A, B=B, Q=np.diag(q), R=np.diag(r), P=np.diag(q), N=int(N),
        u_lo=[-1.0] * n_u if bounded else [-np.inf] * n_u,
        u_hi=[1.0] * n_u if bounded else [np.inf] * n_u,
        x_lo=[-np.inf] * n_x, x_hi=[np.inf] * n_x,
    )


def _sparse_kkt_input(spec, x0):
    """Batch QP oracle: keep states as variables, solve the KKT system of
    min sum x'Qx + u'Ru + x_N'Px_N  s.t. dynamics (factor matches H = 2(...))."""
    n_x, n_u, N = spec.n_x, spec.n_u, spec.N
    n = N * n_u + N * n_x  # u_0..u_{N-1}, x_1..x_N

    H = np.zeros((n, n))
    for i in range(N):
        H[i * n_u : (i + 1) * n_u, i * n_u : (i + 1) * n_u] = 2 * spec.R
    off = N * n_u
    for j in range(N - 1):
        H[off + j * n_x : off + (j + 1) * n_x,
          off + j * n_x : off + (j + 1) * n_x] = 2 * spec.Q
    H[off + (N - 1) * n_x :, off + (N - 1) * n_x :] = 2 * spec.P

    A = np.zeros((N * n_x, n))
    b = np.zeros(N * n_x)
    for j in range(N):
        rows = slice(j * n_x, (j + 1) * n_x)
        A[rows, j * n_u : (j + 1) * n_u] = spec.B
        A[rows, off + j * n_x : off + (j + 1) * n_x] = -np.eye(n_x)
        if j == 0:
            b[rows] = -spec.A @ x0
        else:
            A[rows, off + (j - 1) * n_x : off + j * n_x] = spec.A
    kkt = np.block([[H, A.T], [A, np.zeros((N * n_x, N * n_x))]])
    rhs = np.concatenate([np.zeros(n), b])
    sol = np.linalg.solve(kkt, rhs)
    return sol[:n_u]


# --- condensation ------------------------------------------------------------


def test_condense_two_step_scalar_hand_values():
    spec = emb.LtiMpcSpec(A=[[1.0]], B=[[1.0]], Q=[[1.0]], R=[[1.0]],
                          P=[[1.0]], N=2, u_lo=[-1], u_hi=[1],
                          x_lo=[-np.inf], x_hi=[np.inf])
    qp = emb.condense(spec)
    assert np.allclose(qp.H, 2 * np.array([[3.0, 1.0], [1.0, 2.0]]), atol=1e-14)
    assert np.allclose(qp.G, 2 * np.array([[2.0], [1.0]]), atol=1e-14)
    assert np.allclose(qp.E, [[1.0, 0.0], [1.0, 1.0]], atol=1e-14)


def test_condense_zero_b_decouples_from_state():
    spec = emb.LtiMpcSpec(A=[[0.9]], B=[[0.0]], Q=[[1.0]], R=[[1.0]],
                          P=[[1.0]], N=3, u_lo=[-1], u_hi=[1],
                          x_lo=[-10], x_hi=[10])
    qp = emb.condense(spec)
    assert np.allclose(qp.E, 0.0, atol=0)
    assert np.allclose(qp.G, 0.0, atol=0)
    u = -np.linalg.solve(qp.H, qp.gradient([5.0]))
    assert np.allclose(u, 0.0, atol=1e-14)


def test_condense_matches_sparse_kkt_oracle():
    rng = np.random.default_rng(5)
    for _ in range(10):
        spec = _random_spec(rng)
        qp = emb.condense(spec)
        x0 = rng.normal(size=spec.n_x)
        u = -np.linalg.solve(qp.H, qp.gradient(x0))
        assert np.allclose(u[: spec.n_u], _sparse_kkt_input(spec, x0), atol=1e-8)


def test_condensed_objective_identity():
    rng = np.random.default_rng(8)
    for _ in range(10):
        spec = _random_spec(rng)
        qp = emb.condense(spec)
        x = rng.normal(size=spec.n_x)
        u = rng.normal(size=spec.N * spec.n_u)
        lhs = 0.5 * u @ qp.H @ u + u @ qp.gradient(x)
        # expand along the predicted trajectory (factor 2 absorbed in H)
        xs, obj = x.copy(), 0.0
        for j in range(spec.N):
            uj = u[j * spec.n_u : (j + 1) * spec.n_u]
            obj += uj @ spec.R @ uj
            xs = spec.A @ xs + spec.B @ uj
            W = spec.P if j == spec.N - 1 else spec.Q
            obj += xs @ W @ xs
        # the state-only constant is the expanded objective at u = 0
        xs0, c0 = x.copy(), 0.0
        for j in range(spec.N):
            xs0 = spec.A @ xs0
            W = spec.P if j == spec.N - 1 else spec.Q
            c0 += xs0 @ W @ xs0
        assert lhs + c0 == pytest.approx(obj, abs=1e-9 * max(1.0, abs(obj)))


def test_condense_rejects_semidefinite_r():
    with pytest.raises(emb.NonPositiveDefiniteH):
        emb.LtiMpcSpec(A=[[1.0]], B=[[1.0]], Q=[[1.0]], R=[[0.0]], P=[[1.0]],
                       N=2, u_lo=[-1], u_hi=[1], x_lo=[-1], x_hi=[1])


def test_spec_rejects_short_horizon():
    with pytest.raises(emb.EmbeddedError):
        emb.LtiMpcSpec(A=[[1.0]], B=[[1.0]], Q=[[1.0]], R=[[1.0]], P=[[1.0]],
                       N=1, u_lo=[-1], u_hi=[1], x_lo=[-1], x_hi=[1])


# --- ALM / fast gradient -----------------------------------------------------


def _hil_problem():
    spec = emb.lateral_lti_spec()
    qp = emb.condense(spec)
    return spec, qp


def test_alm_fgm_unconstrained_fixed_point():
    spec = emb.LtiMpcSpec(A=[[0.8, 0.1], [0.0, 0.9]], B=[[0.0], [0.5]],
                          Q=np.eye(2), R=[[1.0]], P=np.eye(2), N=4,
                          u_lo=[-100.0], u_hi=[100.0],
                          x_lo=[-np.inf, -np.inf], x_hi=[np.inf, np.inf])
    qp = emb.condense(spec)
    settings = emb.AlmFgmSettings.for_qp(qp, inner=2000, outer=2)
    x = np.array([0.2, -0.1])
    res = emb.alm_fgm_solve(qp, x, settings)
    exact = -np.linalg.solve(qp.H, qp.gradient(x))
    assert np.allclose(res.u, exact, atol=1e-6)


def _dense_qp_first_input(qp, x):
    z_lo, z_hi = qp.bounds(x)
    finite = np.isfinite(z_lo) | np.isfinite(z_hi)
    dense = nlp.DenseQp(
        H=qp.H, g=qp.gradient(x),
        A_in=qp.E[finite] if finite.any() else None,
        lb_in=z_lo[finite] if finite.any() else None,
        ub_in=z_hi[finite] if finite.any() else None,
        lb=qp.u_lo, ub=qp.u_hi,
    )
    return nlp.solve_qp(dense).x[: qp.n_u]


def test_alm_fgm_first_input_matches_dense_oracle_on_hil_problem():
    _, qp = _hil_problem()
    settings = emb.AlmFgmSettings.for_qp(qp, inner=200, outer=40)
    rng = np.random.default_rng(17)
    for _ in range(20):
        x = np.array([0.4 * rng.standard_normal(),
                      0.05 * (2 * rng.random() - 1),
                      0.05 * rng.standard_normal()])
        res = emb.alm_fgm_solve(qp, x, settings)
        u0_ref = _dense_qp_first_input(qp, x)
        assert np.allclose(res.u0, u0_ref, atol=1e-4)
        # projection exactness: the stacked sequence never leaves the box
        assert np.all(res.u >= qp.u_lo - 0.0)
        assert np.all(res.u <= qp.u_hi + 0.0)


def test_alm_fgm_outer_residual_monotone_on_hil_problem():
    _, qp = _hil_problem()
    settings = emb.AlmFgmSettings.for_qp(qp)
    rng = np.random.default_rng(23)
    for _ in range(10):
        x = np.array([0.4 * rng.standard_normal(),
                      0.08 * (2 * rng.random() - 1),
                      0.2 * rng.standard_normal()])
        res = emb.alm_fgm_solve(qp, x, settings)
        for a, b in zip(res.residuals[:-1], res.residuals[1:]):
            assert b <= a + 1e-12


def test_alm_fgm_warm_start_is_fixed_point():
    _, qp = _hil_problem()
    x = np.array([0.2, 0.05, -0.1])
    settings = emb.AlmFgmSettings.for_qp(qp, inner=400, outer=60)
    ref = emb.alm_fgm_solve(qp, x, settings)
    one = emb.AlmFgmSettings.for_qp(qp, inner=1, outer=1)
    again = emb.alm_fgm_solve(qp, x, one, warm_start=ref)
    assert np.allclose(again.u, ref.u, atol=1e-8)


def test_alm_fgm_zero_state_symmetric_problem_gives_zero():
    _, qp = _hil_problem()
    settings = emb.AlmFgmSettings.for_qp(qp)
    res = emb.alm_fgm_solve(qp, np.zeros(3), settings)
    assert np.allclose(res.u0, 0.0, atol=0)


# --- code generation ---------------------------------------------------------


def test_generate_runtime_layout_and_determinism(tmp_path):
    _, qp = _hil_problem()
    settings = emb.AlmFgmSettings.for_qp(qp)
    d1 = tmp_path / "gen1"
    d2 = tmp_path / "gen2"
    emb.generate_runtime(qp, settings, str(d1))
    emb.generate_runtime(qp, settings, str(d2))
    names = ["mpc_data.h", "mpc_data.c", "mpc_solver.h", "mpc_solver.c",
             "mpc_conformance.txt"]
    for name in names:
        assert (d1 / name).exists()
        assert (d1 / name).read_bytes() == (d2 / name).read_bytes()


def test_conformance_manifest_matches_host_replay():
    _, qp = _hil_problem()
    settings = emb.AlmFgmSettings.for_qp(qp)
    manifest = emb.conformance_manifest(qp, settings, seed=99, count=20)
    lines = manifest.strip().split("\n")
    assert len(lines) == 20
    for line in lines:
        vals = np.array([float(v) for v in line.split()])
        x, u0 = vals[: qp.n_x], vals[qp.n_x :]
        res = emb.alm_fgm_solve(qp, x, settings)
        assert np.allclose(res.u0, u0, atol=0)


def test_generated_data_uses_requested_float_width(tmp_path):
    _, qp = _hil_problem()
    settings = emb.AlmFgmSettings.for_qp(qp)
    emb.generate_runtime(qp, settings, str(tmp_path / "s"), float_type="single")
    emb.generate_runtime(qp, settings, str(tmp_path / "d"), float_type="double")
    single = (tmp_path / "s" / "mpc_data.h").read_text()
    double = (tmp_path / "d" / "mpc_data.h").read_text()
    assert "typedef float mpc_float;" in single
    assert "typedef double mpc_float;" in double
