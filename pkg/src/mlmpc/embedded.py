"""Embedded linear-MPC path.

Condenses the LTI MPC problem (states eliminated through the prediction
matrices) into a parametric QP in the input sequence only, solves it with an
augmented-Lagrangian outer loop around Nesterov's fast gradient method, and
generates a dependency-free C runtime plus a conformance manifest. The
iteration uses only matrix-vector products; all reciprocals are precomputed
so the runtime needs no divisions.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import _accel


class EmbeddedError(Exception):
    pass


class NonPositiveDefiniteH(EmbeddedError):
    pass


@dataclass
class LtiMpcSpec:
    """Discrete LTI MPC problem: x+ = Ax + Bu with box constraints."""

    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray
    N: int
    u_lo: np.ndarray
    u_hi: np.ndarray
    x_lo: np.ndarray
    x_hi: np.ndarray

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        n_x = self.A.shape[0]
        if self.A.shape != (n_x, n_x):
            raise EmbeddedError("A must be square")
        if self.B.shape[0] != n_x:
            raise EmbeddedError("B row count must match A")
        n_u = self.B.shape[1]
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        for name, M, dim in (("Q", self.Q, n_x), ("R", self.R, n_u), ("P", self.P, n_x)):
            if M.shape != (dim, dim):
                raise EmbeddedError(f"{name} must be {dim}x{dim}")
            if np.max(np.abs(M - M.T)) > 1e-12:
                raise EmbeddedError(f"{name} must be symmetric")
        if np.linalg.eigvalsh(self.Q).min() < -1e-12:
            raise EmbeddedError("Q must be positive semidefinite")
        if np.linalg.eigvalsh(self.P).min() < -1e-12:
            raise EmbeddedError("P must be positive semidefinite")
        if np.linalg.eigvalsh(self.R).min() <= 0:
            raise NonPositiveDefiniteH("R must be positive definite")
        if int(self.N) < 2:
            raise EmbeddedError("horizon N must be >= 2")
        self.N = int(self.N)
        self.u_lo = np.broadcast_to(np.asarray(self.u_lo, float).ravel(), (n_u,)).copy()
        self.u_hi = np.broadcast_to(np.asarray(self.u_hi, float).ravel(), (n_u,)).copy()
        self.x_lo = np.broadcast_to(np.asarray(self.x_lo, float).ravel(), (n_x,)).copy()
        self.x_hi = np.broadcast_to(np.asarray(self.x_hi, float).ravel(), (n_x,)).copy()

    @property
    def n_x(self):
        return self.A.shape[0]

    @property
    def n_u(self):
        return self.B.shape[1]


@dataclass
class CondensedQp:
    """Parametric QP min_u 1/2 u'Hu + u'Gx s.t. c_lo + Dx <= Eu <= c_hi + Dx,
    u in the stacked input box."""

    H: np.ndarray
    G: np.ndarray
    E: np.ndarray
    c_lo: np.ndarray
    c_hi: np.ndarray
    D: np.ndarray
    u_lo: np.ndarray  # stacked, length N * n_u
    u_hi: np.ndarray
    n_x: int
    n_u: int
    N: int

    def bounds(self, x):
        """State-dependent constraint band (z_lo, z_hi) at state x."""
        x = np.asarray(x, dtype=float).ravel()
        return self.c_lo + self.D @ x, self.c_hi + self.D @ x

    def gradient(self, x):
        return self.G @ np.asarray(x, dtype=float).ravel()


def condense(spec: LtiMpcSpec) -> CondensedQp:
    """Eliminate the predicted states x_1..x_N from the LTI MPC problem.

    With the stacked prediction X = Phi x + Psi U the objective becomes
    1/2 U'HU + U'Gx (plus a state-only constant) with H = 2(Psi'Qbar Psi +
    Rbar) and G = 2 Psi'Qbar Phi; the state box turns into a band on E U
    with E = Psi.
    """
    n_x, n_u, N = spec.n_x, spec.n_u, spec.N
    A, B = spec.A, spec.B

    powers = [np.eye(n_x)]
    for _ in range(N):
        powers.append(A @ powers[-1])

    Phi = np.vstack([powers[j] for j in range(1, N + 1)])
    Psi = np.zeros((N * n_x, N * n_u))
    for j in range(1, N + 1):
        for i in range(j):
            Psi[(j - 1) * n_x : j * n_x, i * n_u : (i + 1) * n_u] = (
                powers[j - 1 - i] @ B
            )

    Qbar = np.zeros((N * n_x, N * n_x))
    for j in range(N - 1):
        Qbar[j * n_x : (j + 1) * n_x, j * n_x : (j + 1) * n_x] = spec.Q
    Qbar[(N - 1) * n_x :, (N - 1) * n_x :] = spec.P
    Rbar = np.kron(np.eye(N), spec.R)

    H = 2.0 * (Psi.T @ Qbar @ Psi + Rbar)
    H = 0.5 * (H + H.T)
    if np.linalg.eigvalsh(H).min() <= 0:
        raise NonPositiveDefiniteH("condensed Hessian is not positive definite")
    G = 2.0 * Psi.T @ Qbar @ Phi

    return CondensedQp(
        H=H,
        G=G,
        E=Psi,
        c_lo=np.tile(spec.x_lo, N),
        c_hi=np.tile(spec.x_hi, N),
        D=-Phi,
        u_lo=np.tile(spec.u_lo, N),
        u_hi=np.tile(spec.u_hi, N),
        n_x=n_x,
        n_u=n_u,
        N=N,
    )


def _power_lambda_max(M, tol=1e-10, max_iter=10_000):
    n = M.shape[0]
    v = np.ones(n) / np.sqrt(n)
    lam = 0.0
    for _ in range(max_iter):
        w = M @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v_new = w / nw
        lam_new = float(v_new @ M @ v_new)
        if abs(lam_new - lam) <= tol * max(1.0, abs(lam_new)):
            return lam_new
        lam, v = lam_new, v_new
    return lam


@dataclass
class AlmFgmSettings:
    """Fixed-iteration solver constants; derived scalars precomputed once."""

    inner: int = 10
    outer: int = 5
    mu: float = 0.0  # 0 selects the default 10 * ||H||_2
    lipschitz: float = 0.0
    strong_convexity: float = 0.0
    beta: float = 0.0
    inv_l: float = 0.0

    @classmethod
    def for_qp(cls, qp: CondensedQp, inner=10, outer=5, mu=None):
        if inner < 1 or outer < 1:
            raise EmbeddedError("iteration counts must be >= 1")
        s = cls(inner=int(inner), outer=int(outer))
        h_norm = _power_lambda_max(qp.H)
        s.mu = 10.0 * h_norm if mu is None else float(mu)
        M = qp.H + s.mu * qp.E.T @ qp.E
        s.lipschitz = _power_lambda_max(M)
        # smallest eigenvalue of H via a shifted power iteration
        s.strong_convexity = h_norm - _power_lambda_max(h_norm * np.eye(qp.H.shape[0]) - qp.H)
        if s.strong_convexity <= 0 or s.lipschitz < s.strong_convexity:
            raise NonPositiveDefiniteH("need L >= phi > 0")
        sl = np.sqrt(s.lipschitz)
        sp = np.sqrt(s.strong_convexity)
        s.beta = (sl - sp) / (sl + sp)
        s.inv_l = 1.0 / s.lipschitz
        return s


@dataclass
class AlmFgmResult:
    u: np.ndarray  # stacked input sequence
    lam: np.ndarray
    residuals: np.ndarray  # constraint violation per outer iteration
    u0: np.ndarray

    @property
    def residual(self):
        return float(self.residuals[-1])


def alm_fgm_solve(qp: CondensedQp, x, settings: AlmFgmSettings, warm_start=None):
    """Solve the condensed QP at state ``x`` with fixed iteration counts.

    ``warm_start`` is a previous :class:`AlmFgmResult` (or ``(u, lam)``);
    cold start is all zeros. There is no convergence branching: the caller
    judges quality from the residual report.
    """
    grad_lin = qp.gradient(x)
    z_lo, z_hi = qp.bounds(x)
    n = qp.H.shape[0]
    if warm_start is None:
        u = np.zeros(n)
        lam = np.zeros(qp.E.shape[0])
    else:
        if isinstance(warm_start, AlmFgmResult):
            u, lam = warm_start.u, warm_start.lam
        else:
            u, lam = warm_start
        u = np.array(u, dtype=float)
        lam = np.array(lam, dtype=float)
    u = np.clip(u, qp.u_lo, qp.u_hi)
    u_prev = u.copy()

    res = _accel.fgm_alm(
        qp.H,
        grad_lin,
        qp.E,
        z_lo,
        z_hi,
        qp.u_lo,
        qp.u_hi,
        lam,
        u,
        u_prev,
        settings.inv_l,
        settings.beta,
        settings.mu,
        settings.inner,
        settings.outer,
    )
    return AlmFgmResult(u=u, lam=lam, residuals=np.asarray(res), u0=u[: qp.n_u].copy())


# ---------------------------------------------------------------------------
# builtin: linearized lateral vehicle dynamics for the demo problem


def lateral_lti_spec(dt=0.015, N=20, speed=2.0, steer_gain=10.0):
    """Lateral dynamics x = [p_y, psi, omega], input = steering angle.

    Continuous chain p_y' = v psi, psi' = omega, omega' = k delta,
    discretized exactly (the chain is nilpotent). Input and heading are
    both limited to +-0.1.
    """
    v, k = float(speed), float(steer_gain)
    Ac = np.array([[0.0, v, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 0.0]])
    Bc = np.array([[0.0], [0.0], [k]])
    A2 = Ac @ Ac  # Ac^3 = 0, so the exponential series terminates
    A = np.eye(3) + dt * Ac + 0.5 * dt**2 * A2
    B = (dt * np.eye(3) + 0.5 * dt**2 * Ac + dt**3 / 6.0 * A2) @ Bc
    return LtiMpcSpec(
        A=A,
        B=B,
        Q=np.diag([5.0, 1.0, 0.1]),
        R=np.array([[1.0]]),
        P=np.diag([5.0, 1.0, 0.1]),
        N=N,
        u_lo=[-0.1],
        u_hi=[0.1],
        x_lo=[-np.inf, -0.1, -np.inf],
        x_hi=[np.inf, 0.1, np.inf],
    )


# ---------------------------------------------------------------------------
# code generation


def _fmt(x):
    """17 significant digits: round-trips any double exactly."""
    return f"{float(x):.17g}"


def _c_array(name, values, float_type):
    vals = ", ".join(
        f"({float_type}){_fmt(v)}" for v in np.asarray(values, dtype=float).ravel()
    )
    return f"const {float_type} {name}[] = {{{vals}}};\n"


def _template_dir():
    return os.path.join(os.path.dirname(__file__), "templates")


def generate_runtime(qp: CondensedQp, settings: AlmFgmSettings, out_dir,
                     float_type="single", manifest_seed=2024):
    """Emit the standalone solver tree into ``out_dir``.

    Produces ``mpc_data.h``/``mpc_data.c`` (problem constants), copies the
    hand-maintained ``mpc_solver.h``/``mpc_solver.c`` template verbatim, and
    writes ``mpc_conformance.txt`` with 20 seeded state -> first-input pairs
    computed by the host solver. Output is deterministic: identical inputs
    give byte-identical files.
    """
    if float_type not in ("single", "double"):
        raise EmbeddedError("float_type must be 'single' or 'double'")
    ctype = "float" if float_type == "single" else "double"
    os.makedirs(out_dir, exist_ok=True)

    n_v = qp.H.shape[0]
    m = qp.E.shape[0]
    # keep the generated arrays finite: the runtime clamp needs real numbers
    big = 1e30
    c_lo = np.maximum(qp.c_lo, -big)
    c_hi = np.minimum(qp.c_hi, big)

    header = (
        "/* Generated MPC problem data. Do not edit. */\n"
        "#ifndef MPC_DATA_H\n"
        "#define MPC_DATA_H\n\n"
        f"typedef {ctype} mpc_float;\n\n"
        f"#define MPC_NX {qp.n_x}\n"
        f"#define MPC_NU {qp.n_u}\n"
        f"#define MPC_N {qp.N}\n"
        f"#define MPC_NV {n_v}\n"
        f"#define MPC_M {m}\n"
        f"#define MPC_INNER {settings.inner}\n"
        f"#define MPC_OUTER {settings.outer}\n\n"
        "extern const mpc_float mpc_H[];\n"
        "extern const mpc_float mpc_G[];\n"
        "extern const mpc_float mpc_E[];\n"
        "extern const mpc_float mpc_D[];\n"
        "extern const mpc_float mpc_c_lo[];\n"
        "extern const mpc_float mpc_c_hi[];\n"
        "extern const mpc_float mpc_u_lo[];\n"
        "extern const mpc_float mpc_u_hi[];\n"
        "extern const mpc_float mpc_inv_l;\n"
        "extern const mpc_float mpc_beta;\n"
        "extern const mpc_float mpc_mu;\n\n"
        "#endif /* MPC_DATA_H */\n"
    )

    body = ['/* Generated MPC problem data. Do not edit. */\n',
            '#include "mpc_data.h"\n\n']
    body.append(_c_array("mpc_H", qp.H, "mpc_float"))
    body.append(_c_array("mpc_G", qp.G, "mpc_float"))
    body.append(_c_array("mpc_E", qp.E, "mpc_float"))
    body.append(_c_array("mpc_D", qp.D, "mpc_float"))
    body.append(_c_array("mpc_c_lo", c_lo, "mpc_float"))
    body.append(_c_array("mpc_c_hi", c_hi, "mpc_float"))
    body.append(_c_array("mpc_u_lo", qp.u_lo, "mpc_float"))
    body.append(_c_array("mpc_u_hi", qp.u_hi, "mpc_float"))
    body.append(f"const mpc_float mpc_inv_l = (mpc_float){_fmt(settings.inv_l)};\n")
    body.append(f"const mpc_float mpc_beta = (mpc_float){_fmt(settings.beta)};\n")
    body.append(f"const mpc_float mpc_mu = (mpc_float){_fmt(settings.mu)};\n")

    with open(os.path.join(out_dir, "mpc_data.h"), "w") as f:
        f.write(header)
    with open(os.path.join(out_dir, "mpc_data.c"), "w") as f:
        f.write("".join(body))

    for name in ("mpc_solver.h", "mpc_solver.c"):
        with open(os.path.join(_template_dir(), name)) as src:
            content = src.read()
        with open(os.path.join(out_dir, name), "w") as dst:
            dst.write(content)

    manifest = conformance_manifest(qp, settings, seed=manifest_seed)
    with open(os.path.join(out_dir, "mpc_conformance.txt"), "w") as f:
        f.write(manifest)
    return out_dir


def conformance_manifest(qp: CondensedQp, settings: AlmFgmSettings, seed=2024,
                         count=20):
    """Seeded (state -> u_0) vectors from the host solver, one per line."""
    rng = np.random.Generator(np.random.PCG64(seed))
    lines = []
    for _ in range(count):
        x = _feasible_state(qp, rng)
        res = alm_fgm_solve(qp, x, settings)
        lines.append(" ".join(_fmt(v) for v in np.concatenate([x, res.u0])))
    return "\n".join(lines) + "\n"


def _feasible_state(qp, rng):
    """Random state inside the (finite part of the) state box."""
    lo = qp.c_lo[: qp.n_x]
    hi = qp.c_hi[: qp.n_x]
    lo = np.where(np.isfinite(lo), lo, -1.0)
    hi = np.where(np.isfinite(hi), hi, 1.0)
    return lo + (hi - lo) * rng.random(qp.n_x)
