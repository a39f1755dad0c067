/* Fixed-iteration embedded MPC solver. Mirrors the host reference
 * implementation operation for operation so generated builds stay within
 * float-rounding distance of the host results. */
#include "mpc_solver.h"

static void mat_vec(const mpc_float *m, const mpc_float *v, mpc_float *out,
                    int rows, int cols)
{
    int i, j;
    for (i = 0; i < rows; ++i) {
        mpc_float acc = (mpc_float)0;
        for (j = 0; j < cols; ++j) {
            acc += m[i * cols + j] * v[j];
        }
        out[i] = acc;
    }
}

static void mat_tvec(const mpc_float *m, const mpc_float *v, mpc_float *out,
                     int rows, int cols)
{
    int i, j;
    for (j = 0; j < cols; ++j) {
        out[j] = (mpc_float)0;
    }
    for (i = 0; i < rows; ++i) {
        for (j = 0; j < cols; ++j) {
            out[j] += m[i * cols + j] * v[i];
        }
    }
}

static mpc_float clamp(mpc_float v, mpc_float lo, mpc_float hi)
{
    if (v < lo) {
        return lo;
    }
    if (v > hi) {
        return hi;
    }
    return v;
}

void mpc_init(mpc_workspace *ws)
{
    int i;
    for (i = 0; i < MPC_NV; ++i) {
        ws->u[i] = (mpc_float)0;
        ws->u_prev[i] = (mpc_float)0;
    }
    for (i = 0; i < MPC_M; ++i) {
        ws->lam[i] = (mpc_float)0;
    }
    ws->residual = (mpc_float)0;
}

void mpc_set_state(mpc_workspace *ws, const mpc_float *x)
{
    int i;
    for (i = 0; i < MPC_NX; ++i) {
        ws->x[i] = x[i];
    }
    mat_vec(mpc_G, ws->x, ws->grad_lin, MPC_NV, MPC_NX);
    mat_vec(mpc_D, ws->x, ws->scratch_e, MPC_M, MPC_NX);
    for (i = 0; i < MPC_M; ++i) {
        ws->z_lo[i] = mpc_c_lo[i] + ws->scratch_e[i];
        ws->z_hi[i] = mpc_c_hi[i] + ws->scratch_e[i];
    }
    /* entering inputs are clamped so warm starts stay in the box */
    for (i = 0; i < MPC_NV; ++i) {
        ws->u[i] = clamp(ws->u[i], mpc_u_lo[i], mpc_u_hi[i]);
        ws->u_prev[i] = ws->u[i];
    }
}

void mpc_solve(mpc_workspace *ws)
{
    int k, it, i, j;
    for (k = 0; k < MPC_OUTER; ++k) {
        for (it = 0; it < MPC_INNER; ++it) {
            /* extrapolated point */
            for (i = 0; i < MPC_NV; ++i) {
                ws->scratch_v[i] =
                    ws->u[i] + mpc_beta * (ws->u[i] - ws->u_prev[i]);
            }
            mat_vec(mpc_E, ws->scratch_v, ws->scratch_e, MPC_M, MPC_NV);
            /* w = lam + mu * (Ev - clamp(Ev)) */
            for (j = 0; j < MPC_M; ++j) {
                mpc_float s =
                    clamp(ws->scratch_e[j], ws->z_lo[j], ws->z_hi[j]);
                ws->scratch_w[j] =
                    ws->lam[j] + mpc_mu * (ws->scratch_e[j] - s);
            }
            /* grad = H v + grad_lin + E' w */
            mat_vec(mpc_H, ws->scratch_v, ws->scratch_g, MPC_NV, MPC_NV);
            for (i = 0; i < MPC_NV; ++i) {
                ws->scratch_g[i] += ws->grad_lin[i];
            }
            mat_tvec(mpc_E, ws->scratch_w, ws->scratch_v, MPC_M, MPC_NV);
            /* note: scratch_v now holds E'w; recompute the extrapolated
             * point inline in the update below */
            for (i = 0; i < MPC_NV; ++i) {
                mpc_float v =
                    ws->u[i] + mpc_beta * (ws->u[i] - ws->u_prev[i]);
                mpc_float g = ws->scratch_g[i] + ws->scratch_v[i];
                ws->u_prev[i] = ws->u[i];
                ws->u[i] = clamp(v - mpc_inv_l * g, mpc_u_lo[i], mpc_u_hi[i]);
            }
        }
        /* multiplier update and residual */
        mat_vec(mpc_E, ws->u, ws->scratch_e, MPC_M, MPC_NV);
        ws->residual = (mpc_float)0;
        for (j = 0; j < MPC_M; ++j) {
            mpc_float s = clamp(ws->scratch_e[j], ws->z_lo[j], ws->z_hi[j]);
            mpc_float d = ws->scratch_e[j] - s;
            ws->lam[j] += mpc_mu * d;
            if (d < (mpc_float)0) {
                d = -d;
            }
            if (d > ws->residual) {
                ws->residual = d;
            }
        }
    }
}

void mpc_get_u0(const mpc_workspace *ws, mpc_float *u0)
{
    int i;
    for (i = 0; i < MPC_NU; ++i) {
        u0[i] = ws->u[i];
    }
}
