/* Fixed-iteration embedded MPC solver: augmented Lagrangian outer loop,
 * Nesterov fast-gradient inner loop. No allocation, no division; all
 * reciprocals are precomputed in the generated data unit. */
#ifndef MPC_SOLVER_H
#define MPC_SOLVER_H

#include "mpc_data.h"

typedef struct {
    mpc_float x[MPC_NX];        /* current state */
    mpc_float u[MPC_NV];        /* stacked input sequence (warm start) */
    mpc_float u_prev[MPC_NV];   /* momentum buffer */
    mpc_float lam[MPC_M];       /* constraint multipliers */
    mpc_float grad_lin[MPC_NV]; /* G x */
    mpc_float z_lo[MPC_M];      /* state band at x */
    mpc_float z_hi[MPC_M];
    mpc_float scratch_v[MPC_NV];
    mpc_float scratch_g[MPC_NV];
    mpc_float scratch_e[MPC_M];
    mpc_float scratch_w[MPC_M];
    mpc_float residual;         /* |E u - clamp(E u)|_inf after solve() */
} mpc_workspace;

void mpc_init(mpc_workspace *ws);
void mpc_set_state(mpc_workspace *ws, const mpc_float *x);
void mpc_solve(mpc_workspace *ws);
void mpc_get_u0(const mpc_workspace *ws, mpc_float *u0);

#endif /* MPC_SOLVER_H */
