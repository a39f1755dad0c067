/* Software-in-the-loop driver: closed loop of the embedded solver against
 * the nominal linear plant. The plant matrices are recovered from the
 * generated condensed data: the first state-block of -D is A and the first
 * state/input block of E is B (one-step prediction rows).
 *
 * Usage: sil [steps [x0 x1 ... x_{nx-1}]]
 * Prints a CSV log (step, state, applied input) to stdout. The solver
 * workspace warm-starts across steps, as it would on the target.
 */
#include <stdio.h>
#include <stdlib.h>

#include "mpc_solver.h"

int main(int argc, char **argv)
{
    static mpc_workspace ws;
    mpc_float x[MPC_NX];
    mpc_float x_next[MPC_NX];
    mpc_float u0[MPC_NU];
    int steps = 100;
    int i, j, k;

    for (i = 0; i < MPC_NX; ++i) {
        x[i] = (mpc_float)0;
    }
    if (argc > 1) {
        steps = atoi(argv[1]);
        if (steps < 1) {
            fprintf(stderr, "steps must be >= 1\n");
            return 2;
        }
    }
    for (i = 0; i < MPC_NX && 2 + i < argc; ++i) {
        x[i] = (mpc_float)atof(argv[2 + i]);
    }

    printf("step");
    for (i = 0; i < MPC_NX; ++i) {
        printf(",x%d", i);
    }
    for (i = 0; i < MPC_NU; ++i) {
        printf(",u%d", i);
    }
    printf("\n");

    mpc_init(&ws);
    for (k = 0; k < steps; ++k) {
        mpc_set_state(&ws, x);
        mpc_solve(&ws);
        mpc_get_u0(&ws, u0);

        printf("%d", k);
        for (i = 0; i < MPC_NX; ++i) {
            printf(",%.17g", (double)x[i]);
        }
        for (i = 0; i < MPC_NU; ++i) {
            printf(",%.17g", (double)u0[i]);
        }
        printf("\n");

        /* plant update x+ = A x + B u0 with A = -D[0:nx], B = E[0:nx] */
        for (i = 0; i < MPC_NX; ++i) {
            mpc_float acc = (mpc_float)0;
            for (j = 0; j < MPC_NX; ++j) {
                acc -= mpc_D[i * MPC_NX + j] * x[j];
            }
            for (j = 0; j < MPC_NU; ++j) {
                acc += mpc_E[i * MPC_NV + j] * u0[j];
            }
            x_next[i] = acc;
        }
        for (i = 0; i < MPC_NX; ++i) {
            x[i] = x_next[i];
        }
    }
    return 0;
}
