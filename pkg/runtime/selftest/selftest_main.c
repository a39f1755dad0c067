/* Standalone checks of the solver template against the self-test data:
 * exact zero at the origin, box feasibility, agreement with the closed-form
 * unconstrained optimum, and warm-start residual non-increase. */
#include <math.h>
#include <stdio.h>

#include "mpc_solver.h"

static int failures = 0;

static void check(int ok, const char *what)
{
    printf("%s: %s\n", what, ok ? "pass" : "FAIL");
    if (!ok) {
        ++failures;
    }
}

int main(void)
{
    static mpc_workspace ws;
    mpc_float x[1];
    mpc_float u0[1];
    int i;

    mpc_init(&ws);
    x[0] = (mpc_float)0;
    mpc_set_state(&ws, x);
    mpc_solve(&ws);
    mpc_get_u0(&ws, u0);
    check(u0[0] == (mpc_float)0, "origin gives zero input");

    /* unconstrained optimum at x = 0.5: u = -H^{-1} G x = (-0.3, -0.1) */
    mpc_init(&ws);
    x[0] = (mpc_float)0.5;
    mpc_set_state(&ws, x);
    mpc_solve(&ws);
    check(fabs((double)ws.u[0] + 0.3) < 1e-6 &&
              fabs((double)ws.u[1] + 0.1) < 1e-6,
          "matches closed-form optimum");
    for (i = 0; i < MPC_NV; ++i) {
        check(ws.u[i] >= mpc_u_lo[i] && ws.u[i] <= mpc_u_hi[i],
              "input inside box");
    }

    /* saturating state: inputs pinned to the box, never outside */
    mpc_init(&ws);
    x[0] = (mpc_float)50.0;
    mpc_set_state(&ws, x);
    mpc_solve(&ws);
    check(ws.u[0] == mpc_u_lo[0], "large state saturates first input");

    /* warm start: solving again from the same state cannot get worse */
    {
        mpc_float first;
        mpc_set_state(&ws, x);
        mpc_solve(&ws);
        first = ws.residual;
        mpc_set_state(&ws, x);
        mpc_solve(&ws);
        check(ws.residual <= first + (mpc_float)1e-12,
              "warm start residual non-increasing");
    }

    printf(failures ? "self-test FAILED\n" : "self-test passed\n");
    return failures ? 1 : 0;
}
