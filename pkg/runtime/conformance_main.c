/* Conformance harness: replays the generated manifest against the solver.
 *
 * Each manifest line holds a state followed by the expected first input,
 * both produced by the host reference solver at generation time. The
 * harness runs the embedded solver cold on every vector and reports
 * pass/fail per line; the exit code is 0 only if every vector passes.
 *
 * Tolerance follows the build's float width: 1e-9 for double, 1e-5 for
 * single (the generated data is rounded to the narrower type).
 */
#include <math.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#include "mpc_solver.h"

#define LINE_MAX_LEN 4096

static double tolerance(void)
{
    return sizeof(mpc_float) == sizeof(float) ? 1e-5 : 1e-9;
}

int main(int argc, char **argv)
{
    const char *path = argc > 1 ? argv[1] : "mpc_conformance.txt";
    FILE *fh = fopen(path, "r");
    if (!fh) {
        fprintf(stderr, "cannot open %s\n", path);
        return 2;
    }

    static mpc_workspace ws;
    char line[LINE_MAX_LEN];
    double tol = tolerance();
    int vector = 0;
    int failures = 0;

    while (fgets(line, sizeof line, fh)) {
        double values[MPC_NX + MPC_NU];
        mpc_float x[MPC_NX];
        mpc_float u0[MPC_NU];
        char *cursor = line;
        int count = 0;
        int i;

        if (line[0] == '\n' || line[0] == '\0') {
            continue;
        }
        while (count < MPC_NX + MPC_NU) {
            char *end;
            double v = strtod(cursor, &end);
            if (end == cursor) {
                break;
            }
            values[count++] = v;
            cursor = end;
        }
        if (count != MPC_NX + MPC_NU) {
            fprintf(stderr, "vector %d: malformed line\n", vector);
            fclose(fh);
            return 2;
        }

        for (i = 0; i < MPC_NX; ++i) {
            x[i] = (mpc_float)values[i];
        }
        mpc_init(&ws); /* cold start: the manifest was generated cold */
        mpc_set_state(&ws, x);
        mpc_solve(&ws);
        mpc_get_u0(&ws, u0);

        double err = 0.0;
        for (i = 0; i < MPC_NU; ++i) {
            double d = fabs((double)u0[i] - values[MPC_NX + i]);
            if (d > err) {
                err = d;
            }
        }
        if (err <= tol) {
            printf("vector %d: pass (err %.3e)\n", vector, err);
        } else {
            printf("vector %d: FAIL (err %.3e > %.1e)\n", vector, err, tol);
            ++failures;
        }
        ++vector;
    }
    fclose(fh);

    if (vector == 0) {
        fprintf(stderr, "no vectors in %s\n", path);
        return 2;
    }
    printf("%d/%d vectors pass\n", vector - failures, vector);
    return failures ? 1 : 0;
}
