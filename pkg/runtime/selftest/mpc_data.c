/* Self-test problem data; see mpc_data.h for the problem statement.
 * H = 2(Psi'Qbar Psi + Rbar), G = 2 Psi'Qbar Phi for A = B = 1:
 * Psi = [[1,0],[1,1]], Phi = [1,1]'. Step sizes follow the usual recipe
 * mu = 10*||H||_2, L = lambda_max(H + mu E'E), beta from the condition
 * number of H (values below computed to double precision offline). */
#include "mpc_data.h"

const mpc_float mpc_H[] = {6.0, 2.0, 2.0, 4.0};
const mpc_float mpc_G[] = {4.0, 2.0};
const mpc_float mpc_E[] = {1.0, 0.0, 1.0, 1.0};
const mpc_float mpc_D[] = {-1.0, -1.0};
const mpc_float mpc_c_lo[] = {-1e30, -1e30};
const mpc_float mpc_c_hi[] = {1e30, 1e30};
const mpc_float mpc_u_lo[] = {-1.0, -1.0};
const mpc_float mpc_u_hi[] = {1.0, 1.0};
const mpc_float mpc_inv_l = 5.0843968867480988e-03;
const mpc_float mpc_beta = 7.8797648790955395e-01;
const mpc_float mpc_mu = 7.2360679774997905e+01;
