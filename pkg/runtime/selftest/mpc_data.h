/* Self-test problem data: scalar integrator x+ = x + u, horizon 2,
 * Q = R = P = 1, |u| <= 1, state unconstrained. Lets the solver template
 * compile and run without any generated tree. */
#ifndef MPC_DATA_H
#define MPC_DATA_H

typedef double mpc_float;

#define MPC_NX 1
#define MPC_NU 1
#define MPC_N 2
#define MPC_NV 2
#define MPC_M 2
#define MPC_INNER 50
#define MPC_OUTER 5

extern const mpc_float mpc_H[];
extern const mpc_float mpc_G[];
extern const mpc_float mpc_E[];
extern const mpc_float mpc_D[];
extern const mpc_float mpc_c_lo[];
extern const mpc_float mpc_c_hi[];
extern const mpc_float mpc_u_lo[];
extern const mpc_float mpc_u_hi[];
extern const mpc_float mpc_inv_l;
extern const mpc_float mpc_beta;
extern const mpc_float mpc_mu;

#endif /* MPC_DATA_H */
