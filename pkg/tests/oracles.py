"""Reference solutions shared by the module tests and the acceptance suite."""

import numpy as np
from scipy.integrate import solve_ivp

from simred.models import OcpDefinition, TwoTimescaleSystem
from simred.sim import GnOptions, solve_sim_local


def fd_sensitivities(sys, x, u, h=1e-5):
    """Central differences of the converged local criterion solution."""
    opts = GnOptions(grad_tol=1e-13, step_tol=1e-14, max_iter=100)
    base = solve_sim_local(sys, x, u, opts=opts).y_star
    cols = []
    for v, which in ((x, "x"), (u, "u")):
        for j in range(v.size):
            e = np.zeros(v.size)
            e[j] = h * max(1.0, abs(v[j]))
            args_p = (x + e, u) if which == "x" else (x, u + e)
            args_m = (x - e, u) if which == "x" else (x, u - e)
            yp = solve_sim_local(sys, *args_p, y_init=base, opts=opts).y_star
            ym = solve_sim_local(sys, *args_m, y_init=base, opts=opts).y_star
            cols.append((yp - ym) / (2 * e[j]))
    D = np.column_stack(cols)
    return D[:, :x.size], D[:, x.size:]


def sincos(P):
    return np.sin(np.pi * P[:, 0]) * np.cos(np.pi * P[:, 1])


def sincos_grad(P):
    gx = np.pi * np.cos(np.pi * P[:, 0]) * np.cos(np.pi * P[:, 1])
    gy = -np.pi * np.sin(np.pi * P[:, 0]) * np.sin(np.pi * P[:, 1])
    return np.stack([gx, gy], axis=1)[:, None, :]


def grid(k):
    a = np.linspace(0.0, 1.0, k)
    return np.array([(x, y) for x in a for y in a])


def integrator_ocp(cost="lqr", x0=1.0, n_intervals=20):
    """x' = u with a decoupled fast state y' = -y/eps that the cost ignores."""
    eps = 1e-2
    sys = TwoTimescaleSystem(
        p=1, q=1, m=1,
        rhs_slow=lambda x, y, u: np.atleast_1d(u).copy(),
        rhs_fast=lambda x, y, u: -np.atleast_1d(y) / eps,
        jacobian=lambda x, y, u: np.array([[0.0, 0.0], [0.0, -1.0 / eps]]),
        jacobian_u=lambda x, y, u: np.array([[1.0], [0.0]]), eps=eps, name="integrator")
    if cost == "lqr":
        def f0(x, y, u):
            return 0.5 * (x[0] ** 2 + u[0] ** 2)

        def g0(x, y, u):
            return np.array([x[0]]), np.zeros(1), np.array([u[0]])
    else:
        def f0(x, y, u):
            return u[0] ** 2

        def g0(x, y, u):
            return np.zeros(1), np.zeros(1), np.array([2 * u[0]])
    inf = np.inf
    return OcpDefinition(system=sys, horizon=1.0, running_cost=f0, running_cost_grad=g0,
                         initial_slow=[x0], initial_fast=[0.0], x_bounds=(-inf, inf), y_bounds=(-inf, inf),
                         u_bounds=(-inf, inf), n_intervals=n_intervals, name=cost)


def riccati_reference(x0=1.0, T=1.0):
    # P' = P^2 - 1 backwards from P(T) = 0; the optimal cost is P(0) x0^2 / 2
    sol = solve_ivp(lambda t, P: P ** 2 - 1.0, (T, 0.0), [0.0], rtol=1e-12, atol=1e-12)
    return 0.5 * sol.y[0, -1] * x0 ** 2
