"""Two-timescale systems, optimal control problem definitions and the
shipped benchmark instances (Michaelis-Menten enzyme kinetics and a
five-state voltage regulator).

The fast right-hand side of a :class:`TwoTimescaleSystem` already contains
any ``1/eps`` scaling, so the full vector field is always ``F = (f, g)``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DimensionError

Array = np.ndarray


def _as_vec(v, n, name):
    a = np.atleast_1d(np.asarray(v, dtype=float))
    if a.ndim != 1 or a.shape[0] != n:
        raise DimensionError(f"{name} must have length {n}, got shape {np.shape(v)}")
    return a


def fd_jacobian(fun, z, h=None):
    """Central finite-difference Jacobian of ``fun`` at ``z``."""
    z = np.asarray(z, dtype=float)
    f0 = np.atleast_1d(fun(z))
    jac = np.empty((f0.size, z.size))
    for i in range(z.size):
        step = h if h is not None else 6e-6 * (1.0 + abs(z[i]))
        zp = z.copy()
        zm = z.copy()
        zp[i] += step
        zm[i] -= step
        jac[:, i] = (np.atleast_1d(fun(zp)) - np.atleast_1d(fun(zm))) / (2 * step)
    return jac


@dataclass(frozen=True)
class TwoTimescaleSystem:
    """Slow/fast split ODE ``x' = f(x, y, u)``, ``y' = g(x, y, u)``.

    Parameters
    ----------
    p, q, m : int
        Slow-state, fast-state and control dimensions.
    rhs_slow, rhs_fast : callable
        ``(x, y, u) -> array``. ``rhs_fast`` includes the ``1/eps`` factor.
    jacobian : callable
        ``(x, y, u) -> (n, n)`` Jacobian of ``F`` with respect to ``(x, y)``.
    jacobian_u : callable, optional
        ``(x, y, u) -> (n, m)`` Jacobian of ``F`` with respect to ``u``.
        Central differences are used when absent.
    eps : float, optional
        Timescale parameter; metadata only.
    """

    p: int
    q: int
    m: int
    rhs_slow: Callable[[Array, Array, Array], Array]
    rhs_fast: Callable[[Array, Array, Array], Array]
    jacobian: Callable[[Array, Array, Array], Array]
    jacobian_u: Optional[Callable[[Array, Array, Array], Array]] = None
    eps: Optional[float] = None
    name: str = "system"

    def __post_init__(self):
        if self.p < 1 or self.q < 1 or self.m < 0:
            raise ValueError(f"need p >= 1, q >= 1, m >= 0; got ({self.p}, {self.q}, {self.m})")
        if self.eps is not None and not self.eps > 0:
            raise ValueError("eps must be positive")

    @property
    def n(self):
        return self.p + self.q

    def check_args(self, x, y, u):
        return (_as_vec(x, self.p, "x"), _as_vec(y, self.q, "y"), _as_vec(u, self.m, "u"))

    def split(self, z):
        z = np.asarray(z, dtype=float)
        return z[: self.p], z[self.p:]

    # vector-field views over the stacked state z = (x, y)
    def F(self, z, u):
        x, y = self.split(z)
        return np.concatenate([self.rhs_slow(x, y, u), self.rhs_fast(x, y, u)])

    def J(self, z, u):
        x, y = self.split(z)
        return np.asarray(self.jacobian(x, y, u), dtype=float)

    def Ju(self, z, u):
        x, y = self.split(z)
        if self.jacobian_u is not None:
            return np.asarray(self.jacobian_u(x, y, u), dtype=float).reshape(self.n, self.m)
        if self.m == 0:
            return np.zeros((self.n, 0))
        u = np.asarray(u, dtype=float)
        return fd_jacobian(lambda uu: self.F(z, uu), u)


def eval_full_rhs(sys: TwoTimescaleSystem, x, y, u) -> Array:
    """Stacked right-hand side ``F = (f(x,y,u), g(x,y,u))``."""
    x, y, u = sys.check_args(x, y, u)
    return np.concatenate([
        np.atleast_1d(sys.rhs_slow(x, y, u)),
        np.atleast_1d(sys.rhs_fast(x, y, u)),
    ])


def eval_jacobian(sys: TwoTimescaleSystem, x, y, u) -> Array:
    """Jacobian of ``F`` with respect to ``(x, y)``, shape ``(n, n)``."""
    x, y, u = sys.check_args(x, y, u)
    return np.asarray(sys.jacobian(x, y, u), dtype=float).reshape(sys.n, sys.n)


@dataclass(frozen=True)
class OcpDefinition:
    """Fixed-horizon optimal control problem on a two-timescale system.

    The objective is ``E(x(T)) + int_0^T f0(x, y, u) dt`` with piecewise
    constant controls on ``n_intervals`` equidistant shooting intervals.
    Node bounds apply to the states at the shooting nodes and to the
    interval controls.
    """

    system: TwoTimescaleSystem
    horizon: float
    running_cost: Callable[[Array, Array, Array], float]
    initial_slow: Array
    initial_fast: Array
    x_bounds: tuple
    y_bounds: tuple
    u_bounds: tuple
    n_intervals: int
    running_cost_grad: Optional[Callable] = None
    terminal_cost: Optional[Callable[[Array], float]] = None
    terminal_cost_grad: Optional[Callable[[Array], Array]] = None
    name: str = "ocp"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        sys = self.system
        if not self.horizon > 0:
            raise ValueError("horizon T must be positive")
        if self.n_intervals < 1:
            raise ValueError("n_intervals must be >= 1")
        object.__setattr__(self, "initial_slow", _as_vec(self.initial_slow, sys.p, "initial_slow"))
        object.__setattr__(self, "initial_fast", _as_vec(self.initial_fast, sys.q, "initial_fast"))
        for name, dim in (("x_bounds", sys.p), ("y_bounds", sys.q), ("u_bounds", sys.m)):
            lo, hi = getattr(self, name)
            lo = np.broadcast_to(np.asarray(lo, dtype=float), (dim,)).copy()
            hi = np.broadcast_to(np.asarray(hi, dtype=float), (dim,)).copy()
            if np.any(lo > hi):
                raise ValueError(f"{name}: lower bound exceeds upper bound")
            object.__setattr__(self, name, (lo, hi))

    @property
    def times(self):
        return np.linspace(0.0, self.horizon, self.n_intervals + 1)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def cost(self, x, y, u):
        return float(self.running_cost(x, y, u))

    def cost_grad(self, x, y, u):
        """Gradient of the running cost as ``(d/dx, d/dy, d/du)``."""
        if self.running_cost_grad is not None:
            gx, gy, gu = self.running_cost_grad(x, y, u)
            return (np.atleast_1d(np.asarray(gx, float)), np.atleast_1d(np.asarray(gy, float)),
                    np.atleast_1d(np.asarray(gu, float)))
        p, q = self.system.p, self.system.q
        v = np.concatenate([x, y, u])
        g = fd_jacobian(lambda w: np.array([self.running_cost(w[:p], w[p:p + q], w[p + q:])]), v)[0]
        return g[:p], g[p:p + q], g[p + q:]

    def terminal(self, x):
        return 0.0 if self.terminal_cost is None else float(self.terminal_cost(x))

    def terminal_grad(self, x):
        if self.terminal_cost is None:
            return np.zeros(self.system.p)
        if self.terminal_cost_grad is not None:
            return np.asarray(self.terminal_cost_grad(x), dtype=float)
        return fd_jacobian(lambda w: np.array([self.terminal_cost(w)]), x)[0]


# ---------------------------------------------------------------------------
# Michaelis-Menten enzyme kinetics

def enzyme_system(eps: float = 1e-2) -> TwoTimescaleSystem:
    """``x' = -x + (x + 0.5) y + u``, ``eps y' = x - (x + 1) y``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    inv = 1.0 / eps

    def f(x, y, u):
        return np.array([-x[0] + (x[0] + 0.5) * y[0] + u[0]])

    def g(x, y, u):
        return np.array([(x[0] - (x[0] + 1.0) * y[0]) * inv])

    def jac(x, y, u):
        return np.array([
            [-1.0 + y[0], x[0] + 0.5],
            [(1.0 - y[0]) * inv, -(x[0] + 1.0) * inv],
        ])

    def jac_u(x, y, u):
        return np.array([[1.0], [0.0]])

    return TwoTimescaleSystem(1, 1, 1, f, g, jac, jac_u, eps=eps, name="enzyme")


def enzyme_h0(x, u=None):
    """Zeroth-order slow manifold of the enzyme model, ``x / (x + 1)``."""
    x = np.asarray(x, dtype=float)
    return x / (x + 1.0)


def make_enzyme_problem(eps: float = 1e-2, y0: float = 0.5, n_intervals: int = 40) -> OcpDefinition:
    """Enzyme benchmark: minimise ``int_0^5 -50 y + u^2 dt`` from ``x(0) = 1``.

    ``y0`` defaults to 0.5, the zeroth-order manifold value at ``x = 1``.
    """
    sys = enzyme_system(eps)

    def cost(x, y, u):
        return -50.0 * y[0] + u[0] ** 2

    def cost_grad(x, y, u):
        return np.zeros(1), np.array([-50.0]), np.array([2.0 * u[0]])

    return OcpDefinition(
        system=sys, horizon=5.0, running_cost=cost, running_cost_grad=cost_grad,
        initial_slow=[1.0], initial_fast=[y0],
        x_bounds=([0.0], [5.5]), y_bounds=([0.0], [5.5]), u_bounds=([0.0], [5.5]),
        n_intervals=n_intervals, name="enzyme", meta={"eps": eps},
    )


# ---------------------------------------------------------------------------
# Voltage regulator (linear, two slow and three fast states)

VR_A_SLOW = np.array([[-0.2, 0.5], [0.0, -0.5]])
VR_A_COUPLE = np.array([[0.0, 0.0, 0.0], [1.6, 0.0, 0.0]])
VR_A_FAST = np.array([
    [-5.0 / 7.0, 30.0 / 7.0, 0.0],
    [0.0, -1.25, 3.75],
    [0.0, 0.0, -0.5],
])
VR_B_FAST = np.array([[0.0], [0.0], [1.5]])


def vr_system(eps: float = 0.2) -> TwoTimescaleSystem:
    """Five-state linear voltage regulator ``z' = A z + B u``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    A = np.zeros((5, 5))
    A[:2, :2] = VR_A_SLOW
    A[:2, 2:] = VR_A_COUPLE
    A[2:, 2:] = VR_A_FAST / eps
    B = np.zeros((5, 1))
    B[2:] = VR_B_FAST / eps
    A.setflags(write=False)
    B.setflags(write=False)

    def f(x, y, u):
        return VR_A_SLOW @ x + VR_A_COUPLE @ y

    def g(x, y, u):
        return (VR_A_FAST @ y + VR_B_FAST @ u) / eps

    def jac(x, y, u):
        return A.copy()

    def jac_u(x, y, u):
        return B.copy()

    sys = TwoTimescaleSystem(2, 3, 1, f, g, jac, jac_u, eps=eps, name="vr")
    return sys


def vr_equilibrium_map(u):
    """Fast-subsystem equilibrium ``-A_f^{-1} B_f u = (54u, 9u, 3u)``."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    return -np.linalg.solve(VR_A_FAST, VR_B_FAST @ u)


def make_voltage_regulator_problem(eps: float = 0.2, x0=(-10.0, 0.0, 0.0, 0.0, 0.0),
                                   n_intervals: int = 10, u_bounds=(-15.0, 15.0),
                                   state_bound: float = 1e8) -> OcpDefinition:
    """Voltage regulator benchmark: minimise ``0.5 int_0^2 x1^2 + u^2 dt``.

    ``x0`` is the full five-state initial value ``(x1, x2, y1, y2, y3)``.
    """
    sys = vr_system(eps)
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (5,):
        raise DimensionError("voltage regulator x0 needs 5 entries")

    def cost(x, y, u):
        return 0.5 * (x[0] ** 2 + u[0] ** 2)

    def cost_grad(x, y, u):
        return np.array([x[0], 0.0]), np.zeros(3), np.array([u[0]])

    sb = float(state_bound)
    return OcpDefinition(
        system=sys, horizon=2.0, running_cost=cost, running_cost_grad=cost_grad,
        initial_slow=x0[:2], initial_fast=x0[2:],
        x_bounds=([-sb] * 2, [sb] * 2), y_bounds=([-sb] * 3, [sb] * 3),
        u_bounds=([u_bounds[0]], [u_bounds[1]]),
        n_intervals=n_intervals, name="vr", meta={"eps": eps},
    )


BUILTIN_PROBLEMS = {
    "enzyme": make_enzyme_problem,
    "vr": make_voltage_regulator_problem,
}
