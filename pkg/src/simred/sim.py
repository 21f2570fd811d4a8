"""Slow-manifold points by minimising the curvature-type criterion ``|J F|^2``.

For fixed slow state ``x*`` and control ``u*`` the fast state ``y*`` is the
minimiser of ``Phi(y) = |J(x*, y, u*) F(x*, y, u*)|^2``. The local problem is
solved by a damped Gauss-Newton method; derivatives of the implicit map
``y* = h(x*, u*)`` come from differentiating the stationarity condition
``G(y; x, u) = grad_y Phi = 0``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConvergenceError, SensitivityError
from .models import TwoTimescaleSystem

log = logging.getLogger(__name__)

_CBRT_EPS = np.finfo(float).eps ** (1.0 / 3.0)
_PHI_RESOLUTION = 1e3 * np.finfo(float).eps


@dataclass
class GnOptions:
    grad_tol: float = 1e-10
    step_tol: float = 1e-11
    max_iter: int = 50
    contraction: float = 0.5
    armijo: float = 1e-4

    def __post_init__(self):
        if not (self.grad_tol > 0 and self.step_tol > 0):
            raise ValueError("tolerances must be positive")
        if not 0 < self.contraction < 1:
            raise ValueError("contraction factor must lie in (0, 1)")


@dataclass
class SimPoint:
    """A converged manifold sample ``(x*, u*) -> y*``.

    ``residual_sq`` is ``Phi`` at the solution and ``grad_norm`` the final
    ``|grad_y Phi|``. Sensitivities are ``None`` until filled by
    :func:`sim_sensitivities`.
    """

    x_star: np.ndarray
    u_star: np.ndarray
    y_star: np.ndarray
    residual_sq: float
    gn_iterations: int
    grad_norm: float = 0.0
    dh_dx: Optional[np.ndarray] = None
    dh_du: Optional[np.ndarray] = None
    history: list = field(default_factory=list, repr=False)


def jf_residual(sys: TwoTimescaleSystem, x, y, u) -> np.ndarray:
    """Residual ``r = J(x, y, u) F(x, y, u)``; ``|r|^2`` is the local criterion."""
    x, y, u = sys.check_args(x, y, u)
    z = np.concatenate([x, y])
    return sys.J(z, u) @ sys.F(z, u)


def _residual_and_jac(sys, z, u):
    """``r`` and ``dr/dz = J J + (D_F J)``, the second term by one central
    difference of the Jacobian along the direction ``F``."""
    F = sys.F(z, u)
    J = sys.J(z, u)
    r = J @ F
    dr = J @ J
    fn = np.linalg.norm(F)
    if fn > 0:
        h = _CBRT_EPS * (1.0 + np.linalg.norm(z)) / fn
        dr = dr + (sys.J(z + h * F, u) - sys.J(z - h * F, u)) / (2 * h)
    return r, dr


def _gradient(sys, x, y, u):
    """``G = grad_y Phi = 2 (dr/dy)^T r``."""
    z = np.concatenate([x, y])
    r, dr = _residual_and_jac(sys, z, u)
    return 2.0 * dr[:, sys.p:].T @ r


def fast_equilibrium_guess(sys: TwoTimescaleSystem, x, u, y0=None, iters=20) -> np.ndarray:
    """Solve ``g(x, y, u) = 0`` for ``y`` by Newton; falls back to ``y0`` (or 0)."""
    x, _, u = sys.check_args(x, np.zeros(sys.q), u)
    start = np.zeros(sys.q) if y0 is None else np.asarray(y0, dtype=float).copy()
    y = start.copy()
    p = sys.p
    for _ in range(iters):
        g = np.atleast_1d(sys.rhs_fast(x, y, u))
        if not np.all(np.isfinite(g)):
            return start
        J = sys.jacobian(x, y, u)
        try:
            dy = np.linalg.solve(J[p:, p:], -g)
        except np.linalg.LinAlgError:
            return start
        y = y + dy
        if np.linalg.norm(dy) <= 1e-12 * (1.0 + np.linalg.norm(y)):
            break
    if not np.all(np.isfinite(y)):
        return start
    return y


def certificate_bound(Jr, r, y, opts: GnOptions) -> float:
    """Largest ``|grad_y Phi|`` accepted as stationary, given ``dr/dy``,
    the residual and the fast state."""
    jn = float(np.linalg.norm(Jr))
    return (opts.grad_tol * max(1.0, 2.0 * jn * float(np.linalg.norm(r)))
            + 2.0 * jn * jn * opts.step_tol * (1.0 + float(np.linalg.norm(y))))


def solve_sim_local(sys: TwoTimescaleSystem, x_star, u_star, y_init=None,
                    opts: Optional[GnOptions] = None, sensitivities: bool = False) -> SimPoint:
    """Minimise ``|J F|^2`` over the fast state by damped Gauss-Newton.

    Every returned point satisfies the stationarity certificate
    ``|grad Phi| <= grad_tol * max(1, 2 |dr/dy| |r|)
    + 2 |dr/dy|^2 step_tol (1 + |y|)``. The second term is the gradient
    whose Gauss-Newton step is below ``step_tol``; it dominates for small
    ``eps``, where ``r`` is a difference of ``O(eps^-2)`` terms. The
    iteration count is the number of Gauss-Newton steps taken.

    Raises
    ------
    ConvergenceError
        After ``max_iter`` steps or when the line search stalls; ``best``
        holds the last iterate as a :class:`SimPoint`.
    """
    opts = opts or GnOptions()
    if y_init is None:
        y_init = np.zeros(sys.q)
    x, y, u = sys.check_args(x_star, y_init, u_star)
    y = y.copy()
    p = sys.p

    def evaluate(yy):
        z = np.concatenate([x, yy])
        r, dr = _residual_and_jac(sys, z, u)
        return r, dr[:, p:]

    r, Jr = evaluate(y)
    phi = float(r @ r)
    history = [phi]
    it = 0
    converged = False
    while True:
        grad = 2.0 * Jr.T @ r
        gnorm = float(np.linalg.norm(grad))
        scale = max(1.0, 2.0 * np.linalg.norm(Jr) * np.sqrt(phi))
        if not np.isfinite(phi):
            break
        small_grad = gnorm <= opts.grad_tol * scale
        if it >= opts.max_iter and not small_grad:
            break
        step, _, rank, _ = np.linalg.lstsq(Jr, -r, rcond=None)
        if rank < sys.q or not np.all(np.isfinite(step)):
            lam = 1e-8 * max(1.0, float(np.sum(Jr * Jr)))
            try:
                step = np.linalg.solve(Jr.T @ Jr + lam * np.eye(sys.q), -Jr.T @ r)
            except np.linalg.LinAlgError:
                converged = small_grad
                break
        if small_grad:
            # one closing Gauss-Newton step: the scaled gradient test alone
            # would leave a warm-started solve where it began
            y_try = y + step
            r_try, Jr_try = evaluate(y_try)
            phi_try = float(r_try @ r_try)
            if np.isfinite(phi_try) and phi_try <= phi * (1.0 + _PHI_RESOLUTION):
                y, r, Jr, phi = y_try, r_try, Jr_try, phi_try
                history.append(phi)
                it += 1
            gnorm = float(np.linalg.norm(2.0 * Jr.T @ r))
            converged = True
            break
        slope = float(grad @ step)
        alpha = 1.0
        accepted = False
        if -slope <= _PHI_RESOLUTION * phi:
            # predicted decrease is below the rounding of Phi, so Armijo
            # cannot judge the step; take the full Gauss-Newton correction
            y_try = y + step
            r_try, Jr_try = evaluate(y_try)
            phi_try = float(r_try @ r_try)
            accepted = bool(np.isfinite(phi_try))
        while not accepted and alpha > 1e-12:
            y_try = y + alpha * step
            r_try, Jr_try = evaluate(y_try)
            phi_try = float(r_try @ r_try)
            if np.isfinite(phi_try) and phi_try <= phi + opts.armijo * alpha * min(slope, 0.0):
                accepted = True
                break
            alpha *= opts.contraction
        it += 1
        if not accepted:
            # no decrease available: stationary to working precision if the
            # proposed step is already negligible
            if np.linalg.norm(step) <= opts.step_tol * (1.0 + np.linalg.norm(y)) * 1e3:
                converged = True
            break
        y, r, Jr, phi = y_try, r_try, Jr_try, phi_try
        history.append(phi)
        if alpha * np.linalg.norm(step) <= opts.step_tol * (1.0 + np.linalg.norm(y)):
            converged = True
            gnorm = float(np.linalg.norm(2.0 * Jr.T @ r))
            break

    if converged and gnorm > certificate_bound(Jr, r, y, opts):
        converged = False
    point = SimPoint(x_star=x, u_star=u, y_star=y, residual_sq=phi, gn_iterations=it,
                     grad_norm=gnorm, history=history)
    if not converged:
        raise ConvergenceError(
            f"Gauss-Newton did not converge at x={x}, u={u} after {it} iterations", best=point)
    if sensitivities:
        point.dh_dx, point.dh_du = sim_sensitivities(sys, point)
    return point


def stationarity_jacobians(sys: TwoTimescaleSystem, x, y, u):
    """Central differences of ``G = grad_y Phi`` in ``y``, ``x`` and ``u``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))

    def diff(which, v):
        out = np.empty((sys.q, v.size))
        for i in range(v.size):
            h = _CBRT_EPS * (1.0 + abs(v[i]))
            vp = v.copy()
            vm = v.copy()
            vp[i] += h
            vm[i] -= h
            if which == "y":
                gp, gm = _gradient(sys, x, vp, u), _gradient(sys, x, vm, u)
            elif which == "x":
                gp, gm = _gradient(sys, vp, y, u), _gradient(sys, vm, y, u)
            else:
                gp, gm = _gradient(sys, x, y, vp), _gradient(sys, x, y, vm)
            out[:, i] = (gp - gm) / (2 * h)
        return out

    return diff("y", y), diff("x", x), diff("u", u)


def sim_sensitivities(sys: TwoTimescaleSystem, point: SimPoint, cond_limit: float = 1e12):
    """``dh/dx`` and ``dh/du`` from the linearised stationarity condition.

    Solves ``G_y dh_dx = -G_x`` and ``G_y dh_du = -G_u`` at the solution.

    Raises
    ------
    SensitivityError
        If ``G_y`` is numerically singular.
    """
    Gy, Gx, Gu = stationarity_jacobians(sys, point.x_star, point.y_star, point.u_star)
    if not np.all(np.isfinite(Gy)) or np.linalg.cond(Gy) > cond_limit:
        raise SensitivityError(
            f"stationarity Jacobian singular at x={point.x_star}, u={point.u_star}")
    rhs = -np.hstack([Gx, Gu])
    sol = np.linalg.solve(Gy, rhs)
    return sol[:, : sys.p], sol[:, sys.p:]


def solve_sim_integral(sys: TwoTimescaleSystem, x_star, u_star, t_star: float, z_init=None,
                       nlp_tol: float = 1e-4, integ_opts=None, max_iter: int = 200) -> SimPoint:
    """Integral criterion: minimise ``int_0^t* |J F|^2 dt`` over ``z(0)``
    subject to ``x(t*) = x*``, by single shooting.

    Returns the fast state ``y(t*)``. Sensitivities are not filled.
    """
    from .integrator import IntegratorOptions, VectorField, integrate_with_sensitivities
    from .nlp import NlpProblem, solve_nlp

    if not t_star > 0:
        raise ValueError("t_star must be positive")
    x_star, _, u = sys.check_args(x_star, np.zeros(sys.q), u_star)
    n, p = sys.n, sys.p
    integ_opts = integ_opts or IntegratorOptions(1e-9, 1e-9, max_steps=20_000)

    def fun(w, uu):
        z = w[:n]
        return np.append(sys.F(z, uu), float(np.sum((sys.J(z, uu) @ sys.F(z, uu)) ** 2)))

    def jac(w, uu):
        z = w[:n]
        r, dr = _residual_and_jac(sys, z, uu)
        out = np.zeros((n + 1, n + 1))
        out[:n, :n] = sys.J(z, uu)
        out[n, :n] = 2.0 * r @ dr
        return out

    def jac_u(w, uu):
        z = w[:n]
        out = np.zeros((n + 1, sys.m))
        out[:n] = sys.Ju(z, uu)
        if sys.m:
            r = sys.J(z, uu) @ sys.F(z, uu)
            for i in range(sys.m):
                h = _CBRT_EPS * (1.0 + abs(uu[i]))
                up, um = uu.copy(), uu.copy()
                up[i] += h
                um[i] -= h
                dr = (sys.J(z, up) @ sys.F(z, up) - sys.J(z, um) @ sys.F(z, um)) / (2 * h)
                out[n, i] = 2.0 * r @ dr
        return out

    field_ = VectorField(fun, jac, jac_u, n_quad=1)
    cache = {}

    def run(z0):
        key = z0.tobytes()
        if key not in cache:
            cache.clear()
            cache[key] = integrate_with_sensitivities(
                field_, np.append(z0, 0.0), u, 0.0, t_star, integ_opts)
        return cache[key]

    if z_init is None:
        z_init = np.concatenate([x_star, fast_equilibrium_guess(sys, x_star, u)])
    z_init = np.asarray(z_init, dtype=float)
    # the integrand grows like eps^-4 off the manifold; scaling by the
    # initial gradient keeps the first quasi-Newton steps of unit size
    f_scale = 1.0 / max(1.0, float(np.max(np.abs(run(z_init).sensitivities[n, :n]))))
    problem = NlpProblem(
        n_vars=n,
        objective=lambda z0: f_scale * float(run(z0).end_state[n]),
        gradient=lambda z0: f_scale * run(z0).sensitivities[n, :n],
        constraints=lambda z0: run(z0).end_state[:p] - x_star,
        jacobian=lambda z0: run(z0).sensitivities[:p, :n].copy(),
        n_eq=p,
    )
    sol = solve_nlp(problem, np.asarray(z_init, dtype=float), tol=nlp_tol, max_iter=max_iter)
    res = run(sol.x)
    y_end = res.end_state[p:n].copy()
    point = SimPoint(x_star=x_star, u_star=u, y_star=y_end, residual_sq=float(res.end_state[n]),
                     gn_iterations=sol.iterations)
    if sol.status != "converged":
        raise ConvergenceError(f"integral criterion NLP ended with status {sol.status}", best=point)
    return point
