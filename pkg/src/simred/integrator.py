"""Variable-order, variable-step BDF integrator with forward sensitivities.

The method is the quasi-constant step size BDF formulation of orders 1-5
(backward differences stored in a modified divided-difference array),
modified Newton iterations with an analytic Jacobian, and local error
control on the state. Sensitivities with respect to the initial state and
the constant control are propagated by the staggered direct method: after
each accepted state step the linear variational BDF equations are solved
with the Jacobian at the new point.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.interpolate import CubicHermiteSpline
from scipy.linalg import lu_factor, lu_solve

from .errors import IntegrationError
from .models import fd_jacobian

log = logging.getLogger(__name__)

MAX_ORDER = 5
NEWTON_MAXITER = 4
MIN_FACTOR = 0.2
MAX_FACTOR = 10.0
EPS = np.finfo(float).eps

_GAMMA = np.hstack((0.0, np.cumsum(1.0 / np.arange(1, MAX_ORDER + 1))))
_ALPHA = _GAMMA
_ERROR_CONST = 1.0 / np.arange(1, MAX_ORDER + 2)


@dataclass
class IntegratorOptions:
    rel_tol: float = 1e-6
    abs_tol: float = 1e-6
    max_steps: int = 100_000
    initial_step: Optional[float] = None
    max_step: float = np.inf

    def __post_init__(self):
        if not (self.rel_tol > 0 and self.abs_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


@dataclass
class IntegrationResult:
    """Outcome of one integration over ``[t0, t1]``.

    ``sensitivities`` is ``[dz(t1)/dz0 | dz(t1)/du]`` with shape
    ``(n, n + m)`` when requested. ``t_eval``/``dense`` hold the trajectory
    sampled by cubic Hermite interpolation between accepted steps.
    """

    end_state: np.ndarray
    steps_accepted: int
    steps_rejected: int
    n_rhs: int = 0
    n_jac: int = 0
    n_lu: int = 0
    sensitivities: Optional[np.ndarray] = None
    t_eval: Optional[np.ndarray] = None
    dense: Optional[np.ndarray] = None
    step_times: Optional[np.ndarray] = field(default=None, repr=False)
    step_states: Optional[np.ndarray] = field(default=None, repr=False)


class VectorField:
    """Autonomous vector field ``z' = fun(z, u)`` with derivative evaluators.

    ``jac`` and ``jac_u`` default to central differences. The last
    ``n_quad`` components may be pure quadratures: they must not appear in
    any right-hand side. They are then updated explicitly after the
    corrector converges instead of taking part in the Newton iteration.
    """

    def __init__(self, fun, jac=None, jac_u=None, n_quad=0):
        self.fun = fun
        self._jac = jac
        self._jac_u = jac_u
        self.n_quad = int(n_quad)

    def jac(self, z, u):
        if self._jac is not None:
            return self._jac(z, u)
        return fd_jacobian(lambda zz: self.fun(zz, u), z)

    def jac_u(self, z, u):
        if self._jac_u is not None:
            return self._jac_u(z, u)
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if u.size == 0:
            return np.zeros((np.size(z), 0))
        return fd_jacobian(lambda uu: self.fun(z, uu), u)

    @classmethod
    def from_system(cls, sys):
        return cls(sys.F, sys.J, sys.Ju)


def _rms(x):
    return float(np.sqrt(np.dot(x, x) / x.size)) if x.size else 0.0


def _split_norm(v, scale, scale_S):
    """Larger of the state and sensitivity RMS norms of a stacked vector."""
    n = scale.size
    err = _rms(v[:n] / scale)
    if scale_S is not None:
        err = max(err, _rms(v[n:] / scale_S))
    return err


def _compute_R(order, factor):
    I = np.arange(1, order + 1)[:, None]
    J = np.arange(1, order + 1)
    M = np.zeros((order + 1, order + 1))
    M[1:, 1:] = (I - 1 - factor * J) / I
    M[0] = 1.0
    return np.cumprod(M, axis=0)


def _change_D(D, order, factor):
    RU = _compute_R(order, factor) @ _compute_R(order, 1.0)
    D[: order + 1] = RU.T @ D[: order + 1]


def _initial_step(fun, z0, f0, u, direction, order, rtol, atol, span):
    scale = atol + np.abs(z0) * rtol
    d0 = _rms(z0 / scale)
    d1 = _rms(f0 / scale)
    h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    h0 = min(h0, span)
    z1 = z0 + h0 * direction * f0
    f1 = fun(z1, u)
    d2 = _rms((f1 - f0) / scale) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / (order + 1))
    return min(100 * h0, h1, span)


def _run(rhs, z0, u, t0, t1, opts, with_sens, t_eval):
    if opts is None:
        opts = IntegratorOptions()
    if not t1 > t0:
        raise ValueError(f"need t1 > t0, got [{t0}, {t1}]")
    fun = rhs.fun
    z0 = np.array(z0, dtype=float).ravel()
    u = np.atleast_1d(np.asarray(u, dtype=float))
    n = z0.size
    m = u.size
    rtol = max(opts.rel_tol, 100 * EPS)
    atol = opts.abs_tol
    newton_tol = max(10 * EPS / rtol, min(0.03, rtol ** 0.5))
    span = t1 - t0
    max_step = min(opts.max_step, span)

    n_rhs = n_jac = n_lu = 0
    f0 = np.asarray(fun(z0, u), dtype=float)
    n_rhs += 1
    if opts.initial_step is None:
        h_abs = _initial_step(fun, z0, f0, u, 1.0, 1, rtol, atol, span)
        n_rhs += 1
    else:
        h_abs = min(opts.initial_step, span)
    h_abs = min(h_abs, max_step)

    J = np.asarray(rhs.jac(z0, u), dtype=float)
    n_jac += 1
    k = n + m
    width = n + (n * k if with_sens else 0)
    D = np.zeros((MAX_ORDER + 3, width))
    D[0, :n] = z0
    D[1, :n] = f0 * h_abs
    if with_sens:
        S0 = np.hstack([np.eye(n), np.zeros((n, m))])
        B = np.asarray(rhs.jac_u(z0, u), dtype=float).reshape(n, m)
        D[0, n:] = S0.ravel()
        D[1, n:] = (J @ S0 + np.hstack([np.zeros((n, n)), B])).ravel() * h_abs
    nd = n - int(getattr(rhs, "n_quad", 0))  # components solved by Newton
    if not 0 <= nd <= n:
        raise ValueError("n_quad exceeds the state dimension")
    eye = np.eye(nd)

    t = t0
    order = 1
    n_equal_steps = 0
    lu = None
    lu_c = None
    current_jac = True
    accepted = rejected = 0

    dense = t_eval is not None
    if dense:
        ts = [t0]
        zs = [z0.copy()]
        fs = [f0.copy()]

    while t < t1:
        if accepted + rejected >= opts.max_steps:
            raise IntegrationError("maximum number of steps exceeded", t)
        min_step = 10 * EPS * max(abs(t), 1.0)
        if h_abs > max_step:
            _change_D(D, order, max_step / h_abs)
            h_abs = max_step
            n_equal_steps = 0
        step_accepted = False
        while not step_accepted:
            if h_abs < min_step:
                raise IntegrationError("step size fell below minimum", t)
            t_new = t + h_abs
            if t_new >= t1 or (t1 - t_new) < min_step:
                t_new = t1
                _change_D(D, order, (t_new - t) / h_abs)
                n_equal_steps = 0
            h = t_new - t
            h_abs = h

            z_predict = np.sum(D[: order + 1, :n], axis=0)
            scale = atol + rtol * np.abs(z_predict)
            psi = (D[1: order + 1, :n].T @ _GAMMA[1: order + 1]) / _ALPHA[order]
            c = h / _ALPHA[order]

            converged = False
            while not converged:
                if lu is None or lu_c != c:
                    lu = lu_factor(eye - c * J[:nd, :nd], check_finite=False)
                    lu_c = c
                    n_lu += 1
                # modified Newton on z_new - c f(z_new) = z_predict - psi over
                # the dynamic components
                d = np.zeros(n)
                z = z_predict.copy()
                dz_norm_old = None
                n_iter = 0
                for it in range(NEWTON_MAXITER if nd else 0):
                    n_iter = it + 1
                    try:
                        fz = np.asarray(fun(z, u), dtype=float)
                    except (ArithmeticError, ValueError, FloatingPointError):
                        break
                    n_rhs += 1
                    if not np.all(np.isfinite(fz)):
                        break
                    dz = lu_solve(lu, c * fz[:nd] - psi[:nd] - d[:nd], check_finite=False)
                    dz_norm = _rms(dz / scale[:nd])
                    rate = None if dz_norm_old is None else dz_norm / dz_norm_old
                    if rate is not None and (
                            rate >= 1 or rate ** (NEWTON_MAXITER - it) / (1 - rate) * dz_norm > newton_tol):
                        break
                    z[:nd] += dz
                    d[:nd] += dz
                    if dz_norm == 0 or (rate is not None and rate / (1 - rate) * dz_norm < newton_tol):
                        converged = True
                        break
                    dz_norm_old = dz_norm
                if nd == 0:
                    converged = True
                if converged and nd < n:
                    # explicit quadrature update at the converged state
                    try:
                        fz = np.asarray(fun(z, u), dtype=float)
                        n_rhs += 1
                    except (ArithmeticError, ValueError, FloatingPointError):
                        fz = np.full(n, np.nan)
                    if np.all(np.isfinite(fz[nd:])):
                        d[nd:] = c * fz[nd:] - psi[nd:]
                        z[nd:] = z_predict[nd:] + d[nd:]
                    else:
                        converged = False
                if not converged:
                    if current_jac:
                        break
                    J = np.asarray(rhs.jac(z_predict, u), dtype=float)
                    n_jac += 1
                    lu = None
                    current_jac = True

            if not converged:
                _change_D(D, order, 0.5)
                h_abs *= 0.5
                n_equal_steps = 0
                rejected += 1
                continue

            safety = 0.9 * (2 * NEWTON_MAXITER + 1) / (2 * NEWTON_MAXITER + n_iter)
            scale = atol + rtol * np.abs(z)
            error_norm = _rms(_ERROR_CONST[order] * d / scale)
            if with_sens and error_norm <= 1:
                # staggered corrector; its local error joins the step control
                J = np.asarray(rhs.jac(z, u), dtype=float)
                B = np.asarray(rhs.jac_u(z, u), dtype=float).reshape(n, m)
                n_jac += 1
                current_jac = True
                lu = lu_factor(eye - c * J[:nd, :nd], check_finite=False)
                lu_c = c
                n_lu += 1
                S_predict = np.sum(D[: order + 1, n:], axis=0).reshape(n, k)
                psi_S = ((D[1: order + 1, n:].T @ _GAMMA[1: order + 1]) / _ALPHA[order]).reshape(n, k)
                rhs_S = S_predict - psi_S
                rhs_S[:, n:] += c * B
                S_new = np.empty_like(rhs_S)
                S_new[:nd] = lu_solve(lu, rhs_S[:nd], check_finite=False) if nd else rhs_S[:nd]
                S_new[nd:] = rhs_S[nd:] + c * (J[nd:, :nd] @ S_new[:nd])
                d_S = (S_new - S_predict).ravel()
                scale_S = atol + rtol * np.abs(S_new.ravel())
                error_norm = max(error_norm, _rms(_ERROR_CONST[order] * d_S / scale_S))
            if error_norm > 1:
                factor = max(MIN_FACTOR, safety * error_norm ** (-1.0 / (order + 1)))
                _change_D(D, order, factor)
                h_abs *= factor
                n_equal_steps = 0
                rejected += 1
            else:
                step_accepted = True

        accepted += 1
        n_equal_steps += 1
        t = t_new

        if with_sens:
            d_full = np.concatenate([d, d_S])
        else:
            current_jac = False
            d_full = d

        D[order + 2] = d_full - D[order + 1]
        D[order + 1] = d_full
        for i in reversed(range(order + 1)):
            D[i] += D[i + 1]

        if dense:
            ts.append(t)
            zs.append(D[0, :n].copy())
            fs.append(np.asarray(fun(D[0, :n], u), dtype=float))
            n_rhs += 1

        if t >= t1:
            break
        if n_equal_steps < order + 1:
            continue

        scale = atol + rtol * np.abs(D[0, :n])
        scale_S = atol + rtol * np.abs(D[0, n:]) if with_sens else None
        error_norm = _split_norm(_ERROR_CONST[order] * d_full, scale, scale_S)
        if order > 1:
            error_m_norm = _split_norm(_ERROR_CONST[order - 1] * D[order], scale, scale_S)
        else:
            error_m_norm = np.inf
        if order < MAX_ORDER:
            error_p_norm = _split_norm(_ERROR_CONST[order + 1] * D[order + 2], scale, scale_S)
        else:
            error_p_norm = np.inf
        error_norms = np.array([error_m_norm, error_norm, error_p_norm])
        with np.errstate(divide="ignore"):
            factors = error_norms ** (-1.0 / np.arange(order, order + 3))
        delta_order = int(np.argmax(factors)) - 1
        order += delta_order
        factor = min(MAX_FACTOR, safety * float(np.max(factors)))
        _change_D(D, order, factor)
        h_abs *= factor
        n_equal_steps = 0
        lu = None

    result = IntegrationResult(
        end_state=D[0, :n].copy(), steps_accepted=accepted, steps_rejected=rejected,
        n_rhs=n_rhs, n_jac=n_jac, n_lu=n_lu,
    )
    if with_sens:
        result.sensitivities = D[0, n:].reshape(n, k).copy()
    if dense:
        ts_a = np.array(ts)
        zs_a = np.array(zs)
        spline = CubicHermiteSpline(ts_a, zs_a, np.array(fs), axis=0)
        te = np.asarray(t_eval, dtype=float)
        result.t_eval = te
        result.dense = spline(np.clip(te, t0, t1))
        result.step_times = ts_a
        result.step_states = zs_a
    return result


def integrate(rhs, z0, u, t0, t1, opts=None, t_eval=None) -> IntegrationResult:
    """Integrate ``z' = rhs.fun(z, u)`` with ``u`` held constant on ``[t0, t1]``.

    Raises
    ------
    IntegrationError
        When the step budget is exhausted or the step size collapses.
    """
    return _run(rhs, z0, u, t0, t1, opts, False, t_eval)


def integrate_with_sensitivities(rhs, z0, u, t0, t1, opts=None, t_eval=None) -> IntegrationResult:
    """As :func:`integrate`, additionally returning ``[dz/dz0 | dz/du]``."""
    return _run(rhs, z0, u, t0, t1, opts, True, t_eval)
