"""Line-search SQP for smooth programs with equality constraints and bounds.

Problem form::

    min f(x)   s.t.   c(x) = 0,   l <= x <= u

Lagrangian convention ``L = f - lam^T c - mu^T x`` so that stationarity reads
``grad f - A^T lam - mu = 0``; a bound multiplier ``mu_j > 0`` belongs to an
active lower bound and ``mu_j < 0`` to an active upper bound.

The Hessian of the Lagrangian is approximated by damped BFGS, optionally
block-wise for partially separable problems. Steps come from a QP solved by
a primal active-set method in elastic form, so the subproblem is feasible
even when the linearised constraints are not. Globalisation uses the l1
exact penalty merit function with a second-order correction.
"""

from __future__ import annotations

import logging
import sys
import warnings
from dataclasses import dataclass, field
from typing import Callable, List, NamedTuple, Optional, Sequence

import numpy as np
from scipy.linalg import LinAlgError, LinAlgWarning, lstsq, solve

from .errors import SimredError

log = logging.getLogger(__name__)

STATUSES = ("converged", "max_iter", "line_search_failure", "infeasible_stationary")

# evaluator failures treated as an unusable trial point
_EVAL_ERRORS = (SimredError, ArithmeticError, ValueError, LinAlgError)


@dataclass
class NlpProblem:
    """Smooth program ``min f(x) s.t. c(x) = 0, lower <= x <= upper``.

    Parameters
    ----------
    n_vars : int
        Number of variables.
    objective, gradient : callable
        ``f(x) -> float`` and ``grad f(x) -> (n,)``.
    constraints, jacobian : callable, optional
        ``c(x) -> (n_eq,)`` and ``A(x) -> (n_eq, n)``.
    n_eq : int
        Number of equality constraints.
    lower, upper : array_like, optional
        Variable bounds; infinite entries are allowed.
    hessian_blocks : sequence of index arrays, optional
        Partition of the variables on which the Lagrangian Hessian is block
        diagonal. BFGS is then applied per block.
    hessian : callable, optional
        ``H(x, lam) -> (n, n)`` exact Hessian of the Lagrangian, used in
        place of BFGS after an eigenvalue floor.
    """

    n_vars: int
    objective: Callable
    gradient: Callable
    constraints: Optional[Callable] = None
    jacobian: Optional[Callable] = None
    n_eq: int = 0
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    hessian_blocks: Optional[Sequence] = None
    hessian: Optional[Callable] = None

    def __post_init__(self):
        n = self.n_vars
        self.lower = np.full(n, -np.inf) if self.lower is None else np.asarray(self.lower, dtype=float).copy()
        self.upper = np.full(n, np.inf) if self.upper is None else np.asarray(self.upper, dtype=float).copy()
        if self.lower.shape != (n,) or self.upper.shape != (n,):
            raise ValueError("bounds must have length n_vars")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound above upper bound")
        if self.n_eq > 0 and (self.constraints is None or self.jacobian is None):
            raise ValueError("n_eq > 0 needs constraints and jacobian")
        if self.hessian_blocks is not None:
            blocks = [np.asarray(b, dtype=int) for b in self.hessian_blocks]
            cover = np.sort(np.concatenate(blocks)) if blocks else np.array([], dtype=int)
            if not np.array_equal(cover, np.arange(n)):
                raise ValueError("hessian_blocks must partition the variables")
            self.hessian_blocks = blocks

    def c(self, x):
        if self.n_eq == 0:
            return np.zeros(0)
        return np.asarray(self.constraints(x), dtype=float).reshape(self.n_eq)

    def A(self, x):
        if self.n_eq == 0:
            return np.zeros((0, self.n_vars))
        return np.asarray(self.jacobian(x), dtype=float).reshape(self.n_eq, self.n_vars)

    def check_derivatives(self, x, rtol=1e-4, step=1e-6):
        """Compare gradient and Jacobian with central differences.

        Returns the largest relative deviation; raises ``AssertionError``
        above ``rtol``.
        """
        x = np.asarray(x, dtype=float)
        g = np.asarray(self.gradient(x), dtype=float)
        A = self.A(x)
        g_fd = np.empty(self.n_vars)
        A_fd = np.empty((self.n_eq, self.n_vars))
        for j in range(self.n_vars):
            h = step * max(1.0, abs(x[j]))
            xp, xm = x.copy(), x.copy()
            xp[j] += h
            xm[j] -= h
            g_fd[j] = (self.objective(xp) - self.objective(xm)) / (2 * h)
            A_fd[:, j] = (self.c(xp) - self.c(xm)) / (2 * h)
        worst = max(_rel_dev(g, g_fd), _rel_dev(A, A_fd) if self.n_eq else 0.0)
        if worst > rtol:
            raise AssertionError(f"derivative check failed: relative deviation {worst:.3g}")
        return worst


def _rel_dev(a, b):
    return float(np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b))))


class KktResiduals(NamedTuple):
    stationarity: float
    feasibility: float
    complementarity: float

    def max(self):
        return max(self)


@dataclass
class IterationRecord:
    iteration: int
    objective: float
    feasibility: float
    stationarity: float
    step: float
    merit_before: float
    merit_after: float
    penalty: float


@dataclass
class NlpSolution:
    """Result of :func:`solve_nlp`; ``x`` is the best iterate for any status."""

    x: np.ndarray
    eq_multipliers: np.ndarray
    bound_multipliers: np.ndarray
    objective: float
    kkt: KktResiduals
    iterations: int
    status: str
    history: List[IterationRecord] = field(default_factory=list)
    qp_iterations: int = 0

    @property
    def success(self):
        return self.status == "converged"


def _complementarity(x, lower, upper, mu):
    lo_gap = np.where(np.isfinite(lower), x - lower, np.inf)
    up_gap = np.where(np.isfinite(upper), upper - x, np.inf)
    comp = np.zeros_like(x)
    pos, neg = mu > 0, mu < 0
    # a multiplier on an infinite bound is a pure violation
    comp[pos] = np.where(np.isfinite(lo_gap[pos]), np.abs(lo_gap[pos]) * mu[pos], np.abs(mu[pos]))
    comp[neg] = np.where(np.isfinite(up_gap[neg]), np.abs(up_gap[neg]) * -mu[neg], np.abs(mu[neg]))
    return comp


def kkt_residuals(problem: NlpProblem, x, multipliers) -> KktResiduals:
    """Scaled KKT residuals at ``x`` for ``multipliers = (lam, mu)``.

    Stationarity and complementarity are infinity norms divided by
    ``max(1, |lam|_inf, |mu|_inf)``; feasibility is ``|c(x)|_inf`` plus any
    bound violation.
    """
    x = np.asarray(x, dtype=float)
    lam, mu = multipliers
    lam = np.zeros(problem.n_eq) if lam is None else np.asarray(lam, dtype=float)
    mu = np.zeros(problem.n_vars) if mu is None else np.asarray(mu, dtype=float)
    if lam.shape != (problem.n_eq,) or mu.shape != (problem.n_vars,):
        raise ValueError("multiplier dimensions do not match the problem")
    g = np.asarray(problem.gradient(x), dtype=float)
    return _kkt(g, problem.c(x), problem.A(x), x, problem.lower, problem.upper, lam, mu)


def _kkt(g, c, A, x, lower, upper, lam, mu):
    scale = max(1.0, float(np.max(np.abs(lam), initial=0.0)), float(np.max(np.abs(mu), initial=0.0)))
    stat = float(np.max(np.abs(g - A.T @ lam - mu), initial=0.0)) / scale
    viol = float(np.max(np.maximum(lower - x, 0.0), initial=0.0) + np.max(np.maximum(x - upper, 0.0), initial=0.0))
    feas = float(np.max(np.abs(c), initial=0.0)) + viol
    comp = float(np.max(_complementarity(x, lower, upper, mu), initial=0.0)) / scale
    return KktResiduals(stat, feas, comp)


# ---------------------------------------------------------------------------
# QP subproblem

@dataclass
class QpResult:
    d: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    active: np.ndarray  # -1 lower, +1 upper, 0 free, per variable
    slack: float        # l1 norm of the elastic slacks
    iterations: int


def _solve_checked(K, rhs):
    """``solve`` that raises ``LinAlgError`` instead of warning on a
    numerically singular matrix."""
    with warnings.catch_warnings():
        warnings.simplefilter("error", LinAlgWarning)
        try:
            return solve(K, rhs, check_finite=False)
        except LinAlgWarning as exc:
            raise LinAlgError(str(exc)) from None


def _eqp(H, gz, E, free):
    """Null-space step on the free variables: ``H p - E^T lam = -gz``, ``E p = 0``."""
    F = np.flatnonzero(free)
    m = E.shape[0]
    nf = F.size
    K = np.zeros((nf + m, nf + m))
    K[:nf, :nf] = H[np.ix_(F, F)]
    K[:nf, nf:] = -E[:, F].T
    K[nf:, :nf] = E[:, F]
    rhs = np.concatenate([-gz[F], np.zeros(m)])
    try:
        sol = _solve_checked(K, rhs)
        if not np.all(np.isfinite(sol)):
            raise LinAlgError("non-finite EQP solution")
    except (LinAlgError, ValueError):
        sol = lstsq(K, rhs, check_finite=False)[0]
    p = np.zeros(H.shape[0])
    p[F] = sol[:nf]
    return p, sol[nf:]


def _feasible_eqp(B, g, A, c, d, free):
    """Minimiser of the QP model with the fixed variables held at ``d`` and
    ``c + A d = 0`` imposed; ``None`` if that system is singular."""
    F = np.flatnonzero(free)
    Wx = np.flatnonzero(~free)
    m = c.size
    nf = F.size
    K = np.zeros((nf + m, nf + m))
    K[:nf, :nf] = B[np.ix_(F, F)]
    K[:nf, nf:] = -A[:, F].T
    K[nf:, :nf] = A[:, F]
    rhs = np.concatenate([-g[F] - B[np.ix_(F, Wx)] @ d[Wx], -c - A[:, Wx] @ d[Wx]])
    try:
        sol = _solve_checked(K, rhs)
    except (LinAlgError, ValueError):
        return None
    if not np.all(np.isfinite(sol)):
        return None
    out = d.copy()
    out[F] = sol[:nf]
    return out


def solve_qp(B, g, A, c, lower, upper, rho, working=None, max_iter=None) -> QpResult:
    """Elastic QP ``min g d + d B d / 2 + rho (|v|_1 + |w|_1)``
    s.t. ``c + A d = v - w``, ``lower <= d <= upper``, ``v, w >= 0``.

    ``lower <= 0 <= upper`` is required. ``working`` is a per-variable
    activity vector from a previous solve used as the initial working set.
    """
    n = g.size
    m = c.size
    N = n + 2 * m
    H = np.zeros((N, N))
    H[:n, :n] = B
    q = np.concatenate([g, np.full(2 * m, rho)])
    E = np.hstack([A, -np.eye(m), np.eye(m)])
    zlo = np.concatenate([lower, np.zeros(2 * m)])
    zhi = np.concatenate([upper, np.full(2 * m, np.inf)])
    if max_iter is None:
        max_iter = 10 * N + 100

    st = np.zeros(N, dtype=int)
    if working is not None:
        st[:n] = np.where(working < 0, -1, np.where(working > 0, 1, 0))
        st[:n][(st[:n] < 0) & ~np.isfinite(lower)] = 0
        st[:n][(st[:n] > 0) & ~np.isfinite(upper)] = 0
    d = np.where(st[:n] < 0, lower, np.where(st[:n] > 0, upper, 0.0))
    # warm start: equality-constrained minimiser on the free variables, clipped
    if m > 0 and np.any(st[:n] == 0):
        d_try = _feasible_eqp(B, g, A, c, d, st[:n] == 0)
        if d_try is not None:
            lo_hit = (d_try <= lower) & np.isfinite(lower) & (st[:n] == 0)
            hi_hit = (d_try >= upper) & np.isfinite(upper) & (st[:n] == 0)
            d = np.clip(d_try, lower, upper)
            st[:n][lo_hit] = -1
            st[:n][hi_hit] = 1
    r = c + A @ d
    thresh = 1e-12 * max(1.0, float(np.max(np.abs(c), initial=0.0)))
    v = np.maximum(r, 0.0)
    w = np.maximum(-r, 0.0)
    small = np.abs(r) <= thresh
    v[small] = w[small] = 0.0
    st[n:n + m] = np.where(v > 0, 0, -1)
    st[n + m:] = np.where(w > 0, 0, -1)
    z = np.concatenate([d, v, w])

    cold = False
    lam = np.zeros(m)
    for it in range(1, max_iter + 1):
        free = st == 0
        gz = H @ z + q
        p, lam = _eqp(H, gz, E, free)
        bad = not np.all(np.isfinite(p)) or (m > 0 and np.max(np.abs(E @ p)) > 1e-8 * (1.0 + np.max(np.abs(p))))
        if bad and not cold:
            # linearised constraints dependent on the fixed set: free one slack per row
            cold = True
            r = c + A @ z[:n] - z[n:n + m] + z[n + m:]
            z[n:n + m] += np.maximum(r, 0.0)
            z[n + m:] += np.maximum(-r, 0.0)
            st[n:n + m] = 0
            st[n + m:] = np.where(z[n + m:] > 0, 0, -1)
            st[n:n + m][(z[n:n + m] == 0) & (z[n + m:] > 0)] = -1
            continue
        pnorm = float(np.max(np.abs(p), initial=0.0))
        if pnorm <= 1e-13 * (1.0 + float(np.max(np.abs(z), initial=0.0))):
            mu_all = H @ z + q - E.T @ lam
            wrong = np.zeros(N)
            wrong[st < 0] = -mu_all[st < 0]
            wrong[st > 0] = mu_all[st > 0]
            scale = 1.0 + float(np.max(np.abs(mu_all), initial=0.0))
            j = int(np.argmax(wrong))
            if wrong[j] <= 1e-10 * scale:
                mu = np.where(st[:n] != 0, mu_all[:n], 0.0)
                return QpResult(z[:n].copy(), lam, mu, st[:n].copy(),
                                float(np.sum(z[n:])), it)
            st[j] = 0
            continue
        # ratio test over free variables
        alpha = 1.0
        block, side = -1, 0
        # compare before dividing so tiny step components cannot overflow
        for idx in np.flatnonzero(free & (p < 0) & np.isfinite(zlo)):
            if zlo[idx] - z[idx] > alpha * p[idx]:
                alpha, block, side = max((zlo[idx] - z[idx]) / p[idx], 0.0), idx, -1
        for idx in np.flatnonzero(free & (p > 0) & np.isfinite(zhi)):
            if zhi[idx] - z[idx] < alpha * p[idx]:
                alpha, block, side = max((zhi[idx] - z[idx]) / p[idx], 0.0), idx, 1
        z = z + alpha * p
        if block >= 0:
            z[block] = zlo[block] if side < 0 else zhi[block]
            st[block] = side
    log.warning("QP active-set iteration limit reached")
    mu_all = H @ z + q - E.T @ lam
    mu = np.where(st[:n] != 0, mu_all[:n], 0.0)
    return QpResult(z[:n].copy(), lam, mu, st[:n].copy(), float(np.sum(z[n:])), max_iter)


# ---------------------------------------------------------------------------
# Hessian approximation

class _BlockBfgs:
    """Damped BFGS on a block-diagonal matrix (Powell damping, factor 0.2)."""

    def __init__(self, n, blocks=None):
        self.blocks = [np.arange(n)] if blocks is None else list(blocks)
        self.mats = [np.eye(len(b)) for b in self.blocks]
        self.fresh = [True] * len(self.blocks)
        self.n = n

    def reset(self):
        self.mats = [np.eye(len(b)) for b in self.blocks]
        self.fresh = [True] * len(self.blocks)

    def dense(self):
        B = np.zeros((self.n, self.n))
        for b, M in zip(self.blocks, self.mats):
            B[np.ix_(b, b)] = M
        return B

    def update(self, s, y):
        for i, b in enumerate(self.blocks):
            sb, yb = s[b], y[b]
            ss = float(sb @ sb)
            if ss <= 1e-24 * max(1.0, float(np.max(np.abs(sb), initial=0.0))) or not np.all(np.isfinite(yb)):
                continue
            M = self.mats[i]
            sy = float(sb @ yb)
            if self.fresh[i] and sy > 0:
                M = np.eye(len(b)) * (float(yb @ yb) / sy)
                self.fresh[i] = False
            Ms = M @ sb
            sMs = float(sb @ Ms)
            if sMs <= 0:
                continue
            if sy < 0.2 * sMs:
                theta = 0.8 * sMs / (sMs - sy)
                yb = theta * yb + (1.0 - theta) * Ms
                sy = float(sb @ yb)
            M = M - np.outer(Ms, Ms) / sMs + np.outer(yb, yb) / sy
            self.mats[i] = 0.5 * (M + M.T)


def _floor_eigenvalues(H, rel=1e-8):
    ev, V = np.linalg.eigh(0.5 * (H + H.T))
    floor = rel * max(1.0, float(np.max(np.abs(ev))))
    return (V * np.maximum(ev, floor)) @ V.T


# ---------------------------------------------------------------------------
# SQP driver

class _Evaluator:
    """Evaluates ``f, c`` (and derivatives on demand) with failure capture."""

    def __init__(self, problem):
        self.pb = problem

    def values(self, x):
        try:
            f = float(self.pb.objective(x))
            c = self.pb.c(x)
        except _EVAL_ERRORS as exc:
            log.debug("evaluation failed at trial point: %s", exc)
            return None
        if not (np.isfinite(f) and np.all(np.isfinite(c))):
            return None
        return f, c

    def derivatives(self, x):
        g = np.asarray(self.pb.gradient(x), dtype=float).reshape(self.pb.n_vars)
        return g, self.pb.A(x)


def solve_nlp(problem: NlpProblem, x0, tol: float = 1e-6, max_iter: int = 200,
              verbose: bool = False, stream=None) -> NlpSolution:
    """Solve ``problem`` from ``x0`` to scaled KKT tolerance ``tol``.

    ``x0`` is projected onto the bounds. The returned solution carries a
    status from :data:`STATUSES`; it does not raise on non-convergence.
    With ``verbose`` an iteration log (comma separated: iteration,
    objective, feasibility, stationarity, step) goes to ``stream``
    (default stdout).
    """
    pb = problem
    n = pb.n_vars
    lo, hi = pb.lower, pb.upper
    x = np.clip(np.asarray(x0, dtype=float).reshape(n), lo, hi)
    out = stream if stream is not None else sys.stdout
    ev = _Evaluator(pb)

    first = ev.values(x)
    if first is None:
        raise SimredError("objective or constraints not evaluable at the initial point")
    f, c = first
    g, A = ev.derivatives(x)
    bfgs = _BlockBfgs(n, pb.hessian_blocks)
    lam = np.zeros(pb.n_eq)
    mu = np.zeros(n)
    working = None
    nu = 1.0
    rho = 10.0
    history: List[IterationRecord] = []
    qp_total = 0
    status = "max_iter"
    kkt = _kkt(g, c, A, x, lo, hi, lam, mu)
    reset_done = False
    if verbose:
        print("iter,objective,feasibility,stationarity,step", file=out)

    for k in range(max_iter):
        B = _floor_eigenvalues(pb.hessian(x, lam)) if pb.hessian is not None else bfgs.dense()
        # elastic QP, raising the slack weight while slacks stay positive
        rho = max(rho, 10.0 * (1.0 + float(np.max(np.abs(lam), initial=0.0))))
        while True:
            qp = solve_qp(B, g, A, c, lo - x, hi - x, rho, working)
            qp_total += qp.iterations
            if qp.slack <= 1e-10 * (1.0 + float(np.sum(np.abs(c)))) or rho >= 1e12:
                break
            rho *= 100.0
        d = qp.d
        elastic = qp.slack > 1e-10 * (1.0 + float(np.sum(np.abs(c))))
        working = qp.active
        kkt = _kkt(g, c, A, x, lo, hi, qp.lam, qp.mu)
        if kkt.max() <= tol:
            lam, mu = qp.lam, qp.mu
            status = "converged"
            break
        dnorm = float(np.max(np.abs(d), initial=0.0))
        if elastic and dnorm <= 1e-12 * (1.0 + float(np.max(np.abs(x)))):
            lam, mu = qp.lam, qp.mu
            status = "infeasible_stationary"
            break

        lam_max = float(np.max(np.abs(qp.lam), initial=0.0))
        if nu < lam_max:
            nu = 2.0 * lam_max + 1.0
        c1 = float(np.sum(np.abs(c)))
        phi0 = f + nu * c1
        D = float(g @ d) + nu * (float(np.sum(np.abs(c + A @ d))) - c1)
        if D >= 0:
            D = -1e-16 * (1.0 + abs(phi0))

        alpha = 1.0
        accepted = None
        while alpha >= 1e-12:
            xt = np.clip(x + alpha * d, lo, hi)
            vals = ev.values(xt)
            if vals is not None:
                phit = vals[0] + nu * float(np.sum(np.abs(vals[1])))
                if phit <= phi0 + 1e-4 * alpha * D:
                    accepted = (xt, vals, phit)
                    break
                if alpha == 1.0 and pb.n_eq > 0:
                    soc = _second_order_correction(x, d, A, vals[1], qp.active, lo, hi)
                    vals_s = ev.values(soc) if soc is not None else None
                    if vals_s is not None:
                        phis = vals_s[0] + nu * float(np.sum(np.abs(vals_s[1])))
                        if phis <= phi0 + 1e-4 * D:
                            accepted = (soc, vals_s, phis)
                            break
            alpha *= 0.5
        if accepted is None:
            if not reset_done and pb.hessian is None:
                log.info("line search failed at iteration %d; resetting BFGS", k)
                bfgs.reset()
                reset_done = True
                continue
            lam, mu = qp.lam, qp.mu
            status = "line_search_failure"
            break
        reset_done = False

        x_new, (f_new, c_new), phi_new = accepted
        try:
            g_new, A_new = ev.derivatives(x_new)
        except _EVAL_ERRORS as exc:
            lam, mu = qp.lam, qp.mu
            log.warning("derivative evaluation failed after an accepted step: %s", exc)
            status = "line_search_failure"
            break
        s = x_new - x
        yv = (g_new - A_new.T @ qp.lam) - (g - A.T @ qp.lam)
        bfgs.update(s, yv)
        x, f, c, g, A = x_new, f_new, c_new, g_new, A_new
        lam, mu = qp.lam, qp.mu
        kkt = _kkt(g, c, A, x, lo, hi, lam, mu)
        history.append(IterationRecord(k + 1, f, kkt.feasibility, kkt.stationarity, alpha,
                                       phi0, phi_new, nu))
        if verbose:
            print(f"{k + 1},{f:.10g},{kkt.feasibility:.3e},{kkt.stationarity:.3e},{alpha:.3e}", file=out)
        if kkt.max() <= tol:
            status = "converged"
            break

    iterations = len(history)
    log.info("SQP finished: status=%s iterations=%d objective=%.10g", status, iterations, f)
    return NlpSolution(x=x, eq_multipliers=lam, bound_multipliers=mu, objective=f, kkt=kkt,
                       iterations=iterations, status=status, history=history,
                       qp_iterations=qp_total)


def _second_order_correction(x, d, A, c_trial, active, lo, hi):
    """``x + d + dc`` with ``dc`` the minimum-norm solution of
    ``A dc = -c(x + d)`` over variables not held at a bound."""
    free = active == 0
    if not np.any(free):
        return None
    dc = np.zeros_like(d)
    try:
        dc[free] = lstsq(A[:, free], -c_trial, check_finite=False)[0]
    except (LinAlgError, ValueError):
        return None
    return np.clip(x + d + dc, lo, hi)
