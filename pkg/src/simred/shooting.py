"""Direct multiple shooting for full and manifold-reduced optimal control.

Decision vector layout for ``N`` intervals, node state dimension ``n``
(``p + q`` in full mode, ``p`` in reduced mode) and ``m`` controls::

    w = [s_0, u_0, s_1, u_1, ..., s_{N-1}, u_{N-1}, s_N]

so ``len(w) = n (N + 1) + m N``. Constraints are ``s_0 - z_0 = 0`` and the
continuity conditions ``phi_k(s_k, u_k) - s_{k+1} = 0``. The running cost is
integrated as an extra quadrature state alongside the dynamics, so interval
costs and their derivatives come out of the same sensitivity integration.

In reduced mode the fast state is slaved, ``y = h(x, u)``, through a
:class:`~simred.manifold.ManifoldBackend`; the shooting interval index is
the backend's evaluation context.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import EvaluationError, IntegrationError, SimredError
from .integrator import IntegratorOptions, VectorField, integrate, integrate_with_sensitivities
from .manifold import ManifoldBackend, OnlineBackend
from .models import OcpDefinition
from .nlp import NlpProblem, NlpSolution, solve_nlp

log = logging.getLogger(__name__)

MODES = ("full", "reduced")


def _full_field(ocp: OcpDefinition):
    """Augmented field ``(z, c)`` of the full system with ``c' = f0``."""
    sys = ocp.system
    p = sys.p
    n = sys.n

    def fun(w, u):
        z = w[:n]
        return np.append(sys.F(z, u), ocp.cost(z[:p], z[p:], u))

    def jac(w, u):
        z = w[:n]
        gx, gy, _ = ocp.cost_grad(z[:p], z[p:], u)
        out = np.zeros((n + 1, n + 1))
        out[:n, :n] = sys.J(z, u)
        out[n, :p] = gx
        out[n, p:n] = gy
        return out

    def jac_u(w, u):
        z = w[:n]
        _, _, gu = ocp.cost_grad(z[:p], z[p:], u)
        return np.vstack([sys.Ju(z, u), gu[None, :]])

    return VectorField(fun, jac, jac_u, n_quad=1)


class _ReducedField:
    """Augmented reduced field ``x' = f(x, h(x, u), u)``, ``c' = f0(x, h, u)``.

    The last manifold evaluation is memoised since the integrator queries the
    field and its Jacobian at the same point.
    """

    n_quad = 1

    def __init__(self, ocp: OcpDefinition, backend: ManifoldBackend, context):
        self.ocp = ocp
        self.sys = ocp.system
        self.backend = backend
        self.context = context
        self._key = None
        self._val = None

    def _h(self, x, u, sens):
        key = (x.tobytes(), u.tobytes())
        if self._key == key and (not sens or self._val.dh_dx is not None):
            return self._val
        try:
            val = self.backend.evaluate(x, u, self.context, with_sensitivities=sens)
        except (SimredError, ArithmeticError, np.linalg.LinAlgError) as exc:
            raise EvaluationError(f"manifold evaluation failed at x={x}, u={u}: {exc}",
                                  interval=self.context, point=np.concatenate([x, u])) from exc
        self._key, self._val = key, val
        return val

    def fun(self, w, u):
        p = self.sys.p
        x = w[:p]
        y = self._h(x, u, False).y
        return np.append(np.atleast_1d(self.sys.rhs_slow(x, y, u)), self.ocp.cost(x, y, u))

    def _blocks(self, w, u):
        p = self.sys.p
        x = w[:p]
        hv = self._h(x, u, True)
        y = hv.y
        J = self.sys.jacobian(x, y, u)
        Ju = self.sys.Ju(np.concatenate([x, y]), u)
        gx, gy, gu = self.ocp.cost_grad(x, y, u)
        fx = J[:p, :p] + J[:p, p:] @ hv.dh_dx
        fu = Ju[:p] + J[:p, p:] @ hv.dh_du
        cx = gx + gy @ hv.dh_dx
        cu = gu + gy @ hv.dh_du
        return fx, fu, cx, cu

    def jac(self, w, u):
        p = self.sys.p
        fx, _, cx, _ = self._blocks(w, u)
        out = np.zeros((p + 1, p + 1))
        out[:p, :p] = fx
        out[p, :p] = cx
        return out

    def jac_u(self, w, u):
        _, fu, _, cu = self._blocks(w, u)
        return np.vstack([fu, cu[None, :]])


@dataclass
class IntervalResult:
    end: np.ndarray
    cost: float
    d_end: np.ndarray   # (n, n + m): d end / d (s, u)
    d_cost: np.ndarray  # (n + m,)
    accepted: int
    rejected: int


@dataclass
class IntegrationStats:
    """Integrator step counts summed over every integration of a solve."""

    accepted: np.ndarray
    rejected: np.ndarray
    integrations: int = 0

    @property
    def total_accepted(self):
        return int(np.sum(self.accepted))

    @property
    def total_rejected(self):
        return int(np.sum(self.rejected))


class Transcription:
    """Multiple-shooting transcription of an :class:`OcpDefinition`.

    Parameters
    ----------
    ocp : OcpDefinition
    mode : {"full", "reduced"}
    backend : ManifoldBackend, optional
        Required in reduced mode.
    integ_opts : IntegratorOptions, optional
    fast_bounds : {"check", "enforce"}
        Reduced mode only. ``"check"`` reports violations of the fast-state
        node bounds by ``h(s_k, u_k)`` after the solve; ``"enforce"`` adds
        variables ``sigma_k`` with ``h(s_k, u_k) - sigma_k = 0`` and the fast
        bounds on ``sigma_k``.
    """

    def __init__(self, ocp: OcpDefinition, mode: str = "full", backend: Optional[ManifoldBackend] = None,
                 integ_opts: Optional[IntegratorOptions] = None, fast_bounds: str = "check"):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        if mode == "reduced" and backend is None:
            raise ValueError("reduced mode needs a manifold backend")
        if fast_bounds not in ("check", "enforce"):
            raise ValueError("fast_bounds must be 'check' or 'enforce'")
        self.ocp = ocp
        self.mode = mode
        self.backend = backend
        self.opts = integ_opts or IntegratorOptions()
        self.fast_bounds = fast_bounds if mode == "reduced" else "check"
        sys = ocp.system
        self.p, self.q, self.m = sys.p, sys.q, sys.m
        self.nx = sys.n if mode == "full" else sys.p
        self.N = ocp.n_intervals
        self.block = self.nx + self.m
        self.n_sigma = self.q * self.N if self.fast_bounds == "enforce" else 0
        self.n_shoot = self.nx * (self.N + 1) + self.m * self.N
        self.n_vars = self.n_shoot + self.n_sigma
        self.n_eq = self.nx * (self.N + 1) + self.n_sigma
        self.times = ocp.times
        self.stats = IntegrationStats(np.zeros(self.N, dtype=int), np.zeros(self.N, dtype=int))
        self._full_field = _full_field(ocp) if mode == "full" else None
        self._red_fields = [_ReducedField(ocp, backend, k) for k in range(self.N)] if mode == "reduced" else None
        self._cache_key = None
        self._cache = None
        self.problem = self._make_problem()

    # -- layout ------------------------------------------------------------
    def s_index(self, k):
        start = k * self.block
        return slice(start, start + self.nx)

    def u_index(self, k):
        start = k * self.block + self.nx
        return slice(start, start + self.m)

    def sigma_index(self, k):
        start = self.n_shoot + k * self.q
        return slice(start, start + self.q)

    def unpack(self, w):
        states = np.array([w[self.s_index(k)] for k in range(self.N + 1)])
        controls = np.array([w[self.u_index(k)] for k in range(self.N)])
        return states, controls

    def pack(self, states, controls, sigma=None):
        w = np.zeros(self.n_vars)
        for k in range(self.N + 1):
            w[self.s_index(k)] = states[k]
        for k in range(self.N):
            w[self.u_index(k)] = controls[k]
        if self.n_sigma:
            if sigma is None:
                sigma = np.array([self.backend.evaluate(states[k], controls[k], k, False).y for k in range(self.N)])
            for k in range(self.N):
                w[self.sigma_index(k)] = sigma[k]
        return w

    def initial_node_state(self):
        if self.mode == "full":
            return np.concatenate([self.ocp.initial_slow, self.ocp.initial_fast])
        return self.ocp.initial_slow.copy()

    def bounds(self):
        ocp = self.ocp
        if self.mode == "full":
            slo = np.concatenate([ocp.x_bounds[0], ocp.y_bounds[0]])
            shi = np.concatenate([ocp.x_bounds[1], ocp.y_bounds[1]])
        else:
            slo, shi = ocp.x_bounds
        lo = np.empty(self.n_vars)
        hi = np.empty(self.n_vars)
        for k in range(self.N + 1):
            lo[self.s_index(k)], hi[self.s_index(k)] = slo, shi
        for k in range(self.N):
            lo[self.u_index(k)], hi[self.u_index(k)] = ocp.u_bounds
            if self.n_sigma:
                lo[self.sigma_index(k)], hi[self.sigma_index(k)] = ocp.y_bounds
        return lo, hi

    def hessian_blocks(self):
        blocks = [np.arange(k * self.block, (k + 1) * self.block) for k in range(self.N)]
        blocks.append(np.arange(self.N * self.block, self.n_shoot))
        if self.n_sigma:
            blocks.append(np.arange(self.n_shoot, self.n_vars))
        return blocks

    # -- interval integration ---------------------------------------------
    def field(self, k):
        return self._full_field if self.mode == "full" else self._red_fields[k]

    def integrate_interval(self, k, s, u, sensitivities=True) -> IntervalResult:
        nx, m = self.nx, self.m
        t0, t1 = self.times[k], self.times[k + 1]
        z0 = np.append(s, 0.0)
        try:
            if sensitivities:
                res = integrate_with_sensitivities(self.field(k), z0, u, t0, t1, self.opts)
            else:
                res = integrate(self.field(k), z0, u, t0, t1, self.opts)
        except IntegrationError as exc:
            raise EvaluationError(f"integration failed: {exc}", interval=k,
                                  point=np.concatenate([s, u])) from exc
        self.stats.accepted[k] += res.steps_accepted
        self.stats.rejected[k] += res.steps_rejected
        self.stats.integrations += 1
        d_end = d_cost = None
        if sensitivities:
            S = res.sensitivities
            cols = np.r_[0:nx, nx + 1:nx + 1 + m]
            d_end = S[:nx][:, cols]
            d_cost = S[nx][cols]
        return IntervalResult(res.end_state[:nx].copy(), float(res.end_state[nx]), d_end, d_cost,
                              res.steps_accepted, res.steps_rejected)

    def _evaluate(self, w):
        key = w.tobytes()
        if self._cache_key == key:
            return self._cache
        results = []
        for k in range(self.N):
            results.append(self.integrate_interval(k, w[self.s_index(k)], w[self.u_index(k)]))
        sig = None
        if self.n_sigma:
            sig = []
            for k in range(self.N):
                s, u = w[self.s_index(k)], w[self.u_index(k)]
                try:
                    sig.append(self.backend.evaluate(s, u, k, True))
                except (SimredError, ArithmeticError) as exc:
                    raise EvaluationError(str(exc), interval=k, point=np.concatenate([s, u])) from exc
        self._cache_key, self._cache = key, (results, sig)
        return results, sig

    # -- NLP callbacks -----------------------------------------------------
    def objective(self, w):
        results, _ = self._evaluate(w)
        xN = w[self.s_index(self.N)][:self.p]
        return float(sum(r.cost for r in results) + self.ocp.terminal(xN))

    def gradient(self, w):
        results, _ = self._evaluate(w)
        g = np.zeros(self.n_vars)
        for k, r in enumerate(results):
            g[k * self.block:(k + 1) * self.block] += r.d_cost
        sN = self.s_index(self.N)
        g[sN.start:sN.start + self.p] += self.ocp.terminal_grad(w[sN][:self.p])
        return g

    def constraints(self, w):
        results, sig = self._evaluate(w)
        nx = self.nx
        c = np.empty(self.n_eq)
        c[:nx] = w[self.s_index(0)] - self.initial_node_state()
        for k, r in enumerate(results):
            c[(k + 1) * nx:(k + 2) * nx] = r.end - w[self.s_index(k + 1)]
        if self.n_sigma:
            base = nx * (self.N + 1)
            for k in range(self.N):
                c[base + k * self.q:base + (k + 1) * self.q] = sig[k].y - w[self.sigma_index(k)]
        return c

    def jacobian(self, w):
        results, sig = self._evaluate(w)
        nx = self.nx
        A = np.zeros((self.n_eq, self.n_vars))
        A[:nx, self.s_index(0)] = np.eye(nx)
        for k, r in enumerate(results):
            rows = slice((k + 1) * nx, (k + 2) * nx)
            A[rows, k * self.block:(k + 1) * self.block] = r.d_end
            A[rows, self.s_index(k + 1)] = -np.eye(nx)
        if self.n_sigma:
            base = nx * (self.N + 1)
            for k in range(self.N):
                rows = slice(base + k * self.q, base + (k + 1) * self.q)
                A[rows, self.s_index(k)] = sig[k].dh_dx
                A[rows, self.u_index(k)] = sig[k].dh_du
                A[rows, self.sigma_index(k)] = -np.eye(self.q)
        return A

    def _make_problem(self):
        lo, hi = self.bounds()
        return NlpProblem(self.n_vars, self.objective, self.gradient, self.constraints, self.jacobian,
                          self.n_eq, lo, hi, hessian_blocks=self.hessian_blocks())

    # -- initial guess -------------------------------------------------------
    def initial_guess(self, controls=None):
        """Node states from forward simulation under ``controls`` (default
        zero, projected onto the control bounds)."""
        lo_u, hi_u = self.ocp.u_bounds
        if controls is None:
            controls = np.tile(np.clip(np.zeros(self.m), lo_u, hi_u), (self.N, 1))
        controls = np.asarray(controls, dtype=float).reshape(self.N, self.m)
        states = [self.initial_node_state()]
        for k in range(self.N):
            r = self.integrate_interval(k, states[-1], controls[k], sensitivities=False)
            states.append(r.end)
        return self.pack(np.array(states), controls)


def transcribe(ocp: OcpDefinition, mode: str = "full", backend: Optional[ManifoldBackend] = None,
               integ_opts: Optional[IntegratorOptions] = None, fast_bounds: str = "check") -> Transcription:
    """Build the multiple-shooting transcription; ``.problem`` is the NLP."""
    return Transcription(ocp, mode, backend, integ_opts, fast_bounds)


# ---------------------------------------------------------------------------
# solutions

@dataclass
class Trajectory:
    """Sampled trajectory; ``u`` is right-constant on each interval."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    u: np.ndarray


@dataclass
class OcpSolution:
    controls: np.ndarray
    node_states: np.ndarray
    objective: float
    trajectory: Trajectory
    nlp: NlpSolution
    integ_stats: IntegrationStats
    mode: str
    max_defect: float
    fast_bound_violation: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def status(self):
        return self.nlp.status

    @property
    def success(self):
        return self.nlp.status == "converged"


def _sample_interval(field_, z0, u, t0, t1, opts, n_samples):
    t_eval = np.linspace(t0, t1, n_samples)
    res = integrate(field_, np.append(z0, 0.0), u, t0, t1, opts, t_eval=t_eval)
    return res.t_eval, res.dense[:, :-1]


def _trajectory(tr: Transcription, states, controls, samples_per_interval=11):
    ts, xs, ys, us = [], [], [], []
    p = tr.p
    for k in range(tr.N):
        t, Z = _sample_interval(tr.field(k), states[k], controls[k], tr.times[k], tr.times[k + 1],
                                tr.opts, samples_per_interval)
        if k > 0:
            t, Z = t[1:], Z[1:]
        ts.append(t)
        xs.append(Z[:, :p])
        if tr.mode == "full":
            ys.append(Z[:, p:])
        else:
            ys.append(np.array([tr.backend.evaluate(z, controls[k], k, False).y for z in Z]))
        us.append(np.tile(controls[k], (t.size, 1)))
    # right-constant control: the final sample repeats the last interval's value
    return Trajectory(np.concatenate(ts), np.vstack(xs), np.vstack(ys), np.vstack(us))


def _fast_bound_violation(tr: Transcription, states, controls):
    if tr.mode != "reduced":
        return 0.0
    lo, hi = tr.ocp.y_bounds
    worst = 0.0
    for k in range(tr.N):
        y = tr.backend.evaluate(states[k], controls[k], k, False).y
        worst = max(worst, float(np.max(np.maximum(lo - y, 0.0))), float(np.max(np.maximum(y - hi, 0.0))))
    return worst


def solve_ocp(ocp: OcpDefinition, mode: str = "full", backend: Optional[ManifoldBackend] = None,
              tol: float = 1e-6, integ_opts: Optional[IntegratorOptions] = None, init=None,
              max_iter: int = 200, fast_bounds: str = "check", verbose: bool = False) -> OcpSolution:
    """Transcribe and solve.

    ``init`` is either ``None`` (uncontrolled forward simulation), an array
    of interval controls used for the forward simulation, or a full decision
    vector.
    """
    tr = transcribe(ocp, mode, backend, integ_opts, fast_bounds)
    if init is None or np.size(init) == tr.N * tr.m:
        w0 = tr.initial_guess(init)
    else:
        w0 = np.asarray(init, dtype=float).reshape(tr.n_vars)
    sol = solve_nlp(tr.problem, w0, tol=tol, max_iter=max_iter, verbose=verbose)
    states, controls = tr.unpack(sol.x)
    defects = tr.constraints(sol.x)[:tr.nx * (tr.N + 1)]
    traj = _trajectory(tr, states, controls)
    viol = _fast_bound_violation(tr, states, controls)
    if viol > 0:
        log.warning("reduced solution violates fast-state node bounds by %.3g", viol)
    log.info("%s OCP (%s): status=%s objective=%.8g nlp_iter=%d steps=%d", ocp.name, mode, sol.status,
             sol.objective, sol.iterations, tr.stats.total_accepted)
    return OcpSolution(controls=controls, node_states=states, objective=sol.objective, trajectory=traj,
                       nlp=sol, integ_stats=tr.stats, mode=mode,
                       max_defect=float(np.max(np.abs(defects))), fast_bound_violation=viol,
                       meta={"n_vars": tr.n_vars, "n_eq": tr.n_eq, "problem": ocp.name})


def cross_evaluate(ocp: OcpDefinition, controls, y0=None, backend: Optional[ManifoldBackend] = None,
                   integ_opts: Optional[IntegratorOptions] = None):
    """Simulate the full system under piecewise constant ``controls``.

    Starts from ``(x0, y0)``. Without ``y0`` the fast state starts on the
    manifold, ``y0 = h(x0, u_1)``, evaluated by ``backend`` (default: a
    fresh online backend).

    Returns
    -------
    objective : float
    trajectory : Trajectory
    """
    sys = ocp.system
    N = ocp.n_intervals
    controls = np.asarray(controls, dtype=float).reshape(N, sys.m)
    if y0 is None:
        backend = backend or OnlineBackend(sys)
        y0 = backend.evaluate(ocp.initial_slow, controls[0], None, False).y
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))
    opts = integ_opts or IntegratorOptions(rel_tol=1e-8, abs_tol=1e-8)
    field_ = _full_field(ocp)
    times = ocp.times
    z = np.concatenate([ocp.initial_slow, y0])
    n = sys.n
    total = 0.0
    ts, Zs, us = [], [], []
    for k in range(N):
        t_eval = np.linspace(times[k], times[k + 1], 11)
        res = integrate(field_, np.append(z, 0.0), controls[k], times[k], times[k + 1], opts, t_eval=t_eval)
        total += float(res.end_state[n])
        z = res.end_state[:n].copy()
        t, Z = res.t_eval, res.dense[:, :n]
        if k > 0:
            t, Z = t[1:], Z[1:]
        ts.append(t)
        Zs.append(Z)
        us.append(np.tile(controls[k], (t.size, 1)))
    total += ocp.terminal(z[:sys.p])
    Z = np.vstack(Zs)
    return total, Trajectory(np.concatenate(ts), Z[:, :sys.p], Z[:, sys.p:], np.vstack(us))


def run_statistics(solution: OcpSolution) -> dict:
    """NLP iterations and integrator step totals with per-iteration averages."""
    st = solution.integ_stats
    iters = max(solution.nlp.iterations, 1)
    return {
        "status": solution.status,
        "objective": solution.objective,
        "nlp_iterations": solution.nlp.iterations,
        "steps_accepted": st.total_accepted,
        "steps_rejected": st.total_rejected,
        "integrations": st.integrations,
        "steps_accepted_per_iteration": st.total_accepted / iters,
        "steps_rejected_per_iteration": st.total_rejected / iters,
        "per_interval_accepted": st.accepted.tolist(),
        "per_interval_rejected": st.rejected.tolist(),
        "max_defect": solution.max_defect,
    }


def write_trajectory_csv(path, traj: Trajectory, header_lines=()):
    """Columns ``t, x1..xp, y1..yq, u1..um``; optional ``#`` header lines first."""
    p, q, m = traj.x.shape[1], traj.y.shape[1], traj.u.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x{i + 1}" for i in range(p)] + [f"y{i + 1}" for i in range(q)]
                   + [f"u{i + 1}" for i in range(m)])
        for row in np.hstack([traj.t[:, None], traj.x, traj.y, traj.u]):
            w.writerow([f"{v:.12g}" for v in row])


def solution_summary(solution: OcpSolution, extra: Optional[dict] = None) -> str:
    """Key-value text block describing a solution."""
    stats = run_statistics(solution)
    items = {"mode": solution.mode, **solution.meta, **{k: v for k, v in stats.items()
                                                        if not k.startswith("per_interval")}}
    items["fast_bound_violation"] = solution.fast_bound_violation
    items["kkt"] = ",".join(f"{v:.3e}" for v in solution.nlp.kkt)
    if extra:
        items.update(extra)
    return "\n".join(f"{k} = {v}" for k, v in items.items()) + "\n"
