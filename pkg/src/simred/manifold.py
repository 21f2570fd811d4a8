"""Evaluation of the slow manifold map ``y = h(x, u)`` and its derivatives.

Three interchangeable backends share one contract, ``evaluate(x, u,
context) -> ManifoldValue``:

* :class:`OnlineBackend` solves the local SIM criterion by Gauss-Newton at
  every call, warm-started from the last converged ``y`` of the same
  evaluation context (one slot per shooting interval in practice);
* :class:`OfflineBackend` evaluates a partition-of-unity RBF interpolant of
  precomputed manifold samples;
* :class:`AnalyticBackend` wraps a closed-form map, mainly as a test oracle.

Node tables are plain text: ``#`` header lines, a column header, then one
comma separated record per node printed with 17 significant digits, so a
write/read cycle is lossless. Columns are ``x1..xp, u1..um, y1..yq`` followed,
for Hermite tables, by ``dy{i}_dx{j}`` and ``dy{i}_du{j}`` row by row in ``i``.
"""

from __future__ import annotations

import itertools
import json
import logging
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import __version__
from .errors import ConvergenceError, SensitivityError, TableBuildError
from .models import TwoTimescaleSystem
from .rbf import NodeData, PouInterpolant, build_pou_interpolant
from .sim import GnOptions, fast_equilibrium_guess, solve_sim_local

log = logging.getLogger(__name__)

NODE_TABLE_MAGIC = "# simred node table"
MAX_FAILURE_FRACTION = 0.05


@dataclass
class ManifoldValue:
    y: np.ndarray
    dh_dx: Optional[np.ndarray]
    dh_du: Optional[np.ndarray]
    iterations: int = 0


class ManifoldBackend:
    """Common interface; subclasses implement :meth:`evaluate`."""

    p: int
    q: int
    m: int
    kind = "abstract"

    def evaluate(self, x, u, context=None, with_sensitivities=True) -> ManifoldValue:
        raise NotImplementedError

    def _args(self, x, u):
        x = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
        u = np.atleast_1d(np.asarray(u, dtype=float)).ravel()
        if x.size != self.p or u.size != self.m:
            raise ValueError(f"expected x in R^{self.p} and u in R^{self.m}")
        return x, u


class OnlineBackend(ManifoldBackend):
    """Gauss-Newton on the local criterion with a per-context warm-start cache.

    A context without a cached ``y`` starts from the Newton solution of
    ``g(x, y, u) = 0`` (falling back to zero). The cache only changes the
    iteration count, never the converged point beyond solver tolerance.
    """

    kind = "online"

    def __init__(self, system: TwoTimescaleSystem, options: Optional[GnOptions] = None):
        self.system = system
        self.options = options or GnOptions()
        self.p, self.q, self.m = system.p, system.q, system.m
        self.cache = {}
        self.iteration_counts = Counter()
        self.n_calls = 0

    def clear_cache(self):
        self.cache.clear()

    def evaluate(self, x, u, context=None, with_sensitivities=True) -> ManifoldValue:
        x, u = self._args(x, u)
        y0 = self.cache.get(context)
        if y0 is None:
            y0 = fast_equilibrium_guess(self.system, x, u)
        try:
            pt = solve_sim_local(self.system, x, u, y0, self.options, sensitivities=with_sensitivities)
        except ConvergenceError:
            if context not in self.cache:
                raise
            # stale warm start: retry from the fast equilibrium
            pt = solve_sim_local(self.system, x, u, fast_equilibrium_guess(self.system, x, u),
                                 self.options, sensitivities=with_sensitivities)
        self.cache[context] = pt.y_star.copy()
        self.iteration_counts[pt.gn_iterations] += 1
        self.n_calls += 1
        return ManifoldValue(pt.y_star, pt.dh_dx, pt.dh_du, pt.gn_iterations)


class OfflineBackend(ManifoldBackend):
    """Partition-of-unity interpolant over concatenated ``(x, u)``."""

    kind = "offline"

    def __init__(self, interpolant: PouInterpolant, p: int, m: int):
        if interpolant.dim != p + m:
            raise ValueError("interpolant dimension does not match p + m")
        self.interpolant = interpolant
        self.p, self.m, self.q = p, m, interpolant.n_out

    def evaluate(self, x, u, context=None, with_sensitivities=True) -> ManifoldValue:
        x, u = self._args(x, u)
        val, jac = self.interpolant.evaluate(np.concatenate([x, u]))
        return ManifoldValue(val, jac[:, :self.p], jac[:, self.p:], 0)


class AnalyticBackend(ManifoldBackend):
    """Closed-form map ``fun(x, u) -> (y, dh_dx, dh_du)``."""

    kind = "analytic"

    def __init__(self, fun: Callable, p: int, q: int, m: int):
        self.fun = fun
        self.p, self.q, self.m = p, q, m

    def evaluate(self, x, u, context=None, with_sensitivities=True) -> ManifoldValue:
        x, u = self._args(x, u)
        y, dx, du = self.fun(x, u)
        return ManifoldValue(np.atleast_1d(np.asarray(y, dtype=float)),
                             np.asarray(dx, dtype=float).reshape(self.q, self.p),
                             np.asarray(du, dtype=float).reshape(self.q, self.m), 0)


def h_eval(backend: ManifoldBackend, x, u, context=None):
    """``(y, dh_dx, dh_du)`` from any backend."""
    v = backend.evaluate(x, u, context, with_sensitivities=True)
    return v.y, v.dh_dx, v.dh_du


def warm_start_report(backend: OnlineBackend) -> dict:
    """Histogram ``{iterations: calls}`` since creation, sorted by iterations."""
    return dict(sorted(backend.iteration_counts.items()))


# ---------------------------------------------------------------------------
# offline tables

@dataclass
class TableSpec:
    """Cartesian sweep over ``(x, u)`` for an offline table."""

    lower: Sequence[float]
    upper: Sequence[float]
    counts: Sequence[int]
    hermite: bool = True
    gn: GnOptions = field(default_factory=GnOptions)
    overlap: float = 0.05
    min_pts_per_patch: int = 10

    def __post_init__(self):
        self.lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        self.upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        self.counts = np.atleast_1d(np.asarray(self.counts, dtype=int))
        if not (self.lower.shape == self.upper.shape == self.counts.shape):
            raise ValueError("lower, upper and counts must have equal length")
        if np.any(self.counts < 2):
            raise ValueError("every swept dimension needs at least 2 nodes")
        if np.any(self.upper <= self.lower):
            raise ValueError("table ranges must be non-degenerate")

    @property
    def dim(self):
        return self.lower.size

    def axes(self):
        return [np.linspace(lo, hi, c) for lo, hi, c in zip(self.lower, self.upper, self.counts)]

    def points(self):
        """Grid nodes in lexicographic order (last coordinate fastest)."""
        return np.array(list(itertools.product(*self.axes())))


@dataclass
class NodeTable:
    """Manifold samples: ``positions`` (N, p+m), ``values`` (N, q) and
    optional ``gradients`` (N, q, p+m)."""

    p: int
    q: int
    m: int
    positions: np.ndarray
    values: np.ndarray
    gradients: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    @property
    def hermite(self):
        return self.gradients is not None

    @property
    def n_nodes(self):
        return self.positions.shape[0]

    def node_data(self):
        return NodeData(self.positions, self.values, self.gradients)

    def columns(self):
        cols = [f"x{i + 1}" for i in range(self.p)] + [f"u{i + 1}" for i in range(self.m)]
        cols += [f"y{i + 1}" for i in range(self.q)]
        if self.hermite:
            for i in range(self.q):
                cols += [f"dy{i + 1}_dx{j + 1}" for j in range(self.p)]
                cols += [f"dy{i + 1}_du{j + 1}" for j in range(self.m)]
        return cols

    def records(self):
        parts = [self.positions, self.values]
        if self.hermite:
            parts.append(self.gradients.reshape(self.n_nodes, -1))
        return np.hstack(parts)


@dataclass
class BuildReport:
    attempted: int
    converged: int
    failures: list
    gn_iterations: np.ndarray
    sweep_seconds: float

    def summary(self):
        hist = Counter(int(i) for i in self.gn_iterations)
        return (f"nodes attempted: {self.attempted}\nnodes converged: {self.converged}\n"
                f"failures: {len(self.failures)}\nsweep seconds: {self.sweep_seconds:.3f}\n"
                f"gn iteration histogram: {dict(sorted(hist.items()))}")


def write_node_table(path, table: NodeTable, header: Optional[dict] = None):
    """Write ``table`` as text; ``header`` entries go to a JSON metadata line."""
    meta = dict(table.meta)
    if header:
        meta.update(header)
    lines = [f"{NODE_TABLE_MAGIC} v{__version__}",
             f"# p={table.p} q={table.q} m={table.m} hermite={int(table.hermite)}",
             "# meta=" + json.dumps(meta, sort_keys=True),
             ",".join(table.columns())]
    for row in table.records():
        lines.append(",".join(f"{v:.17g}" for v in row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_node_table(path) -> NodeTable:
    """Inverse of :func:`write_node_table`."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith(NODE_TABLE_MAGIC):
        raise ValueError(f"{path}: not a node table")
    dims = dict(tok.split("=") for tok in lines[1].lstrip("# ").split())
    p, q, m, hermite = (int(dims[k]) for k in ("p", "q", "m", "hermite"))
    meta = json.loads(lines[2][len("# meta="):])
    cols = lines[3].split(",")
    data = np.array([[float(v) for v in ln.split(",")] for ln in lines[4:] if ln.strip()], dtype=float)
    data = data.reshape(-1, len(cols))
    d = p + m
    pos = data[:, :d]
    vals = data[:, d:d + q]
    grads = data[:, d + q:].reshape(-1, q, d) if hermite else None
    return NodeTable(p, q, m, pos, vals, grads, meta)


def interpolant_from_table(table: NodeTable, overlap=0.05, min_pts_per_patch=10, lower=None, upper=None):
    nodes = table.node_data()
    return build_pou_interpolant(nodes, overlap, min_pts_per_patch, table.hermite, lower=lower, upper=upper)


def build_offline_table(system: TwoTimescaleSystem, spec: TableSpec):
    """Sweep the grid, solve the local criterion at each node and interpolate.

    Nodes are visited in lexicographic order; each solve is warm-started from
    the last converged node and retried from the fast equilibrium on failure.
    Failed nodes are excluded from the table.

    Returns
    -------
    table : NodeTable
    interpolant : PouInterpolant
    report : BuildReport

    Raises
    ------
    TableBuildError
        If more than 5% of the nodes fail.
    """
    if spec.dim != system.p + system.m:
        raise ValueError(f"table spec has {spec.dim} dimensions, system needs p + m = {system.p + system.m}")
    p, q, m = system.p, system.q, system.m
    pts = spec.points()
    t0 = time.perf_counter()
    y_prev = None
    pos, vals, grads, iters, failures = [], [], [], [], []
    for k, pt in enumerate(pts):
        x, u = pt[:p], pt[p:]
        starts = [] if y_prev is None else [y_prev]
        starts.append(fast_equilibrium_guess(system, x, u))
        point, err = None, None
        for y0 in starts:
            try:
                point = solve_sim_local(system, x, u, y0, spec.gn, sensitivities=spec.hermite)
                break
            except (ConvergenceError, SensitivityError, ArithmeticError, np.linalg.LinAlgError) as exc:
                err = exc
        if point is None:
            failures.append((k, pt.tolist(), str(err)))
            continue
        y_prev = point.y_star
        pos.append(pt)
        vals.append(point.y_star)
        iters.append(point.gn_iterations)
        if spec.hermite:
            grads.append(np.hstack([point.dh_dx, point.dh_du]))
    elapsed = time.perf_counter() - t0
    report = BuildReport(len(pts), len(pos), failures, np.array(iters, dtype=int), elapsed)
    log.info("table sweep: %d/%d nodes converged in %.2fs", len(pos), len(pts), elapsed)
    if len(failures) > MAX_FAILURE_FRACTION * len(pts):
        raise TableBuildError(f"{len(failures)} of {len(pts)} table nodes failed", failures)
    meta = {"system": system.name, "eps": system.eps, "counts": spec.counts.tolist(),
            "lower": spec.lower.tolist(), "upper": spec.upper.tolist(), "failed": len(failures)}
    table = NodeTable(p, q, m, np.array(pos), np.array(vals),
                      np.array(grads) if spec.hermite else None, meta)
    interp = interpolant_from_table(table, spec.overlap, spec.min_pts_per_patch, spec.lower, spec.upper)
    return table, interp, report
