"""Gaussian RBF interpolation localised by a partition of unity.

Local interpolants live on axis-parallel overlapping boxes laid out on a
fixed grid, so finding the boxes containing a point costs ``O(d)``
independently of the number of nodes and boxes. Each box carries its own
Gaussian shape parameter chosen by Rippa's closed-form leave-one-out error.
In Hermite mode the local interpolants also match all first-order partial
derivatives at the nodes.

Inputs are mapped to the unit cube of the node domain before any kernel
evaluation, so shape parameters are dimensionless.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.linalg.lapack import dpocon

from .errors import IllConditionedError, OutOfDomainError

log = logging.getLogger(__name__)

COND_LIMIT = 1e14


def gaussian_kernel(r, c):
    """Gaussian ``phi(r) = exp(-c^2 r^2)`` and its first two radial derivatives."""
    r = np.asarray(r, dtype=float)
    if np.any(r < 0) or not c > 0:
        raise ValueError("need r >= 0 and c > 0")
    c2 = c * c
    phi = np.exp(-c2 * r * r)
    dphi = -2.0 * c2 * r * phi
    d2phi = (4.0 * c2 * c2 * r * r - 2.0 * c2) * phi
    return phi, dphi, d2phi


@dataclass
class NodeData:
    """Interpolation data: ``positions`` (N, d), ``values`` (N, q) and
    optional ``gradients`` (N, q, d)."""

    positions: np.ndarray
    values: np.ndarray
    gradients: Optional[np.ndarray] = None

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        self.values = vals
        if self.values.shape[0] != self.positions.shape[0]:
            raise ValueError("positions and values disagree on the node count")
        if self.gradients is not None:
            g = np.asarray(self.gradients, dtype=float)
            n, q = self.values.shape
            self.gradients = g.reshape(n, q, self.positions.shape[1])

    @property
    def n_nodes(self):
        return self.positions.shape[0]

    @property
    def dim(self):
        return self.positions.shape[1]

    @property
    def n_out(self):
        return self.values.shape[1]

    def subset(self, idx):
        g = None if self.gradients is None else self.gradients[idx]
        return NodeData(self.positions[idx], self.values[idx], g)


# ---------------------------------------------------------------------------
# local interpolants

def _interpolation_matrix(X, c, hermite):
    delta = X[:, None, :] - X[None, :, :]
    c2 = c * c
    phi = np.exp(-c2 * np.sum(delta * delta, axis=-1))
    if not hermite:
        return phi
    k, d = X.shape
    T = np.empty((k, d + 1, k, d + 1))
    T[:, 0, :, 0] = phi
    # row: value at x_l, column: d/dy_j of the kernel at x_k
    T[:, 0, :, 1:] = 2.0 * c2 * delta * phi[..., None]
    # row: d/dx_i at x_l, column: value
    T[:, 1:, :, 0] = np.moveaxis(-2.0 * c2 * delta * phi[..., None], 2, 1)
    mixed = (2.0 * c2 * np.eye(d)[None, None] - 4.0 * c2 * c2 * delta[..., :, None] * delta[..., None, :])
    T[:, 1:, :, 1:] = np.transpose(mixed * phi[..., None, None], (0, 2, 1, 3))
    return T.reshape(k * (d + 1), k * (d + 1))


def _functional_data(nodes: NodeData, hermite):
    if not hermite:
        return nodes.values
    if nodes.gradients is None:
        raise ValueError("Hermite mode needs gradients")
    k, q, d = nodes.gradients.shape
    F = np.empty((k, d + 1, q))
    F[:, 0, :] = nodes.values
    F[:, 1:, :] = np.transpose(nodes.gradients, (0, 2, 1))
    return F.reshape(k * (d + 1), q)


def _factor(A):
    """Lower Cholesky factor and 1-norm condition estimate; ``(None, inf)``
    if ``A`` is not numerically positive definite."""
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return None, np.inf
    rcond, info = dpocon(L, np.linalg.norm(A, 1), uplo='L')
    if info != 0 or not rcond > 0:
        return None, np.inf
    return L, float(1.0 / rcond)


def _condition(A):
    return _factor(A)[1]


def _check_distinct(X):
    if X.shape[0] > 1:
        rounded = np.unique(X, axis=0)
        if rounded.shape[0] != X.shape[0]:
            raise ValueError("duplicate interpolation functionals: repeated node positions")


def monomials(D, degree):
    """Monomials of total degree ``<= degree`` at rows of ``D`` and their gradients.

    Returns ``V`` (k, T) and ``dV`` (k, T, d), ordered constant, linear,
    then the upper triangle of the quadratic terms.
    """
    D = np.atleast_2d(D)
    k, d = D.shape
    cols = [np.ones(k)]
    grads = [np.zeros((k, d))]
    if degree >= 1:
        for i in range(d):
            cols.append(D[:, i])
            g = np.zeros((k, d))
            g[:, i] = 1.0
            grads.append(g)
    if degree >= 2:
        for i in range(d):
            for j in range(i, d):
                cols.append(D[:, i] * D[:, j])
                g = np.zeros((k, d))
                g[:, i] += D[:, j]
                g[:, j] += D[:, i]
                grads.append(g)
    if degree > 2:
        raise ValueError("trend degree above 2 is not supported")
    return np.stack(cols, axis=1), np.stack(grads, axis=1)


def n_monomials(d, degree):
    return [0, 1, 1 + d, 1 + d + d * (d + 1) // 2][degree + 1]


@dataclass
class PatchInterpolant:
    """Gaussian RBF interpolant on one patch.

    ``coef`` has one column per output component and one row per
    interpolation functional (values, then the ``d`` partials per node in
    Hermite mode).
    """

    centers: np.ndarray
    c: float
    hermite: bool
    coef: np.ndarray
    condition: float = 0.0
    trend_degree: int = -1
    trend_center: Optional[np.ndarray] = None
    trend: Optional[np.ndarray] = None

    def evaluate(self, x):
        """Values ``(q,)`` and Jacobian ``(q, d)`` at a single point."""
        val, jac = self._evaluate_rbf(x)
        if self.trend_degree >= 0:
            V, dV = monomials(x - self.trend_center, self.trend_degree)
            val = val + V[0] @ self.trend
            jac = jac + self.trend.T @ dV[0]
        return val, jac

    def _evaluate_rbf(self, x):
        delta = x[None, :] - self.centers
        c2 = self.c * self.c
        phi = np.exp(-c2 * np.sum(delta * delta, axis=1))
        k, d = self.centers.shape
        if not self.hermite:
            val = phi @ self.coef
            dbasis = (-2.0 * c2 * delta * phi[:, None])  # (k, d)
            jac = self.coef.T @ dbasis
            return val, jac
        coef = self.coef.reshape(k, d + 1, -1)
        # basis for value functionals and for derivative functionals
        bg = 2.0 * c2 * delta * phi[:, None]  # (k, d): d/dy_j kernel
        val = phi @ coef[:, 0, :] + np.einsum("kj,kjq->q", bg, coef[:, 1:, :])
        # gradients of the bases with respect to x
        dbv = -bg  # (k, d)
        dbg = (2.0 * c2 * np.eye(d)[None] - 4.0 * c2 * c2 * delta[:, :, None] * delta[:, None, :]) \
            * phi[:, None, None]  # (k, i, j)
        jac = (np.einsum("ki,kq->qi", dbv, coef[:, 0, :])
               + np.einsum("kij,kjq->qi", dbg, coef[:, 1:, :]))
        return val, jac


def remove_trend(nodes: NodeData, degree: int, hermite: bool = False):
    """Least-squares polynomial trend of the node data and the detrended data.

    In Hermite mode the fit uses the gradients as well. Returns
    ``(detrended, center, coefficients)``; ``degree = -1`` is a no-op.
    """
    if degree < 0:
        return nodes, None, None
    center = nodes.positions.mean(axis=0)
    V, dV = monomials(nodes.positions - center, degree)
    if hermite:
        k, T, d = dV.shape
        lhs = np.concatenate([V, np.transpose(dV, (0, 2, 1)).reshape(k * d, T)])
        rhs = np.concatenate([nodes.values, np.transpose(nodes.gradients, (0, 2, 1)).reshape(k * d, -1)])
    else:
        lhs, rhs = V, nodes.values
    beta = np.linalg.lstsq(lhs, rhs, rcond=None)[0]
    grads = None
    if nodes.gradients is not None:
        grads = nodes.gradients - np.einsum("tq,ktd->kqd", beta, dV)
    return NodeData(nodes.positions, nodes.values - V @ beta, grads), center, beta


def max_trend_degree(n_nodes, d, hermite, degree):
    """Largest degree ``<= degree`` whose trend is overdetermined by the data."""
    n_func = n_nodes * (d + 1) if hermite else n_nodes
    while degree >= 0 and n_monomials(d, degree) >= n_func:
        degree -= 1
    return degree


def fit_patch(nodes: NodeData, c: float, hermite: bool = False,
              cond_limit: float = COND_LIMIT, trend_degree: int = -1) -> PatchInterpolant:
    """Solve the (Hermite) interpolation system on one patch.

    With ``trend_degree >= 0`` a least-squares polynomial of that degree is
    removed first and the Gaussian part interpolates the remainder.

    Raises
    ------
    IllConditionedError
        If the condition number of the interpolation matrix exceeds
        ``cond_limit``; a larger shape parameter (narrower kernel) helps.
    ValueError
        On repeated node positions.
    """
    X = nodes.positions
    _check_distinct(X)
    A = _interpolation_matrix(X, c, hermite)
    L, cond = _factor(A)
    if cond > cond_limit:
        raise IllConditionedError(
            f"interpolation matrix condition {cond:.3g} exceeds {cond_limit:.0e} for c={c:.4g}; "
            "use a larger shape parameter", {c: cond})
    resid, center, beta = remove_trend(nodes, trend_degree, hermite)
    coef = cho_solve((L, True), _functional_data(resid, hermite), check_finite=False)
    return PatchInterpolant(X.copy(), float(c), hermite, coef, cond,
                            trend_degree, center, beta)


def rippa_errors(nodes: NodeData, c: float, hermite: bool = False):
    """Closed-form leave-one-out errors ``E_k = lambda_k / (A^{-1})_kk``.

    ``E_k`` equals ``f_k - s_{-k}(x_k)`` where ``s_{-k}`` interpolates every
    functional except the ``k``-th. Returns ``(E, condition)``.
    """
    A = _interpolation_matrix(nodes.positions, c, hermite)
    F = _functional_data(nodes, hermite)
    L, cond = _factor(A)
    if L is None:
        return np.full(F.shape, np.nan), cond
    Linv = solve_triangular(L, np.eye(A.shape[0]), lower=True, check_finite=False)
    diag = np.sum(Linv * Linv, axis=0)
    lam = Linv.T @ (Linv @ F)
    return lam / diag[:, None], cond


def _loo_norm(nodes, c, hermite, cond_limit, conds):
    E, cond = rippa_errors(nodes, c, hermite)
    conds[c] = cond
    if cond > cond_limit or not np.all(np.isfinite(E)):
        return np.inf
    return float(np.linalg.norm(E))


def select_shape_parameter(nodes: NodeData, candidates: Sequence[float], hermite: bool = False,
                           cond_limit: float = COND_LIMIT, refine: int = 0) -> float:
    """Candidate minimising the leave-one-out error norm ``|E|_2``.

    Ill-conditioned candidates are skipped; ties go to the smaller value.
    With ``refine > 0`` a log-spaced grid of that many points between the
    neighbours of the coarse minimiser is scanned as well.

    Raises
    ------
    IllConditionedError
        If every candidate is ill-conditioned.
    """
    cands = sorted(float(c) for c in candidates)
    if any(c <= 0 for c in cands):
        raise ValueError("shape parameter candidates must be positive")
    if len(cands) == 1:
        return cands[0]
    conds = {}
    errs = [_loo_norm(nodes, c, hermite, cond_limit, conds) for c in cands]
    b = int(np.argmin(errs))  # first minimiser, i.e. the smallest c on ties
    if not np.isfinite(errs[b]):
        raise IllConditionedError("all shape parameter candidates are ill-conditioned", conds)
    best, best_err = cands[b], errs[b]
    if refine > 0:
        lo = cands[max(b - 1, 0)]
        hi = cands[min(b + 1, len(cands) - 1)]
        for c in np.geomspace(lo, hi, refine + 2)[1:-1]:
            err = _loo_norm(nodes, float(c), hermite, cond_limit, conds)
            if err < best_err:
                best, best_err = float(c), err
    return best


# ---------------------------------------------------------------------------
# partition of unity

def weight_polynomial(r):
    """``p(r) = -6 r^5 + 15 r^4 - 10 r^3 + 1`` and ``p'(r)``."""
    r = np.asarray(r, dtype=float)
    return (-6.0 * r ** 5 + 15.0 * r ** 4 - 10.0 * r ** 3 + 1.0,
            -30.0 * r ** 4 + 60.0 * r ** 3 - 30.0 * r ** 2)


def pou_weight(lower, upper, x):
    """Raw weight ``p(b(x))`` of the box ``[lower, upper]`` and its gradient.

    ``b(x) = 1 - prod_i 4 (x_i - l_i)(r_i - x_i) / (r_i - l_i)^2``; the weight
    is zero outside the open box.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    x = np.asarray(x, dtype=float)
    if np.any(x <= lower) or np.any(x >= upper):
        return 0.0, np.zeros_like(x)
    width2 = (upper - lower) ** 2
    fac = 4.0 * (x - lower) * (upper - x) / width2
    dfac = 4.0 * (lower + upper - 2.0 * x) / width2
    prod = float(np.prod(fac))
    b = 1.0 - prod
    pv, dp = weight_polynomial(b)
    # d prod / dx_i = prod_{j != i} fac_j * dfac_i
    others = np.array([np.prod(np.delete(fac, i)) for i in range(x.size)])
    grad = -float(dp) * others * dfac
    return float(pv), grad


@dataclass
class PouGrid:
    """Fixed grid of axis-parallel overlapping boxes over ``[lower, upper]``.

    The boxes cover a padded domain so every domain point lies strictly
    inside at least one box. ``patches[j]`` holds the node indices of box
    ``j`` (row-major over ``counts``).
    """

    lower: np.ndarray
    upper: np.ndarray
    counts: np.ndarray
    overlap: float
    box_length: np.ndarray
    origin: np.ndarray
    patches: list = field(default_factory=list)

    @property
    def stride(self):
        return self.box_length * (1.0 - self.overlap)

    @property
    def n_patches(self):
        return int(np.prod(self.counts))

    def box(self, j):
        idx = np.array(np.unravel_index(j, tuple(self.counts)))
        lo = self.origin + idx * self.stride
        return lo, lo + self.box_length

    def locate(self, x):
        """Indices of all boxes containing ``x`` (closed boxes); ``O(d)``."""
        xi = np.asarray(x, dtype=float) - self.origin
        per_dim = []
        s = self.stride
        for i in range(xi.size):
            k = int(np.floor(xi[i] / s[i]))
            hits = [kk for kk in (k - 1, k)
                    if 0 <= kk < self.counts[i] and kk * s[i] <= xi[i] <= kk * s[i] + self.box_length[i]]
            if not hits:
                return []
            per_dim.append(hits)
        return [int(np.ravel_multi_index(ix, tuple(self.counts))) for ix in itertools.product(*per_dim)]

    def contains(self, x, rtol=1e-12):
        ext = self.upper - self.lower
        tol = rtol * np.maximum(ext, 1.0)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))


def _grid_geometry(lower, upper, counts, overlap):
    ext = upper - lower
    o = ext / (counts * (1.0 - overlap))
    pad = 0.5 * overlap * o
    return o, lower - pad


def _members(grid, X, margin):
    """Node indices per box, with boxes enlarged by ``margin`` on every side."""
    members = [[] for _ in range(grid.n_patches)]
    s = grid.stride
    o = grid.box_length
    for k in range(X.shape[0]):
        xi = X[k] - grid.origin
        ranges = []
        for i in range(xi.size):
            kmin = max(0, int(np.ceil((xi[i] - o[i] - margin[i]) / s[i] - 1e-12)))
            kmax = min(grid.counts[i] - 1, int(np.floor((xi[i] + margin[i]) / s[i] + 1e-12)))
            ranges.append(range(kmin, kmax + 1))
        for ix in itertools.product(*ranges):
            members[int(np.ravel_multi_index(ix, tuple(grid.counts)))].append(k)
    return [np.array(mm, dtype=int) for mm in members]


def build_pou_grid(positions, overlap: float = 0.05, min_pts_per_patch: int = 10,
                   lower=None, upper=None, node_margin: float = 1.0) -> PouGrid:
    """Box grid whose average node count per box is at least ``min_pts_per_patch``.

    Each patch takes the nodes of its box enlarged on every side by
    ``node_margin`` times the mean node spacing, so that points in a box are
    interpolated rather than extrapolated even when the overlap is narrower
    than the node spacing. ``node_margin = 0`` uses the bare boxes. The
    average count is taken over bare boxes. Dimensions of zero extent
    collapse to a single box.
    """
    if not 0 < overlap < 0.5:
        raise ValueError("overlap must lie in (0, 0.5)")
    if node_margin < 0:
        raise ValueError("node_margin must be non-negative")
    X = np.atleast_2d(np.asarray(positions, dtype=float))
    if X.shape[0] == 0:
        raise ValueError("no nodes")
    N, d = X.shape
    lower = X.min(axis=0) if lower is None else np.asarray(lower, dtype=float).copy()
    upper = X.max(axis=0) if upper is None else np.asarray(upper, dtype=float).copy()
    degenerate = (upper - lower) <= 0
    upper = np.where(degenerate, lower + 1.0, upper)
    n_live = max(int(np.sum(~degenerate)), 1)
    spacing = (upper - lower) / max(N ** (1.0 / n_live) - 1.0, 1.0)
    margin = np.where(degenerate, 0.0, node_margin * spacing)

    nb = max(1, int(np.floor((N / max(min_pts_per_patch, 1)) ** (1.0 / n_live))))
    counts = np.full(d, nb, dtype=int)
    counts[degenerate] = 1

    def assign(counts):
        o, origin = _grid_geometry(lower, upper, counts, overlap)
        grid = PouGrid(lower, upper, counts.copy(), overlap, o, origin)
        bare = _members(grid, X, np.zeros(d))
        grid.patches = _members(grid, X, margin) if node_margin > 0 else bare
        return grid, np.array([b.size for b in bare])

    grid, sizes = assign(counts)
    while not ((sizes.mean() >= min_pts_per_patch and sizes.min() > 0) or np.all(grid.counts == 1)):
        counts = grid.counts.copy()
        counts[int(np.argmax(counts))] -= 1
        grid, sizes = assign(counts)
    return grid


@dataclass
class PouInterpolant:
    """Partition-of-unity combination of local Gaussian RBF interpolants.

    Weights are normalised over the boxes containing the query point
    (Shepard normalisation), so they sum to one everywhere in the domain.
    """

    grid: PouGrid
    patches: list
    hermite: bool
    p_shift: np.ndarray
    p_scale: np.ndarray
    n_out: int

    @property
    def dim(self):
        return self.grid.lower.size

    def weights(self, xs):
        """Normalised weights ``{patch: (weight, gradient)}`` at a scaled point."""
        raw = {}
        for j in self.grid.locate(xs):
            lo, hi = self.grid.box(j)
            w, dw = pou_weight(lo, hi, xs)
            if w > 0:
                raw[j] = (w, dw)
        total = sum(w for w, _ in raw.values())
        dtotal = sum(dw for _, dw in raw.values())
        return {j: (w / total, (dw - (w / total) * dtotal) / total) for j, (w, dw) in raw.items()}

    def evaluate(self, x):
        """Values ``(q,)`` and Jacobian ``(q, d)`` at ``x``.

        Raises
        ------
        OutOfDomainError
            If ``x`` lies outside the node domain.
        """
        x = np.asarray(x, dtype=float).ravel()
        xs = (x - self.p_shift) / self.p_scale
        if not self.grid.contains(xs):
            raise OutOfDomainError(f"point {x} outside interpolation domain", point=x)
        val = np.zeros(self.n_out)
        jac = np.zeros((self.n_out, x.size))
        for j, (w, dw) in self.weights(xs).items():
            sv, sj = self.patches[j].evaluate(xs)
            val += w * sv
            jac += np.outer(sv, dw) + w * sj
        return val, jac / self.p_scale[None, :]


def default_candidates(spacing, n=16):
    """``n`` log-spaced shape parameters with ``c * spacing`` in ``[1e-2, 1e2]``."""
    return np.logspace(-2, 2, n) / max(spacing, 1e-300)


def patch_spacing(lower, upper, n_nodes):
    """Typical node spacing in a box: diameter over ``n_nodes ** (1/d)``."""
    diam = float(np.linalg.norm(np.asarray(upper) - np.asarray(lower)))
    return diam / max(n_nodes, 1) ** (1.0 / len(lower))


def build_pou_interpolant(nodes: NodeData, overlap: float = 0.05, min_pts_per_patch: int = 10,
                          hermite: bool = False, candidates=None, lower=None, upper=None,
                          n_candidates: int = 16, refine: int = 8,
                          node_margin: float = 1.0, trend_degree: int = 2) -> PouInterpolant:
    """Build the box grid, pick a shape parameter per patch and fit.

    ``lower``/``upper`` fix the domain (defaults to the node bounding box).
    ``candidates``, if given, are dimensionless shape parameters in unit-cube
    coordinates; otherwise ``n_candidates`` log-spaced values in
    ``[1e-2, 1e2]`` divided by each patch's typical node spacing are
    scanned, followed by ``refine`` points around the coarse minimiser.

    Each patch first removes a least-squares polynomial trend of degree
    ``trend_degree`` (lowered on patches with too few functionals; ``-1``
    disables it). Without the trend, Gaussian patches at a fixed node count
    stop improving under refinement because the condition limit pins
    ``c * spacing``.
    """
    X = nodes.positions
    lo = X.min(axis=0) if lower is None else np.asarray(lower, dtype=float)
    hi = X.max(axis=0) if upper is None else np.asarray(upper, dtype=float)
    scale = np.where(hi - lo > 0, hi - lo, 1.0)
    Xs = (X - lo) / scale
    grads = None
    if nodes.gradients is not None:
        grads = nodes.gradients * scale[None, None, :]
    scaled = NodeData(Xs, nodes.values, grads)
    grid = build_pou_grid(Xs, overlap, min_pts_per_patch, np.zeros(X.shape[1]),
                          np.where(hi - lo > 0, 1.0, 0.0), node_margin)
    patches = []
    for j, idx in enumerate(grid.patches):
        if idx.size == 0:
            raise ValueError(f"patch {j} contains no nodes; lower min_pts_per_patch or add nodes")
        deg = max_trend_degree(idx.size, X.shape[1], hermite, trend_degree)
        sub, _, _ = remove_trend(scaled.subset(idx), deg, hermite)
        blo, bhi = grid.box(j)
        if candidates is None:
            cands = default_candidates(patch_spacing(blo, bhi, idx.size), n_candidates)
        else:
            cands = candidates
        if idx.size > 1:
            c = select_shape_parameter(sub, cands, hermite, refine=refine)
        else:
            c = float(min(cands))
        patches.append(fit_patch(scaled.subset(idx), c, hermite, trend_degree=deg))
    log.debug("built PU interpolant: %d patches, counts %s", len(patches), grid.counts)
    return PouInterpolant(grid, patches, hermite, lo, scale, nodes.n_out)


def eval_interpolant(interp: PouInterpolant, x):
    return interp.evaluate(x)
