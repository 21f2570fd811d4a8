"""Run configuration: YAML documents, built-in problem defaults and
user-defined models written as symbolic expressions.

Precedence when resolving a run is command-line flags, then the config
file, then the defaults of the selected problem.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import sympy as sp
import yaml

from .models import (OcpDefinition, TwoTimescaleSystem, make_enzyme_problem,
                     make_voltage_regulator_problem)

log = logging.getLogger(__name__)

RUN_MODES = ("full", "reduced-online", "reduced-offline")

PROBLEM_DEFAULTS = {
    "enzyme": {"eps": 1e-2, "n_intervals": 40, "tol": 1e-4, "integ_tol": 1e-6,
               "x0": [1.0, 0.5],
               "table": {"lower": [0.0, 0.0], "upper": [5.5, 5.5], "counts": [30, 30], "hermite": True}},
    "vr": {"eps": 0.2, "n_intervals": 10, "tol": 1e-3, "integ_tol": 1e-6,
           "x0": [-10.0, 0.0, 0.0, 0.0, 0.0],
           "table": {"lower": [-15.0, -20.0, -15.0], "upper": [15.0, 60.0, 15.0],
                     "counts": [7, 9, 11], "hermite": True}},
}
USER_DEFAULTS = {"eps": None, "n_intervals": 20, "tol": 1e-4, "integ_tol": 1e-6, "x0": None, "table": None}


@dataclass
class RunConfig:
    """Fully resolved settings for one command."""

    problem: object = "enzyme"
    mode: str = "full"
    eps: Optional[float] = None
    x0: Optional[list] = None
    n_intervals: Optional[int] = None
    tol: Optional[float] = None
    integ_tol: Optional[float] = None
    table: Optional[dict] = None
    table_path: Optional[str] = None
    out: str = "out"
    seed: int = 0
    modes: list = field(default_factory=list)
    bounds: dict = field(default_factory=dict)
    max_iter: int = 200

    def validate(self):
        if self.mode not in RUN_MODES:
            raise ValueError(f"mode must be one of {RUN_MODES}, got {self.mode!r}")
        for m in self.modes:
            if m not in RUN_MODES:
                raise ValueError(f"unknown mode {m!r} in modes")
        if self.mode == "reduced-offline" and not (self.table_path or self.table):
            raise ValueError("reduced-offline needs a node-table path or a table spec")
        if isinstance(self.problem, str) and self.problem not in PROBLEM_DEFAULTS:
            raise ValueError(f"unknown problem {self.problem!r}; built-ins are {sorted(PROBLEM_DEFAULTS)}")
        return self

    def hash(self) -> str:
        """Hash of the settings that determine numeric output."""
        d = asdict(self)
        for key in ("out", "modes"):
            d.pop(key, None)
        blob = json.dumps(d, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_config_file(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a mapping")
    base = Path(path).resolve().parent
    for key in ("table_path", "out"):
        if data.get(key):
            data[key] = str((base / data[key]).resolve())
    return data


def resolve_config(flags: dict, file_data: Optional[dict] = None) -> RunConfig:
    """Merge flags over file values over problem defaults."""
    merged = dict(file_data or {})
    merged.update({k: v for k, v in flags.items() if v is not None})
    problem = merged.get("problem", "enzyme")
    defaults = PROBLEM_DEFAULTS.get(problem, USER_DEFAULTS) if isinstance(problem, str) else USER_DEFAULTS
    for key, val in defaults.items():
        if merged.get(key) is None:
            merged[key] = val
    known = set(RunConfig.__dataclass_fields__)
    unknown = set(merged) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    cfg = RunConfig(**merged)
    for key in ("table_path", "out"):
        val = getattr(cfg, key)
        if val:
            setattr(cfg, key, str(Path(val).resolve()))
    return cfg.validate()


# ---------------------------------------------------------------------------
# problems

def build_problem(cfg: RunConfig) -> OcpDefinition:
    """OCP for a resolved config, applying ``eps``, ``x0``, ``n_intervals``
    and bound overrides."""
    if isinstance(cfg.problem, dict):
        ocp = user_problem(cfg.problem, eps=cfg.eps, n_intervals=cfg.n_intervals)
        if cfg.x0 is not None:
            x0 = np.asarray(cfg.x0, dtype=float)
            p = ocp.system.p
            ocp = ocp.replace(initial_slow=x0[:p], initial_fast=x0[p:])
    elif cfg.problem == "enzyme":
        x0 = cfg.x0 or PROBLEM_DEFAULTS["enzyme"]["x0"]
        if len(x0) != 2:
            raise ValueError("enzyme x0 needs 2 entries (x, y)")
        ocp = make_enzyme_problem(cfg.eps, y0=x0[1], n_intervals=cfg.n_intervals)
        ocp = ocp.replace(initial_slow=[x0[0]])
    else:
        ocp = make_voltage_regulator_problem(cfg.eps, x0=cfg.x0, n_intervals=cfg.n_intervals)
    for key, name in (("x", "x_bounds"), ("y", "y_bounds"), ("u", "u_bounds")):
        if key in cfg.bounds:
            lo, hi = cfg.bounds[key]
            ocp = ocp.replace(**{name: (lo, hi)})
    return ocp


def _symbols(names):
    return [sp.Symbol(n) for n in names]


def _lambdify(args, exprs):
    fn = sp.lambdify(args, exprs, modules="numpy")
    return lambda *a: np.asarray(fn(*a), dtype=float)


def user_system(spec: dict, eps=None) -> TwoTimescaleSystem:
    """Two-timescale system from symbolic right-hand sides.

    ``spec`` keys: ``slow_states``, ``fast_states``, ``controls`` (symbol
    names), ``rhs_slow``, ``rhs_fast`` (expression strings, fast ones
    already divided by ``eps``) and optional ``constants``. The Jacobians
    are differentiated symbolically.
    """
    xs = _symbols(spec["slow_states"])
    ys = _symbols(spec["fast_states"])
    us = _symbols(spec.get("controls", []))
    consts = dict(spec.get("constants", {}))
    if eps is not None:
        consts["eps"] = eps
    subs = {sp.Symbol(k): v for k, v in consts.items()}
    loc = {s.name: s for s in xs + ys + us}
    loc.update({k: sp.Symbol(k) for k in consts})
    f = [sp.sympify(e, locals=loc).subs(subs) for e in spec["rhs_slow"]]
    g = [sp.sympify(e, locals=loc).subs(subs) for e in spec["rhs_fast"]]
    if len(f) != len(xs) or len(g) != len(ys):
        raise ValueError("number of right-hand sides must match the state lists")
    F = sp.Matrix(f + g)
    Z = sp.Matrix(xs + ys)
    args = [*xs, *ys, *us]
    f_fn = _lambdify(args, f)
    g_fn = _lambdify(args, g)
    J_fn = _lambdify(args, F.jacobian(Z))
    Ju_fn = _lambdify(args, F.jacobian(sp.Matrix(us))) if us else None
    p, q, m = len(xs), len(ys), len(us)

    def call(fn, x, y, u):
        return fn(*np.atleast_1d(x), *np.atleast_1d(y), *np.atleast_1d(u))

    return TwoTimescaleSystem(
        p=p, q=q, m=m,
        rhs_slow=lambda x, y, u: call(f_fn, x, y, u).reshape(p),
        rhs_fast=lambda x, y, u: call(g_fn, x, y, u).reshape(q),
        jacobian=lambda x, y, u: call(J_fn, x, y, u).reshape(p + q, p + q),
        jacobian_u=(lambda x, y, u: call(Ju_fn, x, y, u).reshape(p + q, m)) if us else None,
        eps=consts.get("eps"), name=spec.get("name", "user"),
    )


def user_problem(spec: dict, eps=None, n_intervals=None) -> OcpDefinition:
    """OCP from a symbolic model spec (see :func:`user_system`) with keys
    ``running_cost``, ``horizon``, ``initial`` (``x``, ``y``), ``bounds``
    (``x``, ``y``, ``u`` as ``[lo, hi]``) and ``n_intervals``."""
    sys = user_system(spec, eps)
    xs = _symbols(spec["slow_states"])
    ys = _symbols(spec["fast_states"])
    us = _symbols(spec.get("controls", []))
    loc = {s.name: s for s in xs + ys + us}
    consts = dict(spec.get("constants", {}))
    if eps is not None:
        consts["eps"] = eps
    expr = sp.sympify(spec.get("running_cost", "0"), locals=loc).subs({sp.Symbol(k): v for k, v in consts.items()})
    args = [*xs, *ys, *us]
    cost_fn = _lambdify(args, expr)
    grad_fn = _lambdify(args, [sp.diff(expr, s) for s in args])
    p, q = sys.p, sys.q

    def cost(x, y, u):
        return float(cost_fn(*np.atleast_1d(x), *np.atleast_1d(y), *np.atleast_1d(u)))

    def cost_grad(x, y, u):
        gfull = np.broadcast_to(grad_fn(*np.atleast_1d(x), *np.atleast_1d(y), *np.atleast_1d(u)),
                                (p + q + sys.m,))
        return gfull[:p], gfull[p:p + q], gfull[p + q:]

    init = spec.get("initial", {})
    b = spec.get("bounds", {})
    inf = float("inf")
    return OcpDefinition(
        system=sys, horizon=float(spec.get("horizon", 1.0)), running_cost=cost, running_cost_grad=cost_grad,
        initial_slow=init.get("x", [0.0] * p), initial_fast=init.get("y", [0.0] * q),
        x_bounds=tuple(b.get("x", [-inf, inf])), y_bounds=tuple(b.get("y", [-inf, inf])),
        u_bounds=tuple(b.get("u", [-inf, inf])),
        n_intervals=int(n_intervals or spec.get("n_intervals", 20)), name=spec.get("name", "user"),
    )
