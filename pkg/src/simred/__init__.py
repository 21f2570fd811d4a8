"""Model reduction of two-timescale systems by slow invariant manifolds,
and optimal control of the full and reduced models by multiple shooting."""

__version__ = "0.1.0"
