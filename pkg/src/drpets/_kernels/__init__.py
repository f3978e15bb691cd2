"""Rollout kernel backends.

The hot loop of planning, the ensemble MLP forward passes, Gaussian sampling,
rewards, scores and reward-to-go accumulation over every CEM candidate,
lives behind a single function, ``rollout_returns``, with two
implementations: a compiled Cython core (built by setup.py) and a pure
numpy fallback. The compiled core is picked at import when available.

Set ``DRPETS_BACKEND=python`` to force the fallback, ``compiled`` to make a
missing extension an error, or leave it unset/``auto`` for best-available.
Both backends implement identical semantics; results agree to floating-point
round-off (summation order inside matrix products differs), and each backend
is bit-deterministic for fixed inputs regardless of thread count.
"""

from __future__ import annotations

import os

from . import _ref

_requested = os.environ.get("DRPETS_BACKEND", "auto")
if _requested not in ("auto", "compiled", "python"):
    raise RuntimeError(f"DRPETS_BACKEND must be auto|compiled|python, got {_requested!r}")

if _requested == "python":
    rollout_returns = _ref.rollout_returns
    BACKEND = "python"
else:
    try:
        from ._core import rollout_returns  # type: ignore[attr-defined]
        BACKEND = "compiled"
    except ImportError:
        if _requested == "compiled":
            raise
        rollout_returns = _ref.rollout_returns
        BACKEND = "python"


def active_backend() -> str:
    return BACKEND


def get_rollout(backend: str):
    """Fetch a specific backend implementation (for parity tests and benchmarks)."""
    if backend == "python":
        return _ref.rollout_returns
    if backend == "compiled":
        from ._core import rollout_returns as compiled  # type: ignore[attr-defined]
        return compiled
    raise ValueError(f"unknown backend {backend!r}")
