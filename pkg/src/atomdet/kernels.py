"""Kernel backend selection: compiled extension when available, numpy fallback otherwise.

The choice happens once at import. Set ATOMDET_BACKEND=python (or =compiled)
to force a backend; "compiled" raises if the extension was not built.
"""

from __future__ import annotations

import math
import os
import warnings

_requested = os.environ.get("ATOMDET_BACKEND", "auto")
if _requested not in ("auto", "compiled", "python"):
    raise ImportError(f"ATOMDET_BACKEND must be auto, compiled or python, not {_requested!r}")

_impl = None
if _requested in ("auto", "compiled"):
    try:
        from atomdet import _kernels as _impl  # type: ignore[no-redef]
        BACKEND = "compiled"
    except ImportError:
        if _requested == "compiled":
            raise
        _impl = None
if _impl is None:
    from atomdet import _kernels_py as _impl  # type: ignore[no-redef]
    BACKEND = "python"
    if _requested == "auto":
        warnings.warn("atomdet compiled kernels unavailable; using the pure-Python fallback")

emissions_raw = _impl.emissions_raw
dataflow_emissions = _impl.dataflow_emissions
tree_sum32 = _impl.tree_sum32


def next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p <<= 1
    return p


def tree_levels(n: int) -> int:
    """Depth of the adder tree for an n-element vector (ceil(log2 n))."""
    if n < 1:
        raise ValueError("tree needs at least one element")
    if n == 1:
        return 0
    return math.ceil(math.log2(n))


def get_impl(name: str):
    """Fetch a specific backend module (for the backend comparison benchmark)."""
    if name == "python":
        from atomdet import _kernels_py
        return _kernels_py
    if name == "compiled":
        from atomdet import _kernels
        return _kernels
    raise ValueError(f"unknown backend {name!r}")
