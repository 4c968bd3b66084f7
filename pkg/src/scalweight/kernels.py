"""Kernel backend selection.

The compiled extension is used when it was built; otherwise (or when
``SCALWEIGHT_PURE_PYTHON=1``) the numpy fallback is used.  ``BACKEND`` names
the active implementation.
"""
import os

import numpy as np

from . import _kernels_py

_compiled = None
if os.environ.get("SCALWEIGHT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

_impl = _compiled or _kernels_py
BACKEND = "cython" if _compiled is not None else "python"


def backends():
    """Available implementations, by name."""
    out = {"python": _kernels_py}
    if _compiled is not None:
        out["cython"] = _compiled
    return out


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def gram(grads, impl=None):
    return (impl or _impl).gram(_c(grads))


def pcgrad_project(grads, order, impl=None):
    order = np.ascontiguousarray(order, dtype=np.int64).reshape(len(grads), -1)
    return (impl or _impl).pcgrad_project(_c(grads), order)


def graddrop(grads, u, impl=None):
    return (impl or _impl).graddrop(_c(grads), _c(u))
