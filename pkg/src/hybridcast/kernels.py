"""Backend selection for the symmetric 3x3 kernels.

The compiled extension is used when it imports; otherwise the numpy
fallback. Set ``HYBRIDCAST_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _fallback

BACKEND = "python"
_compiled = None

if os.environ.get("HYBRIDCAST_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled

        BACKEND = "cython"
    except ImportError:  # extension not built
        _compiled = None

_impl = _compiled if _compiled is not None else _fallback

sym3_eigh = _impl.sym3_eigh
sym3_funm = _impl.sym3_funm
sym3_funm_vjp = _impl.sym3_funm_vjp
loewner = _impl.loewner


def available_backends():
    names = ["python"]
    if _compiled is not None:
        names.append("cython")
    return names


def get_backend(name):
    """Return the module implementing backend ``name`` ("python" or "cython")."""
    if name == "python":
        return _fallback
    if name == "cython":
        if _compiled is None:
            raise ImportError("compiled kernels are not built")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")
