"""Hot-loop kernels with a compiled core and a numpy fallback.

The compiled extension is used when it imports; set
``GPATCHER_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _pykernels

try:
    if os.environ.get("GPATCHER_PURE_PYTHON") == "1":
        raise ImportError("pure-python backend requested")
    from . import _ckernels as _active
    BACKEND = "cython"
except ImportError:
    _active = _pykernels
    BACKEND = "python"


def get_backend(name=None):
    """Kernel module by name ("cython" or "python"); active one by default."""
    if name is None:
        return _active
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _ckernels
        return _ckernels
    raise ValueError(f"unknown backend {name!r}")


def available_backends():
    names = ["python"]
    try:
        from . import _ckernels  # noqa: F401
        names.insert(0, "cython")
    except ImportError:
        pass
    return names


jacobi_eigh = _active.jacobi_eigh
topp_columns = _active.topp_columns
ppr_dense = _active.ppr_dense
ppr_topp = _active.ppr_topp
layer_norm = _active.layer_norm
layer_norm_backward = _active.layer_norm_backward
