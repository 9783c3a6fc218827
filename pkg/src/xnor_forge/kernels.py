"""Hot-kernel dispatch.

The compiled ``_ckernels`` extension is used when importable; otherwise the
numpy implementation in ``_pykernels`` is used. Setting ``XNOR_FORGE_PURE=1``
forces the numpy path.
"""
import os

from . import _pykernels

if os.environ.get("XNOR_FORGE_PURE"):
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _pykernels

BACKEND = _impl.BACKEND
popcount = _impl.popcount
xnor_dot_matrix = _impl.xnor_dot_matrix
conv_first_accumulate = _impl.conv_first_accumulate


def available_backends():
    """Return ``{name: module}`` for every kernel backend importable here."""
    found = {"numpy": _pykernels}
    try:
        from . import _ckernels
    except ImportError:
        pass
    else:
        found["cython"] = _ckernels
    return found
