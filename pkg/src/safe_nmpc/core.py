"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the pure-Python
kernels take over. Setting ``SAFE_NMPC_PURE=1`` forces the fallback.
"""
import os

from . import _core_py

if os.environ.get("SAFE_NMPC_PURE", "") not in ("", "0"):
    _impl = _core_py
else:
    try:
        from . import _core as _impl  # type: ignore[attr-defined]
    except ImportError:  # extension not built
        _impl = _core_py

BACKEND = _impl.BACKEND
model_dims = _impl.model_dims
model_rhs = _impl.model_rhs
model_jac = _impl.model_jac
flow = _impl.flow
flow_sens = _impl.flow_sens
jacobi_eigvalsh = _impl.jacobi_eigvalsh

fallback = _core_py
