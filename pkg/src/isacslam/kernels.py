"""Kernel selection: the compiled extension when built, numpy otherwise.

Set ``ISACSLAM_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py

try:
    if os.environ.get("ISACSLAM_PURE_PYTHON"):
        raise ImportError("pure-python kernels requested")
    from . import _kernels as _impl
    COMPILED = True
except ImportError:
    _impl = _kernels_py
    COMPILED = False

bearing_loglik = _impl.bearing_loglik
systematic_resample = _impl.systematic_resample
feature_update = _impl.feature_update
path_angles = _kernels_py.path_angles
