"""Backend selection for the conv1d hot path.

The compiled extension is preferred; set ``DIDFUSE_PURE_PYTHON=1`` to force
the numpy implementation. ``BACKEND`` names whichever one was loaded.
"""

import os

from . import _pykernels

if os.environ.get("DIDFUSE_PURE_PYTHON", "") not in ("", "0"):
    _impl = None
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = None

if _impl is None:
    _impl = _pykernels
    BACKEND = "python"
else:
    BACKEND = "cython"

conv1d_forward = _impl.conv1d_forward
conv1d_backward = _impl.conv1d_backward


def available_backends():
    """Return a mapping name -> module for every backend importable here."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels
        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
