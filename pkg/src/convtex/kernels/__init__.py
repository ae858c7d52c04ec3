"""Kernel backend selection.

The compiled Cython core is used when it was built; otherwise the NumPy
fallback takes over.  CONVTEX_KERNELS=compiled|numpy forces the choice (a
forced "compiled" fails loudly if the extension is missing).  Both backends
honour identical contracts, including row-stability of the forward rowmm and
causal conv1d (see pyk.py).
"""

import os

from ..errors import ConfigError
from . import pyk

_choice = os.environ.get("CONVTEX_KERNELS", "").strip().lower()

if _choice in ("", "compiled", "c"):
    try:
        from . import ck as _impl

        BACKEND = "compiled"
    except ImportError:
        if _choice:
            raise ConfigError(
                "CONVTEX_KERNELS requested the compiled backend but the "
                "extension is not built"
            ) from None
        _impl = pyk
        BACKEND = "numpy"
elif _choice in ("numpy", "py"):
    _impl = pyk
    BACKEND = "numpy"
else:
    raise ConfigError(f"unknown CONVTEX_KERNELS value {_choice!r}")

rowmm = _impl.rowmm
conv2d_fwd = _impl.conv2d_fwd
conv2d_bwd = _impl.conv2d_bwd
conv1d_fwd = _impl.conv1d_fwd
conv1d_bwd = _impl.conv1d_bwd
maxpool2d_fwd = _impl.maxpool2d_fwd
maxpool2d_bwd = _impl.maxpool2d_bwd


def available_backends():
    """Name -> module for every backend importable in this install."""
    out = {"numpy": pyk}
    try:
        from . import ck

        out["compiled"] = ck
    except ImportError:
        pass
    return out
