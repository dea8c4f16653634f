"""Select the compositing kernels at import time.

The compiled module is used when it imports; ``GSFOCUS_BACKEND=python``
forces the numpy fallback.
"""

import os

from . import _raster_py

try:
    from . import _raster_c
except ImportError:  # extension not built
    _raster_c = None

_KERNELS = {"python": _raster_py}
if _raster_c is not None:
    _KERNELS["cython"] = _raster_c


def available():
    return sorted(_KERNELS)


def get(name=None):
    """Kernel module by name; ``None`` picks the default."""
    if name is None:
        name = os.environ.get("GSFOCUS_BACKEND") or ("cython" if _raster_c else "python")
    try:
        return _KERNELS[name]
    except KeyError:
        raise ValueError(f"backend {name!r} not available (have {available()})") from None


kernels = get()
BACKEND = "cython" if kernels is _raster_c else "python"
