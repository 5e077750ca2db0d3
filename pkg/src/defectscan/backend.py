"""Kernel backend selection.

The convolution hot loops (im2col / col2im) exist twice: a numba-compiled
version and a pure-numpy fallback.  Selection order:

* ``DEFECTSCAN_BACKEND=numba``  force numba, raise if it cannot import
* ``DEFECTSCAN_BACKEND=numpy``  force the numpy fallback
* unset / ``auto``              numba when available, else numpy

Both backends return bit-identical arrays; the trade-off is speed only
(see benchmarks/bench_kernels.py).
"""

import os

from .errors import ConfigurationError

BACKEND_ENV = "DEFECTSCAN_BACKEND"

_active_name = None
_active_module = None


def _load(name):
    if name == "numba":
        from . import _kernels_numba as mod
    elif name == "numpy":
        from . import _kernels_numpy as mod
    else:
        raise ConfigurationError(
            f"unknown backend {name!r}; expected 'numba', 'numpy' or 'auto'")
    return mod


def set_backend(name):
    """Force a backend by name ('numba', 'numpy' or 'auto'). Returns the active name."""
    global _active_name, _active_module
    if name == "auto":
        try:
            _active_module = _load("numba")
            _active_name = "numba"
        except ImportError:
            _active_module = _load("numpy")
            _active_name = "numpy"
    else:
        _active_module = _load(name)
        _active_name = name
    return _active_name


def active_backend():
    """Name of the backend currently serving the kernels."""
    if _active_name is None:
        set_backend(os.environ.get(BACKEND_ENV, "auto").lower())
    return _active_name


def get_kernels(name=None):
    """Kernel namespace for `name`, or the active one when name is None."""
    if name is not None:
        return _load(name)
    active_backend()
    return _active_module


def im2col(xp, kh, kw, stride, oh, ow):
    return get_kernels().im2col(xp, kh, kw, stride, oh, ow)


def col2im(cols, c, hp, wp, kh, kw, stride, oh, ow):
    return get_kernels().col2im(cols, c, hp, wp, kh, kw, stride, oh, ow)
