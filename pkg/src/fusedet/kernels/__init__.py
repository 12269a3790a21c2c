"""Kernel backend selection: compiled Cython extension when available,
pure-numpy fallback otherwise. ``set_backend`` lets benchmarks compare both."""

import numpy as np

from . import _purepy

try:
    from . import _fastops

    _HAVE_COMPILED = True
except ImportError:  # extension not built
    _fastops = None
    _HAVE_COMPILED = False

_impl = _fastops if _HAVE_COMPILED else _purepy
_backend = "compiled" if _HAVE_COMPILED else "pure"


def available_backends():
    return ("pure", "compiled") if _HAVE_COMPILED else ("pure",)


def get_backend() -> str:
    return _backend


def set_backend(name: str):
    global _impl, _backend
    if name == "pure":
        _impl, _backend = _purepy, "pure"
    elif name == "compiled":
        if not _HAVE_COMPILED:
            raise RuntimeError("compiled kernel extension is not built")
        _impl, _backend = _fastops, "compiled"
    else:
        raise ValueError(f"unknown kernel backend {name!r}")


def bilinear_gather(fmap, gx, gy, valid):
    return _impl.bilinear_gather(
        np.ascontiguousarray(fmap, dtype=np.float64),
        np.ascontiguousarray(gx, dtype=np.float64),
        np.ascontiguousarray(gy, dtype=np.float64),
        np.ascontiguousarray(valid, dtype=np.uint8 if _impl is _fastops else bool),
    )


def bilinear_scatter(gout, gx, gy, valid, h, w):
    return _impl.bilinear_scatter(
        np.ascontiguousarray(gout, dtype=np.float64),
        np.ascontiguousarray(gx, dtype=np.float64),
        np.ascontiguousarray(gy, dtype=np.float64),
        np.ascontiguousarray(valid, dtype=np.uint8 if _impl is _fastops else bool),
        int(h),
        int(w),
    )


def lsap(cost):
    return _impl.lsap(cost)
