"""Kernel backend selection.

The compiled extension is used when importable; ``HOPATTN_BACKEND=python``
forces the numpy fallback.  The wrappers here accept arrays of any rank and
apply the kernel along the last axis.
"""

import os

import numpy as np

from hopattn import _pykernels

_compiled = None
if os.environ.get("HOPATTN_BACKEND", "").lower() not in ("python", "numpy"):
    try:
        from hopattn import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

_impl = _compiled if _compiled is not None else _pykernels
BACKEND = "cython" if _compiled is not None else "python"


def available():
    """Names of the importable backends."""
    return ["cython", "python"] if _compiled is not None else ["python"]


def use(name):
    """Switch the active backend at runtime (used by the benchmark and tests)."""
    global _impl, BACKEND
    if name == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not built")
        _impl = _compiled
    elif name == "python":
        _impl = _pykernels
    else:
        raise ValueError(f"unknown backend {name!r}")
    BACKEND = name


def _rows(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    return a.reshape(-1, a.shape[-1]) if a.ndim != 2 else a


def softmax_lastaxis(a, causal=False):
    a = np.asarray(a, dtype=np.float64)
    block = 0
    if causal:
        if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
            raise ValueError("causal softmax needs square trailing axes")
        block = a.shape[-2]
    return _impl.softmax_rows(_rows(a), block).reshape(a.shape)


def softmax_lastaxis_backward(p, g):
    shape = np.shape(p)
    return _impl.softmax_rows_backward(_rows(p), _rows(g)).reshape(shape)


def gelu(x):
    shape = np.shape(x)
    return _impl.gelu(_rows(np.atleast_1d(x))).reshape(shape)


def gelu_backward(x, g):
    shape = np.shape(x)
    return _impl.gelu_backward(_rows(np.atleast_1d(x)), _rows(np.atleast_1d(g))).reshape(shape)


def layer_norm(x, eps=1e-5):
    shape = np.shape(x)
    y, rstd = _impl.layer_norm(_rows(x), eps)
    return y.reshape(shape), rstd.reshape(shape[:-1])


def layer_norm_backward(y, rstd, g):
    shape = np.shape(y)
    out = _impl.layer_norm_backward(
        _rows(y), np.ascontiguousarray(rstd, dtype=np.float64).reshape(-1), _rows(g)
    )
    return out.reshape(shape)


def ema(prev, new, keep):
    prev = np.asarray(prev, dtype=np.float64)
    shape = prev.shape
    return _impl.ema(_rows(np.atleast_1d(prev)), _rows(np.atleast_1d(new)), float(keep)).reshape(shape)


def norm_one(a):
    return float(_impl.norm_one(np.ascontiguousarray(a, dtype=np.float64)))


def norm_inf(a):
    return float(_impl.norm_inf(np.ascontiguousarray(a, dtype=np.float64)))
