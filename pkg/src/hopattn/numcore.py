"""Dense float64 matrix primitives.

Matrices are plain 2-D numpy arrays; row vectors are 1-D arrays.  The
operator norms follow the usual definitions: ``one`` is the maximum absolute
column sum, ``inf`` the maximum absolute row sum and ``one_inf`` their
geometric mean.
"""

from __future__ import annotations

from typing import Literal

import numpy as np

from hopattn import _backend
from hopattn.errors import NumericalError, ShapeError

NormKind = Literal["one", "inf", "one_inf"]


def as_mat(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"expected a non-empty 2-D matrix, got shape {m.shape}")
    return m


def _finite(a: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NumericalError(f"{what} produced non-finite entries")
    return a


def matmul(a, b) -> np.ndarray:
    a, b = as_mat(a), as_mat(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a @ b
    return _finite(out, "matmul")


def softmax_rows(a, causal: bool = False) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction."""
    a = _finite(as_mat(a), "softmax input")
    return _backend.softmax_lastaxis(a, causal=causal)


def operator_norm(a, kind: NormKind = "one_inf") -> float:
    a = as_mat(a)
    if kind == "one":
        return _backend.norm_one(a)
    if kind == "inf":
        return _backend.norm_inf(a)
    if kind == "one_inf":
        return float(np.sqrt(_backend.norm_one(a) * _backend.norm_inf(a)))
    raise ValueError(f"unknown norm kind {kind!r}")


def residual(x) -> tuple[np.ndarray, np.ndarray]:
    """Split ``x`` into ``r + 1 center^T`` with ``center`` the column mean.

    The column mean is the Frobenius-norm minimiser of ``||x - 1 y^T||``.
    """
    x = as_mat(x)
    center = x.mean(axis=0)
    return x - center[None, :], center
