"""Pure numpy fallback for the compiled kernels in ``_kernels.pyx``.

Same signatures, same 2-D row convention.
"""

import numpy as np

_GELU_C = 0.7978845608028654
_GELU_K = 0.044715


def _causal_mask(n, m, block):
    rows = np.arange(n) % block
    return np.arange(m)[None, :] > rows[:, None]


def softmax_rows(a, block=0):
    a = np.asarray(a, dtype=np.float64)
    if block:
        mask = _causal_mask(a.shape[0], a.shape[1], block)
        a = np.where(mask, -np.inf, a)
    e = np.exp(a - a.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(p, g):
    dot = np.einsum("ij,ij->i", p, g)[:, None]
    return p * (g - dot)


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_K * x**3)))


def gelu_backward(x, g):
    t = np.tanh(_GELU_C * (x + _GELU_K * x**3))
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * dt)


def layer_norm(x, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=1) + eps)
    return xc * rstd[:, None], rstd


def layer_norm_backward(y, rstd, g):
    mg = g.mean(axis=1, keepdims=True)
    mgy = (g * y).mean(axis=1, keepdims=True)
    return rstd[:, None] * (g - mg - y * mgy)


def ema(prev, new, keep):
    return keep * prev + (1.0 - keep) * new


def norm_one(a):
    return float(np.abs(a).sum(axis=0).max())


def norm_inf(a):
    return float(np.abs(a).sum(axis=1).max())
