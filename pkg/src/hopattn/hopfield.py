"""Discretised modern continuous Hopfield network with softmax memory units.

The continuous system couples a visible state ``x`` (length d) and a hidden
state ``h`` (length M) through two untied weight matrices ``w1, w2`` of
shape (d, M)::

    tau_v dx/dt = softmax(h) w1^T - x
    tau_h dh/dt = x w2 - h

Two explicit Euler schemes are provided.  ``step_ff`` builds the new hidden
state from the old visible state; ``step_fb`` updates the visible state
first and feeds the new one to the hidden update, which is the ordering that
reproduces attention layers (see :func:`attention_equivalence_oracle`).

Coefficients are stored as ``alpha = 1 - dt/tau_v`` and ``alpha_prime``
with ``dt/tau_h = (1 - alpha_prime) / alpha_prime``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from hopattn.attention import LayerParams, baseline_sa_layer
from hopattn.errors import ConfigError, PreconditionError, ShapeError


@dataclass(frozen=True)
class MCHNState:
    visible: np.ndarray
    hidden: np.ndarray


@dataclass(frozen=True)
class MCHNParams:
    w1: np.ndarray
    w2: np.ndarray
    alpha: float
    alpha_prime: float

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.alpha_prime <= 1.0):
            raise ConfigError("alpha and alpha_prime must lie in [0, 1]")
        if np.shape(self.w1) != np.shape(self.w2):
            raise ShapeError(f"w1 {np.shape(self.w1)} and w2 {np.shape(self.w2)} differ")


# parameterisation helpers -------------------------------------------------

def alpha_from_ratio(rho: float) -> float:
    """``alpha`` for a visible step ratio ``dt/tau_v``."""
    return 1.0 - rho


def ratio_from_alpha(alpha: float) -> float:
    return 1.0 - alpha


def alpha_prime_from_ratio(rho_prime: float) -> float:
    """``alpha_prime`` for a hidden step ratio ``dt/tau_h`` (backward scheme)."""
    return 1.0 / (1.0 + rho_prime)


def ratio_from_alpha_prime(alpha_prime: float) -> float:
    if alpha_prime == 0.0:
        return math.inf
    return (1.0 - alpha_prime) / alpha_prime


# model B -----------------------------------------------------------------

def _softmax(h: np.ndarray) -> np.ndarray:
    e = np.exp(h - h.max())
    return e / e.sum()


def lagrangians(state: MCHNState) -> tuple[float, float]:
    """``(log sum exp(h), |x|^2 / 2)``."""
    h = np.asarray(state.hidden, dtype=np.float64)
    x = np.asarray(state.visible, dtype=np.float64)
    m = h.max()
    return float(m + np.log(np.exp(h - m).sum())), float(0.5 * x @ x)


def activations(state: MCHNState) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the Lagrangians: ``(softmax(h), x)``."""
    return _softmax(np.asarray(state.hidden, dtype=np.float64)), np.array(state.visible, dtype=np.float64)


def _check(state: MCHNState, params: MCHNParams):
    d, m = np.shape(params.w1)
    if np.shape(state.visible) != (d,) or np.shape(state.hidden) != (m,):
        raise ShapeError(
            f"state ({np.shape(state.visible)}, {np.shape(state.hidden)}) "
            f"does not fit weights of shape {(d, m)}"
        )


def step_fb(state: MCHNState, params: MCHNParams) -> MCHNState:
    """Forward step for ``x``, then a backward step for ``h`` using the new ``x``."""
    _check(state, params)
    f, _ = activations(state)
    a, ap = params.alpha, params.alpha_prime
    x_new = a * state.visible + (1.0 - a) * (f @ params.w1.T)
    h_new = ap * state.hidden + (1.0 - ap) * (x_new @ params.w2)
    return MCHNState(x_new, h_new)


def step_ff(state: MCHNState, params: MCHNParams, rho: float | None = None,
            rho_prime: float | None = None) -> MCHNState:
    """Forward step for both states, each from the old values.

    ``rho = dt/tau_v`` and ``rho_prime = dt/tau_h`` default to the ratios
    implied by ``params``.
    """
    _check(state, params)
    rho = ratio_from_alpha(params.alpha) if rho is None else rho
    if rho_prime is None:
        rho_prime = ratio_from_alpha_prime(params.alpha_prime)
        if math.isinf(rho_prime):
            raise PreconditionError("alpha_prime = 0 has no finite forward-forward step")
    f, g = activations(state)
    x_new = (1.0 - rho) * state.visible + rho * (f @ params.w1.T)
    h_new = (1.0 - rho_prime) * state.hidden + rho_prime * (g @ params.w2)
    return MCHNState(x_new, h_new)


def memory_weights(x_tokens, layer: LayerParams) -> tuple[np.ndarray, np.ndarray]:
    """Hopfield weights equivalent to a single-head attention layer on ``x_tokens``.

    ``w1^T`` holds the value rows (with output projection and bias folded in)
    and ``w2^T = K W_Q^T / sqrt(d_k)``, so ``x w2`` are the scaled scores of
    query ``x`` against every token.
    """
    if layer.n_heads != 1:
        raise PreconditionError("the Hopfield mapping is defined for one head")
    head = layer.heads[0]
    if np.any(head.b_q != 0):
        raise PreconditionError("query bias makes the hidden map affine; set b_q = 0")
    x = np.asarray(x_tokens, dtype=np.float64)
    keys = x @ head.w_k + head.b_k
    values = x @ head.w_vo + np.asarray(layer.b_o)
    w1 = values.T
    w2 = (keys @ head.w_q.T).T / math.sqrt(head.d_k)
    return w1, w2


def attention_equivalence_oracle(x_tokens, layer: LayerParams, alpha: float = 0.0,
                                 alpha_prime: float = 0.0) -> float:
    """Max |difference| between per-token Hopfield steps and the attention layer.

    Each token starts in the adiabatic state ``h = x w2`` and takes one
    forward-backward step; the result is compared with
    ``alpha x + (1 - alpha) Attn(X)``.
    """
    if alpha_prime != 0.0:
        raise PreconditionError("the attention correspondence holds at alpha_prime = 0")
    x = np.asarray(x_tokens, dtype=np.float64)
    w1, w2 = memory_weights(x, layer)
    params = MCHNParams(w1, w2, alpha, alpha_prime)
    rows = [step_fb(MCHNState(tok, tok @ w2), params).visible for tok in x]
    hop = np.stack(rows)
    attn = baseline_sa_layer(x, layer.replace(causal=False)).value
    ref = alpha * x + (1.0 - alpha) * attn
    return float(np.max(np.abs(hop - ref)))
