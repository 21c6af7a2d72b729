"""Multi-head self-attention with a cross-layer hidden state.

A Hopfield attention layer keeps, per head, a T x T matrix of accumulated
query-key scores.  Each layer mixes its own scaled scores into the incoming
matrix as an exponential moving average and takes the attention weights from
the softmax of the result::

    S_h      = (X W_Q,h + 1 b_Q,h^T)(X W_K,h + 1 b_K,h^T)^T / sqrt(d_k)
    H_h      = alpha' * H_prev,h + (1 - alpha') * S_h
    out      = sum_h softmax(H_h) X W_V,h W_O,h + 1 b_O^T
    X_next   = alpha * X + (1 - alpha) * out        (internal skip)

With ``alpha = alpha' = 0`` this is ordinary multi-head attention.

All functions accept numpy arrays or :class:`~hopattn.autograd.Tensor` and
return tensors; leading batch axes are allowed on the feature map
(``(..., T, d)``), and hidden states carry a head axis (``(..., H, T, T)``).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Any

import numpy as np

from hopattn import autograd as ag
from hopattn.autograd import Tensor, as_tensor
from hopattn.errors import ConfigError, ShapeError


def _val(a) -> np.ndarray:
    return a.value if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)


@dataclass
class HeadParams:
    """One head: ``w_q, w_k, w_v`` are d x d_k, ``w_o`` is d_k x d."""

    w_q: Any
    w_k: Any
    b_q: Any
    b_k: Any
    w_v: Any
    w_o: Any

    @property
    def d_k(self) -> int:
        return _val(self.w_q).shape[1]

    @property
    def w_vo(self) -> np.ndarray:
        return _val(self.w_v) @ _val(self.w_o)

    @property
    def w_qk(self) -> np.ndarray:
        return _val(self.w_q) @ _val(self.w_k).T

    @property
    def b_qk(self) -> np.ndarray:
        return _val(self.w_k) @ _val(self.b_q)


@dataclass
class LayerParams:
    """Weights of one attention layer, stacked over heads.

    ``w_q, w_k, w_v``: (H, d, d_k); ``b_q, b_k``: (H, d_k); ``w_o``: (H, d_k, d);
    ``b_o``: (d,).
    """

    w_q: Any
    w_k: Any
    w_v: Any
    b_q: Any
    b_k: Any
    w_o: Any
    b_o: Any
    alpha: float = 0.0
    alpha_prime: float = 0.0
    causal: bool = False
    use_internal_skip: bool = True

    def __post_init__(self):
        for name in ("alpha", "alpha_prime"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        h, d, dk = _val(self.w_q).shape
        expect = {
            "w_k": (h, d, dk),
            "w_v": (h, d, dk),
            "b_q": (h, dk),
            "b_k": (h, dk),
            "w_o": (h, dk, d),
            "b_o": (d,),
        }
        for name, shape in expect.items():
            got = _val(getattr(self, name)).shape
            if got != shape:
                raise ShapeError(f"{name} has shape {got}, expected {shape}")

    @property
    def n_heads(self) -> int:
        return _val(self.w_q).shape[0]

    @property
    def d_model(self) -> int:
        return _val(self.w_q).shape[1]

    @property
    def d_k(self) -> int:
        return _val(self.w_q).shape[2]

    @property
    def heads(self) -> list[HeadParams]:
        return [
            HeadParams(
                _val(self.w_q)[i], _val(self.w_k)[i], _val(self.b_q)[i],
                _val(self.b_k)[i], _val(self.w_v)[i], _val(self.w_o)[i],
            )
            for i in range(self.n_heads)
        ]

    @classmethod
    def from_heads(cls, heads: list[HeadParams], b_o, **flags) -> LayerParams:
        if not heads:
            raise ConfigError("a layer needs at least one head")
        if len({h.d_k for h in heads}) != 1:
            raise ConfigError("all heads must share d_k")
        stack = lambda name: np.stack([_val(getattr(h, name)) for h in heads])  # noqa: E731
        return cls(
            stack("w_q"), stack("w_k"), stack("w_v"), stack("b_q"), stack("b_k"),
            stack("w_o"), _val(b_o), **flags,
        )

    def replace(self, **changes) -> LayerParams:
        return dataclasses.replace(self, **changes)

    def numpy(self) -> LayerParams:
        """Copy with every weight as a plain array."""
        arrays = {f.name: _val(getattr(self, f.name)).copy() for f in dataclasses.fields(self)
                  if f.name.startswith(("w_", "b_"))}
        return self.replace(**arrays)


def init_layer(rng: np.random.Generator, d_model: int, n_heads: int, d_k: int,
               std: float = 0.02, **flags) -> LayerParams:
    """Gaussian weights with standard deviation ``std``, zero biases."""
    g = lambda *shape: rng.normal(0.0, std, size=shape)  # noqa: E731
    return LayerParams(
        w_q=g(n_heads, d_model, d_k), w_k=g(n_heads, d_model, d_k),
        w_v=g(n_heads, d_model, d_k),
        b_q=np.zeros((n_heads, d_k)), b_k=np.zeros((n_heads, d_k)),
        w_o=g(n_heads, d_k, d_model), b_o=np.zeros(d_model), **flags,
    )


def zero_hidden(n_heads: int, n_tokens: int, batch_shape: tuple = ()) -> np.ndarray:
    """Hidden state entering the first layer."""
    return np.zeros(tuple(batch_shape) + (n_heads, n_tokens, n_tokens))


def head_scores(x, head: HeadParams) -> np.ndarray:
    """Scaled scores ``(X W_Q + 1 b_Q^T)(X W_K + 1 b_K^T)^T / sqrt(d_k)`` of one head."""
    x = _val(x)
    if x.ndim != 2 or x.shape[1] != _val(head.w_q).shape[0]:
        raise ShapeError(f"feature map {x.shape} does not match head input dim")
    q = x @ _val(head.w_q) + _val(head.b_q)
    k = x @ _val(head.w_k) + _val(head.b_k)
    return q @ k.T / math.sqrt(head.d_k)


def _check_features(x: Tensor, params: LayerParams):
    if x.ndim < 2 or x.shape[-1] != params.d_model:
        raise ShapeError(f"feature map {x.shape} does not match d_model={params.d_model}")


def _split_heads(x: Tensor) -> Tensor:
    return x.reshape(x.shape[:-2] + (1,) + x.shape[-2:])


def layer_scores(x, params: LayerParams) -> Tensor:
    """Scaled scores of every head, shape (..., H, T, T)."""
    x = as_tensor(x)
    _check_features(x, params)
    xh = _split_heads(x)
    q = xh @ params.w_q + ag.reshape(as_tensor(params.b_q), (params.n_heads, 1, params.d_k))
    k = xh @ params.w_k + ag.reshape(as_tensor(params.b_k), (params.n_heads, 1, params.d_k))
    return (q @ k.mT) * (1.0 / math.sqrt(params.d_k))


def hidden_update(prev, scores, alpha_prime: float) -> Tensor:
    """``alpha' * prev + (1 - alpha') * scores`` for every head."""
    prev, scores = as_tensor(prev), as_tensor(scores)
    if prev.shape != scores.shape:
        raise ShapeError(f"hidden state {prev.shape} does not match scores {scores.shape}")
    return ag.ema(prev, scores, alpha_prime)


def _mix_values(x: Tensor, p: Tensor, params: LayerParams) -> Tensor:
    v = _split_heads(x) @ params.w_v
    return ((p @ v) @ params.w_o).sum(axis=-3) + params.b_o


def mha_layer(x, h_prev, params: LayerParams, return_attn: bool = False):
    """One Hopfield attention layer; returns ``(x_next, h_next[, attn])``."""
    x = as_tensor(x)
    _check_features(x, params)
    n_tokens = x.shape[-2]
    if h_prev is None:
        h_prev = zero_hidden(params.n_heads, n_tokens, x.shape[:-2])
    h_prev = as_tensor(h_prev)
    expect = x.shape[:-2] + (params.n_heads, n_tokens, n_tokens)
    if h_prev.shape != expect:
        raise ShapeError(f"hidden state {h_prev.shape}, expected {expect}")
    h_next = hidden_update(h_prev, layer_scores(x, params), params.alpha_prime)
    p = ag.softmax(h_next, causal=params.causal)
    out = _mix_values(x, p, params)
    if params.use_internal_skip:
        out = x * params.alpha + out * (1.0 - params.alpha)
    return (out, h_next, p) if return_attn else (out, h_next)


def baseline_sa_layer(x, params: LayerParams, return_attn: bool = False):
    """Standard multi-head scaled dot-product attention (no hidden state, no skip)."""
    x = as_tensor(x)
    p = ag.softmax(layer_scores(x, params), causal=params.causal)
    out = _mix_values(x, p, params)
    return (out, p) if return_attn else out


@dataclass
class LayerTrace:
    """Intermediates of one layer of an attention-only network."""

    x_in: np.ndarray
    h_prev: np.ndarray
    h_next: np.ndarray
    attn: np.ndarray
    x_out: np.ndarray


def check_stack(layers: list[LayerParams]) -> None:
    if not layers:
        raise ConfigError("network needs at least one layer")
    dims = {(l.d_model, l.n_heads, l.d_k) for l in layers}
    if len(dims) != 1:
        raise ConfigError(f"layers disagree on (d, n_heads, d_k): {sorted(dims)}")


def attn_only_net(x, layers: list[LayerParams], h0=None):
    """Stack of Hopfield attention layers with no skip connections.

    The internal skip is disabled (``alpha`` ignored); the hidden state is
    threaded from layer to layer.  Returns ``(x_out, trace)`` where ``trace``
    holds one :class:`LayerTrace` per layer.
    """
    check_stack(layers)
    x = as_tensor(x)
    h = h0
    trace = []
    for params in layers:
        params = params.replace(alpha=0.0, use_internal_skip=False)
        x_next, h_next, p = mha_layer(x, h, params, return_attn=True)
        h_prev_val = (
            zero_hidden(params.n_heads, x.shape[-2], x.shape[:-2]) if h is None else _val(h)
        )
        trace.append(LayerTrace(x.value, h_prev_val, h_next.value, p.value, x_next.value))
        x, h = x_next, h_next
    return x, trace


@dataclass
class BlockParams:
    """Pre-norm transformer block: attention sub-block then GELU MLP."""

    attn: LayerParams
    ln1_g: Any
    ln1_b: Any
    ln2_g: Any
    ln2_b: Any
    mlp_w1: Any
    mlp_b1: Any
    mlp_w2: Any
    mlp_b2: Any


def init_block(rng: np.random.Generator, d_model: int, n_heads: int, d_k: int,
               mlp_width: int, std: float = 0.02, **flags) -> BlockParams:
    return BlockParams(
        attn=init_layer(rng, d_model, n_heads, d_k, std, **flags),
        ln1_g=np.ones(d_model), ln1_b=np.zeros(d_model),
        ln2_g=np.ones(d_model), ln2_b=np.zeros(d_model),
        mlp_w1=rng.normal(0.0, std, (d_model, mlp_width)), mlp_b1=np.zeros(mlp_width),
        mlp_w2=rng.normal(0.0, std, (mlp_width, d_model)), mlp_b2=np.zeros(d_model),
    )


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    return ag.layer_norm(x, eps) * gain + bias


def transformer_block(x, h_prev, block: BlockParams, kind: str = "mha",
                      return_attn: bool = False):
    """``x1 = x + Attn(LN(x))``, ``x2 = x1 + MLP(LN(x1))``.

    ``kind="mha"`` uses :func:`mha_layer` (its alpha-skip acts on the
    normalised input) and threads the hidden state; ``kind="baseline"`` uses
    :func:`baseline_sa_layer` and passes ``h_prev`` through untouched.
    """
    x = as_tensor(x)
    xn = layer_norm(x, block.ln1_g, block.ln1_b)
    if kind == "mha":
        a, h_next, p = mha_layer(xn, h_prev, block.attn, return_attn=True)
    elif kind == "baseline":
        a, p = baseline_sa_layer(xn, block.attn, return_attn=True)
        h_next = h_prev
    else:
        raise ConfigError(f"unknown attention kind {kind!r}")
    x1 = x + a
    hidden = ag.gelu(layer_norm(x1, block.ln2_g, block.ln2_b) @ block.mlp_w1 + block.mlp_b1)
    x2 = x1 + (hidden @ block.mlp_w2 + block.mlp_b2)
    return (x2, h_next, p) if return_attn else (x2, h_next)
