"""Rank-collapse diagnostics and residual-norm bounds for attention-only stacks.

Norms are the composite ``||A||_{1,inf} = sqrt(||A||_1 ||A||_inf)`` unless
stated otherwise.  Bounds are evaluated in log space because their exponents
grow like ``3**L``.

Two coefficient conventions exist for the bounds.  ``variant="main"`` uses
``r = 8H / sqrt(d_k)`` times ``(1 - alpha') C1`` and ``alpha' C2``;
``variant="appendix"`` uses ``4H (1 - alpha') C1 / sqrt(d_k)`` and
``4H alpha' C2 / sqrt(d_k)``, the coefficients of the per-layer lemma.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Literal

import numpy as np

from hopattn.attention import LayerParams, LayerTrace
from hopattn.errors import ContractError, DegenerateInputError, ShapeError
from hopattn.numcore import operator_norm, residual

Variant = Literal["main", "appendix"]

ASSUMPTION_SPREAD = 1.256
COSINE_BINS = 200


def residual_ratio(x) -> float:
    """``||Res(x)||_{1,inf} / ||x||_{1,inf}`` for a T x d feature map."""
    x = np.asarray(x, dtype=np.float64)
    denom = operator_norm(x, "one_inf")
    if denom == 0.0:
        raise DegenerateInputError("residual ratio of an all-zero feature map is undefined")
    r, _ = residual(x)
    return operator_norm(r, "one_inf") / denom


def residual_norm(x) -> float:
    r, _ = residual(x)
    return operator_norm(r, "one_inf")


# constants -----------------------------------------------------------------

@dataclass
class BoundConstants:
    n_heads: int
    d_k: int
    depth: int
    alpha_prime: float
    c1: float
    c2: float

    def __post_init__(self):
        if min(self.c1, self.c2, self.alpha_prime) < 0 or self.depth < 0:
            raise ValueError("bound constants must be non-negative")

    @property
    def r(self) -> float:
        return 8.0 * self.n_heads / math.sqrt(self.d_k)

    def coefficients(self, variant: Variant = "appendix") -> tuple[float, float]:
        """(cubic-branch factor, linear-branch factor)."""
        ap = self.alpha_prime
        if variant == "appendix":
            k = 4.0 * self.n_heads / math.sqrt(self.d_k)
        elif variant == "main":
            k = self.r
        else:
            raise ValueError(f"unknown variant {variant!r}")
        return k * (1.0 - ap) * self.c1, k * ap * self.c2


def layer_constants(params: LayerParams, h_prev) -> tuple[float, float]:
    """``(C1, C2)`` of one layer.

    ``C2`` uses the unscaled accumulated scores ``sqrt(d_k) * H_prev``, which
    is the quantity whose 1-norm the per-layer lemma multiplies by
    ``4 alpha' / sqrt(d_k)``.
    """
    h_prev = np.asarray(h_prev, dtype=np.float64)
    if h_prev.ndim != 3 or h_prev.shape[0] != params.n_heads:
        raise ShapeError(f"expected per-head hidden state (H, T, T), got {h_prev.shape}")
    c1 = c2 = 0.0
    scale = math.sqrt(params.d_k)
    for head, hp in zip(params.heads, h_prev):
        vo = operator_norm(head.w_vo, "one_inf")
        c1 = max(c1, vo * operator_norm(head.w_qk, "one"))
        c2 = max(c2, vo * operator_norm(scale * hp, "one"))
    return c1, c2


def constants_from_trace(layers: list[LayerParams], trace: list[LayerTrace],
                         depth: int | None = None) -> BoundConstants:
    """Network constants (max over the first ``depth`` layers) from a forward trace."""
    depth = len(layers) if depth is None else depth
    c1 = c2 = 0.0
    for params, t in zip(layers[:depth], trace[:depth]):
        a, b = layer_constants(params, t.h_prev)
        c1, c2 = max(c1, a), max(c2, b)
    p = layers[0]
    return BoundConstants(p.n_heads, p.d_k, depth, p.alpha_prime, c1, c2)


# log-space helpers -----------------------------------------------------------

def _log_pow(base: float, exponent: float) -> float:
    if exponent == 0:
        return 0.0
    if base == 0.0:
        return -math.inf
    return exponent * math.log(base)


def _exp(log_value: float) -> float:
    if log_value == -math.inf:
        return 0.0
    if log_value > 709.0:
        return math.inf
    return math.exp(log_value)


# bounds ---------------------------------------------------------------------

def log_theorem1_bound(res_norm_in: float, constants: BoundConstants, c: float | None = None,
                       variant: Variant = "main") -> float:
    if res_norm_in < 0:
        raise ValueError("residual norm must be non-negative")
    c = constants.c1 if c is None else c
    if variant == "main":
        rc = constants.r * c
    else:
        rc = 4.0 * constants.n_heads / math.sqrt(constants.d_k) * c
    n = 3.0 ** constants.depth
    return _log_pow(rc, (n - 1.0) / 2.0) + _log_pow(res_norm_in, n)


def theorem1_bound(res_norm_in: float, constants: BoundConstants, c: float | None = None,
                   variant: Variant = "main") -> float:
    """Double-exponential bound ``(rC)^((3^L - 1)/2) * res^(3^L)``.

    ``C`` defaults to ``constants.c1``.
    """
    return _exp(log_theorem1_bound(res_norm_in, constants, c, variant))


def single_layer_bound(res_norm_in: float, c1: float, c2: float, n_heads: int = 1,
                       d_k: int = 1, alpha_prime: float = 0.0) -> float:
    """Per-layer residual bound: cubic branch plus linear branch."""
    if min(res_norm_in, c1, c2) < 0:
        raise ValueError("inputs must be non-negative")
    k = 4.0 * n_heads / math.sqrt(d_k)
    return k * (1.0 - alpha_prime) * c1 * res_norm_in**3 + k * alpha_prime * c2 * res_norm_in


def network_bound_log_terms(res_norm_in: float, constants: BoundConstants,
                            variant: Variant = "appendix") -> list[float]:
    """Log of every leaf term ``m = 0..L`` of the network bound."""
    if res_norm_in < 0:
        raise ValueError("residual norm must be non-negative")
    a, b = constants.coefficients(variant)
    L = constants.depth
    terms = []
    for m in range(L + 1):
        n = 3.0**m
        terms.append(
            _log_pow(a, (n - 1.0) / 2.0) + _log_pow(b, n * (L - m)) + _log_pow(res_norm_in, n)
        )
    return terms


def network_bound(res_norm_in: float, constants: BoundConstants,
                  variant: Variant = "appendix") -> tuple[float, int]:
    """``(max_m term_m, argmax m)`` of the multi-layer bound."""
    terms = network_bound_log_terms(res_norm_in, constants, variant)
    m = int(np.argmax(terms))
    return _exp(terms[m]), m


# assumption -------------------------------------------------------------------

def row_spread(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float(np.max(a.max(axis=-1) - a.min(axis=-1)))


def assumption_check(scores, threshold: float = ASSUMPTION_SPREAD) -> tuple[bool, float]:
    """Largest within-row spread ``max_i max_jk |E_ij - E_ik|`` and whether it is <= 1.256."""
    spread = row_spread(scores)
    return spread <= threshold, spread


def centered_scores(x, params: LayerParams, h_prev) -> np.ndarray:
    """Per-head score part that survives row-constant and column-broadcast shifts.

    ``(1 - alpha') R W_QK R^T / sqrt(d_k) + alpha' H_prev`` with ``R`` the
    residual of ``x``; the remaining terms of the accumulated scores are
    ``1 r^T`` (identical for every query) and row constants.
    """
    r, _ = residual(np.asarray(x, dtype=np.float64))
    beta = 1.0 - params.alpha_prime
    out = []
    for head, hp in zip(params.heads, np.asarray(h_prev, dtype=np.float64)):
        out.append(beta * (r @ head.w_qk @ r.T) / math.sqrt(head.d_k) + params.alpha_prime * hp)
    return np.stack(out)


# token statistics -------------------------------------------------------------

@dataclass
class CosineStats:
    similarities: np.ndarray
    bin_centers: np.ndarray
    density: np.ndarray
    mode: float
    mean: float
    n_zero_rows: int

    def fraction_above(self, theta: float) -> float:
        return float(np.mean(self.similarities > theta))


def cosine_similarity_stats(x, bins: int = COSINE_BINS) -> CosineStats:
    """All pairwise token cosine similarities with a histogram over [-1, 1]."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ShapeError("need a T x d feature map with T >= 2")
    norms = np.linalg.norm(x, axis=1)
    keep = norms > 0
    if keep.sum() < 2:
        raise DegenerateInputError("fewer than two non-zero token rows")
    u = x[keep] / norms[keep, None]
    g = np.clip(u @ u.T, -1.0, 1.0)
    iu = np.triu_indices(u.shape[0], k=1)
    sims = g[iu]
    edges = np.linspace(-1.0, 1.0, bins + 1)
    density, _ = np.histogram(sims, bins=edges, density=True)
    centers = 0.5 * (edges[:-1] + edges[1:])
    return CosineStats(
        similarities=sims, bin_centers=centers, density=density,
        mode=float(centers[int(np.argmax(density))]), mean=float(sims.mean()),
        n_zero_rows=int((~keep).sum()),
    )


@dataclass
class EntropyStats:
    row_entropy: np.ndarray
    head_mean: np.ndarray
    bin_centers: np.ndarray
    density: np.ndarray


def attention_entropy_stats(p, bins: int = 50, tol: float = 1e-8) -> EntropyStats:
    """Shannon entropy of every attention row (``0 ln 0 = 0``).

    ``p`` is (..., T, T) row-stochastic; ``head_mean`` averages over rows.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim < 2:
        raise ShapeError("attention weights need at least two axes")
    if np.any(p < -tol) or np.max(np.abs(p.sum(axis=-1) - 1.0)) > tol:
        raise ContractError("attention rows must be non-negative and sum to 1")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    ent = -terms.sum(axis=-1)
    top = math.log(p.shape[-1]) if p.shape[-1] > 1 else 1.0
    # rounding can put a uniform row one ulp above ln T; keep it in the last bin
    density, edges = np.histogram(np.clip(ent, 0.0, top), bins=bins, range=(0.0, top), density=True)
    return EntropyStats(ent, ent.mean(axis=-1), 0.5 * (edges[:-1] + edges[1:]), density)


# reports ----------------------------------------------------------------------

@dataclass
class LayerCollapse:
    layer: int
    residual_norm: float
    output_norm: float
    ratio: float
    theorem1: float
    single_layer: float
    network: float
    network_argmax: int
    assumption_ok: bool
    max_spread: float


@dataclass
class CollapseReport:
    seed: int
    model_kind: str
    alpha: float
    alpha_prime: float
    input_residual_norm: float
    layers: list[LayerCollapse] = field(default_factory=list)
    c_default: str = "c1"
    config: dict = field(default_factory=dict)

    @property
    def depth(self) -> int:
        return len(self.layers)

    def ratios(self) -> np.ndarray:
        return np.array([l.ratio for l in self.layers])

    def to_dict(self) -> dict:
        return asdict(self)

    def metric_rows(self) -> list[tuple[int, str, float]]:
        """``(layer, metric_name, value)`` triples for the metric sinks."""
        rows = []
        for l in self.layers:
            for name in ("residual_norm", "output_norm", "ratio", "theorem1", "single_layer",
                         "network", "network_argmax", "max_spread"):
                rows.append((l.layer, name, float(getattr(l, name))))
            rows.append((l.layer, "assumption_ok", float(l.assumption_ok)))
        return rows


def collapse_report(x0, layers: list[LayerParams], trace: list[LayerTrace], seed: int,
                    model_kind: str, alpha: float = 0.0, config: dict | None = None) -> CollapseReport:
    """Per-layer residual norms, ratios and bounds for one attention-only forward pass."""
    x0 = np.asarray(x0, dtype=np.float64)
    res0 = residual_norm(x0)
    report = CollapseReport(seed, model_kind, alpha, layers[0].alpha_prime, res0,
                            config=dict(config or {}))
    for i, (params, t) in enumerate(zip(layers, trace), start=1):
        consts = constants_from_trace(layers, trace, depth=i)
        c1, c2 = layer_constants(params, t.h_prev)
        res_in = residual_norm(t.x_in)
        ok, spread = assumption_check(centered_scores(t.x_in, params, t.h_prev))
        net, arg = network_bound(res0, consts)
        out_norm = operator_norm(t.x_out, "one_inf")
        res_out = residual_norm(t.x_out)
        report.layers.append(LayerCollapse(
            layer=i, residual_norm=res_out, output_norm=out_norm,
            ratio=res_out / out_norm if out_norm > 0 else 0.0,
            theorem1=theorem1_bound(res0, consts),
            single_layer=single_layer_bound(res_in, c1, c2, params.n_heads, params.d_k,
                                            params.alpha_prime),
            network=net, network_argmax=arg, assumption_ok=ok, max_spread=spread,
        ))
    return report
