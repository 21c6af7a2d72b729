"""Experiment templates: collapse sweep, skip-free depth sweep, alpha grid, training,
gradient checks and checkpoint diagnostics.

Every template is split into independent cells.  A cell writes its metrics
to its own directory; :func:`run_experiment` runs cells (optionally in worker
processes) and merges their files in a fixed order, so the merged CSV is
identical whatever the worker count.
"""

from __future__ import annotations

import dataclasses
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from hopattn import autograd as ag
from hopattn.attention import LayerParams, LayerTrace, attn_only_net, init_layer, mha_layer
from hopattn.collapse import (
    attention_entropy_stats, collapse_report, cosine_similarity_stats, residual_ratio,
)
from hopattn.errors import ConfigError
from hopattn.expt.config import ExperimentConfig
from hopattn.expt.data import make_char_corpus, make_synthetic_vision
from hopattn.expt.sinks import MetricsSink, merge_metrics, write_histogram
from hopattn.expt.train import evaluate, train
from hopattn.models import ModelConfig, ToyModel, build_model

COS_THRESHOLD = 0.99


# datasets and models ------------------------------------------------------------

def make_dataset(cfg: ExperimentConfig):
    d, m = cfg.data, cfg.model
    if d.kind == "vision":
        return make_synthetic_vision(m.n_classes, d.n_samples, d.test_fraction, m.image_size,
                                     m.patch, d.noise, d.seed)
    if not d.path:
        raise ConfigError("data.path is required for the chars dataset")
    return make_char_corpus(d.path, m.context, d.val_fraction)


def model_config(cfg: ExperimentConfig, **changes) -> ModelConfig:
    arch = "encoder" if cfg.data.kind == "vision" else "decoder"
    return dataclasses.replace(cfg.model, arch=arch, **changes)


# collapse sweep ----------------------------------------------------------------------

def _skip_stack(x, layers: list[LayerParams]):
    """Hopfield attention layers applied with their internal alpha-skip."""
    trace, h = [], None
    for params in layers:
        x_next, h_next, p = mha_layer(x, h, params, return_attn=True)
        h_prev = np.zeros(h_next.shape) if h is None else h.value
        trace.append(LayerTrace(np.asarray(getattr(x, "value", x)), h_prev, h_next.value,
                                p.value, x_next.value))
        x, h = x_next, h_next
    return x, trace


def collapse_instance(cfg: ExperimentConfig, seed: int):
    """Input and per-layer weights shared by every attention kind for ``seed``."""
    m, s = cfg.model, cfg.sweep
    rng = np.random.default_rng(seed)
    x = rng.normal(0.0, s.input_scale, (s.n_tokens, m.d_model))
    depth = max(s.depths)
    layers = [init_layer(rng, m.d_model, m.n_heads, m.d_k, m.init_std) for _ in range(depth)]
    return x, layers


def collapse_variants(cfg: ExperimentConfig) -> list[tuple[str, float, float]]:
    """(label, alpha, alpha_prime) of every stack in the sweep."""
    out = []
    for kind in cfg.sweep.kinds:
        out.append((kind, 0.0, 0.0 if kind == "baseline" else cfg.model.alpha_prime))
    if cfg.sweep.skip_alpha is not None:
        out.append(("mha_skip", cfg.sweep.skip_alpha, cfg.model.alpha_prime))
    return out


def _collapse_cell(cfg: ExperimentConfig, seed: int, sink: MetricsSink | None) -> dict:
    x, layers = collapse_instance(cfg, seed)
    summary = {}
    for label, alpha, ap in collapse_variants(cfg):
        if label == "mha_skip":
            stack = [l.replace(alpha=alpha, alpha_prime=ap) for l in layers]
            _, trace = _skip_stack(x, stack)
        else:
            stack = [l.replace(alpha_prime=ap) for l in layers]
            _, trace = attn_only_net(x, stack)
        report = collapse_report(x, stack, trace, seed, label, alpha,
                                 config={"input_scale": cfg.sweep.input_scale})
        rows = list(report.metric_rows())
        fractions = []
        for i, t in enumerate(trace, start=1):
            cs = cosine_similarity_stats(t.x_out)
            ent = attention_entropy_stats(t.attn)
            fractions.append(cs.fraction_above(COS_THRESHOLD))
            rows += [(i, "cos_fraction_above_0.99", fractions[-1]), (i, "cos_mean", cs.mean),
                     (i, "cos_mode", cs.mode), (i, "entropy_mean", float(ent.row_entropy.mean()))]
        if sink is not None:
            for layer, name, value in rows:
                sink.write(seed, label, alpha, ap, layer, layer, name, value)
        summary[label] = {"ratio": report.ratios().tolist(), "cos_fraction": fractions}
    return summary


@dataclass
class CollapseSummary:
    depths: list[int]
    # label -> (n_seeds, max_depth) arrays
    ratios: dict[str, np.ndarray] = field(default_factory=dict)
    cos_fraction: dict[str, np.ndarray] = field(default_factory=dict)

    def mean_ratio(self, label: str, depth: int) -> float:
        return float(self.ratios[label][:, depth - 1].mean())

    def median_ratio(self, label: str, depth: int) -> float:
        return float(np.median(self.ratios[label][:, depth - 1]))

    def mean_cos_fraction(self, label: str, depth: int) -> float:
        return float(self.cos_fraction[label][:, depth - 1].mean())


def summarize_collapse(cells: list[dict], depths: list[int]) -> CollapseSummary:
    out = CollapseSummary(sorted(depths))
    for label in cells[0]:
        out.ratios[label] = np.array([c[label]["ratio"] for c in cells])
        out.cos_fraction[label] = np.array([c[label]["cos_fraction"] for c in cells])
    return out


# trained experiments ------------------------------------------------------------------

def _train_cell(cfg: ExperimentConfig, mcfg: ModelConfig, seed: int, sink: MetricsSink | None,
                label: str, depth: int, checkpoint: str | None = None) -> dict:
    data = make_dataset(cfg)
    model = build_model(mcfg, seed)
    alpha = mcfg.alpha if mcfg.attention == "mha" else 0.0
    ap = mcfg.alpha_prime if mcfg.attention == "mha" else 0.0

    def emit(step, name, value):
        if sink is not None:
            sink.write(seed, label, alpha, ap, depth, step, name, value)

    result = train(model, data, cfg.optim, seed, on_metric=emit, checkpoint_path=checkpoint)
    out = dict(result.final)
    if hasattr(data, "chance"):
        out["chance"] = data.chance("test")
        emit(cfg.optim.steps, "chance", out["chance"])
    out["seconds"] = result.seconds
    out["checkpoint"] = result.checkpoint
    return out


def _depth_cell(cfg, cell, sink):
    mcfg = model_config(cfg, block="attention_only", attention=cell["kind"], n_layers=cell["depth"])
    return _train_cell(cfg, mcfg, cell["seed"], sink, cell["kind"], cell["depth"])


def _grid_cell(cfg, cell, sink):
    mcfg = model_config(cfg, attention="mha", alpha=cell["alpha"], alpha_prime=cell["alpha_prime"])
    return _train_cell(cfg, mcfg, cell["seed"], sink, "mha", mcfg.n_layers)


def _plain_train_cell(cfg, cell, sink, cell_dir):
    mcfg = model_config(cfg)
    ckpt = os.path.join(cell_dir, "checkpoint.npz") if cell_dir else None
    return _train_cell(cfg, mcfg, cell["seed"], sink, mcfg.attention, mcfg.n_layers, ckpt)


# gradient checks ---------------------------------------------------------------------

_ATTN = ("w_q", "w_k", "w_v", "b_q", "b_k", "w_o", "b_o")


def grad_check_stack(seed: int, alpha_prime: float, n_tokens: int = 3, d_model: int = 4,
                     n_heads: int = 2, d_k: int = 2, std: float = 0.7, alpha: float = 0.5,
                     depth: int = 2):
    """A random ``depth``-layer Hopfield attention stack and a linear read-out loss.

    Weights and biases are drawn at ``std``.  The key bias is held fixed at
    zero: it shifts every score row by a constant, so its gradient is
    identically zero and finite differences of it only measure rounding.
    Returns ``(loss_fn, params)`` for :func:`hopattn.autograd.grad_check`.
    """
    rng = np.random.default_rng(seed)
    params = ag.ParamSet()
    for l in range(depth):
        layer = init_layer(rng, d_model, n_heads, d_k, std)
        for name in _ATTN:
            if name == "b_k":
                continue
            value = getattr(layer, name)
            if name.startswith("b_"):
                value = rng.normal(0.0, std, value.shape)
            params.add(f"{l}.{name}", value)
    b_k = np.zeros((n_heads, d_k))
    x = rng.normal(size=(n_tokens, d_model))
    readout = rng.normal(size=(n_tokens, d_model))

    def loss(p):
        z, h = x, None
        for l in range(depth):
            layer = LayerParams(*[b_k if n == "b_k" else p[f"{l}.{n}"] for n in _ATTN],
                                alpha=alpha, alpha_prime=alpha_prime)
            z, h = mha_layer(z, h, layer)
        return (z * readout).sum()

    return loss, params


def grad_check_suite(n_stacks: int = 20, alpha_primes=(0.3, 0.7), step: float = 1e-6) -> list[float]:
    """Max relative error of every stack; stack ``i`` uses ``alpha_primes[i % len]``."""
    errs = []
    for i in range(n_stacks):
        loss, params = grad_check_stack(i, alpha_primes[i % len(alpha_primes)])
        errs.append(ag.grad_check(loss, params, step))
    return errs


def _grad_cell(cfg, cell, sink):
    errs = grad_check_suite(cfg.sweep.grad_check_stacks)
    if sink is not None:
        for i, e in enumerate(errs):
            sink.write(i, "mha", 0.5, (0.3, 0.7)[i % 2], 2, 0, "max_rel_error", e)
    return {"errors": errs, "max_rel_error": max(errs)}


# cells and fan-out ---------------------------------------------------------------------

def expand_cells(cfg: ExperimentConfig) -> list[dict]:
    s = cfg.sweep
    if cfg.kind == "collapse_sweep":
        return [{"name": f"seed{seed}", "seed": seed} for seed in cfg.seeds]
    if cfg.kind == "depth_sweep":
        return [{"name": f"{k}_L{d}_seed{seed}", "kind": k, "depth": d, "seed": seed}
                for k in s.kinds for d in sorted(s.depths) for seed in cfg.seeds]
    if cfg.kind == "alpha_grid":
        return [{"name": f"a{a:g}_ap{ap:g}_seed{seed}", "alpha": a, "alpha_prime": ap, "seed": seed}
                for a, ap in s.grid for seed in cfg.seeds]
    if cfg.kind == "train":
        return [{"name": f"seed{seed}", "seed": seed} for seed in cfg.seeds]
    return [{"name": "grad_check", "seed": cfg.seeds[0]}]


def run_cell(cfg: ExperimentConfig, cell: dict, cell_dir: str | None = None) -> dict:
    sink = MetricsSink(cell_dir, cfg.experiment_id) if cell_dir else None
    try:
        if cfg.kind == "collapse_sweep":
            out = _collapse_cell(cfg, cell["seed"], sink)
        elif cfg.kind == "depth_sweep":
            out = _depth_cell(cfg, cell, sink)
        elif cfg.kind == "alpha_grid":
            out = _grid_cell(cfg, cell, sink)
        elif cfg.kind == "train":
            out = _plain_train_cell(cfg, cell, sink, cell_dir)
        else:
            out = _grad_cell(cfg, cell, sink)
    finally:
        if sink is not None:
            sink.close()
    return out


def _run_cell_star(args):
    return run_cell(*args)


def run_experiment(cfg: ExperimentConfig, out_dir: str | None = None,
                   workers: int | None = None) -> list[tuple[dict, dict]]:
    """Run every cell of ``cfg``; returns ``(cell, result)`` pairs in cell order."""
    cells = expand_cells(cfg)
    workers = cfg.workers if workers is None else workers
    dirs = [os.path.join(out_dir, "cells", c["name"]) if out_dir else None for c in cells]
    jobs = [(cfg, c, d) for c, d in zip(cells, dirs)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell_star, jobs))
    else:
        results = [run_cell(*j) for j in jobs]
    if out_dir:
        merge_metrics(dirs, out_dir)
    return list(zip(cells, results))


# named templates ---------------------------------------------------------------------

def _as_kind(cfg: ExperimentConfig, kind: str) -> ExperimentConfig:
    return cfg if cfg.kind == kind else cfg.replace(kind=kind)


def run_collapse_sweep(cfg: ExperimentConfig, out_dir: str | None = None) -> CollapseSummary:
    """Residual ratios and bounds of attention-only stacks at initialization."""
    cfg = _as_kind(cfg, "collapse_sweep")
    pairs = run_experiment(cfg, out_dir)
    return summarize_collapse([r for _, r in pairs], cfg.sweep.depths)


def run_depth_sweep(cfg: ExperimentConfig, out_dir: str | None = None) -> dict:
    """Final test accuracy keyed by ``(kind, depth, seed)``."""
    cfg = _as_kind(cfg, "depth_sweep")
    return {(c["kind"], c["depth"], c["seed"]): r for c, r in run_experiment(cfg, out_dir)}


def run_alpha_grid(cfg: ExperimentConfig, out_dir: str | None = None) -> dict:
    """Final metrics keyed by ``(alpha, alpha_prime, seed)``."""
    cfg = _as_kind(cfg, "alpha_grid")
    return {(c["alpha"], c["alpha_prime"], c["seed"]): r for c, r in run_experiment(cfg, out_dir)}


# diagnostics ----------------------------------------------------------------------------

def layer_features(model: ToyModel, inputs):
    """Per-layer token features and attention weights of a single-example forward pass."""
    with ag.no_grad():
        feats, attns = model.trace(inputs)
    return [f.value[0] for f in feats], [p[0] for p in attns]


def diagnose(cfg: ExperimentConfig, model: ToyModel, out_dir: str, sink: MetricsSink,
             n_examples: int = 8) -> dict:
    """Cosine-similarity, entropy and residual-ratio diagnostics per layer.

    Histograms (``bin_center,density``) go to ``out_dir/histograms``; one
    file per layer and diagnostic, averaged over ``n_examples`` inputs.
    """
    c = model.config
    if cfg.data.kind == "vision":
        data = make_dataset(cfg)
        xs = data.x_test[:n_examples]
    else:
        try:
            xs = make_dataset(cfg).windows("val")[0][:n_examples]
        except ConfigError:
            xs = np.random.default_rng(model.seed).integers(0, c.vocab, (n_examples, c.context))
    alpha = c.alpha if c.attention == "mha" else 0.0
    ap = c.alpha_prime if c.attention == "mha" else 0.0
    cos_hist, ent_hist, rows = {}, {}, {}
    for ex in xs:
        feats, attns = layer_features(model, ex[None])
        for i, (f, p) in enumerate(zip(feats, attns), start=1):
            cs = cosine_similarity_stats(f)
            es = attention_entropy_stats(p)
            cos_hist.setdefault(i, []).append(cs.density)
            ent_hist.setdefault(i, []).append(es.density)
            r = rows.setdefault(i, {"residual_ratio": [], "cos_mean": [], "cos_fraction_above_0.99": [],
                                    "entropy_mean": [], "entropy_min": []})
            r["residual_ratio"].append(residual_ratio(f))
            r["cos_mean"].append(cs.mean)
            r["cos_fraction_above_0.99"].append(cs.fraction_above(COS_THRESHOLD))
            r["entropy_mean"].append(float(es.row_entropy.mean()))
            r["entropy_min"].append(float(es.row_entropy.min()))
            cos_centers, ent_centers = cs.bin_centers, es.bin_centers
    files = []
    hdir = os.path.join(out_dir, "histograms")
    for i in sorted(rows):
        files.append(write_histogram(os.path.join(hdir, f"cosine_layer{i}.csv"), cos_centers,
                                     np.mean(cos_hist[i], axis=0)))
        files.append(write_histogram(os.path.join(hdir, f"entropy_layer{i}.csv"), ent_centers,
                                     np.mean(ent_hist[i], axis=0)))
        for name, values in rows[i].items():
            sink.write(model.seed, c.attention, alpha, ap, c.n_layers, i, name, float(np.mean(values)))
    summary = {i: {k: float(np.mean(v)) for k, v in r.items()} for i, r in rows.items()}
    if cfg.data.kind == "vision" or cfg.data.path:
        split = "test" if cfg.data.kind == "vision" else "val"
        for name, value in evaluate(model, make_dataset(cfg), split, max_items=512).items():
            sink.write(model.seed, c.attention, alpha, ap, c.n_layers, 0, f"{split}_{name}", value)
    return {"layers": summary, "histograms": files, "entropy_bound": math.log(c.n_tokens)}
