"""AdamW training loop with linear warmup and cosine decay."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from hopattn import autograd as ag
from hopattn.autograd import ParamSet
from hopattn.errors import DivergenceError
from hopattn.expt.config import OptimConfig
from hopattn.models import ToyModel, save_checkpoint


def lr_at(step: int, cfg: OptimConfig) -> float:
    """Step size for 0-based ``step`` of ``cfg.steps``.

    Linear warmup reaches ``cfg.lr`` at ``step == warmup_steps``; cosine
    decay then reaches ``cfg.min_lr`` at the final step ``steps - 1``.
    """
    base, floor, warm = cfg.lr, cfg.min_lr, cfg.warmup_steps
    last = max(cfg.steps - 1, 0)
    if warm > 0 and step < warm:
        return base * step / warm
    if last <= warm:
        return base
    t = min(max((step - warm) / (last - warm), 0.0), 1.0)
    return floor + 0.5 * (base - floor) * (1.0 + math.cos(math.pi * t))


class AdamW:
    """Adam moments with decoupled weight decay on matrices (ndim >= 2)."""

    def __init__(self, params: ParamSet, cfg: OptimConfig):
        self.params, self.cfg = params, cfg
        self.m = {k: np.zeros_like(t.value) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.value) for k, t in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        c = self.cfg
        self.t += 1
        b1, b2 = c.beta1, c.beta2
        corr1, corr2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            v = self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            update = (m / corr1) / (np.sqrt(v / corr2) + c.eps)
            if p.value.ndim >= 2 and c.weight_decay:
                p.value = p.value * (1.0 - lr * c.weight_decay)
            p.value = p.value - lr * update


def clip_grads(params: ParamSet, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(t.grad * t.grad)) for _, t in params.items() if t.grad is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for _, t in params.items():
            if t.grad is not None:
                t.grad = t.grad * scale
    return total


def evaluate(model: ToyModel, dataset, split: str, max_items: int = 4096) -> dict:
    """Mean cross-entropy and accuracy (encoder) or perplexity (decoder)."""
    x, y = dataset.split(split)
    if len(x) > max_items:
        keep = np.linspace(0, len(x) - 1, max_items).astype(int)
        x, y = x[keep], y[keep]
    with ag.no_grad():
        logits = model.forward(x).value
    flat = logits.reshape(-1, logits.shape[-1])
    t = np.asarray(y).reshape(-1)
    shifted = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(lse - shifted[np.arange(len(t)), t]))
    out = {"loss": loss}
    if model.config.arch == "encoder":
        out["accuracy"] = float(np.mean(flat.argmax(axis=1) == t))
    else:
        out["perplexity"] = float(math.exp(loss))
    return out


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)
    checkpoint: str | None = None
    seconds: float = 0.0


MetricCallback = Callable[[int, str, float], None]


def train(model: ToyModel, dataset, cfg: OptimConfig, seed: int = 0,
          on_metric: MetricCallback | None = None, checkpoint_path: str | None = None) -> TrainResult:
    """Minibatch AdamW.  Deterministic given ``seed``.

    ``on_metric(step, name, value)`` receives every evaluation.  A non-finite
    loss reports ``diverged`` and raises :class:`DivergenceError`.
    """
    rng = np.random.default_rng(seed)
    opt = AdamW(model.params, cfg)
    result = TrainResult()
    emit = on_metric or (lambda *_: None)
    start = time.perf_counter()
    splits = ("train", "test") if model.config.arch == "encoder" else ("train", "val")

    def record(step):
        row = {"step": step}
        for split in splits:
            for name, value in evaluate(model, dataset, split).items():
                row[f"{split}_{name}"] = value
                emit(step, f"{split}_{name}", value)
        result.history.append(row)

    for step in range(cfg.steps):
        if step % cfg.eval_every == 0:
            record(step)
        xb, yb = dataset.sample(rng, cfg.batch_size)
        model.params.zero_grad()
        loss = model.loss(xb, yb)
        if not np.isfinite(loss.item()):
            emit(step, "diverged", float(loss.item()))
            raise DivergenceError(f"non-finite loss {loss.item()} at step {step}")
        ag.backward(loss)
        clip_grads(model.params, cfg.grad_clip)
        opt.step(lr_at(step, cfg))
    record(cfg.steps)
    result.final = dict(result.history[-1])
    result.seconds = time.perf_counter() - start
    if checkpoint_path:
        result.checkpoint = save_checkpoint(checkpoint_path, model, extra={"final": result.final})
    return result
