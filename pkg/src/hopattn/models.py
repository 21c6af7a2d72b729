"""Toy encoder and causal decoder built from the attention layers, plus checkpoints.

Checkpoint layout
-----------------
A checkpoint is a numpy ``.npz`` archive (a zip of ``.npy`` members).  Every
parameter is stored under its dotted name as a little-endian float64 array
(``dtype '<f8'``) whose ``.npy`` header records the shape.  The member
``__manifest__`` is a uint8 array holding UTF-8 JSON with keys
``format`` (``"hopattn-ckpt-1"``), ``config`` (the :class:`ModelConfig`
fields), ``seed``, ``params`` (name -> shape) and ``extra``.  Archives are
read with ``allow_pickle=False``.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np

from hopattn import autograd as ag
from hopattn.attention import (
    BlockParams, LayerParams, baseline_sa_layer, init_block, init_layer, layer_norm,
    layer_scores, mha_layer, transformer_block,
)
from hopattn.autograd import ParamSet, Tensor
from hopattn.errors import ConfigError, InputError, ShapeError

CKPT_FORMAT = "hopattn-ckpt-1"
_ATTN_FIELDS = ("w_q", "w_k", "w_v", "b_q", "b_k", "w_o", "b_o")
_BLOCK_FIELDS = ("ln1_g", "ln1_b", "ln2_g", "ln2_b", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2")


@dataclass
class ModelConfig:
    """Shape and attention settings of a toy model.

    ``block="attention_only"`` stacks bare attention layers (no residual
    stream, norm or MLP); the classifier still has a final norm and head.
    ``h0="first_scores"`` lets the first layer see its own scores
    un-attenuated instead of starting from a zero hidden state.
    """

    arch: str = "encoder"
    attention: str = "mha"
    block: str = "transformer"
    d_model: int = 64
    d_k: int = 16
    n_heads: int = 4
    n_layers: int = 2
    mlp_width: int = 128
    alpha: float = 0.5
    alpha_prime: float = 0.5
    init_std: float = 0.02
    h0: str = "zero"
    # encoder
    image_size: int = 8
    channels: int = 1
    patch: int = 4
    n_classes: int = 4
    # decoder
    vocab: int = 256
    context: int = 32

    def __post_init__(self):
        if self.arch not in ("encoder", "decoder"):
            raise ConfigError(f"unknown arch {self.arch!r}")
        if self.attention not in ("baseline", "mha"):
            raise ConfigError(f"unknown attention kind {self.attention!r}")
        if self.block not in ("transformer", "attention_only"):
            raise ConfigError(f"unknown block type {self.block!r}")
        if self.h0 not in ("zero", "first_scores"):
            raise ConfigError(f"unknown h0 mode {self.h0!r}")
        for name in ("d_model", "d_k", "n_heads", "n_layers", "mlp_width", "image_size",
                     "channels", "patch", "n_classes", "vocab", "context"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("alpha", "alpha_prime"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.init_std < 0:
            raise ConfigError("init_std must be non-negative")
        if self.arch == "encoder" and self.image_size % self.patch:
            raise ConfigError("image_size must be a multiple of patch")
        if self.arch == "encoder" and self.n_classes < 2:
            raise ConfigError("need at least two classes")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def n_tokens(self) -> int:
        return self.n_patches + 1 if self.arch == "encoder" else self.context

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model keys: {sorted(extra)}")
        return cls(**d)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, S, S, C) images -> (B, n_patches, patch*patch*C), row-major over patches."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[..., None]
    b, s, s2, c = images.shape
    if s != s2 or s % patch:
        raise ShapeError(f"images of shape {images.shape} do not tile into {patch}x{patch} patches")
    g = s // patch
    x = images.reshape(b, g, patch, g, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g * g, patch * patch * c)


@dataclass
class ToyModel:
    config: ModelConfig
    params: ParamSet
    seed: int = 0
    meta: dict = field(default_factory=dict)

    # parameter views ------------------------------------------------------

    def _causal(self) -> bool:
        return self.config.arch == "decoder"

    def layer(self, i: int) -> LayerParams:
        p, c = self.params, self.config
        return LayerParams(
            *[p[f"blocks.{i}.attn.{n}"] for n in _ATTN_FIELDS],
            alpha=c.alpha if c.attention == "mha" else 0.0,
            alpha_prime=c.alpha_prime if c.attention == "mha" else 0.0,
            causal=self._causal(),
        )

    def block(self, i: int) -> BlockParams:
        p = self.params
        return BlockParams(self.layer(i), *[p[f"blocks.{i}.{n}"] for n in _BLOCK_FIELDS])

    # forward ----------------------------------------------------------------

    def embed(self, inputs) -> Tensor:
        c, p = self.config, self.params
        if c.arch == "encoder":
            patches = patchify(inputs, c.patch)
            tok = patches @ p["embed.w"] + p["embed.b"]
            cls = ag.broadcast_to(p["cls"], (patches.shape[0], 1, c.d_model))
            x = ag.concat([cls, tok], axis=1)
            return x + p["pos"]
        ids = np.asarray(inputs)
        if ids.ndim == 1:
            ids = ids[None]
        if not np.issubdtype(ids.dtype, np.integer):
            raise ShapeError("decoder inputs must be integer token ids")
        t = ids.shape[-1]
        if t > c.context:
            raise ShapeError(f"sequence length {t} exceeds context {c.context}")
        if ids.min() < 0 or ids.max() >= c.vocab:
            raise ShapeError("token id out of vocabulary range")
        return p["tok_embed"][ids] + p["pos"][:t]

    def trace(self, inputs) -> tuple[list[Tensor], list[np.ndarray]]:
        """Token features after every block and the attention weights of every layer."""
        c = self.config
        x = self.embed(inputs)
        h = None
        feats, attns = [], []
        for i in range(c.n_layers):
            if c.block == "transformer":
                h = self._first_hidden(h, x, i, normed=True)
                x, h, pa = transformer_block(x, h, self.block(i), kind=c.attention, return_attn=True)
            elif c.attention == "mha":
                h = self._first_hidden(h, x, i, normed=False)
                x, h, pa = mha_layer(x, h, self.layer(i), return_attn=True)
            else:
                x, pa = baseline_sa_layer(x, self.layer(i), return_attn=True)
            feats.append(x)
            attns.append(pa.value)
        return feats, attns

    def features(self, inputs, return_attn: bool = False):
        """Token features after the last block (before the final norm)."""
        feats, attns = self.trace(inputs)
        return (feats[-1], attns) if return_attn else feats[-1]

    def _first_hidden(self, h, x, i, normed):
        if i > 0 or self.config.h0 == "zero" or self.config.attention != "mha":
            return h
        blk = self.block(0) if normed else None
        xin = layer_norm(x, blk.ln1_g, blk.ln1_b) if normed else x
        return layer_scores(xin, self.layer(0))

    def forward(self, inputs, return_attn: bool = False):
        """Encoder: logits (B, n_classes).  Decoder: logits (B, T, vocab)."""
        x, attns = self.features(inputs, return_attn=True)
        p = self.params
        if self.config.arch == "encoder":
            x = x[:, 0]
        x = layer_norm(x, p["ln_f.g"], p["ln_f.b"])
        logits = x @ p["head.w"] + p["head.b"]
        return (logits, attns) if return_attn else logits

    __call__ = forward

    def loss(self, inputs, targets) -> Tensor:
        return ag.cross_entropy(self.forward(inputs), targets)

    def with_attention(self, kind: str, alpha: float | None = None,
                       alpha_prime: float | None = None) -> ToyModel:
        """Same weights, different attention settings."""
        changes = {"attention": kind}
        if alpha is not None:
            changes["alpha"] = alpha
        if alpha_prime is not None:
            changes["alpha_prime"] = alpha_prime
        cfg = dataclasses.replace(self.config, **changes)
        return ToyModel(cfg, self.params, self.seed, dict(self.meta))


def _add_attention(ps: ParamSet, prefix: str, layer: LayerParams):
    for n in _ATTN_FIELDS:
        ps.add(f"{prefix}.{n}", getattr(layer, n))


def _build(config: ModelConfig, seed: int) -> ToyModel:
    rng = np.random.default_rng(seed)
    c = config
    std = c.init_std
    ps = ParamSet()
    if c.arch == "encoder":
        width = c.patch * c.patch * c.channels
        ps.add("embed.w", rng.normal(0.0, std, (width, c.d_model)))
        ps.add("embed.b", np.zeros(c.d_model))
        ps.add("cls", rng.normal(0.0, std, (1, 1, c.d_model)))
    else:
        ps.add("tok_embed", rng.normal(0.0, std, (c.vocab, c.d_model)))
    ps.add("pos", rng.normal(0.0, std, (c.n_tokens, c.d_model)))
    for i in range(c.n_layers):
        if c.block == "transformer":
            b = init_block(rng, c.d_model, c.n_heads, c.d_k, c.mlp_width, std)
            _add_attention(ps, f"blocks.{i}.attn", b.attn)
            for n in _BLOCK_FIELDS:
                ps.add(f"blocks.{i}.{n}", getattr(b, n))
        else:
            _add_attention(ps, f"blocks.{i}.attn", init_layer(rng, c.d_model, c.n_heads, c.d_k, std))
    out = c.n_classes if c.arch == "encoder" else c.vocab
    ps.add("ln_f.g", np.ones(c.d_model))
    ps.add("ln_f.b", np.zeros(c.d_model))
    ps.add("head.w", rng.normal(0.0, std, (c.d_model, out)))
    ps.add("head.b", np.zeros(out))
    return ToyModel(c, ps, seed)


def build_encoder(config: ModelConfig | dict, seed: int = 0) -> ToyModel:
    """Patch embedding, learned positions, class token, blocks, linear head."""
    config = config if isinstance(config, ModelConfig) else ModelConfig.from_dict(config)
    config = dataclasses.replace(config, arch="encoder")
    return _build(config, seed)


def build_decoder(config: ModelConfig | dict, seed: int = 0) -> ToyModel:
    """Token embedding, learned positions, causal blocks, untied output projection."""
    config = config if isinstance(config, ModelConfig) else ModelConfig.from_dict(config)
    config = dataclasses.replace(config, arch="decoder")
    return _build(config, seed)


def build_model(config: ModelConfig | dict, seed: int = 0) -> ToyModel:
    config = config if isinstance(config, ModelConfig) else ModelConfig.from_dict(config)
    return _build(config, seed)


# checkpoints -------------------------------------------------------------------

def save_checkpoint(path: str | os.PathLike, model: ToyModel, extra: dict | None = None) -> str:
    path = os.fspath(path)
    if not path.endswith(".npz"):
        path += ".npz"
    arrays = {name: np.ascontiguousarray(t.value, dtype="<f8") for name, t in model.params.items()}
    manifest = {
        "format": CKPT_FORMAT,
        "config": model.config.to_dict(),
        "seed": int(model.seed),
        "params": {k: list(v.shape) for k, v in arrays.items()},
        "extra": extra or {},
    }
    blob = np.frombuffer(json.dumps(manifest, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    d = os.path.dirname(path)
    if d:
        os.makedirs(d, exist_ok=True)
    tmp = path + ".tmp.npz"
    np.savez(tmp, __manifest__=blob, **arrays)
    os.replace(tmp, path)
    return path


def read_manifest(path: str | os.PathLike) -> dict:
    try:
        with np.load(os.fspath(path), allow_pickle=False) as z:
            return json.loads(bytes(z["__manifest__"]).decode("utf-8"))
    except (OSError, KeyError, ValueError) as exc:
        raise InputError(f"cannot read checkpoint {os.fspath(path)!r}: {exc}") from exc


def load_checkpoint(path: str | os.PathLike) -> tuple[ToyModel, dict]:
    """Rebuild the model stored at ``path``; returns ``(model, manifest)``."""
    path = os.fspath(path)
    manifest = read_manifest(path)
    if manifest.get("format") != CKPT_FORMAT:
        raise InputError(f"{path!r} is not a {CKPT_FORMAT} checkpoint")
    model = build_model(ModelConfig.from_dict(manifest["config"]), manifest["seed"])
    with np.load(path, allow_pickle=False) as z:
        values = {}
        for name, shape in manifest["params"].items():
            arr = z[name]
            if arr.dtype != np.dtype("<f8") or list(arr.shape) != shape:
                raise InputError(f"checkpoint tensor {name!r} has dtype {arr.dtype}, shape {arr.shape}")
            values[name] = arr
    if set(values) != set(model.params.names()):
        raise InputError("checkpoint tensors do not match the model's parameters")
    model.params.load(values)
    model.meta = dict(manifest.get("extra", {}))
    return model, manifest
