"""Toy post-norm transformer encoder classifier.

Small enough that dense Hessian oracles stay tractable, faithful enough
to exercise everything the probes and quantizers need: multi-head
self-attention with concatenated head weights stored as (out, in)
matrices, a gelu FFN, residual + layer norm after each sublayer
(post-norm), first-token pooling into a full-precision linear head.

Attention logits are scaled by 1/sqrt(d_model) by default;
``attn_scale="head_dim"`` switches to the conventional 1/sqrt(d/N_h).

Weights quantize along their first (output-neuron) axis. A quantization
context ``qctx`` may rewrite weight nodes and tap activation sites; the
model itself stays policy-free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .allocation import LayerShape


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab: int = 64
    max_len: int = 16
    d_model: int = 32
    n_heads: int = 4
    n_layers: int = 2
    ffn_dim: int = 64
    n_classes: int = 2
    seed: int = 0
    attn_scale: str = "model_dim"  # "model_dim" | "head_dim"
    activation: str = "gelu"  # "gelu" | "relu"

    def __post_init__(self):
        if min(self.vocab, self.max_len, self.d_model, self.n_heads, self.ffn_dim) <= 0:
            raise ConfigError("all model dimensions must be positive")
        if self.n_layers < 0:
            raise ConfigError("n_layers must be >= 0")
        if self.n_classes < 2:
            raise ConfigError("need at least two classes")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.attn_scale not in ("model_dim", "head_dim"):
            raise ConfigError(f"unknown attn_scale {self.attn_scale!r}")
        if self.activation not in ("gelu", "relu"):
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def scale_dim(self) -> int:
        return self.d_model if self.attn_scale == "model_dim" else self.head_dim


_ATTN_NAMES = ("wq", "wk", "wv", "wo")
_LAYER_MATRICES = _ATTN_NAMES + ("w1", "w2")


def _init_params(cfg: ModelConfig, dtype) -> dict[str, np.ndarray]:
    """Seeded init; the draw order is fixed so equal seeds give equal bits."""
    rng = np.random.default_rng(cfg.seed)
    d, f = cfg.d_model, cfg.ffn_dim
    out: dict[str, np.ndarray] = {}
    out["embedding.word"] = (0.1 * rng.standard_normal((cfg.vocab, d))).astype(dtype)
    out["embedding.position"] = (0.1 * rng.standard_normal((cfg.max_len, d))).astype(dtype)
    for i in range(cfg.n_layers):
        pre = f"encoder.{i}."
        s_att = math.sqrt(1.0 / d)
        for nm in _ATTN_NAMES:
            out[pre + nm] = (s_att * rng.standard_normal((d, d))).astype(dtype)
        out[pre + "w1"] = (math.sqrt(1.0 / d) * rng.standard_normal((f, d))).astype(dtype)
        out[pre + "w2"] = (math.sqrt(1.0 / f) * rng.standard_normal((d, f))).astype(dtype)
        out[pre + "ln1_g"] = np.ones(d, dtype=dtype)
        out[pre + "ln1_b"] = np.zeros(d, dtype=dtype)
        out[pre + "ln2_g"] = np.ones(d, dtype=dtype)
        out[pre + "ln2_b"] = np.zeros(d, dtype=dtype)
    out["output.w"] = (math.sqrt(1.0 / d) * rng.standard_normal((cfg.n_classes, d))).astype(dtype)
    out["output.b"] = np.zeros(cfg.n_classes, dtype=dtype)
    return out


def _linear(x: T.Tensor, w: T.Tensor) -> T.Tensor:
    """x (..., in) @ W^T for W stored (out, in)."""
    return T.matmul(x, T.transpose(w, (1, 0)))


def _layer_norm(x: T.Tensor, g: T.Tensor, b: T.Tensor, eps: float = 1e-5) -> T.Tensor:
    dt = x.data.dtype
    n = x.shape[-1]
    mean = T.mul(T.sum_last(x), T.constant(np.asarray(1.0 / n, dtype=dt)))
    centered = T.sub(x, mean)
    var = T.mul(T.sum_last(T.mul(centered, centered)), T.constant(np.asarray(1.0 / n, dtype=dt)))
    inv = T.powc(T.add(var, T.constant(np.asarray(eps, dtype=dt))), -0.5)
    return T.add(T.mul(T.mul(centered, inv), g), b)


def _split_heads(x: T.Tensor, n_heads: int) -> T.Tensor:
    b, n, d = x.shape
    return T.transpose(T.reshape(x, (b, n, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: T.Tensor) -> T.Tensor:
    b, h, n, hd = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * hd))


class _NullQctx:
    """No-op quantization context."""

    def weight(self, name: str, node: T.Tensor) -> T.Tensor:
        return node

    def activation(self, site: str, node: T.Tensor) -> T.Tensor:
        return node


_NULL_QCTX = _NullQctx()


def _attention(
    h: T.Tensor,
    weights: dict[str, T.Tensor],
    cfg: ModelConfig,
    collect: list | None,
) -> T.Tensor:
    """Multi-head self-attention; returns the summed head outputs through W_o.

    The residual addition happens in the caller.
    """
    q = _split_heads(_linear(h, weights["wq"]), cfg.n_heads)
    k = _split_heads(_linear(h, weights["wk"]), cfg.n_heads)
    v = _split_heads(_linear(h, weights["wv"]), cfg.n_heads)
    scale = T.constant(np.asarray(1.0 / math.sqrt(cfg.scale_dim), dtype=h.data.dtype))
    scores = T.mul(T.matmul(q, T.swap_last2(k)), scale)
    probs = T.softmax_last(scores)  # (B, H, n, n)
    if collect is not None:
        collect.append(probs.data.copy())
    ctx = _merge_heads(T.matmul(probs, v))
    return ctx


class TransformerClassifier:
    """Parameter store plus graph builders for loss and logits."""

    def __init__(self, cfg: ModelConfig, dtype=np.float32, arrays: dict | None = None):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        raw = arrays if arrays is not None else _init_params(cfg, self.dtype)
        self.params: dict[str, T.Tensor] = {
            name: T.parameter(arr.astype(self.dtype, copy=True)) for name, arr in raw.items()
        }
        self.groups: dict[str, list[str]] = {
            "embedding.word": ["embedding.word"],
            "embedding.position": ["embedding.position"],
        }
        for i in range(cfg.n_layers):
            pre = f"encoder.{i}."
            self.groups[f"encoder.{i}"] = [
                pre + nm for nm in _LAYER_MATRICES + ("ln1_g", "ln1_b", "ln2_g", "ln2_b")
            ]
        self.groups["output"] = ["output.w", "output.b"]

    # -- graph builders -----------------------------------------------------
    def logits(
        self, tokens, qctx=None, collect: list | None = None, params=None
    ) -> T.Tensor:
        qctx = qctx or _NULL_QCTX
        cfg = self.cfg
        tokens = np.asarray(tokens)
        if tokens.ndim != 2 or tokens.shape[1] != cfg.max_len:
            raise ConfigError(
                f"tokens must be (B, {cfg.max_len}), got {tokens.shape}"
            )
        p = params if params is not None else self.params
        word = qctx.weight("embedding.word", p["embedding.word"])
        pos = qctx.weight("embedding.position", p["embedding.position"])
        h = T.add(T.embedding_lookup(word, tokens), pos)
        h = qctx.activation("embedding.out", h)
        act = T.gelu if cfg.activation == "gelu" else T.relu
        for i in range(cfg.n_layers):
            pre = f"encoder.{i}."
            w = {nm: qctx.weight(pre + nm, p[pre + nm]) for nm in _LAYER_MATRICES}
            h_in = qctx.activation(pre + "attn_in", h)
            ctx = _attention(h_in, w, cfg, collect)
            ctx = qctx.activation(pre + "attn_ctx", ctx)
            attn_out = _linear(ctx, w["wo"])
            h = _layer_norm(T.add(h, attn_out), p[pre + "ln1_g"], p[pre + "ln1_b"])
            f_in = qctx.activation(pre + "ffn_in", h)
            hidden = act(_linear(f_in, w["w1"]))
            hidden = qctx.activation(pre + "ffn_hidden", hidden)
            ffn_out = _linear(hidden, w["w2"])
            h = _layer_norm(T.add(h, ffn_out), p[pre + "ln2_g"], p[pre + "ln2_b"])
        pooled = T.select_token(h, 0)
        pooled = qctx.activation("pooled", pooled)
        return T.add(_linear(pooled, p["output.w"]), p["output.b"])

    def loss(
        self, tokens, labels, qctx=None, collect: list | None = None, params=None
    ) -> T.Tensor:
        return T.cross_entropy_logits(self.logits(tokens, qctx, collect, params), labels)

    def attention_traces(self, tokens, qctx=None) -> list[np.ndarray]:
        """Per-layer attention probabilities (B, H, n, n) for one batch."""
        collect: list[np.ndarray] = []
        with T.no_grad():
            self.logits(tokens, qctx, collect)
        return collect

    def as_graph(self, qctx=None) -> T.Graph:
        # the closure reads the params the Graph passes in, not self.params,
        # so Graph.clone() yields a genuinely independent differentiable copy
        def loss_fn(params, inputs, labels):
            return self.loss(inputs, labels, qctx=qctx, params=params)

        return T.Graph(self.params, self.groups, loss_fn)

    # -- parameter plumbing ---------------------------------------------------
    def param_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_arrays(self, arrays: dict) -> None:
        for name, p in self.params.items():
            if name not in arrays:
                raise ConfigError(f"checkpoint is missing parameter {name!r}")
            arr = np.asarray(arrays[name])
            if arr.shape != p.shape:
                raise ConfigError(
                    f"parameter {name!r}: shape {arr.shape} != expected {p.shape}"
                )
            p.data[...] = arr.astype(p.data.dtype)

    def clone(self) -> "TransformerClassifier":
        return TransformerClassifier(self.cfg, self.dtype, self.param_arrays())

    def astype(self, dtype) -> "TransformerClassifier":
        return TransformerClassifier(self.cfg, dtype, self.param_arrays())

    # -- quantization metadata -------------------------------------------------
    def quantizable_names(self) -> list[str]:
        names = ["embedding.word", "embedding.position"]
        for i in range(self.cfg.n_layers):
            names += [f"encoder.{i}.{nm}" for nm in _LAYER_MATRICES]
        return names

    def layer_shapes(self) -> list[LayerShape]:
        cfg = self.cfg
        shapes = [
            LayerShape("embedding.word", "embedding_word", cfg.vocab * cfg.d_model),
            LayerShape(
                "embedding.position", "embedding_position", cfg.max_len * cfg.d_model
            ),
        ]
        enc_q = 4 * cfg.d_model * cfg.d_model + 2 * cfg.ffn_dim * cfg.d_model
        enc_fp = 4 * cfg.d_model
        for i in range(cfg.n_layers):
            shapes.append(LayerShape(f"encoder.{i}", "encoder", enc_q, enc_fp))
        shapes.append(
            LayerShape("output", "output", 0, cfg.n_classes * cfg.d_model + cfg.n_classes)
        )
        return shapes

    def encoder_layer_names(self) -> list[str]:
        return [f"encoder.{i}" for i in range(self.cfg.n_layers)]


def build_model(cfg: ModelConfig, dtype=np.float32) -> TransformerClassifier:
    return TransformerClassifier(cfg, dtype)


def mhsa_forward(x: np.ndarray, weights: dict, n_heads: int, scale_dim: int) -> np.ndarray:
    """Standalone attention block on one (n, d) sequence.

    Returns sum over heads of W_o-projected attention output (no residual),
    useful as a direct check against the closed-form definition.
    """
    x = np.asarray(x)
    if x.ndim != 2:
        raise ConfigError("mhsa_forward expects (n, d)")
    n, d = x.shape
    cfg = ModelConfig(
        vocab=2,
        max_len=n,
        d_model=d,
        n_heads=n_heads,
        n_layers=0,
        ffn_dim=1,
        attn_scale="model_dim" if scale_dim == d else "head_dim",
    )
    if cfg.scale_dim != scale_dim:
        raise ConfigError(f"scale_dim must be {d} or {d // n_heads}")
    with T.no_grad():
        h = T.constant(x[None, :, :])
        w = {nm: T.constant(np.asarray(weights[nm], dtype=x.dtype)) for nm in _ATTN_NAMES}
        ctx = _attention(h, w, cfg, None)
        out = _linear(ctx, w["wo"])
    return out.data[0]
