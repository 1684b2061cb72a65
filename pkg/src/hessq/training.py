"""Baseline SGD training, quantization-aware fine-tuning, direct quantization.

Quantization-aware training keeps full-precision master weights. Every
step the forward graph sees freshly quantized weights (group ranges
recomputed from the masters) and 8-bit activations clipped to running
EMA ranges; gradients flow back through the clipped straight-through
estimator and SGD updates the masters. Setting every bit width >= 32
inserts no ops at all, so the run is bit-identical to baseline training.

Direct quantization is the uniform-bits, single-group (layerwise)
configuration of the same machinery, trained with the same step budget;
``ptq=True`` skips fine-tuning and only calibrates activation ranges.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .allocation import BitAllocation, EmbeddingBits, model_size
from .groups import GroupPolicy, GroupQuantizedTensor, group_ranges, groupwise_quantize
from .model import TransformerClassifier
from .quantizer import (
    ActivationObserver,
    QuantSpec,
    fake_quant_node,
    fake_quant_tensorwise,
)


class TrainingDiverged(ArithmeticError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.1
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("bad epochs/batch_size")
        if self.lr <= 0 or not 0.0 <= self.momentum < 1.0:
            raise ValueError("bad lr/momentum")


@dataclass
class QuantSettings:
    """What to quantize and how during QAT/PTQ."""

    allocation: BitAllocation
    policy: GroupPolicy = field(default_factory=GroupPolicy)
    range_policy: str = "minmax"
    percentile: float | None = None
    ptq: bool = False
    calibration_batches: int = 8


_ATTENTION_SUFFIXES = (".wq", ".wk", ".wv", ".wo")


class QuantizationContext:
    """Rewrites weight nodes and taps activation sites during graph builds."""

    def __init__(self, model: TransformerClassifier, settings: QuantSettings):
        self.cfg = model.cfg
        self.settings = settings
        self.alloc = settings.allocation
        self.training = True
        self.observers: dict[str, ActivationObserver] = {}

    # -- weight path --------------------------------------------------------
    def _weight_bits(self, name: str) -> int | None:
        if name == "embedding.word":
            return self.alloc.e_bits.word
        if name == "embedding.position":
            return self.alloc.e_bits.position
        if name.startswith("encoder."):
            base = name.rsplit(".", 1)[0]
            mat = name.rsplit(".", 1)[1]
            if mat in ("wq", "wk", "wv", "wo", "w1", "w2"):
                return self.alloc.layer_bits.get(base)
        return None  # layer norm, classifier head: full precision

    def group_spec_for(self, name: str, rows: int):
        is_attention = name.endswith(_ATTENTION_SUFFIXES)
        return self.settings.policy.resolve(rows, self.cfg.n_heads, is_attention)

    def quant_spec(self, bits: int) -> QuantSpec:
        return QuantSpec(bits, self.settings.range_policy, self.settings.percentile)

    def weight(self, name: str, node: T.Tensor) -> T.Tensor:
        bits = self._weight_bits(name)
        if bits is None or bits >= 32:
            return node
        gspec = self.group_spec_for(name, node.shape[0])
        qspec = self.quant_spec(bits)
        ranges = group_ranges(node.data, gspec, qspec)
        starts = np.asarray(gspec.starts, dtype=np.int64)
        lo = np.array([r.q0 for r in ranges])
        hi = np.array([r.q_max for r in ranges])
        return fake_quant_node(node, starts, bits, lo, hi)

    # -- activation path ----------------------------------------------------
    def activation(self, site: str, node: T.Tensor) -> T.Tensor:
        bits = self.alloc.a_bits
        if bits >= 32:
            return node
        obs = self.observers.get(site)
        if obs is None:
            obs = self.observers[site] = ActivationObserver()
        if self.training:
            obs.update(node.data)
        return fake_quant_tensorwise(node, obs.range(bits), bits)

    # -- mode / persistence ---------------------------------------------------
    def train_mode(self) -> None:
        self.training = True

    def eval_mode(self) -> None:
        self.training = False

    def observer_state(self) -> dict:
        return {site: obs.state() for site, obs in sorted(self.observers.items())}

    def load_observer_state(self, state: dict) -> None:
        self.observers = {
            site: ActivationObserver.from_state(s) for site, s in state.items()
        }
        self.training = False

    # -- artifact ------------------------------------------------------------
    def quantize_weights(self, model: TransformerClassifier) -> dict[str, GroupQuantizedTensor]:
        """Freeze the master weights into per-group codes."""
        out: dict[str, GroupQuantizedTensor] = {}
        for name in model.quantizable_names():
            bits = self._weight_bits(name)
            if bits is None or bits >= 32:
                continue
            arr = model.params[name].data
            gspec = self.group_spec_for(name, arr.shape[0])
            out[name] = groupwise_quantize(arr, gspec, self.quant_spec(bits))
        return out

    def group_counts(self, model: TransformerClassifier) -> dict[str, int]:
        counts = {}
        for name in model.quantizable_names():
            bits = self._weight_bits(name)
            if bits is None or bits >= 32:
                continue
            arr = model.params[name].data
            counts[name] = self.group_spec_for(name, arr.shape[0]).n_groups
        return counts


def activation_only_context(
    model: TransformerClassifier, a_bits: int, observer_state: dict
) -> QuantizationContext:
    """Context that quantizes activations against stored ranges only.

    Used to evaluate a saved quantized run whose dequantized weights are
    already baked into the master parameters.
    """
    alloc = BitAllocation({}, EmbeddingBits(32, 32), a_bits)
    ctx = QuantizationContext(model, QuantSettings(alloc))
    ctx.load_observer_state(observer_state)
    return ctx


# -- evaluation ----------------------------------------------------------------


def evaluate(
    model: TransformerClassifier,
    dataset,
    qctx: QuantizationContext | None = None,
    batch_size: int = 256,
) -> tuple[float, float]:
    """(mean loss, accuracy) over a dataset, without building gradients."""
    if qctx is not None:
        qctx.eval_mode()
    losses = []
    correct = 0
    with T.no_grad():
        for s in range(0, len(dataset), batch_size):
            x = dataset.tokens[s : s + batch_size]
            y = dataset.labels[s : s + batch_size]
            logits = model.logits(x, qctx)
            losses.append(float(T.cross_entropy_logits(logits, y).data) * len(y))
            correct += int((logits.data.argmax(axis=1) == y).sum())
    n = len(dataset)
    return sum(losses) / n, correct / n


# -- optimizers -----------------------------------------------------------------


class SGD:
    """Plain SGD with classical momentum: u <- m u + g; w <- w - lr u."""

    def __init__(self, params: dict[str, T.Tensor], lr: float, momentum: float):
        self.params = {n: p for n, p in params.items() if p.requires_grad}
        self.lr = lr
        self.momentum = momentum
        self.velocity = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            u = self.velocity[name]
            u *= self.momentum
            u += g
            p.data -= (self.lr * u).astype(p.data.dtype)


# -- training loops ---------------------------------------------------------------


def _run_epochs(
    model: TransformerClassifier,
    train_ds,
    eval_ds,
    cfg: TrainConfig,
    qctx: QuantizationContext | None,
    size_mb: float | None,
) -> list[dict]:
    opt = SGD(model.params, cfg.lr, cfg.momentum)
    rng = np.random.default_rng(cfg.seed)
    names = [n for n, p in model.params.items() if p.requires_grad]
    metrics: list[dict] = []
    for epoch in range(cfg.epochs):
        if qctx is not None:
            qctx.train_mode()
        order = rng.permutation(len(train_ds))
        loss_sum = 0.0
        correct = 0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            x, y = train_ds.tokens[idx], train_ds.labels[idx]
            try:
                logits = model.logits(x, qctx)
                loss = T.cross_entropy_logits(logits, y)
                gs = T.grad(loss, [model.params[n] for n in names])
            except T.NonFiniteError as e:
                raise TrainingDiverged(
                    f"non-finite loss or gradient at epoch {epoch}, step {s // cfg.batch_size}: {e}"
                ) from None
            opt.step({n: g.data for n, g in zip(names, gs)})
            loss_sum += float(loss.data) * len(idx)
            correct += int((logits.data.argmax(axis=1) == y).sum())
        ev_loss, ev_acc = evaluate(model, eval_ds, qctx)
        row = {
            "epoch": epoch,
            "train_loss": loss_sum / len(train_ds),
            "train_acc": correct / len(train_ds),
            "eval_loss": ev_loss,
            "eval_acc": ev_acc,
        }
        if size_mb is not None:
            row["size_mb"] = size_mb
        metrics.append(row)
    return metrics


def train_baseline(
    model: TransformerClassifier, train_ds, eval_ds, cfg: TrainConfig
) -> list[dict]:
    """Full-precision training; mutates the model in place."""
    return _run_epochs(model, train_ds, eval_ds, cfg, None, None)


@dataclass
class QATResult:
    metrics: list[dict]
    weights: dict[str, GroupQuantizedTensor]
    qctx: QuantizationContext
    eval_loss: float
    eval_acc: float
    size_mb: float
    metadata_mb: float


def qat_finetune(
    model: TransformerClassifier,
    train_ds,
    eval_ds,
    cfg: TrainConfig,
    settings: QuantSettings,
) -> QATResult:
    """Quantization-aware fine-tune (or PTQ calibration) of a trained model."""
    qctx = QuantizationContext(model, settings)
    counts = qctx.group_counts(model)
    report = model_size(settings.allocation, model.layer_shapes(), counts)
    if settings.ptq:
        rng = np.random.default_rng(cfg.seed)
        order = rng.permutation(len(train_ds))
        qctx.train_mode()
        with T.no_grad():
            for s in range(0, min(len(order), settings.calibration_batches * cfg.batch_size), cfg.batch_size):
                idx = order[s : s + cfg.batch_size]
                model.logits(train_ds.tokens[idx], qctx)
        metrics = []
    else:
        metrics = _run_epochs(model, train_ds, eval_ds, cfg, qctx, report.total_mb)
    ev_loss, ev_acc = evaluate(model, eval_ds, qctx)
    weights = qctx.quantize_weights(model)
    return QATResult(metrics, weights, qctx, ev_loss, ev_acc, report.total_mb, report.metadata_mb)


def directq(
    model: TransformerClassifier,
    train_ds,
    eval_ds,
    cfg: TrainConfig,
    bits: int,
    allocation: BitAllocation,
    ptq: bool = False,
) -> QATResult:
    """Uniform-bit, single-group quantization with the same training budget.

    ``allocation`` supplies embedding/activation settings; every encoder
    layer is forced to ``bits`` and grouping collapses to layerwise.
    """
    forced = BitAllocation(
        {name: bits for name in allocation.layer_bits},
        allocation.e_bits,
        allocation.a_bits,
    )
    settings = QuantSettings(forced, GroupPolicy("layerwise"), ptq=ptq)
    return qat_finetune(model, train_ds, eval_ds, cfg, settings)
