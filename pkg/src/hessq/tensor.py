"""Dense tensors with reverse-mode autodiff and exact Hessian-vector products.

A small define-by-run engine over numpy arrays. Every primitive's backward
rule is itself expressed through these same primitives, so gradients are
ordinary graph nodes and can be differentiated again. That is what makes
``hvp`` exact: the Hessian-vector product is the gradient of ``g . v``
rather than a finite-difference approximation.

Conventions:
  * arrays are float32 or float64; binary ops require matching dtypes,
  * op outputs are never mutated (parameters are leaves and may be updated
    in place between graph builds),
  * non-finite op outputs raise ``NonFiniteError`` at the op that produced
    them (see ``finite_checks``).
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "NonFiniteError",
    "ShapeError",
    "no_grad",
    "constant",
    "parameter",
    "grad",
    "forward",
    "backward",
    "hvp",
    "add",
    "sub",
    "neg",
    "mul",
    "div",
    "matmul",
    "transpose",
    "swap_last2",
    "reshape",
    "sum_all",
    "mean_all",
    "sum_last",
    "sum_leading",
    "exp",
    "log",
    "powc",
    "tanh",
    "relu",
    "gelu",
    "softmax_last",
    "cross_entropy_logits",
    "embedding_lookup",
    "embedding_scatter",
    "select_token",
]

FLOAT_DTYPES = (np.float32, np.float64)


class NonFiniteError(ArithmeticError):
    """An op produced nan or inf."""


class ShapeError(ValueError):
    """Operands have shapes the op does not accept."""


_tls = threading.local()


def _grad_enabled() -> bool:
    return getattr(_tls, "grad_enabled", True)


class _GradMode:
    def __init__(self, enabled: bool):
        self._enabled = enabled

    def __enter__(self):
        self._prev = _grad_enabled()
        _tls.grad_enabled = self._enabled
        return self

    def __exit__(self, *exc):
        _tls.grad_enabled = self._prev
        return False


def no_grad() -> _GradMode:
    """Context manager: ops built inside record no graph."""
    return _GradMode(False)


def finite_checks(enabled: bool) -> None:
    _tls.finite_checks = enabled


def _finite_checks_on() -> bool:
    return getattr(_tls, "finite_checks", True)


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "vjp")

    def __init__(self, data, requires_grad=False, parents=(), vjp=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.parents: tuple[Tensor, ...] = parents
        self.vjp = vjp  # callable(upstream: Tensor) -> tuple[Tensor | None, ...]

    # -- introspection ------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # -- operator sugar -----------------------------------------------------
    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        return add(self, self._lift(other))

    def __radd__(self, other):
        return add(self._lift(other), self)

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        return mul(self, self._lift(other))

    def __rmul__(self, other):
        return mul(self._lift(other), self)

    def __truediv__(self, other):
        return div(self, self._lift(other))

    def __rtruediv__(self, other):
        return div(self._lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(data, dtype=None) -> Tensor:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype)
    return Tensor(arr)


def parameter(data, dtype=None) -> Tensor:
    arr = np.array(data, dtype=dtype, copy=True)
    t = Tensor(arr)
    t.requires_grad = True
    return t


def _check_dtypes(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


def _out(data: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    if _finite_checks_on() and not np.all(np.isfinite(data)):
        raise NonFiniteError("op produced a non-finite value")
    if _grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), vjp)
    return Tensor(data)


# -- broadcast analysis ----------------------------------------------------
# Allowed elementwise pairings:
#   * identical shapes
#   * one side scalar ()
#   * one side a suffix of the other (bias (d,) against (B,n,d), positional
#     table (n,d) against (B,n,d), ...)
#   * same rank with one side's last axis == 1 (row-reductions kept-dims)


def _bcast_check(sa: tuple, sb: tuple, op: str) -> tuple:
    if sa == sb:
        return sa
    if sb == ():
        return sa
    if sa == ():
        return sb
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return sb
    if len(sa) == len(sb) and sa[:-1] == sb[:-1]:
        if sb[-1] == 1:
            return sa
        if sa[-1] == 1:
            return sb
    raise ShapeError(f"{op}: shapes {sa} and {sb} do not broadcast")


def _reduce_to(g: Tensor, shape: tuple) -> Tensor:
    """Sum ``g`` down to ``shape`` (inverse of the broadcast in _bcast_check)."""
    if g.shape == shape:
        return g
    if shape == ():
        return sum_all(g)
    if len(shape) == g.ndim and shape[:-1] == g.shape[:-1] and shape[-1] == 1:
        return sum_last(g)
    if len(shape) < g.ndim and g.shape[g.ndim - len(shape):] == shape:
        return sum_leading(g, keep=len(shape))
    raise ShapeError(f"cannot reduce {g.shape} to {shape}")


# -- elementwise arithmetic --------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b, "add")
    _bcast_check(a.shape, b.shape, "add")
    data = a.data + b.data

    def vjp(u: Tensor):
        return _reduce_to(u, a.shape), _reduce_to(u, b.shape)

    return _out(data, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b, "sub")
    _bcast_check(a.shape, b.shape, "sub")
    data = a.data - b.data

    def vjp(u: Tensor):
        return _reduce_to(u, a.shape), _reduce_to(neg(u), b.shape)

    return _out(data, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    def vjp(u: Tensor):
        return (neg(u),)

    return _out(-a.data, (a,), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b, "mul")
    _bcast_check(a.shape, b.shape, "mul")
    data = a.data * b.data

    def vjp(u: Tensor):
        return _reduce_to(mul(u, b), a.shape), _reduce_to(mul(u, a), b.shape)

    return _out(data, (a, b), vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b, "div")
    _bcast_check(a.shape, b.shape, "div")
    data = a.data / b.data

    def vjp(u: Tensor):
        ga = _reduce_to(div(u, b), a.shape)
        gb = _reduce_to(neg(mul(u, div(div(a, b), b))), b.shape)
        return ga, gb

    return _out(data, (a, b), vjp)


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul: operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ {a.shape} @ {b.shape}")
    if a.ndim != b.ndim and min(a.ndim, b.ndim) != 2:
        raise ShapeError(f"matmul: incompatible stack ranks {a.shape} @ {b.shape}")
    if a.ndim == b.ndim and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: stack dims differ {a.shape} @ {b.shape}")
    _check_dtypes(a, b, "matmul")
    data = np.matmul(a.data, b.data)

    def vjp(u: Tensor):
        ga = matmul(u, swap_last2(b))
        if ga.ndim > a.ndim:
            ga = sum_leading(ga, keep=a.ndim)
        gb = matmul(swap_last2(a), u)
        if gb.ndim > b.ndim:
            gb = sum_leading(gb, keep=b.ndim)
        return ga, gb

    return _out(data, (a, b), vjp)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of rank {a.ndim}")
    inv = tuple(int(i) for i in np.argsort(axes))

    def vjp(u: Tensor):
        return (transpose(u, inv),)

    return _out(np.transpose(a.data, axes), (a,), vjp)


def swap_last2(a: Tensor) -> Tensor:
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, axes)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = a.shape

    def vjp(u: Tensor):
        return (reshape(u, old),)

    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    return _out(data, (a,), vjp)


# -- reductions and their broadcast adjoints ---------------------------------


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape

    def vjp(u: Tensor):
        return (_expand_full(u, shape),)

    return _out(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), vjp)


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    return mul(sum_all(a), constant(np.asarray(1.0 / n, dtype=a.data.dtype)))


def _expand_full(a: Tensor, shape: tuple) -> Tensor:
    if a.shape != ():
        raise ShapeError("expand_full needs a scalar")

    def vjp(u: Tensor):
        return (sum_all(u),)

    return _out(np.broadcast_to(a.data, shape).copy(), (a,), vjp)


def sum_last(a: Tensor) -> Tensor:
    """Sum over the last axis, keeping it as size 1."""
    n = a.shape[-1]

    def vjp(u: Tensor):
        return (_expand_last(u, n),)

    return _out(a.data.sum(axis=-1, keepdims=True), (a,), vjp)


def _expand_last(a: Tensor, n: int) -> Tensor:
    if a.shape[-1] != 1:
        raise ShapeError("expand_last needs a trailing axis of size 1")
    shape = a.shape[:-1] + (n,)

    def vjp(u: Tensor):
        return (sum_last(u),)

    return _out(np.broadcast_to(a.data, shape).copy(), (a,), vjp)


def sum_leading(a: Tensor, keep: int) -> Tensor:
    """Sum out all leading axes so only the trailing ``keep`` remain."""
    if not 0 <= keep <= a.ndim:
        raise ShapeError(f"sum_leading: keep={keep} out of range for rank {a.ndim}")
    axes = tuple(range(a.ndim - keep))
    lead = a.shape[: a.ndim - keep]
    if not axes:
        return a

    def vjp(u: Tensor):
        return (_expand_suffix(u, lead),)

    return _out(a.data.sum(axis=axes), (a,), vjp)


def _expand_suffix(a: Tensor, lead: tuple) -> Tensor:
    shape = tuple(lead) + a.shape
    keep = a.ndim

    def vjp(u: Tensor):
        return (sum_leading(u, keep=keep),)

    return _out(np.broadcast_to(a.data, shape).copy(), (a,), vjp)


# -- pointwise nonlinearities -------------------------------------------------


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    out = _out(data, (a,), None)
    if out.requires_grad:

        def vjp(u: Tensor):
            return (mul(u, out),)

        out.vjp = vjp
    return out


def log(a: Tensor) -> Tensor:
    def vjp(u: Tensor):
        return (div(u, a),)

    return _out(np.log(a.data), (a,), vjp)


def powc(a: Tensor, c: float) -> Tensor:
    """Raise to a constant exponent."""
    c = float(c)

    def vjp(u: Tensor):
        scale = constant(np.asarray(c, dtype=a.data.dtype))
        return (mul(u, mul(scale, powc(a, c - 1.0))),)

    return _out(np.power(a.data, c), (a,), vjp)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)
    out = _out(data, (a,), None)
    if out.requires_grad:
        one = constant(np.asarray(1.0, dtype=a.data.dtype))

        def vjp(u: Tensor):
            return (mul(u, sub(one, mul(out, out))),)

        out.vjp = vjp
    return out


def relu(a: Tensor) -> Tensor:
    mask = (a.data > 0).astype(a.data.dtype)

    def vjp(u: Tensor):
        return (mul(u, constant(mask)),)

    return _out(np.maximum(a.data, 0), (a,), vjp)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-form gelu: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    dt = a.data.dtype
    c = constant(np.asarray(_GELU_C, dtype=dt))
    k = constant(np.asarray(0.044715, dtype=dt))
    half = constant(np.asarray(0.5, dtype=dt))
    one = constant(np.asarray(1.0, dtype=dt))
    inner = mul(c, add(a, mul(k, mul(a, mul(a, a)))))
    return mul(half, mul(a, add(one, tanh(inner))))


def softmax_last(a: Tensor) -> Tensor:
    """Softmax over the last axis (max-shifted for stability)."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=-1, keepdims=True)
    out = _out(data, (a,), None)
    if out.requires_grad:

        def vjp(u: Tensor):
            return (mul(out, sub(u, sum_last(mul(u, out)))),)

        out.vjp = vjp
    return out


def cross_entropy_logits(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy between softmax(logits) and integer labels.

    Fused with log-sum-exp so large logits stay finite. Labels are a plain
    integer array, not a graph node.
    """
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_logits: logits must be (B, C), got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy_logits: labels must be (B,)")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= logits.shape[1]:
        raise ShapeError("cross_entropy_logits: label out of range")
    b, c = logits.shape
    z = logits.data
    m = z.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=-1))
    picked = z[np.arange(b), labels]
    data = np.asarray((lse - picked).mean(), dtype=z.dtype)

    onehot = np.zeros((b, c), dtype=z.dtype)
    onehot[np.arange(b), labels] = 1.0

    def vjp(u: Tensor):
        p = softmax_last(logits)
        delta = sub(p, constant(onehot))
        scale = constant(np.asarray(1.0 / b, dtype=z.dtype))
        return (mul(delta, mul(u, scale)),)

    return _out(data, (logits,), vjp)


# -- gather / scatter ---------------------------------------------------------


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Select rows of ``table`` (V, d) by an integer id array."""
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError("embedding_lookup: table must be 2-D")
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= table.shape[0]:
        raise ShapeError("embedding_lookup: id out of range")
    vocab = table.shape[0]

    def vjp(u: Tensor):
        return (embedding_scatter(u, ids, vocab),)

    return _out(table.data[ids], (table,), vjp)


def embedding_scatter(u: Tensor, ids, vocab: int) -> Tensor:
    """Adjoint of lookup: sum rows of ``u`` (..., d) into a (vocab, d) table."""
    ids = np.asarray(ids)
    if u.shape[:-1] != ids.shape:
        raise ShapeError(f"embedding_scatter: rows {u.shape[:-1]} vs ids {ids.shape}")
    d = u.shape[-1]
    data = np.zeros((vocab, d), dtype=u.data.dtype)
    np.add.at(data, ids.ravel(), u.data.reshape(-1, d))

    def vjp(g: Tensor):
        return (embedding_lookup(g, ids),)

    return _out(data, (u,), vjp)


def select_token(a: Tensor, index: int) -> Tensor:
    """Pick one sequence position: (B, n, d) -> (B, d)."""
    if a.ndim != 3:
        raise ShapeError("select_token expects (B, n, d)")
    n = a.shape[1]
    if not 0 <= index < n:
        raise ShapeError(f"select_token: index {index} out of range {n}")

    def vjp(u: Tensor):
        return (_scatter_token(u, index, n),)

    return _out(np.ascontiguousarray(a.data[:, index, :]), (a,), vjp)


def _scatter_token(u: Tensor, index: int, n: int) -> Tensor:
    b, d = u.shape
    data = np.zeros((b, n, d), dtype=u.data.dtype)
    data[:, index, :] = u.data

    def vjp(g: Tensor):
        return (select_token(g, index),)

    return _out(data, (u,), vjp)


# -- reverse-mode driver ------------------------------------------------------


def _topo(output: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, emitted = stack.pop()
        if emitted:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    return order


def grad(output: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar ``output`` w.r.t. each tensor in ``wrt``.

    With ``create_graph=True`` the returned gradients are themselves
    differentiable graph nodes (needed for Hessian-vector products).
    """
    if output.shape != ():
        raise ShapeError(f"grad: output must be scalar, got {output.shape}")
    order = _topo(output)
    grads: dict[int, Tensor] = {id(output): constant(np.ones((), dtype=output.data.dtype))}
    if not output.requires_grad:
        order = []
    with _GradMode(create_graph):
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node.vjp is None:
                continue
            parts = node.vjp(g)
            for parent, pg in zip(node.parents, parts):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else add(prev, pg)
    out = []
    for w in wrt:
        g = grads.get(id(w))
        if g is None:
            g = Tensor(np.zeros_like(w.data))
        out.append(g)
    return out


# -- graph wrapper ------------------------------------------------------------


class Graph:
    """A parameterized scalar loss: named parameter leaves plus a loss function.

    ``loss_fn(params, inputs, labels) -> Tensor`` must rebuild the compute
    graph from the live parameter tensors on every call. ``groups`` names
    disjoint parameter blocks (layers) that Hessian probes address.
    """

    def __init__(
        self,
        params: Mapping[str, Tensor],
        groups: Mapping[str, Sequence[str]],
        loss_fn: Callable,
    ):
        self.params: dict[str, Tensor] = dict(params)
        self.groups: dict[str, list[str]] = {k: list(v) for k, v in groups.items()}
        for gname, names in self.groups.items():
            for n in names:
                if n not in self.params:
                    raise KeyError(f"group {gname!r} references unknown param {n!r}")
        self._loss_fn = loss_fn

    def loss(self, inputs, labels) -> Tensor:
        return self._loss_fn(self.params, inputs, labels)

    # -- group addressing --
    def group_names(self) -> list[str]:
        return list(self.groups)

    def group_params(self, group: str) -> list[Tensor]:
        if group not in self.groups:
            raise KeyError(f"unknown group {group!r}")
        return [self.params[n] for n in self.groups[group]]

    def group_size(self, group: str) -> int:
        return sum(p.size for p in self.group_params(group))

    def get_flat(self, group: str) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.group_params(group)])

    def set_flat(self, group: str, vec: np.ndarray) -> None:
        vec = np.asarray(vec)
        if vec.shape != (self.group_size(group),):
            raise ShapeError(f"set_flat: need {(self.group_size(group),)}, got {vec.shape}")
        off = 0
        for p in self.group_params(group):
            chunk = vec[off : off + p.size].reshape(p.shape).astype(p.data.dtype)
            p.data[...] = chunk
            off += p.size

    def clone(self) -> "Graph":
        params = {}
        for name, p in self.params.items():
            q = Tensor(p.data.copy())
            q.requires_grad = p.requires_grad
            params[name] = q
        return Graph(params, self.groups, self._loss_fn)

    def astype(self, dtype) -> "Graph":
        dtype = np.dtype(dtype)
        params = {}
        for name, p in self.params.items():
            q = Tensor(p.data.astype(dtype))
            q.requires_grad = p.requires_grad
            params[name] = q
        return Graph(params, self.groups, self._loss_fn)


def forward(graph, inputs, labels) -> tuple[float, Tensor]:
    """Evaluate the loss; returns (value, loss node) for reuse by backward."""
    node = graph.loss(inputs, labels)
    if node.shape != ():
        raise ShapeError("loss must be scalar")
    return float(node.data), node


def backward(graph, loss_node: Tensor) -> dict[str, np.ndarray]:
    """Gradient arrays for every trainable parameter of ``graph``."""
    names = [n for n, p in graph.params.items() if p.requires_grad]
    gs = grad(loss_node, [graph.params[n] for n in names])
    return {n: g.data for n, g in zip(names, gs)}


def hvp(graph, batch, layer: str, v: np.ndarray) -> np.ndarray:
    """Exact layer-restricted Hessian-vector product.

    ``batch`` is (inputs, labels); ``v`` is flattened to the layer's
    parameter block (concatenated in group order, row-major per tensor).
    Both differentiations pass through the same graph, so curvature from
    all downstream nonlinearities is included exactly.
    """
    inputs, labels = batch
    params = graph.group_params(layer)
    sizes = [p.size for p in params]
    v = np.asarray(v)
    if v.shape != (sum(sizes),):
        raise ShapeError(f"hvp: v must have shape {(sum(sizes),)}, got {v.shape}")
    loss_node = graph.loss(inputs, labels)
    gs = grad(loss_node, params, create_graph=True)
    s = None
    off = 0
    for g, p, n in zip(gs, params, sizes):
        piece = constant(v[off : off + n].reshape(p.shape).astype(p.data.dtype))
        term = sum_all(mul(g, piece))
        s = term if s is None else add(s, term)
        off += n
    hs = grad(s, params)
    return np.concatenate([h.data.ravel() for h in hs])
