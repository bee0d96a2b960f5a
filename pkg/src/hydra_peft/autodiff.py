"""Tape-based reverse-mode differentiation over 2-D float64 arrays.

Every op evaluates eagerly and appends a :class:`Node` to the tape, so parents
always precede children and the backward pass is a single reverse sweep.
Leaves created with ``requires_grad=False`` (frozen weights, data) never get a
gradient; nothing downstream of only-frozen leaves does either.

Batched sequences are flattened to ``(batch * seq_len, features)``;
``seq_matmul_nt`` / ``seq_matmul`` do the per-sequence products attention needs
without leaving two dimensions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from hydra_peft.errors import ContractError, ShapeError
from hydra_peft.linalg import Rng

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715
LAYERNORM_EPS = 1e-5


@dataclass(eq=False)
class Node:
    id: int
    value: np.ndarray
    op: str
    parents: tuple[int, ...]
    requires_grad: bool
    attrs: dict = field(default_factory=dict, repr=False)
    ctx: dict = field(default_factory=dict, repr=False)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


# op name -> (forward(values, attrs) -> (value, ctx), backward(g, values, value, ctx, attrs) -> grads)
_OPS: dict[str, tuple[Callable, Callable]] = {}


def _op(name):
    def register(pair):
        _OPS[name] = pair()
        return pair

    return register


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


@_op("matmul")
def _matmul():
    def fwd(vals, attrs):
        a, b = vals
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
        return a @ b, {}

    def bwd(g, vals, out, ctx, attrs, needs):
        a, b = vals
        return (g @ b.T if needs[0] else None), (a.T @ g if needs[1] else None)

    return fwd, bwd


@_op("matmul_nt")
def _matmul_nt():
    def fwd(vals, attrs):
        a, b = vals
        if a.shape[1] != b.shape[1]:
            raise ShapeError(f"matmul_nt: cannot multiply {a.shape} by transpose of {b.shape}")
        return a @ b.T, {}

    def bwd(g, vals, out, ctx, attrs, needs):
        a, b = vals
        return (g @ b if needs[0] else None), (g.T @ a if needs[1] else None)

    return fwd, bwd


@_op("add")
def _add():
    def fwd(vals, attrs):
        _same_shape("add", *vals)
        return vals[0] + vals[1], {}

    def bwd(g, vals, out, ctx, attrs, needs):
        return g, g

    return fwd, bwd


@_op("add_bias_rowwise")
def _add_bias():
    def fwd(vals, attrs):
        x, b = vals
        if b.shape != (1, x.shape[1]):
            raise ShapeError(f"add_bias_rowwise: bias {b.shape} does not fit rows of {x.shape}")
        return x + b, {}

    def bwd(g, vals, out, ctx, attrs, needs):
        return g, g.sum(axis=0, keepdims=True)

    return fwd, bwd


@_op("relu")
def _relu():
    def fwd(vals, attrs):
        return np.maximum(vals[0], 0.0), {}

    def bwd(g, vals, out, ctx, attrs, needs):
        return (g * (vals[0] > 0),)

    return fwd, bwd


@_op("gelu")
def _gelu():
    # tanh approximation
    def fwd(vals, attrs):
        x = vals[0]
        t = np.tanh(GELU_C * (x + GELU_A * (x * x * x)))
        return 0.5 * x * (1.0 + t), {"t": t}

    def bwd(g, vals, out, ctx, attrs, needs):
        x, t = vals[0], ctx["t"]
        x2 = x * x
        dinner = (GELU_C * 3.0 * GELU_A) * x2 + GELU_C
        return (g * (0.5 * (1.0 + t) + (0.5 * x) * (1.0 - t * t) * dinner),)

    return fwd, bwd


@_op("softmax_rows")
def _softmax():
    def fwd(vals, attrs):
        x = vals[0]
        e = np.exp(x - x.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True), {}

    def bwd(g, vals, out, ctx, attrs, needs):
        return (out * (g - np.sum(g * out, axis=1, keepdims=True)),)

    return fwd, bwd


@_op("layernorm_rows")
def _layernorm():
    def fwd(vals, attrs):
        x = vals[0]
        mu = x.mean(axis=1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt(np.mean(xc * xc, axis=1, keepdims=True) + attrs["eps"])
        xhat = xc * inv
        out = xhat
        if len(vals) == 3:
            gain, bias = vals[1], vals[2]
            if gain.shape != (1, x.shape[1]) or bias.shape != (1, x.shape[1]):
                raise ShapeError(f"layernorm_rows: affine params {gain.shape}/{bias.shape} vs input {x.shape}")
            out = xhat * gain + bias
        return out, {"xhat": xhat, "inv": inv}

    def bwd(g, vals, out, ctx, attrs, needs):
        xhat, inv = ctx["xhat"], ctx["inv"]
        dxhat = g * vals[1] if len(vals) == 3 else g
        dx = inv * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * np.mean(dxhat * xhat, axis=1, keepdims=True)
        )
        if len(vals) == 3:
            if not (needs[1] or needs[2]):
                return dx, None, None
            return dx, np.sum(g * xhat, axis=0, keepdims=True), g.sum(axis=0, keepdims=True)
        return (dx,)

    return fwd, bwd


@_op("scale")
def _scale():
    def fwd(vals, attrs):
        return vals[0] * attrs["factor"], {}

    def bwd(g, vals, out, ctx, attrs, needs):
        return (g * attrs["factor"],)

    return fwd, bwd


@_op("dropout")
def _dropout():
    def fwd(vals, attrs):
        return vals[0] * attrs["mask"], {}

    def bwd(g, vals, out, ctx, attrs, needs):
        return (g * attrs["mask"],)

    return fwd, bwd


@_op("cross_entropy_mean")
def _cross_entropy():
    # fused log-softmax + NLL; labels live in attrs
    def fwd(vals, attrs):
        logits = vals[0]
        labels = attrs["labels"]
        if labels.shape != (logits.shape[0],):
            raise ShapeError(f"cross_entropy_mean: {labels.shape[0]} labels for {logits.shape[0]} rows")
        if labels.min(initial=0) < 0 or labels.max(initial=0) >= logits.shape[1]:
            raise ContractError("cross_entropy_mean: label out of range")
        shifted = logits - logits.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        logp = shifted - logz
        loss = -logp[np.arange(len(labels)), labels].mean()
        return np.array([[loss]]), {"p": np.exp(logp)}

    def bwd(g, vals, out, ctx, attrs, needs):
        labels = attrs["labels"]
        d = ctx["p"].copy()
        d[np.arange(len(labels)), labels] -= 1.0
        return (g[0, 0] * d / len(labels),)

    return fwd, bwd


@_op("mean")
def _mean():
    def fwd(vals, attrs):
        return np.array([[vals[0].mean()]]), {}

    def bwd(g, vals, out, ctx, attrs, needs):
        x = vals[0]
        return (np.full(x.shape, g[0, 0] / x.size),)

    return fwd, bwd


@_op("select_rows")
def _select_rows():
    def fwd(vals, attrs):
        x = vals[0]
        idx = attrs["index"]
        if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
            raise ContractError(f"select_rows: index out of range for {x.shape[0]} rows")
        return x[idx], {}

    def bwd(g, vals, out, ctx, attrs, needs):
        dx = np.zeros_like(vals[0])
        np.add.at(dx, attrs["index"], g)
        return (dx,)

    return fwd, bwd


@_op("slice_cols")
def _slice_cols():
    def fwd(vals, attrs):
        return vals[0][:, attrs["start"] : attrs["stop"]].copy(), {}

    def bwd(g, vals, out, ctx, attrs, needs):
        dx = np.zeros_like(vals[0])
        dx[:, attrs["start"] : attrs["stop"]] = g
        return (dx,)

    return fwd, bwd


@_op("concat_cols")
def _concat_cols():
    def fwd(vals, attrs):
        rows = {v.shape[0] for v in vals}
        if len(rows) != 1:
            raise ShapeError(f"concat_cols: row counts differ {[v.shape for v in vals]}")
        return np.concatenate(vals, axis=1), {}

    def bwd(g, vals, out, ctx, attrs, needs):
        edges = np.cumsum([v.shape[1] for v in vals])[:-1]
        return tuple(np.split(g, edges, axis=1))

    return fwd, bwd


def _blocks(x, seq_len):
    if x.shape[0] % seq_len:
        raise ShapeError(f"{x.shape[0]} rows is not a multiple of seq_len={seq_len}")
    return x.reshape(x.shape[0] // seq_len, seq_len, x.shape[1])


@_op("seq_matmul_nt")
def _seq_matmul_nt():
    # per-sequence q_b @ k_b.T, stacked to (batch*seq, seq)
    def fwd(vals, attrs):
        q, k = vals
        _same_shape("seq_matmul_nt", q, k)
        s = attrs["seq_len"]
        return (_blocks(q, s) @ _blocks(k, s).transpose(0, 2, 1)).reshape(q.shape[0], s), {}

    def bwd(g, vals, out, ctx, attrs, needs):
        q, k = vals
        s = attrs["seq_len"]
        gb, qb, kb = _blocks(g, s), _blocks(q, s), _blocks(k, s)
        dq = (gb @ kb).reshape(q.shape) if needs[0] else None
        dk = (gb.transpose(0, 2, 1) @ qb).reshape(k.shape) if needs[1] else None
        return dq, dk

    return fwd, bwd


@_op("seq_matmul")
def _seq_matmul():
    # per-sequence p_b @ v_b with p of shape (batch*seq, seq)
    def fwd(vals, attrs):
        p, v = vals
        s = attrs["seq_len"]
        if p.shape != (v.shape[0], s):
            raise ShapeError(f"seq_matmul: weights {p.shape} incompatible with values {v.shape}")
        return (_blocks(p, s) @ _blocks(v, s)).reshape(v.shape), {}

    def bwd(g, vals, out, ctx, attrs, needs):
        p, v = vals
        s = attrs["seq_len"]
        gb, pb, vb = _blocks(g, s), _blocks(p, s), _blocks(v, s)
        dp = (gb @ vb.transpose(0, 2, 1)).reshape(p.shape) if needs[0] else None
        dv = (pb.transpose(0, 2, 1) @ gb).reshape(v.shape) if needs[1] else None
        return dp, dv

    return fwd, bwd


OPS = frozenset(_OPS)


class Tape:
    """Append-only record of evaluated nodes."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.grads: dict[int, np.ndarray] = {}

    def leaf(self, value, requires_grad: bool = False) -> Node:
        value = np.asarray(value, dtype=np.float64)
        if value.ndim == 1:
            value = value.reshape(1, -1)
        if value.ndim != 2:
            raise ShapeError(f"leaf values must be 1-D or 2-D, got {value.shape}")
        node = Node(len(self.nodes), value, "leaf", (), requires_grad)
        self.nodes.append(node)
        return node

    def record(self, op: str, inputs: list[Node], **attrs) -> Node:
        if op not in _OPS:
            raise ContractError(f"unknown op {op!r}")
        fwd, _ = _OPS[op]
        value, ctx = fwd([n.value for n in inputs], attrs)
        node = Node(
            len(self.nodes),
            value,
            op,
            tuple(n.id for n in inputs),
            any(n.requires_grad for n in inputs),
            attrs,
            ctx,
        )
        self.nodes.append(node)
        return node

    # Thin wrappers so model code reads naturally.
    def matmul(self, a, b):
        return self.record("matmul", [a, b])

    def matmul_nt(self, a, b):
        return self.record("matmul_nt", [a, b])

    def add(self, a, b):
        return self.record("add", [a, b])

    def add_bias_rowwise(self, x, b):
        return self.record("add_bias_rowwise", [x, b])

    def relu(self, x):
        return self.record("relu", [x])

    def gelu(self, x):
        return self.record("gelu", [x])

    def softmax_rows(self, x):
        return self.record("softmax_rows", [x])

    def layernorm_rows(self, x, gain=None, bias=None, eps: float = LAYERNORM_EPS):
        inputs = [x] if gain is None else [x, gain, bias]
        return self.record("layernorm_rows", inputs, eps=eps)

    def scale(self, x, factor: float):
        return self.record("scale", [x], factor=float(factor))

    def cross_entropy_mean(self, logits, labels):
        return self.record("cross_entropy_mean", [logits], labels=np.asarray(labels, dtype=np.int64))

    def mean(self, x):
        return self.record("mean", [x])

    def select_rows(self, x, index):
        return self.record("select_rows", [x], index=np.asarray(index, dtype=np.int64))

    def slice_cols(self, x, start: int, stop: int):
        return self.record("slice_cols", [x], start=start, stop=stop)

    def concat_cols(self, nodes):
        return self.record("concat_cols", list(nodes))

    def seq_matmul_nt(self, q, k, seq_len: int):
        return self.record("seq_matmul_nt", [q, k], seq_len=seq_len)

    def seq_matmul(self, p, v, seq_len: int):
        return self.record("seq_matmul", [p, v], seq_len=seq_len)

    def dropout(self, x: Node, p: float, rng: Rng | None, training: bool) -> Node:
        """Inverted dropout. Identity (and no RNG draw) when not training or p == 0."""
        if not 0.0 <= p < 1.0:
            raise ContractError(f"dropout: p must lie in [0, 1), got {p}")
        if not training or p == 0.0:
            return x
        keep = rng.uniform(x.value.size).reshape(x.shape) >= p
        return self.record("dropout", [x], mask=keep / (1.0 - p), p=p)

    def backward(self, loss: Node) -> dict[int, np.ndarray]:
        if loss.shape != (1, 1):
            raise ContractError(f"backward: loss must be 1x1, got {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.id: np.ones((1, 1))}
        for node in reversed(self.nodes[: loss.id + 1]):
            g = grads.get(node.id)
            if g is None or not node.parents:
                continue
            parents = [self.nodes[i] for i in node.parents]
            _, bwd = _OPS[node.op]
            needs = tuple(p.requires_grad for p in parents)
            pgrads = bwd(g, [p.value for p in parents], node.value, node.ctx, node.attrs, needs)
            for parent, pg in zip(parents, pgrads):
                if not parent.requires_grad:
                    continue
                if parent.id in grads:
                    grads[parent.id] = grads[parent.id] + pg
                else:
                    grads[parent.id] = pg
        if not loss.requires_grad:
            grads.pop(loss.id)
        self.grads = grads
        return grads
