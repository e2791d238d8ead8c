"""Minimal dense reverse-mode differentiation core.

Just enough ops for GraphSAGE, MLP, and logistic-regression heads:
matmul, add (with row-vector broadcast), scalar scaling, ReLU, sigmoid,
sparse-neighborhood aggregation over a CSR similarity graph, weighted
binary cross-entropy, and Adam. Values are float64; the forward graph is
rebuilt on every pass and backward() walks it in reverse topological
order.

Aggregation exploits the symmetry of the adjacency pattern: the backward
scatter of mean/add/max is a gather over the transposed pattern, which
for a symmetric graph reuses the same CSR segments through a precomputed
mirror permutation (cached on the graph).
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, NumericError, ShapeError, StateError
from .simgraph import SimilarityGraph

CHECK_FINITE = False  # set True to trap NaN/Inf after every op

BCE_CLAMP = 1e-7

AGGREGATOR_KINDS = ("mean", "max", "add")


def set_debug_checks(enabled: bool) -> None:
    global CHECK_FINITE
    CHECK_FINITE = bool(enabled)


def _check_finite(value: np.ndarray, op: str) -> None:
    if CHECK_FINITE and not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite values produced by {op}")


class Tensor:
    """A dense float64 array plus the backward closure that produced it."""

    __slots__ = ("value", "grad", "_parents", "_backward_fn")

    def __init__(self, value, parents=(), backward_fn=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._parents = tuple(parents)
        self._backward_fn = backward_fn

    @property
    def shape(self):
        return self.value.shape

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        return self.grad

    def backward(self) -> None:
        if self._backward_fn is None and not self._parents:
            raise StateError("backward called on a leaf tensor; run a forward pass first")
        if self.value.ndim != 0:
            raise StateError(f"backward requires a scalar loss, got shape {self.value.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))
        self.ensure_grad()
        self.grad = np.ones_like(self.value)
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn(node)


class Parameter(Tensor):
    """Trainable tensor with Adam moment buffers."""

    __slots__ = ("m", "v", "step")

    def __init__(self, value):
        super().__init__(value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.step = 0


def backward(loss: Tensor) -> None:
    loss.backward()


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(
            f"matmul expects (n,k)@(k,m); got {a.value.shape} @ {b.value.shape}"
        )
    out_value = a.value @ b.value
    _check_finite(out_value, "matmul")

    def bwd(out):
        a.ensure_grad()
        b.ensure_grad()
        a.grad += out.grad @ b.value.T
        b.grad += a.value.T @ out.grad

    return Tensor(out_value, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; `b` may also be a row vector broadcast over rows."""
    bshape = b.value.shape
    if bshape == a.value.shape:
        broadcast = False
    elif a.value.ndim == 2 and bshape in ((a.value.shape[1],), (1, a.value.shape[1])):
        broadcast = True
    else:
        raise ShapeError(f"add shapes do not conform: {a.value.shape} + {bshape}")
    out_value = a.value + b.value
    _check_finite(out_value, "add")

    def bwd(out):
        a.ensure_grad()
        b.ensure_grad()
        a.grad += out.grad
        if broadcast:
            b.grad += out.grad.sum(axis=0).reshape(bshape)
        else:
            b.grad += out.grad

    return Tensor(out_value, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    out_value = a.value * c
    _check_finite(out_value, "scale")

    def bwd(out):
        a.ensure_grad()
        a.grad += out.grad * c

    return Tensor(out_value, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    out_value = np.maximum(a.value, 0.0)

    def bwd(out):
        a.ensure_grad()
        a.grad += out.grad * (a.value > 0)

    return Tensor(out_value, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    z = a.value
    out_value = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                         np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    _check_finite(out_value, "sigmoid")

    def bwd(out):
        a.ensure_grad()
        a.grad += out.grad * out_value * (1.0 - out_value)

    return Tensor(out_value, (a,), bwd)


def _graph_arrays(g: SimilarityGraph):
    cached = g._agg_cache.get("neuro")
    if cached is not None:
        return cached
    degs = np.diff(g.indptr)
    if np.any(degs <= 0):
        raise ConfigError("aggregate requires every node to have a neighbor (self-loop)")
    rows = np.repeat(np.arange(g.n_nodes, dtype=np.int64), degs)
    mirror = np.lexsort((rows, g.indices))
    if not (
        np.array_equal(g.indices[mirror], rows)
        and np.array_equal(rows[mirror], g.indices)
    ):
        raise ConfigError("aggregate requires a symmetric adjacency pattern")
    cached = (degs, rows, mirror, g.indptr[:-1])
    g._agg_cache["neuro"] = cached
    return cached


def aggregate(h: Tensor, g: SimilarityGraph, kind: str) -> Tensor:
    """Per-node elementwise mean/max/sum of h over the node's neighbor set
    (which includes the node itself via its self-loop)."""
    if kind not in AGGREGATOR_KINDS:
        raise ConfigError(f"unknown aggregator {kind!r}; expected one of {AGGREGATOR_KINDS}")
    if h.value.ndim != 2 or h.value.shape[0] != g.n_nodes:
        raise ShapeError(
            f"aggregate expects ({g.n_nodes}, d) features, got {h.value.shape}"
        )
    degs, rows, mirror, starts = _graph_arrays(g)
    gathered = h.value[g.indices]

    if kind == "max":
        out_value = np.maximum.reduceat(gathered, starts, axis=0)
        rep_max = out_value[rows]
        is_max = gathered == rep_max
        cum = np.cumsum(is_max, axis=0)
        prior = np.zeros((g.n_nodes, h.value.shape[1]))
        prior[1:] = cum[starts[1:] - 1]
        first = is_max & ((cum - prior[rows]) == 1)

        def bwd_max(out):
            h.ensure_grad()
            entry_grads = out.grad[rows] * first
            h.grad += np.add.reduceat(entry_grads[mirror], starts, axis=0)

        return Tensor(out_value, (h,), bwd_max)

    sums = np.add.reduceat(gathered, starts, axis=0)
    if kind == "mean":
        out_value = sums / degs[:, None]

        def bwd_mean(out):
            h.ensure_grad()
            entry_grads = (out.grad / degs[:, None])[rows]
            h.grad += np.add.reduceat(entry_grads[mirror], starts, axis=0)

        return Tensor(out_value, (h,), bwd_mean)

    def bwd_add(out):
        h.ensure_grad()
        entry_grads = out.grad[rows]
        h.grad += np.add.reduceat(entry_grads[mirror], starts, axis=0)

    return Tensor(sums, (h,), bwd_add)


def sage_layer(
    h: Tensor,
    g: SimilarityGraph,
    w_self: Tensor,
    w_neigh: Tensor,
    bias: Tensor,
    kind: str,
    activation: bool = True,
) -> Tensor:
    """out = ReLU(h @ w_self + aggregate(h) @ w_neigh + bias); the final
    layer of a network passes activation=False.

    mean/add commute with the projection, so the neighbor term aggregates
    the projected features; that keeps the per-edge work at the output
    width instead of the input width. max does not commute and keeps the
    aggregate-first order.
    """
    if kind == "max":
        neigh = matmul(aggregate(h, g, kind), w_neigh)
    else:
        neigh = aggregate(matmul(h, w_neigh), g, kind)
    combined = add(add(matmul(h, w_self), neigh), bias)
    return relu(combined) if activation else combined


def weighted_bce(
    p: Tensor,
    y: np.ndarray,
    w_pos: float,
    w_neg: float,
    mask: np.ndarray,
) -> Tensor:
    """Class-weighted binary cross-entropy averaged over masked rows.
    Probabilities are clamped to [1e-7, 1 - 1e-7]."""
    pv = p.value.reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if pv.shape != y.shape or pv.shape != mask.shape:
        raise ShapeError(
            f"weighted_bce shapes: p {pv.shape}, y {y.shape}, mask {mask.shape}"
        )
    m = int(mask.sum())
    if m == 0:
        raise ConfigError("weighted_bce mask selects no rows")
    pc = np.clip(pv, BCE_CLAMP, 1.0 - BCE_CLAMP)
    terms = w_pos * y * np.log(pc) + w_neg * (1.0 - y) * np.log(1.0 - pc)
    out_value = -terms[mask].sum() / m
    _check_finite(out_value, "weighted_bce")

    def bwd(out):
        p.ensure_grad()
        inside = (pv > BCE_CLAMP) & (pv < 1.0 - BCE_CLAMP)
        dp = np.zeros_like(pv)
        active = mask & inside
        dp[active] = -(
            w_pos * y[active] / pc[active] - w_neg * (1.0 - y[active]) / (1.0 - pc[active])
        ) / m
        p.grad += (dp * float(out.grad)).reshape(p.value.shape)

    return Tensor(out_value, (p,), bwd)


def class_weights(y: np.ndarray, mask: np.ndarray) -> tuple[float, float]:
    """w_c = N / (2 * N_c) over the masked rows."""
    y = np.asarray(y).reshape(-1)
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    n = int(mask.sum())
    n_pos = int(np.sum(y[mask] > 0))
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ConfigError("class_weights requires both classes in the mask")
    return n / (2.0 * n_pos), n / (2.0 * n_neg)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def adam_step(
    params: list[Parameter],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Standard Adam with bias correction; gradients are zeroed afterwards."""
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    for p in params:
        grad = p.grad if p.grad is not None else np.zeros_like(p.value)
        p.step += 1
        p.m = beta1 * p.m + (1.0 - beta1) * grad
        p.v = beta2 * p.v + (1.0 - beta2) * grad * grad
        m_hat = p.m / (1.0 - beta1**p.step)
        v_hat = p.v / (1.0 - beta2**p.step)
        p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + eps)
        _check_finite(p.value, "adam_step")
        p.grad = None


def zero_grads(params: list[Parameter]) -> None:
    for p in params:
        p.grad = None
