"""Parameter storage and the dense / graph layers used by the actor and critic."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class ParamStore:
    """Named parameter tensors with same-shape gradient slots."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, shape, init: str = "xavier", value=None) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        if value is not None:
            data = np.asarray(value, dtype=float).reshape(shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "xavier":
            fan_in, fan_out = shape[0], shape[-1]
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            data = self.rng.uniform(-lim, lim, size=shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def grads(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, np.zeros_like(t.data) if t.grad is None else t.grad)
                           for k, t in self.params.items())

    def values(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data.copy()) for k, t in self.params.items())

    def load(self, values) -> None:
        for k, v in values.items():
            v = np.asarray(v, dtype=float)
            if v.shape != self.params[k].shape:
                raise ShapeError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = v.copy()

    def n_parameters(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))


# -- layer constructors and forwards ---------------------------------------

def add_dense(p: ParamStore, name: str, n_in: int, n_out: int) -> None:
    p.add(f"{name}.W", (n_in, n_out))
    p.add(f"{name}.b", (1, n_out), init="zeros")


def dense_forward(x, p: ParamStore, name: str) -> Tensor:
    W = p[f"{name}.W"]
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"{name}: input width {x.shape[-1]} != {W.shape[0]}")
    return T.matmul(x, W) + p[f"{name}.b"]


def add_gat(p: ParamStore, name: str, n_in: int, n_out: int) -> None:
    p.add(f"{name}.W", (n_in, n_out))
    p.add(f"{name}.a_src", (n_out, 1))
    p.add(f"{name}.a_dst", (n_out, 1))
    p.add(f"{name}.b_edge", (1, 1), init="zeros")


def gat_forward(h, m_norm: np.ndarray, p: ParamStore, name: str) -> Tensor:
    """Single-head attention over the complete graph.

    Logits mix both endpoint embeddings with the normalized edge travel time;
    each node's output is the attention-weighted sum of projected features.
    """
    h = T.as_tensor(h)
    n = h.shape[0]
    if m_norm.shape != (n, n):
        raise ShapeError(f"{name}: adjacency {m_norm.shape} vs {n} nodes")
    Wh = T.matmul(h, p[f"{name}.W"])
    src = T.matmul(Wh, p[f"{name}.a_src"])
    dst = T.matmul(Wh, p[f"{name}.a_dst"])
    logits = T.leaky_relu(src + dst.T + T.mul(p[f"{name}.b_edge"], m_norm))
    att = T.softmax_rows(logits)
    return T.matmul(att, Wh)


def attention_weights(h, m_norm, p: ParamStore, name: str) -> np.ndarray:
    with T.no_grad():
        Wh = T.matmul(T.as_tensor(h), p[f"{name}.W"])
        logits = T.leaky_relu(T.matmul(Wh, p[f"{name}.a_src"])
                              + T.matmul(Wh, p[f"{name}.a_dst"]).T
                              + T.mul(p[f"{name}.b_edge"], m_norm))
        return T.softmax_rows(logits).data


def normalized_adjacency(m_norm: np.ndarray, tau: float = 0.5) -> np.ndarray:
    """D^-1/2 (A_w + I) D^-1/2 with A_w = exp(-m / tau)."""
    a = np.exp(-np.asarray(m_norm, float) / tau) + np.eye(m_norm.shape[0])
    d = 1.0 / np.sqrt(a.sum(axis=1))
    return a * d[:, None] * d[None, :]


def add_gcn(p: ParamStore, name: str, width: int) -> None:
    p.add(f"{name}.W", (width, width))


def gcn_forward(h, a_hat: np.ndarray, p: ParamStore, name: str) -> Tensor:
    """relu(A_hat h W) + h."""
    h = T.as_tensor(h)
    W = p[f"{name}.W"]
    if W.shape[1] != h.shape[1] or W.shape[0] != h.shape[1]:
        raise ShapeError(f"{name}: skip connection needs width {W.shape} == {h.shape[1]}")
    return T.relu(T.matmul(T.matmul(a_hat, h), W)) + h


def sum_pool(h, mode: str = "per_node") -> Tensor:
    """``per_node``: [h_i | sum_{j != i} h_j]; ``global``: sum over nodes (1 x d)."""
    h = T.as_tensor(h)
    if mode == "global":
        return T.sum(h, axis=0, keepdims=True)
    if mode != "per_node":
        raise ValueError(f"unknown pooling mode {mode!r}")
    n = h.shape[0]
    others = np.ones((n, n)) - np.eye(n)
    return T.concat([h, T.matmul(others, h)], axis=1)
