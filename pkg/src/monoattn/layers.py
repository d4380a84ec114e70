"""Parameterized layers, the Adam optimizer and the token-level loss."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, _result
from .errors import (
    DimensionError,
    EmptySequenceError,
    IndexRangeError,
    UninitializedGradientError,
)

RESERVED_TOKENS = 4


def xavier(rng: np.random.Generator, out_dim: int, in_dim: int, name: str) -> Tensor:
    r = np.sqrt(6.0 / (in_dim + out_dim))
    return Tensor(rng.uniform(-r, r, size=(out_dim, in_dim)), requires_grad=True, name=name)


def zeros(shape, name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


@dataclass
class LinearParams:
    weight: Tensor  # [out x in]
    bias: Tensor  # [out]

    @classmethod
    def init(cls, rng, in_dim: int, out_dim: int, name: str) -> "LinearParams":
        return cls(xavier(rng, out_dim, in_dim, f"{name}.weight"), zeros(out_dim, f"{name}.bias"))

    def parameters(self) -> list:
        return [self.weight, self.bias]


def linear(p: LinearParams, x: Tensor) -> Tensor:
    """``W x + b`` for a vector, or row-wise ``X W^T + b`` for a matrix."""
    if x.ndim == 1:
        return ad.add(ad.matmul(p.weight, x), p.bias)
    return ad.add(ad.matmul_t(x, p.weight), p.bias)


@dataclass
class EmbeddingParams:
    table: Tensor  # [vocab x dim]

    @classmethod
    def init(cls, rng, vocab: int, dim: int, name: str) -> "EmbeddingParams":
        if vocab < RESERVED_TOKENS:
            raise ValueError(f"vocabulary of {vocab} cannot hold the {RESERVED_TOKENS} reserved tokens")
        return cls(Tensor(rng.uniform(-0.1, 0.1, size=(vocab, dim)), requires_grad=True, name=f"{name}.table"))

    def parameters(self) -> list:
        return [self.table]


def embed(p: EmbeddingParams, ids) -> Tensor:
    """Row lookup; an int gives a vector, a sequence of ids gives a matrix."""
    V = p.table.shape[0]
    for i in np.atleast_1d(ids):
        if not 0 <= int(i) < V:
            raise IndexRangeError(f"token id {int(i)} outside vocabulary of size {V}")
    return ad.take_rows(p.table, ids)


@dataclass
class LSTMCellParams:
    """Gate blocks are ordered (input, forget, cell, output)."""

    w_ih: Tensor  # [4h x in]
    w_hh: Tensor  # [4h x h]
    bias: Tensor  # [4h]

    @classmethod
    def init(cls, rng, in_dim: int, hidden: int, name: str) -> "LSTMCellParams":
        bias = np.zeros(4 * hidden)
        bias[hidden:2 * hidden] = 1.0
        return cls(
            xavier(rng, 4 * hidden, in_dim, f"{name}.w_ih"),
            xavier(rng, 4 * hidden, hidden, f"{name}.w_hh"),
            Tensor(bias, requires_grad=True, name=f"{name}.bias"),
        )

    @property
    def hidden(self) -> int:
        return self.w_hh.shape[1]

    @property
    def input_dim(self) -> int:
        return self.w_ih.shape[1]

    def parameters(self) -> list:
        return [self.w_ih, self.w_hh, self.bias]


def lstm_cell(gx: Tensor, hc_prev: Tensor, w_hh: Tensor) -> Tensor:
    """Fused LSTM cell on a packed state.

    ``gx`` is the input contribution to the gates (``W_ih x + b``, length 4h)
    and ``hc_prev`` is ``[h; c]``.  Returns the new packed ``[h; c]``.
    """
    h = w_hh.shape[1]
    if gx.shape != (4 * h,) or hc_prev.shape != (2 * h,):
        raise DimensionError(f"lstm_cell: gates {gx.shape} and state {hc_prev.shape} vs hidden {h}")
    W = w_hh.data
    hp = hc_prev.data[:h]
    cp = hc_prev.data[h:]
    z = gx.data + W @ hp
    s = ad._sigmoid(z)
    i, f, o = s[:h], s[h:2 * h], s[3 * h:]
    g = np.tanh(z[2 * h:3 * h])
    c = f * cp + i * g
    tc = np.tanh(c)

    def bw(grad):
        gh, gc = grad[:h], grad[h:]
        dc = gc + gh * o * (1.0 - tc * tc)
        dz = np.concatenate([
            dc * g * i * (1.0 - i),
            dc * cp * f * (1.0 - f),
            dc * i * (1.0 - g * g),
            gh * tc * o * (1.0 - o),
        ])
        return dz, np.concatenate([W.T @ dz, dc * f]), dz[:, None] * hp

    return _result(np.concatenate([o * tc, c]), (gx, hc_prev, w_hh), bw, "lstm_cell")


def lstm_step_packed(params: LSTMCellParams, x: Tensor, hc_prev: Tensor) -> Tensor:
    return lstm_cell(ad.add(ad.matmul(params.w_ih, x), params.bias), hc_prev, params.w_hh)


def lstm_step(params: LSTMCellParams, x: Tensor, h_prev: Tensor, c_prev: Tensor):
    """One LSTM step; returns ``(h, c)``."""
    h = params.hidden
    if x.shape != (params.input_dim,) or h_prev.shape != (h,) or c_prev.shape != (h,):
        raise DimensionError(
            f"lstm_step: x {x.shape}, h {h_prev.shape}, c {c_prev.shape} "
            f"vs cell in={params.input_dim} hidden={h}"
        )
    hc = lstm_step_packed(params, x, ad.concat([h_prev, c_prev]))
    return ad.slice_rows(hc, 0, h), ad.slice_rows(hc, h, 2 * h)


def lstm_sequence(proj: Tensor, w_hh: Tensor, reverse: bool = False) -> Tensor:
    """Fused LSTM over a whole sequence from a zero state.

    ``proj`` [S x 4h] holds the input contribution to the gates of every step.
    Returns the hidden states [S x h] in input order.
    """
    S = proj.shape[0]
    h = w_hh.shape[1]
    if proj.ndim != 2 or proj.shape[1] != 4 * h:
        raise DimensionError(f"lstm_sequence: gate inputs {proj.shape} vs hidden {h}")
    W = w_hh.data
    P = proj.data
    order = list(range(S - 1, -1, -1)) if reverse else list(range(S))
    act = np.empty((S, 4 * h))  # i, f, g, o after nonlinearity
    C = np.empty((S, h))
    TC = np.empty((S, h))
    Hs = np.empty((S, h))
    Hprev = np.zeros((S, h))
    Cprev = np.zeros((S, h))
    hp = np.zeros(h)
    cp = np.zeros(h)
    for t in order:
        z = P[t] + W @ hp
        a = ad._sigmoid(z)
        a[2 * h:3 * h] = np.tanh(z[2 * h:3 * h])
        c = a[h:2 * h] * cp + a[:h] * a[2 * h:3 * h]
        tc = np.tanh(c)
        Hprev[t], Cprev[t] = hp, cp
        hp = a[3 * h:] * tc
        cp = c
        act[t], C[t], TC[t], Hs[t] = a, c, tc, hp

    def bw(G):
        dZ = np.empty((S, 4 * h))
        dh_next = np.zeros(h)
        dc_next = np.zeros(h)
        for t in reversed(order):
            a = act[t]
            i, f, g, o = a[:h], a[h:2 * h], a[2 * h:3 * h], a[3 * h:]
            tc = TC[t]
            dh = G[t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz = dZ[t]
            dz[:h] = dc * g * i * (1.0 - i)
            dz[h:2 * h] = dc * Cprev[t] * f * (1.0 - f)
            dz[2 * h:3 * h] = dc * i * (1.0 - g * g)
            dz[3 * h:] = dh * tc * o * (1.0 - o)
            dh_next = W.T @ dz
            dc_next = dc * f
        return dZ, dZ.T @ Hprev

    return _result(Hs, (proj, w_hh), bw, "lstm_sequence")


def lstm_run(params: LSTMCellParams, x: Tensor, reverse: bool = False) -> Tensor:
    """Run a cell over the rows of ``x`` from a zero state; returns [S x h] in input order."""
    proj = ad.add(ad.matmul_t(x, params.w_ih), params.bias)
    return lstm_sequence(proj, params.w_hh, reverse)


def subsampled_length(S: int, n_subsample: int) -> int:
    for _ in range(n_subsample):
        S = (S + 1) // 2
    return S


def bilstm_encode(stack: Sequence, x: Tensor, subsample_layers: Iterable[int] = ()) -> Tensor:
    """Stacked bidirectional LSTM.

    ``stack`` holds one ``(forward, backward)`` cell pair per layer.  After each
    layer listed in ``subsample_layers`` every second frame is dropped
    (frames 0, 2, 4, ... survive).
    """
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptySequenceError(f"bilstm_encode needs a nonempty [S x d] input, got {x.shape}")
    sub = set(subsample_layers)
    bad = [i for i in sub if not 0 <= i < len(stack)]
    if bad:
        raise ValueError(f"subsample layer indices {bad} outside 0..{len(stack) - 1}")
    out = x
    for k, (fw, bw_cell) in enumerate(stack):
        out = ad.concat([lstm_run(fw, out), lstm_run(bw_cell, out, reverse=True)], axis=1)
        if k in sub and out.shape[0] > 1:
            out = ad.take_rows(out, np.arange(0, out.shape[0], 2))
    return out


def cross_entropy(logits: Tensor, target: int) -> Tensor:
    """``-log softmax(logits)[target]`` as a scalar tensor."""
    V = logits.shape[0]
    if not 0 <= target < V:
        raise IndexRangeError(f"target {target} outside vocabulary of size {V}")
    z = logits.data
    m = z.max()
    e = np.exp(z - m)
    s = e.sum()
    loss = np.log(s) + m - z[target]
    probs = e / s

    def bw(g):
        d = probs.copy()
        d[target] -= 1.0
        return (g * d,)

    return _result(np.asarray(loss), (logits,), bw, "cross_entropy")


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max()
    return z - m - np.log(np.exp(z - m).sum())


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(state: AdamState, params: Sequence[Tensor]) -> None:
    """In-place Adam update with bias correction. Gradients are left as they are."""
    for p in params:
        if p.grad is None:
            raise UninitializedGradientError(f"parameter {p.name or p.node_id} has no gradient")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_grad_norm(params: Sequence[Tensor], max_norm: Optional[float]) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``; returns the norm."""
    total = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None)))
    if max_norm is not None and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return total
