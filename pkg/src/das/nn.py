"""Building blocks: LSTM cell, additive attention, two-layer perceptron, embedding.

All functions accept either single vectors (``[D]``) or a leading batch axis
(``[B, D]``); attention inputs are ``[N, D]`` or ``[B, N, D]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

INIT_SCALE = 0.08


def _uniform(rng: np.random.Generator, shape, name: str) -> Tensor:
    return Tensor(rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape), requires_grad=True, name=name)


def _zeros(shape, name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


@dataclass
class LstmParams:
    """``W`` is ``[4H, Z+H]`` with gate blocks stacked (i, f, o, g) top to bottom."""

    W: Tensor
    b: Tensor

    @property
    def hidden(self) -> int:
        return self.W.shape[0] // 4

    @property
    def context(self) -> int:
        return self.W.shape[1] - self.hidden

    @classmethod
    def init(cls, rng, context: int, hidden: int, prefix: str = "lstm") -> "LstmParams":
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0  # forget gate
        return cls(
            W=_uniform(rng, (4 * hidden, context + hidden), f"{prefix}.W"),
            b=Tensor(b, requires_grad=True, name=f"{prefix}.b"),
        )

    def tensors(self) -> dict[str, Tensor]:
        return {"W": self.W, "b": self.b}


@dataclass
class AttentionParams:
    """Additive scorer ``v . tanh(Wx x + Wh h + b)``.

    The output-layer bias is left out: softmax is shift invariant, so it
    would never receive a gradient.
    """

    Wx: Tensor
    Wh: Tensor
    b: Tensor
    v: Tensor

    @classmethod
    def init(cls, rng, feat_dim: int, hidden: int, width: int, prefix: str = "att") -> "AttentionParams":
        return cls(
            Wx=_uniform(rng, (feat_dim, width), f"{prefix}.Wx"),
            Wh=_uniform(rng, (hidden, width), f"{prefix}.Wh"),
            b=_zeros((width,), f"{prefix}.b"),
            v=_uniform(rng, (width, 1), f"{prefix}.v"),
        )

    def tensors(self) -> dict[str, Tensor]:
        return {"Wx": self.Wx, "Wh": self.Wh, "b": self.b, "v": self.v}


@dataclass
class Mlp2Params:
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, rng, in_dim: int, width: int, out_dim: int, prefix: str = "mlp") -> "Mlp2Params":
        return cls(
            W1=_uniform(rng, (in_dim, width), f"{prefix}.W1"),
            b1=_zeros((width,), f"{prefix}.b1"),
            W2=_uniform(rng, (width, out_dim), f"{prefix}.W2"),
            b2=_zeros((out_dim,), f"{prefix}.b2"),
        )

    def tensors(self) -> dict[str, Tensor]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}


def lstm_cell_step(z: Tensor, h_prev: Tensor, c_prev: Tensor, p: LstmParams) -> tuple[Tensor, Tensor]:
    """One LSTM step, recorded as a single tape op (output ``[h; c]`` then split)."""
    H = p.hidden
    if z.shape[-1] != p.context or h_prev.shape[-1] != H or c_prev.shape[-1] != H:
        raise ShapeError(
            f"lstm_cell_step: context {z.shape} / hidden {h_prev.shape} / cell {c_prev.shape} "
            f"do not fit U_LSTM {p.W.shape}"
        )
    W, b = p.W.data, p.b.data
    x = np.concatenate([z.data, h_prev.data], axis=-1)
    gates = x @ W.T + b
    ifo = 0.5 * np.tanh(0.5 * gates[..., : 3 * H]) + 0.5
    i, f, o = ifo[..., :H], ifo[..., H:2 * H], ifo[..., 2 * H:]
    g = np.tanh(gates[..., 3 * H:])
    c = f * c_prev.data + i * g
    tc = np.tanh(c)
    h = o * tc

    def backward(grad):
        gh, gc = grad[..., :H], grad[..., H:]
        gc = gc + gh * o * (1.0 - tc * tc)
        dgates = np.concatenate([
            gc * g * i * (1.0 - i),
            gc * c_prev.data * f * (1.0 - f),
            gh * tc * o * (1.0 - o),
            gc * i * (1.0 - g * g),
        ], axis=-1)
        dx = dgates @ W
        flat = dgates.reshape(-1, 4 * H)
        dW = flat.T @ x.reshape(-1, x.shape[-1])
        db = flat.sum(axis=0)
        return dx[..., : z.shape[-1]], dx[..., z.shape[-1]:], gc * f, dW, db

    hc = T.custom_op(np.concatenate([h, c], axis=-1), (z, h_prev, c_prev, p.W, p.b), backward)
    h_t, c_t = T.split_last(hc, (H, H))
    return h_t, c_t


def project_keys(X: Tensor, p: AttentionParams) -> Tensor:
    """Feature half of the attention scorer (bias included); reusable across time steps."""
    if X.shape[-1] != p.Wx.shape[0]:
        raise ShapeError(f"attention features {X.shape} do not fit scorer input {p.Wx.shape}")
    return X @ p.Wx + p.b


def attend(X: Tensor, h_prev: Tensor, p: AttentionParams, mask=None, keys: Tensor | None = None):
    """Soft attention: returns ``(context, weights)``.

    ``weights`` is the masked softmax of the per-feature scores and
    ``context`` the weighted sum of the rows of ``X``.  Everything after the
    key projection is one tape op.
    """
    if X.ndim < 2 or X.shape[-2] == 0:
        raise ValueError("attend: empty feature set")
    if keys is None:
        keys = project_keys(X, p)
    N, D = X.shape[-2], X.shape[-1]
    Wh, v = p.Wh.data, p.v.data
    q = h_prev.data @ Wh
    u = np.tanh(keys.data + q[..., None, :])
    s = (u @ v)[..., 0]
    m = None
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), s.shape)
        if not m.any(axis=-1).all():
            raise ValueError("attend: every position is masked")
        s = np.where(m, s, -np.inf)
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    a = e / e.sum(axis=-1, keepdims=True)
    ctx = (a[..., None] * X.data).sum(axis=-2)

    def backward(grad):
        gctx, ga = grad[..., :D], grad[..., D:]
        gX = a[..., None] * gctx[..., None, :]
        ga = ga + (X.data * gctx[..., None, :]).sum(axis=-1)
        gs = a * (ga - (a * ga).sum(axis=-1, keepdims=True))
        gpre = gs[..., None] * v[:, 0] * (1.0 - u * u)
        gv = (u * gs[..., None]).reshape(-1, u.shape[-1]).sum(axis=0)[:, None]
        gq = gpre.sum(axis=-2)
        gh = gq @ Wh.T
        gWh = h_prev.data.reshape(-1, Wh.shape[0]).T @ gq.reshape(-1, Wh.shape[1])
        return gX, gpre, gh, gWh, gv

    out = T.custom_op(np.concatenate([ctx, a], axis=-1), (X, keys, h_prev, p.Wh, p.v), backward)
    ctx_t, weights = T.split_last(out, (D, N))
    return ctx_t, weights


def mlp2(inputs, p: Mlp2Params) -> Tensor:
    """Two fully connected layers, tanh between them, linear output (one tape op)."""
    parts = list(inputs) if isinstance(inputs, (list, tuple)) else [inputs]
    widths = [t.shape[-1] for t in parts]
    W1, b1, W2, b2 = p.W1.data, p.b1.data, p.W2.data, p.b2.data
    if sum(widths) != W1.shape[0]:
        raise ShapeError(f"mlp2: input width {sum(widths)} != first layer width {W1.shape[0]}")
    x = np.concatenate([t.data for t in parts], axis=-1) if len(parts) > 1 else parts[0].data
    a = np.tanh(x @ W1 + b1)

    def backward(g):
        da = (g @ W2.T) * (1.0 - a * a)
        dx = da @ W1.T
        gW2 = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        gW1 = x.reshape(-1, x.shape[-1]).T @ da.reshape(-1, da.shape[-1])
        cuts = np.cumsum(widths)[:-1]
        return (*np.split(dx, cuts, axis=-1), gW1, da.reshape(-1, da.shape[-1]).sum(0),
                gW2, g.reshape(-1, g.shape[-1]).sum(0))

    return T.custom_op(a @ W2 + b2, (*parts, p.W1, p.b1, p.W2, p.b2), backward)


def embed(ids, table: Tensor) -> Tensor:
    """Embedding rows for ``ids`` (an int or an int array)."""
    return T.take_rows(table, ids)
