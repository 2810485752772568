"""Cascaded attention decoder producing one output distribution per step.

Each step scores every encoder state against the previous decoder state
(additive attention), forms the context vector, updates a GRU decoder state
that also sees the context, and emits a softmax over the vocabulary from
the embedded previous prediction, the previous decoder state and the
context.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .layers import GruParams, embed, gru_step
from .tensor import DimensionError, Tensor, as_tensor


@dataclass
class AttentionParams:
    V_a: Tensor  # (d_a,)
    W_a: Tensor  # (d_s, d_a)
    U_a: Tensor  # (d_enc, d_a)

    @property
    def size(self) -> int:
        return self.V_a.shape[0]


@dataclass
class DecoderParams:
    attention: AttentionParams
    gru: GruParams
    W_o: Tensor  # (d_e, V)
    U_o: Tensor  # (d_s, V)
    C_o: Tensor  # (d_enc, V)
    E: Tensor    # (V, d_e)

    @property
    def vocab_size(self) -> int:
        return self.E.shape[0]

    @property
    def state_size(self) -> int:
        return self.gru.hidden


@dataclass
class DecoderTrace:
    alpha: np.ndarray            # (N, T_out, T_in) attention weights
    context: np.ndarray          # (N, T_out, d_enc)
    y: Tensor                    # (N, T_out, V) output distributions
    steps: list[Tensor] = field(default_factory=list, repr=False)


def _batch(x: Tensor, ndim: int) -> tuple[Tensor, bool]:
    if x.ndim == ndim - 1:
        return tn.reshape(x, (1,) + x.shape), True
    return x, False


def attention_weights(s_prev, h, p: AttentionParams, mask: np.ndarray | None = None,
                      h_proj: Tensor | None = None) -> Tensor:
    """alpha_j = softmax_j(V_a . tanh(s W_a + h_j U_a)).

    ``h`` is (T, d_enc) with ``s_prev`` (d_s,), or batched (N, T, d_enc) with
    (N, d_s). ``h_proj`` lets callers reuse ``h @ U_a`` across steps and
    ``mask`` (N, T) excludes padded frames.
    """
    s_prev, h = as_tensor(s_prev), as_tensor(h)
    h, single = _batch(h, 3)
    s_prev, _ = _batch(s_prev, 2)
    if s_prev.shape[-1] != p.W_a.shape[0] or h.shape[-1] != p.U_a.shape[0]:
        raise DimensionError(
            f"attention: state {s_prev.shape} / encoder {h.shape} do not fit W_a {p.W_a.shape}, U_a {p.U_a.shape}"
        )
    n, t, _ = h.shape
    if h_proj is None:
        h_proj = tn.linear(h, p.U_a)
    s_proj = tn.reshape(tn.linear(s_prev, p.W_a), (n, 1, p.size))
    energy = tn.linear(tn.tanh(tn.add(h_proj, s_proj)), tn.reshape(p.V_a, (p.size, 1)))
    alpha = tn.softmax(tn.reshape(energy, (n, t)), axis=-1, mask=mask)
    return tn.reshape(alpha, (t,)) if single else alpha


def context_vector(alpha, h) -> Tensor:
    """c = sum_k alpha_k h_k."""
    alpha, h = as_tensor(alpha), as_tensor(h)
    if alpha.shape[-1] != h.shape[-2]:
        raise DimensionError(f"context: {alpha.shape[-1]} weights for {h.shape[-2]} encoder states")
    if h.ndim == 2:
        return tn.reshape(tn.matmul(tn.reshape(alpha, (1, -1)), h), (h.shape[1],))
    n, t, d = h.shape
    return tn.reshape(tn.matmul(tn.reshape(alpha, (n, 1, t)), h), (n, d))


def decoder_step(s_prev, y_prev, h, params: DecoderParams, mask: np.ndarray | None = None,
                 h_proj: Tensor | None = None) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """One decoder step; returns (y_t, s_t, c_t, alpha_t).

    logits = (E y_prev) W_o + s_prev U_o + c_t C_o and y_t = softmax(logits);
    the new state is a context-aware GRU step on the embedded prediction.
    """
    alpha = attention_weights(s_prev, h, params.attention, mask=mask, h_proj=h_proj)
    c = context_vector(alpha, h)
    emb = embed(y_prev, params.E)
    s_prev = as_tensor(s_prev)
    s_t = gru_step(emb, s_prev, c, params.gru)
    logits = tn.add(tn.add(tn.linear(emb, params.W_o), tn.linear(s_prev, params.U_o)),
                    tn.linear(c, params.C_o))
    y_t = tn.softmax(logits, axis=-1)
    return y_t, s_t, c, alpha


def decode_sequence(h, params: DecoderParams, t_out: int | None = None, lengths=None,
                    teacher: np.ndarray | None = None) -> DecoderTrace:
    """Unroll the decoder for ``t_out`` steps from a zero state and a blank start token.

    Without ``teacher`` each step is fed the previous step's full output
    distribution (soft feedback). With ``teacher`` (N, t_out) integer labels
    the previous target label is fed as a one-hot vector instead.
    """
    h = as_tensor(h)
    h, single = _batch(h, 3)
    n, t_in, _ = h.shape
    t_out = t_in if t_out is None else int(t_out)
    if t_out <= 0:
        raise DimensionError(f"decoder needs at least one step, got {t_out}")
    v = params.vocab_size
    lengths = np.full(n, t_in) if lengths is None else np.asarray(lengths)
    mask = np.arange(t_in)[None, :] < lengths[:, None]
    h_proj = tn.linear(h, params.attention.U_a)
    dtype = h.dtype
    s = Tensor(np.zeros((n, params.state_size), dtype=dtype))
    start = np.zeros((n, v), dtype=dtype)
    start[:, 0] = 1.0
    y_prev: Tensor = Tensor(start)
    if teacher is not None:
        teacher = np.asarray(teacher)
        onehots = np.eye(v, dtype=dtype)[teacher]
    ys, alphas, contexts = [], [], []
    for t in range(t_out):
        y_t, s, c, alpha = decoder_step(s, y_prev, h, params, mask=mask, h_proj=h_proj)
        ys.append(y_t)
        alphas.append(alpha.data)
        contexts.append(c.data)
        y_prev = y_t if teacher is None else Tensor(onehots[:, t])
    y = tn.stack(ys, axis=1)
    alpha = np.stack(alphas, axis=1)
    context = np.stack(contexts, axis=1)
    if single:
        y = tn.reshape(y, y.shape[1:])
        alpha, context = alpha[0], context[0]
    return DecoderTrace(alpha, context, y, ys)
