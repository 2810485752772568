"""Encoder building blocks: conv blocks, highway layers, GRU cells and Bi-GRUs.

Vectors are rows: an affine map is ``x @ W + b`` with ``W`` of shape
(d_in, d_out). Sequences are (T, d) or padded batches (N, T, d) with a
``lengths`` vector; frames beyond a sample's length are padding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .config import ConvBlockSpec, EncoderConfig
from .tensor import DimensionError, Tensor, as_tensor
from .tensor.core import make_node


class ContextError(ValueError):
    """Context vector supplied to a GRU without context maps, or missing when required."""


@dataclass
class HighwayParams:
    W_T: Tensor
    b_T: Tensor
    W_H: Tensor
    b_H: Tensor

    @property
    def d(self) -> int:
        return self.W_T.shape[0]


@dataclass
class GruParams:
    W_z: Tensor
    U_z: Tensor
    b_z: Tensor
    W_r: Tensor
    U_r: Tensor
    b_r: Tensor
    W_h: Tensor
    U_h: Tensor
    C_z: Tensor | None = None
    C_r: Tensor | None = None
    C_p: Tensor | None = None

    @property
    def hidden(self) -> int:
        return self.U_z.shape[0]

    @property
    def has_context(self) -> bool:
        return self.C_z is not None


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5


@dataclass
class ConvBlockParams:
    kernel: Tensor
    bn: BatchNormParams


@dataclass
class EncoderParams:
    conv: list[ConvBlockParams]
    highway: list[HighwayParams]
    gru: list[tuple[GruParams, GruParams]]


# ------------------------------------------------------------------- highway

def highway_forward(x, p: HighwayParams) -> Tensor:
    """t = sigmoid(x W_T + b_T); g = t * sigmoid(x W_H + b_H) + (1 - t) * x."""
    x = as_tensor(x)
    if x.shape[-1] != p.d:
        raise DimensionError(f"highway width {p.d} does not match input width {x.shape[-1]}")
    gate = tn.sigmoid(tn.linear(x, p.W_T, p.b_T))
    cand = tn.sigmoid(tn.linear(x, p.W_H, p.b_H))
    return tn.add(tn.mul(gate, cand), tn.mul(tn.sub(1.0, gate), x))


# ----------------------------------------------------------------------- GRU

def gru_step(g_t, h_prev, c_t, p: GruParams) -> Tensor:
    """One GRU update with optional context terms.

    z = sigmoid(g W_z + h U_z + c C_z + b_z)
    r = sigmoid(g W_r + h U_r + c C_r + b_r)
    h~ = tanh(g W_h + (r * h) U_h + c C_p)
    h' = (1 - z) * h + z * h~
    """
    if (c_t is not None) != p.has_context:
        raise ContextError(
            "context vector given to a GRU without context maps" if c_t is not None
            else "GRU with context maps needs a context vector"
        )
    g_t, h_prev = as_tensor(g_t), as_tensor(h_prev)
    if h_prev.shape[-1] != p.hidden or g_t.shape[-1] != p.W_z.shape[0]:
        raise DimensionError(
            f"gru_step: input {g_t.shape} / state {h_prev.shape} do not fit W {p.W_z.shape}, U {p.U_z.shape}"
        )
    az = tn.add(tn.linear(g_t, p.W_z, p.b_z), tn.linear(h_prev, p.U_z))
    ar = tn.add(tn.linear(g_t, p.W_r, p.b_r), tn.linear(h_prev, p.U_r))
    ah = tn.linear(g_t, p.W_h)
    if c_t is not None:
        c_t = as_tensor(c_t)
        az = tn.add(az, tn.linear(c_t, p.C_z))
        ar = tn.add(ar, tn.linear(c_t, p.C_r))
        ah = tn.add(ah, tn.linear(c_t, p.C_p))
    r = tn.sigmoid(ar)
    ah = tn.add(ah, tn.linear(tn.mul(r, h_prev), p.U_h))
    z = tn.sigmoid(az)
    cand = tn.tanh(ah)
    return tn.add(tn.mul(tn.sub(1.0, z), h_prev), tn.mul(z, cand))


def _sig(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gru_sequence(x, p: GruParams, h0=None, lengths=None) -> Tensor:
    """Run a context-free GRU over a padded batch (N, T, d) as one tape node.

    Returns the (N, T, H) state sequence. After a sample's last frame its
    state is carried unchanged. Matches repeated :func:`gru_step` exactly;
    the hand-written backward pass is the reason this exists.
    """
    if p.has_context:
        raise ContextError("gru_sequence runs encoder GRUs only (no context maps)")
    x = as_tensor(x)
    n, t_max, d = x.shape
    hdim = p.hidden
    if d != p.W_z.shape[0]:
        raise DimensionError(f"gru_sequence: input width {d} does not fit W {p.W_z.shape}")
    h0 = Tensor(np.zeros((n, hdim), dtype=x.dtype)) if h0 is None else as_tensor(h0)
    lengths = np.full(n, t_max) if lengths is None else np.asarray(lengths)
    mask = (np.arange(t_max)[None, :] < lengths[:, None]).astype(x.dtype)[:, :, None]

    xd = x.data
    Wz, Uz, bz = p.W_z.data, p.U_z.data, p.b_z.data
    Wr, Ur, br = p.W_r.data, p.U_r.data, p.b_r.data
    Wh, Uh = p.W_h.data, p.U_h.data
    xz = xd @ Wz + bz
    xr = xd @ Wr + br
    xh = xd @ Wh
    hs = np.empty((n, t_max, hdim), dtype=np.result_type(xd, Wz))
    zs = np.empty_like(hs)
    rs = np.empty_like(hs)
    cs = np.empty_like(hs)
    h = h0.data
    prev = np.empty_like(hs)
    for t in range(t_max):
        prev[:, t] = h
        z = _sig(xz[:, t] + h @ Uz)
        r = _sig(xr[:, t] + h @ Ur)
        c = np.tanh(xh[:, t] + (r * h) @ Uh)
        new = (1.0 - z) * h + z * c
        m = mask[:, t]
        h = m * new + (1.0 - m) * h
        zs[:, t], rs[:, t], cs[:, t], hs[:, t] = z, r, c, h

    parents = (x, h0, p.W_z, p.U_z, p.b_z, p.W_r, p.U_r, p.b_r, p.W_h, p.U_h)

    def backward(g):
        daz = np.zeros_like(hs)
        dar = np.zeros_like(hs)
        dah = np.zeros_like(hs)
        dUz = np.zeros_like(Uz)
        dUr = np.zeros_like(Ur)
        dUh = np.zeros_like(Uh)
        dh = np.zeros((n, hdim), dtype=hs.dtype)
        for t in range(t_max - 1, -1, -1):
            dh = dh + g[:, t]
            m = mask[:, t]
            hp, z, r, c = prev[:, t], zs[:, t], rs[:, t], cs[:, t]
            dnew = dh * m
            dc = dnew * z
            dz = dnew * (c - hp)
            dhp = dnew * (1.0 - z) + dh * (1.0 - m)
            a_h = dc * (1.0 - c * c)
            rh = r * hp
            drh = a_h @ Uh.T
            dr = drh * hp
            dhp += drh * r
            a_r = dr * r * (1.0 - r)
            a_z = dz * z * (1.0 - z)
            dUh += rh.T @ a_h
            dUr += hp.T @ a_r
            dUz += hp.T @ a_z
            dhp += a_z @ Uz.T + a_r @ Ur.T
            daz[:, t], dar[:, t], dah[:, t] = a_z, a_r, a_h
            dh = dhp
        x2 = xd.reshape(-1, d)
        fz, fr, fh = daz.reshape(-1, hdim), dar.reshape(-1, hdim), dah.reshape(-1, hdim)
        dx = daz @ Wz.T + dar @ Wr.T + dah @ Wh.T
        return (dx, dh, x2.T @ fz, dUz, fz.sum(0), x2.T @ fr, dUr, fr.sum(0), x2.T @ fh, dUh)

    return make_node(hs, parents, backward, "gru_sequence")


def reverse_padded(x, lengths=None) -> Tensor:
    """Reverse each sample of an (N, T, ...) batch within its own length."""
    x = as_tensor(x)
    n, t_max = x.shape[:2]
    lengths = np.full(n, t_max) if lengths is None else np.asarray(lengths)
    t = np.arange(t_max)[None, :]
    idx = np.where(t < lengths[:, None], lengths[:, None] - 1 - t, t)
    rows = np.arange(n)[:, None]

    def backward(g):
        out = np.empty_like(g)
        out[rows, idx] = g
        return (out,)

    return make_node(x.data[rows, idx], (x,), backward, "reverse")


def bigru_forward(seq, p_fwd: GruParams, p_bwd: GruParams, h0=None, lengths=None) -> Tensor:
    """Concatenate forward-time and reverse-time GRU states: (T, 2H) or (N, T, 2H)."""
    seq = as_tensor(seq)
    single = seq.ndim == 2
    if single:
        seq = tn.reshape(seq, (1,) + seq.shape)
    if seq.shape[1] == 0:
        raise DimensionError("bigru_forward: empty sequence")
    if h0 is not None:
        h0 = as_tensor(h0)
        if h0.ndim == 1:
            h0 = tn.reshape(h0, (1,) + h0.shape)
    fwd = gru_sequence(seq, p_fwd, h0, lengths)
    bwd = reverse_padded(gru_sequence(reverse_padded(seq, lengths), p_bwd, h0, lengths), lengths)
    out = tn.concat([fwd, bwd], axis=-1)
    if single:
        out = tn.reshape(out, out.shape[1:])
    return out


# ---------------------------------------------------------------- conv block

def conv_block_forward(x, spec: ConvBlockSpec, p: ConvBlockParams, mode: str = "eval",
                       rng: np.random.Generator | None = None, dropout: float = 0.0,
                       frame_mask: np.ndarray | None = None, trace: list | None = None,
                       tag: str = "") -> Tensor:
    """conv3d -> batch norm -> relu -> dropout (train only) -> max pool.

    ``frame_mask`` is (N, T) with 1 for real frames; padded frames are kept
    at zero so that a batch behaves like its samples run one at a time.
    """
    training = mode == "train"
    y = tn.conv3d(x, p.kernel, stride=spec.stride, pad=spec.pad)
    mask = None
    if frame_mask is not None:
        mask = frame_mask.astype(y.dtype)[:, None, :, None, None]
    y = tn.batch_norm(y, p.bn.gamma, p.bn.beta, p.bn.running_mean, p.bn.running_var,
                      training, p.bn.momentum, p.bn.eps, mask=mask)
    y = tn.relu(y)
    y = tn.dropout(y, dropout, rng, training)
    out = tn.maxpool3d(y, spec.pool, spec.pool_stride)
    if trace is not None:
        trace += [(f"3d-conv{tag}", y.shape[1:]), (f"bn/relu/drop{tag}", y.shape[1:]), (f"pool{tag}", out.shape[1:])]
    return out


def encoder_forward(frames, cfg: EncoderConfig, params: EncoderParams, mode: str = "eval",
                    rng: np.random.Generator | None = None, lengths=None,
                    trace: list | None = None) -> Tensor:
    """Conv blocks -> per-frame flatten -> highway stack -> Bi-GRU stack.

    ``frames`` is (C, T, H, W) or a padded batch (N, C, T, H, W); the result
    is (T, 2H) or (N, T, 2H). ``trace`` collects (layer, per-sample shape).
    """
    frames = as_tensor(frames)
    single = frames.ndim == 4
    if single:
        frames = tn.reshape(frames, (1,) + frames.shape)
    n, _, t_max = frames.shape[:3]
    lengths = np.full(n, t_max) if lengths is None else np.asarray(lengths)
    frame_mask = np.arange(t_max)[None, :] < lengths[:, None]
    x = frames
    for i, (spec, p) in enumerate(zip(cfg.conv_blocks, params.conv), start=1):
        x = conv_block_forward(x, spec, p, mode, rng, cfg.dropout, frame_mask, trace, str(i))
        if x.shape[2] != t_max:
            raise DimensionError(f"conv block changed the frame count from {t_max} to {x.shape[2]}")
    c, h, w = x.shape[1], x.shape[3], x.shape[4]
    # (N, C, T, H, W) -> (N, T, C*H*W), C-major per frame
    x = tn.reshape(tn.transpose(x, (0, 2, 1, 3, 4)), (n, t_max, c * h * w))
    for i, hp in enumerate(params.highway, start=1):
        if hp.d != x.shape[-1]:
            raise DimensionError(f"highway width {hp.d} != flattened conv output {x.shape[-1]}")
        x = highway_forward(x, hp)
        if trace is not None:
            trace.append((f"highway{i}", x.shape[1:]))
    for i, (p_fwd, p_bwd) in enumerate(params.gru, start=1):
        x = bigru_forward(x, p_fwd, p_bwd, lengths=lengths)
        if trace is not None:
            trace.append((f"gru{i}", x.shape[1:]))
    if single:
        x = tn.reshape(x, x.shape[1:])
    return x


# ---------------------------------------------------------------- embedding

def embed(y, E) -> Tensor:
    """y^T E: soft mixture of embedding rows for a distribution (or one-hot) y."""
    y, E = as_tensor(y), as_tensor(E)
    if y.shape[-1] != E.shape[0]:
        raise DimensionError(f"embed: distribution width {y.shape[-1]} != embedding rows {E.shape[0]}")
    if y.ndim == 1:
        return tn.reshape(tn.matmul(tn.reshape(y, (1, -1)), E), (E.shape[1],))
    return tn.matmul(y, E)
