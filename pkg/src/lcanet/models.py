"""The four experimental variants over shared encoder / decoder parts.

=========  =========  =======  ========  =============
variant    attention  highway  CTC loss  cross-entropy
=========  =========  =======  ========  =============
ah-ctc     yes        yes      yes
a-ctc      yes                 yes
h-ctc                 yes      yes
ah-ctc-ce  yes        yes      yes       yes
=========  =========  =======  ========  =============

``ah-ctc`` and ``a-ctc`` feed the attention decoder's per-frame
distributions to CTC. ``h-ctc`` maps the Bi-GRU output linearly to the
vocabulary. ``ah-ctc-ce`` trains that linear CTC head and a teacher-forced
attention branch jointly with ``lambda * ctc + (1 - lambda) * ce``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as tn
from .attention import AttentionParams, DecoderParams, decode_sequence
from .config import ConfigError, ModelConfig
from .ctc import Vocabulary, ctc_loss_batch, default_vocabulary, prefix_beam_search
from .layers import (
    BatchNormParams,
    ConvBlockParams,
    EncoderParams,
    GruParams,
    HighwayParams,
    encoder_forward,
)
from .tensor import Tensor


@dataclass
class CtcHead:
    W: Tensor
    b: Tensor


@dataclass
class Model:
    config: ModelConfig
    encoder: EncoderParams
    decoder: DecoderParams | None = None
    ctc_head: CtcHead | None = None
    vocab: Vocabulary | None = None

    def __post_init__(self):
        if self.vocab is None:
            self.vocab = default_vocabulary()

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, blk in enumerate(self.encoder.conv):
            out[f"encoder.conv{i}.kernel"] = blk.kernel
            out[f"encoder.conv{i}.bn.gamma"] = blk.bn.gamma
            out[f"encoder.conv{i}.bn.beta"] = blk.bn.beta
        for i, hw in enumerate(self.encoder.highway):
            for k in ("W_T", "b_T", "W_H", "b_H"):
                out[f"encoder.highway{i}.{k}"] = getattr(hw, k)
        for i, (fwd, bwd) in enumerate(self.encoder.gru):
            for tag, p in (("fwd", fwd), ("bwd", bwd)):
                out.update(_gru_named(f"encoder.gru{i}.{tag}", p))
        if self.decoder is not None:
            d = self.decoder
            out["decoder.attention.V_a"] = d.attention.V_a
            out["decoder.attention.W_a"] = d.attention.W_a
            out["decoder.attention.U_a"] = d.attention.U_a
            out.update(_gru_named("decoder.gru", d.gru))
            for k in ("W_o", "U_o", "C_o", "E"):
                out[f"decoder.{k}"] = getattr(d, k)
        if self.ctc_head is not None:
            out["ctc_head.W"] = self.ctc_head.W
            out["ctc_head.b"] = self.ctc_head.b
        for name, t in out.items():
            t.name = name
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, blk in enumerate(self.encoder.conv):
            out[f"encoder.conv{i}.bn.running_mean"] = blk.bn.running_mean
            out[f"encoder.conv{i}.bn.running_var"] = blk.bn.running_var
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    @property
    def has_attention(self) -> bool:
        return self.decoder is not None

    @property
    def has_highway(self) -> bool:
        return len(self.encoder.highway) > 0


def _gru_named(prefix: str, p: GruParams) -> dict[str, Tensor]:
    keys = ["W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h"]
    if p.has_context:
        keys += ["C_z", "C_r", "C_p"]
    return {f"{prefix}.{k}": getattr(p, k) for k in keys}


# ------------------------------------------------------------ construction

class _Init:
    def __init__(self, seed: int, dtype):
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype

    def glorot(self, shape, fan_in: int | None = None, fan_out: int | None = None) -> Tensor:
        fan_in = shape[0] if fan_in is None else fan_in
        fan_out = shape[-1] if fan_out is None else fan_out
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return Tensor(self.rng.uniform(-bound, bound, size=shape).astype(self.dtype), requires_grad=True)

    def const(self, shape, value: float = 0.0) -> Tensor:
        return Tensor(np.full(shape, value, dtype=self.dtype), requires_grad=True)

    def gru(self, d_in: int, hidden: int, d_ctx: int | None = None) -> GruParams:
        p = GruParams(
            self.glorot((d_in, hidden)), self.glorot((hidden, hidden)), self.const((hidden,)),
            self.glorot((d_in, hidden)), self.glorot((hidden, hidden)), self.const((hidden,)),
            self.glorot((d_in, hidden)), self.glorot((hidden, hidden)),
        )
        if d_ctx is not None:
            p.C_z = self.glorot((d_ctx, hidden))
            p.C_r = self.glorot((d_ctx, hidden))
            p.C_p = self.glorot((d_ctx, hidden))
        return p


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float64,
                vocab: Vocabulary | None = None) -> Model:
    """Deterministic initialisation: Glorot-uniform maps, zero biases, unit BN scale."""
    config.validate()
    vocab = default_vocabulary() if vocab is None else vocab
    if vocab.size != config.vocab_size:
        raise ConfigError(f"vocabulary has {vocab.size} symbols but the model expects {config.vocab_size}")
    enc_cfg = config.effective_encoder()
    init = _Init(seed, dtype)

    conv = []
    c_in = enc_cfg.in_channels
    for spec in enc_cfg.conv_blocks:
        kt, kh, kw = spec.kernel
        field = kt * kh * kw
        kernel = init.glorot((spec.out_channels, c_in, kt, kh, kw), c_in * field, spec.out_channels * field)
        bn = BatchNormParams(
            init.const((spec.out_channels,), 1.0), init.const((spec.out_channels,)),
            np.zeros(spec.out_channels, dtype=dtype), np.ones(spec.out_channels, dtype=dtype),
            enc_cfg.bn_momentum, enc_cfg.bn_eps,
        )
        conv.append(ConvBlockParams(kernel, bn))
        c_in = spec.out_channels

    width = enc_cfg.feature_width
    highway = [
        HighwayParams(init.glorot((width, width)), init.const((width,)),
                      init.glorot((width, width)), init.const((width,)))
        for _ in range(enc_cfg.highway_layers)
    ]
    gru = []
    d_in = width
    for _ in range(enc_cfg.gru_layers):
        gru.append((init.gru(d_in, enc_cfg.gru_hidden), init.gru(d_in, enc_cfg.gru_hidden)))
        d_in = 2 * enc_cfg.gru_hidden
    encoder = EncoderParams(conv, highway, gru)

    d_enc, v = enc_cfg.output_width, config.vocab_size
    decoder = head = None
    if config.uses_attention:
        dc = config.decoder
        attention = AttentionParams(
            init.glorot((dc.attention_size,), dc.attention_size, 1),
            init.glorot((dc.state_size, dc.attention_size)),
            init.glorot((d_enc, dc.attention_size)),
        )
        decoder = DecoderParams(
            attention,
            init.gru(dc.embed_size, dc.state_size, d_ctx=d_enc),
            init.glorot((dc.embed_size, v)),
            init.glorot((dc.state_size, v)),
            init.glorot((d_enc, v)),
            init.glorot((v, dc.embed_size)),
        )
    if config.variant in ("h-ctc", "ah-ctc-ce"):
        head = CtcHead(init.glorot((d_enc, v)), init.const((v,)))
    model = Model(config, encoder, decoder, head, vocab)
    model.named_parameters()
    return model


# ---------------------------------------------------------------- forward

def encode(model: Model, frames, lengths=None, mode: str = "eval", rng=None) -> Tensor:
    return encoder_forward(frames, model.config.effective_encoder(), model.encoder, mode, rng, lengths)


def _head_distributions(model: Model, h: Tensor) -> Tensor:
    return tn.softmax(tn.linear(h, model.ctc_head.W, model.ctc_head.b), axis=-1)


def frame_distributions(model: Model, frames, lengths=None, mode: str = "eval", rng=None) -> Tensor:
    """Per-frame output distributions (N, T, V) that CTC scores and decodes."""
    h = encode(model, frames, lengths, mode, rng)
    return _distributions_from_encoding(model, h, lengths)


def _distributions_from_encoding(model: Model, h: Tensor, lengths) -> Tensor:
    if model.config.variant in ("ah-ctc", "a-ctc"):
        return decode_sequence(h, model.decoder, lengths=lengths).y
    return _head_distributions(model, h)


def _as_batch(frames, lengths):
    frames = tn.as_tensor(frames)
    if frames.ndim == 4:
        frames = tn.reshape(frames, (1,) + frames.shape)
    n, _, t = frames.shape[:3]
    lengths = np.full(n, t) if lengths is None else np.asarray(lengths)
    return frames, lengths


def _pad_labels(labels: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    u = np.array([len(x) for x in labels])
    out = np.zeros((len(labels), int(u.max())), dtype=np.int64)
    for i, x in enumerate(labels):
        out[i, :len(x)] = x
    return out, u


def attention_log_likelihood(model: Model, h: Tensor, labels: Sequence[Sequence[int]], lengths) -> Tensor:
    """Per-sample sum of log p(label_t | previous labels) of the teacher-forced branch, shape (N,)."""
    padded, u = _pad_labels(labels)
    trace = decode_sequence(h, model.decoder, t_out=padded.shape[1], lengths=lengths, teacher=padded)
    n, t_out, v = trace.y.shape
    onehot = np.eye(v, dtype=trace.y.dtype)[padded] * (np.arange(t_out)[None, :] < u[:, None])[:, :, None]
    logp = tn.log(tn.add(trace.y, 1e-30 if trace.y.dtype == np.float64 else 1e-20))
    return tn.sum(tn.sum(tn.mul(logp, Tensor(onehot)), axis=-1), axis=-1)


def model_loss_parts(model: Model, frames, transcripts: Sequence[str], lengths=None,
                     mode: str = "train", rng=None) -> dict[str, Tensor]:
    """Batch-mean losses: ``ctc`` always, ``ce`` and ``total`` too for ah-ctc-ce."""
    frames, lengths = _as_batch(frames, lengths)
    labels = [model.vocab.encode(t) for t in transcripts]
    h = encode(model, frames, lengths, mode, rng)
    n = len(labels)
    if model.config.uses_ce:
        ctc = tn.scale(tn.sum(ctc_loss_batch(_head_distributions(model, h), labels, lengths)), 1.0 / n)
        u = np.array([len(x) for x in labels], dtype=np.float64)
        ll = attention_log_likelihood(model, h, labels, lengths)
        ce = tn.scale(tn.sum(tn.div(ll, Tensor((-u).astype(ll.dtype)))), 1.0 / n)
        lam = model.config.ce_lambda
        total = tn.add(tn.scale(ctc, lam), tn.scale(ce, 1.0 - lam))
        return {"ctc": ctc, "ce": ce, "total": total}
    probs = _distributions_from_encoding(model, h, lengths)
    ctc = tn.scale(tn.sum(ctc_loss_batch(probs, labels, lengths)), 1.0 / n)
    return {"ctc": ctc, "total": ctc}


def model_loss(model: Model, frames, transcripts, lengths=None, mode: str = "train", rng=None) -> Tensor:
    """Scalar training objective (mean over the batch)."""
    if isinstance(transcripts, str):
        transcripts = [transcripts]
    return model_loss_parts(model, frames, transcripts, lengths, mode, rng)["total"]


# ---------------------------------------------------------------- decoding

def decode_batch(model: Model, frames, lengths=None, beam_width: int = 10, topk: int = 1,
                 greedy: bool = False) -> list[list[tuple[str, float]]]:
    """Top hypotheses with log scores for every sample of a batch (eval mode)."""
    frames, lengths = _as_batch(frames, lengths)
    h = encode(model, frames, lengths, "eval")
    probs = _distributions_from_encoding(model, h, lengths).data
    vocab = model.vocab
    out = []
    for i, length in enumerate(lengths):
        p = probs[i, :length]
        if greedy:
            from .ctc import collapse_indices
            best = np.argmax(p, axis=-1)
            logp = float(np.sum(np.log(np.maximum(p[np.arange(length), best], 1e-300))))
            out.append([(vocab.decode(collapse_indices(best)), logp)])
            continue
        width = max(beam_width, topk)
        beam = prefix_beam_search(p, width)
        if model.config.uses_ce:
            beam = _rescore(model, h[i:i + 1], int(length), beam)
        out.append([(vocab.decode(k), lp) for k, lp in beam[:topk]])
    return out


def _rescore(model: Model, h: Tensor, length: int, beam) -> list[tuple[tuple[int, ...], float]]:
    """Joint score lambda * log p_ctc + (1 - lambda) * log p_att for each CTC hypothesis."""
    lam = model.config.ce_lambda
    if lam == 1.0:
        return beam
    scored = []
    for prefix, lp_ctc in beam:
        if prefix:
            lp_att = float(attention_log_likelihood(model, h, [list(prefix)], [length]).data[0])
        else:
            lp_att = 0.0
        scored.append((prefix, lam * lp_ctc + (1.0 - lam) * lp_att))
    scored.sort(key=lambda kv: (-kv[1], kv[0]))
    return scored


def shape_trace(model: Model, n_frames: int | None = None, seed: int = 0) -> list[tuple[str, tuple[int, ...]]]:
    """Run one eval forward pass on a random clip and list (layer, per-sample shape)."""
    enc = model.config.effective_encoder()
    t = n_frames if n_frames is not None else (75 if model.config.table1 else 64)
    dtype = model.encoder.conv[0].kernel.dtype
    rng = np.random.default_rng(seed)
    frames = rng.standard_normal((1, enc.in_channels, t, enc.frame_height, enc.frame_width)).astype(dtype)
    trace: list = [("input", frames.shape[1:])]
    h = encoder_forward(frames, enc, model.encoder, "eval", None, None, trace)
    if model.config.variant in ("ah-ctc", "a-ctc"):
        y = decode_sequence(h, model.decoder).y
        trace.append(("atten1", y.shape[1:]))
    else:
        y = _head_distributions(model, h)
        trace.append(("ctc_head", y.shape[1:]))
    trace.append(("ctc", (y.shape[1],)))
    return trace


def model_decode(model: Model, frames, beam_width: int = 10, lengths=None) -> str | list[str]:
    """Best transcript for one clip (C, T, H, W), or a list for a batch."""
    single = tn.as_tensor(frames).ndim == 4
    hyps = decode_batch(model, frames, lengths, beam_width)
    best = [h[0][0] for h in hyps]
    return best[0] if single else best
