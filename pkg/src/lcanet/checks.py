"""Finite-difference gradient suite over every layer and one small end-to-end model.

All checks run in float64 on tiny random shapes. Each row reports the
worst relative error over up to ``n_coords`` sampled coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tn
from .attention import attention_weights, context_vector, decoder_step
from .config import DecoderConfig, EncoderConfig, ModelConfig, ConvBlockSpec
from .ctc import ctc_loss_batch
from .layers import bigru_forward, embed, gru_step, highway_forward
from .models import build_model, model_loss
from .tensor import Tensor

LAYER_TOL = 1e-4
CTC_TOL = 1e-5


@dataclass
class CheckRow:
    name: str
    max_rel_error: float
    tol: float
    n_coords: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def _param(rng, *shape, scale=0.5) -> Tensor:
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def _weighted(y: Tensor, rng) -> Tensor:
    # random projection keeps every output coordinate in play
    return tn.sum(tn.mul(y, Tensor(rng.normal(size=y.shape))))


def tiny_model_config(variant: str) -> ModelConfig:
    blocks = [ConvBlockSpec(3, (3, 3, 3), (1, 1, 1), (1, 1, 1), (1, 2, 2), (1, 2, 2)),
              ConvBlockSpec(4, (3, 3, 3), (1, 1, 1), (1, 1, 1), (1, 1, 2), (1, 1, 2))]
    enc = EncoderConfig(in_channels=1, frame_height=4, frame_width=8, conv_blocks=blocks,
                        highway_layers=1, gru_hidden=4, gru_layers=1, dropout=0.0)
    return ModelConfig(variant=variant, vocab_size=28, encoder=enc, decoder=DecoderConfig(5, 4, 3))


def _cases(variant: str, rng: np.random.Generator) -> list[tuple[str, Callable[[], Tensor], list[Tensor], float]]:
    cases = []

    x = _param(rng, 2, 2, 4, 5, 6)
    k = _param(rng, 3, 2, 3, 3, 3)
    proj = Tensor(rng.normal(size=(2, 3, 4, 3, 3)))
    cases.append(("conv3d", lambda: tn.sum(tn.mul(tn.conv3d(x, k, stride=(1, 2, 2), pad=(1, 1, 1)), proj)),
                  [x, k], LAYER_TOL))

    xp = Tensor(rng.permutation(2 * 2 * 3 * 4 * 6).reshape(2, 2, 3, 4, 6) * 0.1, requires_grad=True)
    proj_p = Tensor(rng.normal(size=(2, 2, 3, 2, 3)))
    cases.append(("maxpool3d", lambda: tn.sum(tn.mul(tn.maxpool3d(xp, (1, 2, 2)), proj_p)), [xp], LAYER_TOL))

    xb = _param(rng, 3, 2, 3, 2, 2, scale=1.0)
    gamma, beta = _param(rng, 2), _param(rng, 2)
    proj_b = Tensor(rng.normal(size=xb.shape))
    rm, rv = np.zeros(2), np.ones(2)
    mask = (np.arange(3)[None, :] < np.array([3, 2, 1])[:, None]).astype(float)[:, None, :, None, None]
    cases.append(("batch_norm", lambda: tn.sum(tn.mul(
        tn.batch_norm(xb, gamma, beta, rm.copy(), rv.copy(), True, mask=mask), proj_b)), [xb, gamma, beta], LAYER_TOL))

    xd = _param(rng, 4, 5)
    proj_d = Tensor(rng.normal(size=(4, 5)))
    cases.append(("dropout (eval path)", lambda: tn.sum(tn.mul(tn.dropout(xd, 0.5, None, False), proj_d)),
                  [xd], LAYER_TOL))

    from .layers import HighwayParams
    hp = HighwayParams(_param(rng, 6, 6), _param(rng, 6), _param(rng, 6, 6), _param(rng, 6))
    xh = _param(rng, 3, 6)
    proj_h = Tensor(rng.normal(size=(3, 6)))
    cases.append(("highway", lambda: tn.sum(tn.mul(highway_forward(xh, hp), proj_h)),
                  [xh, hp.W_T, hp.b_T, hp.W_H, hp.b_H], LAYER_TOL))

    from .models import _Init
    init = _Init(int(rng.integers(1 << 30)), np.float64)
    gp = init.gru(3, 4, d_ctx=5)
    for t in [gp.b_z, gp.b_r]:
        t.data = rng.normal(scale=0.3, size=t.shape)
    g_in, h_in, c_in = _param(rng, 2, 3), _param(rng, 2, 4), _param(rng, 2, 5)
    proj_g = Tensor(rng.normal(size=(2, 4)))
    gru_all = [g_in, h_in, c_in, gp.W_z, gp.U_z, gp.b_z, gp.W_r, gp.U_r, gp.b_r, gp.W_h, gp.U_h, gp.C_z, gp.C_r, gp.C_p]
    cases.append(("gru step", lambda: tn.sum(tn.mul(gru_step(g_in, h_in, c_in, gp), proj_g)), gru_all, LAYER_TOL))

    pf, pb = init.gru(3, 4), init.gru(3, 4)
    seq = _param(rng, 2, 5, 3)
    lengths = np.array([5, 3])
    proj_s = Tensor(rng.normal(size=(2, 5, 8)) * (np.arange(5)[None, :, None] < lengths[:, None, None]))
    bi_params = [seq] + [getattr(p, k) for p in (pf, pb) for k in ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h")]
    cases.append(("bi-gru", lambda: tn.sum(tn.mul(bigru_forward(seq, pf, pb, lengths=lengths), proj_s)),
                  bi_params, LAYER_TOL))

    y = Tensor(tn.softmax(Tensor(rng.normal(size=(3, 6))), axis=-1).data, requires_grad=True)
    E = _param(rng, 6, 4)
    proj_e = Tensor(rng.normal(size=(3, 4)))
    cases.append(("embedding", lambda: tn.sum(tn.mul(embed(y, E), proj_e)), [y, E], LAYER_TOL))

    cfg = tiny_model_config("ah-ctc")
    m = build_model(cfg, seed=int(rng.integers(1 << 30)))
    dp = m.decoder
    h_enc = _param(rng, 2, 5, cfg.encoder.output_width)
    s_prev = _param(rng, 2, cfg.decoder.state_size)
    y_prev = Tensor(tn.softmax(Tensor(rng.normal(size=(2, 28))), axis=-1).data, requires_grad=True)
    amask = np.arange(5)[None, :] < np.array([5, 4])[:, None]
    proj_a = Tensor(rng.normal(size=(2, cfg.encoder.output_width)))
    att = dp.attention
    cases.append(("attention step", lambda: tn.sum(tn.mul(
        context_vector(attention_weights(s_prev, h_enc, att, mask=amask), h_enc), proj_a)),
        [s_prev, h_enc, att.V_a, att.W_a, att.U_a], LAYER_TOL))

    proj_o = Tensor(rng.normal(size=(2, 28)))
    cases.append(("output softmax", lambda: tn.sum(tn.mul(decoder_step(s_prev, y_prev, h_enc, dp, mask=amask)[0], proj_o)),
                  [s_prev, y_prev, h_enc, dp.W_o, dp.U_o, dp.C_o, dp.E, dp.gru.C_z, dp.gru.W_h], LAYER_TOL))

    logits = _param(rng, 2, 6, 4, scale=1.0)
    targets = [[1, 2, 2], [3]]
    cases.append(("ctc loss", lambda: tn.sum(ctc_loss_batch(tn.softmax(logits, axis=-1), targets, [6, 4])),
                  [logits], CTC_TOL))

    model = build_model(tiny_model_config(variant), seed=int(rng.integers(1 << 30)))
    frames = rng.normal(size=(2, 1, 6, 4, 8))
    flen = np.array([6, 5])
    texts = ["ab", "c"]
    cases.append((f"end-to-end {variant}", lambda: model_loss(model, frames, texts, flen, mode="train"),
                  model.parameters(), LAYER_TOL))
    return cases


def run_gradchecks(variant: str = "ah-ctc", seed: int = 0, n_coords: int = 100) -> list[CheckRow]:
    rng = np.random.default_rng(seed)
    rows = []
    for name, f, params, tol in _cases(variant, rng):
        err = tn.gradcheck(f, params, n_coords=n_coords, rng=np.random.default_rng(seed))
        rows.append(CheckRow(name, err, tol, min(n_coords, sum(p.size for p in params))))
    return rows


def format_rows(rows: list[CheckRow]) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{'op'.ljust(width)}  max_rel_error  tol     result"]
    for r in rows:
        lines.append(f"{r.name.ljust(width)}  {r.max_rel_error:13.3e}  {r.tol:.0e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
