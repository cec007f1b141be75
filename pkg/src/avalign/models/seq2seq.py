"""Audio-only, AV Align and AV Cat sequence-to-sequence models."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from ..corpus import EOS, SOS, decode
from ..nn import Params, lstm_cell, lstm_params
from .common import (
    AlignmentRecord,
    Batch,
    ModelConfig,
    attend,
    au_head,
    au_loss,
    ce_from_logits,
    decoder_cell,
    encode_audio,
    encode_video,
    init_common,
    one_hot,
    output_layer,
)
from .fusion import fuse, init_fusion


@dataclass
class Encoded:
    memory: ad.Tensor  # decoder attention memory, B x T x n
    memory_mask: np.ndarray
    state: tuple  # decoder initial (h, c)
    alpha: np.ndarray | None = None  # B x N x M cross-modal weights
    video_states: ad.Tensor | None = None  # raw o_V, input of the AU head
    video_mem: ad.Tensor | None = None  # second memory of AV Cat
    video_mask: np.ndarray | None = None


@dataclass
class DecodeResult:
    text: str
    ids: list
    alignment: AlignmentRecord
    extras: dict = field(default_factory=dict)


def _apply_transform(mem, mask, transform):
    if transform is None:
        return mem
    return ad.Tensor(transform(np.array(mem.data), mask))


class Seq2SeqModel:
    """Common training/decoding surface; subclasses supply the encoder and
    the per-step decoder attention."""

    decoder_contexts = 1

    def __init__(self, cfg: ModelConfig, seed: int = 0, params: Params | None = None):
        self.cfg = cfg
        if params is None:
            params = Params()
            rng = np.random.default_rng(seed)
            self.init_params(params, rng)
        self.params = params

    def init_params(self, params: Params, rng) -> None:
        init_common(params, self.cfg, rng, self.decoder_contexts)

    # -- subclass hooks ---------------------------------------------------
    def encode(self, batch: Batch, video_transform=None) -> Encoded:
        raise NotImplementedError

    def attend_step(self, h, enc: Encoded):
        """Return ``(contexts, rows)`` for one decoder state."""
        ctx, w = attend(h, enc.memory, enc.memory_mask)
        return [ctx], {"beta": w.data}

    # -- shared -----------------------------------------------------------
    def decode_step(self, y_prev: np.ndarray, o_D_prev, state, enc: Encoded):
        """One decoder step: LSTM over ``[y_{k-1}; o_D_{k-1}]``, attention,
        output projection. Returns ``(logits, o_D, state, attention rows)``."""
        h, c = decoder_cell(y_prev, o_D_prev, state, self.params)
        contexts, rows = self.attend_step(h, enc)
        o_D, logits = output_layer(h, contexts, self.params)
        return logits, o_D, (h, c), rows

    def _zeros(self, batch: int):
        return ad.Tensor(np.zeros((batch, self.cfg.hidden), dtype=ad.get_default_dtype()))

    def teacher_forced(self, batch: Batch, enc: Encoded | None = None):
        enc = enc or self.encode(batch)
        B, L = batch.dec_in.shape
        y = one_hot(batch.dec_in, self.cfg.vocab)
        state, o_D = enc.state, self._zeros(B)
        logits = []
        for k in range(L):
            lg, o_D, state, _ = self.decode_step(y[:, k], o_D, state, enc)
            logits.append(lg)
        return ad.stack(logits, axis=1), enc

    def loss(self, batch: Batch):
        """Cross entropy plus, when enabled, the AU regression loss.
        Returns ``(total, {"ce": float, "au": float})``."""
        logits, enc = self.teacher_forced(batch)
        ce = ce_from_logits(logits, batch.dec_out, batch.dec_mask)
        comps = {"ce": float(ce.data), "au": 0.0}
        total = ce
        if self.cfg.au_loss and enc.video_states is not None:
            pred = au_head(enc.video_states, self.params)
            al = au_loss(pred, batch.au, self.cfg.au_lambda, batch.video_mask)
            comps["au"] = float(al.data)
            total = ad.add(ce, al)
        comps["total"] = float(total.data)
        return total, comps

    def greedy_decode(self, batch: Batch, max_len: int = 40, video_transform=None) -> list:
        """Argmax decoding from SOS until EOS or ``max_len`` characters."""
        with ad.no_grad():
            enc = self.encode(batch, video_transform)
            B = batch.size
            state, o_D = enc.state, self._zeros(B)
            prev = np.full(B, SOS)
            done = np.zeros(B, dtype=bool)
            out = [[] for _ in range(B)]
            rows = {}
            for _ in range(max_len + 1):
                lg, o_D, state, r = self.decode_step(one_hot(prev, self.cfg.vocab), o_D, state, enc)
                prev = np.argmax(lg.data, axis=-1)
                for k, v in r.items():
                    rows.setdefault(k, []).append(v)
                for b in range(B):
                    if done[b]:
                        continue
                    if prev[b] == EOS or len(out[b]) >= max_len:
                        done[b] = True
                    else:
                        out[b].append(int(prev[b]))
                if done.all():
                    break
        return [self._result(b, out[b], rows, enc, batch) for b in range(B)]

    def _result(self, b: int, ids: list, rows: dict, enc: Encoded, batch: Batch) -> DecodeResult:
        n = int(batch.audio_mask[b].sum())
        m = int(batch.video_mask[b].sum())
        steps = len(ids) + 1
        rec = AlignmentRecord()
        if enc.alpha is not None:
            rec.alpha = enc.alpha[b, :n, :m]
        if "beta" in rows:
            rec.beta = np.stack([r[b] for r in rows["beta"][:steps]])[:, :n]
        if "beta_video" in rows:
            rec.beta_video = np.stack([r[b] for r in rows["beta_video"][:steps]])[:, :m]
        return DecodeResult(decode(ids), ids, rec)


class AudioOnlyModel(Seq2SeqModel):
    def encode(self, batch, video_transform=None):
        o_A, state = encode_audio(batch.audio, self.params, self.cfg, batch.audio_mask)
        return Encoded(ad.stack(o_A, axis=1), batch.audio_mask, state)


class AVAlignModel(Seq2SeqModel):
    """Audio LSTM stack, then an LSTM layer that attends to the video
    encoder at every audio step and fuses the visual context into its
    output; the decoder attends to the fused sequence."""

    def init_params(self, params, rng):
        super().init_params(params, rng)
        n = self.cfg.hidden
        lstm_params(params, "av_lstm", 2 * n, n, rng)
        init_fusion(params, self.cfg.fusion, n, rng)

    def encode(self, batch, video_transform=None):
        cfg, p = self.cfg, self.params
        o_A, _ = encode_audio(batch.audio, p, cfg, batch.audio_mask)
        o_V, _ = encode_video(batch.video, p, cfg, batch.video_mask)
        raw = ad.stack(o_V, axis=1)
        mem = ad.matmul(raw, p["video_proj.W"]) if "video_proj.W" in p else raw
        mem = _apply_transform(mem, batch.video_mask, video_transform)
        o_AV, state, alpha = av_attend_encode(o_A, mem, p, cfg, batch.audio_mask, batch.video_mask)
        return Encoded(ad.stack(o_AV, axis=1), batch.audio_mask, state, alpha, raw)


def av_attend_encode(o_A: list, video_mem, params: Params, cfg: ModelConfig, audio_mask=None, video_mask=None):
    """Cross-modal encoder layer.

    For each audio step ``i``: ``h_i = LSTM([o_A_i; o_AV_{i-1}], h_{i-1})``,
    attention of ``h_i`` over the video memory gives ``alpha_i`` and context
    ``c_V_i``, and ``o_AV_i = fuse(h_i, c_V_i)``. Both ``o_AV_0`` and the
    initial state are zero. Returns ``(o_AV list, final (h, c), alpha)``
    with ``alpha`` shaped ``B x N x M``.
    """
    B = o_A[0].shape[0]
    n = cfg.hidden
    if video_mem.shape[-1] != n:
        raise ad.ShapeError(f"video memory width {video_mem.shape[-1]} != hidden {n}")
    dt = ad.get_default_dtype()
    h = ad.Tensor(np.zeros((B, n), dtype=dt))
    c = ad.Tensor(np.zeros((B, n), dtype=dt))
    prev = ad.Tensor(np.zeros((B, n), dtype=dt))
    W, b = params["av_lstm.W"], params["av_lstm.b"]
    outs, alphas = [], []
    for i, oa in enumerate(o_A):
        x = ad.concat([oa, prev], axis=-1)
        h, c = lstm_cell(x, h, c, W, b, None if audio_mask is None else audio_mask[:, i])
        ctx, w = attend(h, video_mem, video_mask)
        prev = fuse(h, ctx, params, cfg.fusion)
        outs.append(prev)
        alphas.append(w.data)
    return outs, (h, c), np.stack(alphas, axis=1)


class AVCatModel(Seq2SeqModel):
    """Independent audio and video encoders; the decoder runs one attention
    per modality and concatenates ``[h; c_A; c_V]`` before the output layer."""

    decoder_contexts = 2

    def encode(self, batch, video_transform=None):
        cfg, p = self.cfg, self.params
        o_A, state = encode_audio(batch.audio, p, cfg, batch.audio_mask)
        o_V, _ = encode_video(batch.video, p, cfg, batch.video_mask)
        raw = ad.stack(o_V, axis=1)
        mem = ad.matmul(raw, p["video_proj.W"]) if "video_proj.W" in p else raw
        mem = _apply_transform(mem, batch.video_mask, video_transform)
        return Encoded(
            ad.stack(o_A, axis=1), batch.audio_mask, state, None, raw, video_mem=mem, video_mask=batch.video_mask
        )

    def attend_step(self, h, enc):
        c_A, wa = attend(h, enc.memory, enc.memory_mask)
        c_V, wv = attend(h, enc.video_mem, enc.video_mask)
        return [c_A, c_V], {"beta": wa.data, "beta_video": wv.data}


_ARCH = {"audio": AudioOnlyModel, "av_align": AVAlignModel, "av_cat": AVCatModel}


def build_model(cfg: ModelConfig, seed: int = 0, params: Params | None = None) -> Seq2SeqModel:
    return _ARCH[cfg.arch](cfg, seed, params)
