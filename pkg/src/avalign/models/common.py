"""Shared pieces of the sequence-to-sequence models.

All models are batch-first: audio ``B x N x d_a``, video ``B x M x d_v``,
character targets ``B x L``. Padded positions are described by 0/1 masks.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .. import autodiff as ad
from ..audio import FEATURE_DIM, normalize_features
from ..corpus import EOS, PAD, SOS, VIDEO_DIM, VOCAB_SIZE, encode
from ..nn import Params, dot_scores, linear, lstm_cell, lstm_params, lstm_sequence, weighted_sum
from ..visual import CNNConfig, cnn_forward, init_cnn, rescale

FUSIONS = ("baseline", "m1", "m2", "m3", "m4", "m5")
ARCHS = ("audio", "av_align", "av_cat")
MODEL_KINDS = {
    "audio": ("audio", False),
    "av_align": ("av_align", False),
    "av_align_au": ("av_align", True),
    "av_cat": ("av_cat", False),
    "av_cat_au": ("av_cat", True),
}


@dataclass
class ModelConfig:
    arch: str = "av_align"
    hidden: int = 32
    audio_layers: int = 3
    video_layers: int = 1
    audio_dim: int = FEATURE_DIM
    video_dim: int = VIDEO_DIM
    video_hidden: int | None = None
    vocab: int = VOCAB_SIZE
    fusion: str = "baseline"
    au_loss: bool = False
    au_lambda: float = 10.0
    use_cnn: bool = False

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}")
        self.fusion = self.fusion.lower()
        if self.fusion not in FUSIONS:
            raise ValueError(f"unknown fusion variant {self.fusion!r}")

    @property
    def n_video(self) -> int:
        return self.hidden if self.video_hidden is None else self.video_hidden

    @classmethod
    def for_kind(cls, kind: str, **kw) -> "ModelConfig":
        try:
            arch, au = MODEL_KINDS[kind]
        except KeyError:
            raise ValueError(f"unknown model kind {kind!r}") from None
        return cls(arch=arch, au_loss=au, **kw)

    @property
    def kind(self) -> str:
        if self.arch == "audio":
            return "audio"
        return self.arch + ("_au" if self.au_loss else "")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AlignmentRecord:
    """``alpha``: audio x video (rows sum to 1). ``beta``: output x encoder
    frames. AV Cat also fills ``beta_video`` (output x video)."""

    alpha: np.ndarray | None = None
    beta: np.ndarray | None = None
    beta_video: np.ndarray | None = None


@dataclass
class Batch:
    audio: np.ndarray
    audio_mask: np.ndarray
    video: np.ndarray
    video_mask: np.ndarray
    au: np.ndarray
    dec_in: np.ndarray
    dec_out: np.ndarray
    dec_mask: np.ndarray
    ids: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.audio.shape[0]


def make_batch(audio_feats: list, videos: list, aus: list, labels: list, ids=None, normalize: bool = True) -> Batch:
    """Pad per-utterance arrays into a :class:`Batch`.

    ``audio_feats`` are raw ``N x d`` features (normalised per utterance
    when ``normalize``); ``videos`` are ``M x d_v`` features or
    ``M x 36 x 36 x 3`` images.
    """
    B = len(audio_feats)
    dt = ad.get_default_dtype()
    n_max = max(a.shape[0] for a in audio_feats)
    m_max = max(v.shape[0] for v in videos)
    l_max = max(len(t) for t in labels) + 1
    audio = np.zeros((B, n_max, audio_feats[0].shape[1]), dtype=dt)
    amask = np.zeros((B, n_max), dtype=dt)
    video = np.zeros((B, m_max) + videos[0].shape[1:], dtype=dt)
    vmask = np.zeros((B, m_max), dtype=dt)
    au = np.zeros((B, m_max, 2), dtype=dt)
    dec_in = np.full((B, l_max), PAD, dtype=np.int64)
    dec_out = np.full((B, l_max), PAD, dtype=np.int64)
    dmask = np.zeros((B, l_max), dtype=dt)
    for b in range(B):
        a = normalize_features(audio_feats[b]) if normalize else audio_feats[b]
        audio[b, : len(a)] = a
        amask[b, : len(a)] = 1
        v = videos[b]
        video[b, : len(v)] = v
        vmask[b, : len(v)] = 1
        if aus[b] is not None:
            au[b, : len(aus[b])] = aus[b]
        ids_ = encode(labels[b])
        dec_in[b, 0] = SOS
        dec_in[b, 1 : len(ids_) + 1] = ids_
        dec_out[b, : len(ids_)] = ids_
        dec_out[b, len(ids_)] = EOS
        dmask[b, : len(ids_) + 1] = 1
    return Batch(audio, amask, video, vmask, au, dec_in, dec_out, dmask, list(ids or []))


def one_hot(ids: np.ndarray, vocab: int) -> np.ndarray:
    out = np.zeros(ids.shape + (vocab,), dtype=ad.get_default_dtype())
    np.put_along_axis(out, ids[..., None], 1.0, axis=-1)
    return out


def steps(x: np.ndarray) -> list:
    """Split a ``B x T x d`` constant into per-step tensors."""
    return [ad.Tensor(x[:, t]) for t in range(x.shape[1])]


# ---------------------------------------------------------------------------
# encoders


def init_encoder(params: Params, prefix: str, n_in: int, n: int, layers: int, rng) -> None:
    for layer in range(layers):
        lstm_params(params, f"{prefix}.l{layer}", n_in if layer == 0 else n, n, rng)


def encode_stack(inputs: list, params: Params, prefix: str, n: int, layers: int, mask=None):
    """Stacked LSTM with zero initial states; returns top-layer outputs and
    the top layer's final ``(h, c)``."""
    if not inputs:
        raise ValueError("empty input sequence")
    outs, state = inputs, None
    for layer in range(layers):
        outs, state = lstm_sequence(outs, params, f"{prefix}.l{layer}", n, mask)
    return outs, state


def encode_audio(audio: np.ndarray, params: Params, cfg: ModelConfig, mask=None):
    if audio.shape[-1] != cfg.audio_dim:
        raise ad.ShapeError(f"audio dim {audio.shape[-1]} != {cfg.audio_dim}")
    return encode_stack(steps(audio), params, "audio_enc", cfg.hidden, cfg.audio_layers, mask)


def video_inputs(video: np.ndarray, params: Params, cfg: ModelConfig) -> list:
    """Per-frame visual features: the raw rows, or CNN outputs in image mode."""
    if not cfg.use_cnn:
        if video.shape[-1] != cfg.video_dim:
            raise ad.ShapeError(f"video dim {video.shape[-1]} != {cfg.video_dim}")
        return steps(video)
    B, M = video.shape[:2]
    flat = rescale(video.reshape((B * M,) + video.shape[2:]))
    feats = ad.reshape(cnn_forward(flat, params, CNNConfig(out_dim=cfg.video_dim)), (B, M, cfg.video_dim))
    return [ad.index(feats, (slice(None), j)) for j in range(M)]


def encode_video(video: np.ndarray, params: Params, cfg: ModelConfig, mask=None):
    return encode_stack(video_inputs(video, params, cfg), params, "video_enc", cfg.n_video, cfg.video_layers, mask)


def init_common(params: Params, cfg: ModelConfig, rng, decoder_ctx: int) -> None:
    n = cfg.hidden
    init_encoder(params, "audio_enc", cfg.audio_dim, n, cfg.audio_layers, rng)
    if cfg.arch != "audio":
        if cfg.use_cnn:
            init_cnn(params, rng, CNNConfig(out_dim=cfg.video_dim))
        init_encoder(params, "video_enc", cfg.video_dim, cfg.n_video, cfg.video_layers, rng)
        if cfg.n_video != n:
            params.create("video_proj.W", (cfg.n_video, n), rng)
        params.create("au_head.W", (cfg.n_video, 2), rng)
        params.create("au_head.b", (2,), rng, init="const")
    lstm_params(params, "decoder", cfg.vocab + n, n, rng)
    params.create("dec_out.W", (decoder_ctx * n + n, n), rng)
    params.create("dec_out.b", (n,), rng, init="const")
    params.create("vocab_proj.W", (n, cfg.vocab), rng)
    params.create("vocab_proj.b", (cfg.vocab,), rng, init="const")


# ---------------------------------------------------------------------------
# attention and decoding


def attend(query, memory, mask=None):
    """Luong dot-product attention. Returns ``(context, weights)``."""
    scores = dot_scores(query, memory)
    weights = ad.softmax(scores, axis=-1, mask=None if mask is None else mask > 0)
    return weighted_sum(weights, memory), weights


def decoder_cell(y_prev: np.ndarray, o_D_prev, state, params: Params):
    x = ad.concat([ad.Tensor(y_prev), o_D_prev], axis=-1)
    return lstm_cell(x, state[0], state[1], params["decoder.W"], params["decoder.b"])


def output_layer(h, contexts: list, params: Params):
    """``o_D = W_D [h; contexts] + b_D`` and the vocabulary logits."""
    o_D = linear(ad.concat([h] + contexts, axis=-1), params["dec_out.W"], params["dec_out.b"])
    logits = linear(o_D, params["vocab_proj.W"], params["vocab_proj.b"])
    return o_D, logits


def ce_loss(p, targets, mask=None):
    """Mean negative log-likelihood of ``targets`` under probabilities ``p``
    (``L x V`` or ``B x L x V``); masked positions leave both the sum and the
    per-sentence length. Batched input averages the per-sentence losses."""
    p = ad.as_tensor(p)
    targets = np.asarray(targets)
    if targets.size == 0:
        raise ValueError("empty label")
    lp = ad.log(ad.pick(p, targets))
    return _masked_mean_nll(lp, mask)


def ce_from_logits(logits, targets, mask=None):
    lp = ad.pick(ad.log_softmax(logits, axis=-1), np.asarray(targets))
    return _masked_mean_nll(lp, mask)


def _masked_mean_nll(lp, mask):
    if mask is None:
        mask = np.ones(lp.shape)
    mask = np.asarray(mask, dtype=ad.get_default_dtype())
    if lp.ndim == 1:
        w = mask / mask.sum()
    else:
        w = mask / mask.sum(axis=-1, keepdims=True) / mask.shape[0]
    return ad.scale(ad.sum(ad.mul(lp, w)), -1.0)


def au_head(o_V_mem, params: Params):
    """Per-frame sigmoid regression of the two lip AUs from video encoder outputs."""
    return ad.sigmoid(linear(o_V_mem, params["au_head.W"], params["au_head.b"]))


def au_loss(pred, target, lam: float = 10.0, mask=None):
    """``lam / M * sum_j ||pred_j - target_j||^2`` (mean over frames, sum
    over the two channels); batched input averages per-utterance losses."""
    pred = ad.as_tensor(pred)
    target = np.asarray(target, dtype=ad.get_default_dtype())
    if pred.shape != target.shape:
        raise ad.ShapeError(f"au_loss: prediction {pred.shape} vs target {target.shape}")
    diff = ad.sub(pred, target)
    sq = ad.mul(diff, diff)
    if pred.ndim == 2:
        return ad.div(ad.scale(ad.sum(sq), lam), pred.shape[0])
    m = np.ones(pred.shape[:2]) if mask is None else np.asarray(mask)
    w = (m * lam / m.sum(axis=1, keepdims=True) / m.shape[0])[..., None] * np.ones(pred.shape)
    return ad.sum(ad.mul(sq, w.astype(ad.get_default_dtype())))
