"""Error rates, alignment diagnostics, inference-time controls, modality lag
and per-sentence error analysis."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats
from scipy.special import xlogy

from . import autodiff as ad
from .corpus import EOS, SOS, VOCAB_SIZE, encode
from .models.common import AlignmentRecord, Batch, ce_from_logits, one_hot, output_layer
from .nn import Params, lstm_cell, lstm_params

# ---------------------------------------------------------------------------
# error rate


def levenshtein(a, b) -> int:
    """Unit-cost edit distance, two-row dynamic programme."""
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def cer(hyp: str, ref: str) -> float:
    """Character error rate; can exceed 1 for long hypotheses."""
    if not ref:
        raise ValueError("empty reference")
    return levenshtein(hyp, ref) / len(ref)


# ---------------------------------------------------------------------------
# alignment statistics


def resample_bilinear(mat: np.ndarray, shape=(64, 64)) -> np.ndarray:
    """Resample a matrix onto a fixed grid, corners mapped to corners."""
    mat = np.asarray(mat, dtype=np.float64)
    rows = np.linspace(0, mat.shape[0] - 1, shape[0])
    cols = np.linspace(0, mat.shape[1] - 1, shape[1])
    tmp = np.stack([np.interp(cols, np.arange(mat.shape[1]), r) for r in mat])
    return np.stack([np.interp(rows, np.arange(mat.shape[0]), c) for c in tmp.T], axis=1)


def mean_alignment(records, shape=(64, 64), field: str = "alpha") -> np.ndarray:
    mats = [getattr(r, field) if isinstance(r, AlignmentRecord) else r for r in records]
    if not mats:
        raise ValueError("no alignment records")
    return np.mean([resample_bilinear(m, shape) for m in mats], axis=0)


def monotonicity_score(alpha):
    """Spearman correlation between audio index and the attended video
    index (row argmax, ties to the lowest index).

    ``None`` for fewer than two rows; 0.0 when the argmax never moves (see
    :func:`argmax_collapsed`).
    """
    alpha = np.asarray(alpha)
    if alpha.shape[0] < 2:
        return None
    peaks = np.argmax(alpha, axis=1)
    if np.all(peaks == peaks[0]):
        return 0.0
    return float(stats.spearmanr(np.arange(len(peaks)), peaks)[0])


def argmax_collapsed(alpha) -> bool:
    peaks = np.argmax(np.asarray(alpha), axis=1)
    return bool(np.all(peaks == peaks[0]))


def collapse_diagnostic(alpha) -> dict:
    """Mean mass on the first video frame and mean row entropy (nats)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    ent = -xlogy(alpha, alpha).sum(axis=1)
    return {"first_frame_mass": float(alpha[:, 0].mean()), "mean_row_entropy": float(ent.mean())}


# ---------------------------------------------------------------------------
# inference-time controls


def _valid_lengths(mask) -> np.ndarray:
    return np.asarray(mask).sum(axis=1).astype(int)


def random_memory_transform(seed: int):
    """Replace each utterance's valid memory rows with uniform noise spanning
    the same value range."""

    def fn(mem, mask):
        rng = np.random.default_rng(seed)
        out = mem.copy()
        for b, m in enumerate(_valid_lengths(mask)):
            v = mem[b, :m]
            out[b, :m] = rng.uniform(v.min(), v.max(), size=v.shape)
        return out

    return fn


def reverse_memory(mem, mask):
    out = mem.copy()
    for b, m in enumerate(_valid_lengths(mask)):
        out[b, :m] = mem[b, :m][::-1]
    return out


def control_random_memory(model, batch: Batch, seed: int = 0, max_len: int = 40):
    return model.greedy_decode(batch, max_len, video_transform=random_memory_transform(seed))


def control_time_reverse(model, batch: Batch, max_len: int = 40):
    return model.greedy_decode(batch, max_len, video_transform=reverse_memory)


def pad_video(batch: Batch, n_pre: int, n_post: int) -> Batch:
    """Insert blank frames before and after each utterance's video. Blank is
    a zero feature row, or an all-zero (black) image in image mode."""
    B, M = batch.video.shape[:2]
    lens = _valid_lengths(batch.video_mask)
    new_m = M + n_pre + n_post
    video = np.zeros((B, new_m) + batch.video.shape[2:], dtype=batch.video.dtype)
    vmask = np.zeros((B, new_m), dtype=batch.video_mask.dtype)
    au = np.zeros((B, new_m, 2), dtype=batch.au.dtype)
    for b, m in enumerate(lens):
        video[b, n_pre : n_pre + m] = batch.video[b, :m]
        au[b, n_pre : n_pre + m] = batch.au[b, :m]
        vmask[b, : m + n_pre + n_post] = 1
    return Batch(batch.audio, batch.audio_mask, video, vmask, au, batch.dec_in, batch.dec_out, batch.dec_mask, batch.ids)


def control_blank_ends(model, batch: Batch, pre_s: float, post_s: float, fps: float = 25.0, max_len: int = 40):
    if not (0 <= pre_s <= 4 and 0 <= post_s <= 4):
        raise ValueError("blank segments must be between 0 and 4 seconds")
    n_pre, n_post = int(round(pre_s * fps)), int(round(post_s * fps))
    return model.greedy_decode(pad_video(batch, n_pre, n_post), max_len), (n_pre, n_post)


# ---------------------------------------------------------------------------
# modality lag


@dataclass
class LagTrace:
    index: np.ndarray  # audio frame (per=row) or video frame (per=col)
    time_s: np.ndarray
    lag_ms: np.ndarray  # positive: video leads
    spread_frames: np.ndarray  # fitted standard deviation, in attended-axis frames
    audio_period_s: float
    video_period_s: float

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "time_s", "lag_ms"])
            for i, t, lag in zip(self.index, self.time_s, self.lag_ms):
                w.writerow([int(i), f"{t:.6f}", f"{lag:.6f}"])


def _weighted_gaussian(weights: np.ndarray, axis_len: int):
    pos = np.arange(axis_len)
    tot = weights.sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = (weights * pos).sum(axis=-1) / tot
        var = (weights * (pos - mean[..., None]) ** 2).sum(axis=-1) / tot
    return mean, np.sqrt(var)


def modality_lag(
    alpha,
    audio_period_s: float,
    video_period_s: float,
    audio_offset_s: float = 0.0,
    video_offset_s: float = 0.0,
    per: str = "row",
) -> LagTrace:
    """Fit a weighted normal to each alignment row (or column) and read the
    lag off its mean: ``lag = t_audio - t_video`` so positive means the
    video leads. Frame ``k`` of a stream sits at ``offset + k * period``."""
    if audio_period_s <= 0 or video_period_s <= 0:
        raise ValueError("frame periods must be positive")
    alpha = np.asarray(alpha, dtype=np.float64)
    N, M = alpha.shape
    if per == "row":
        j_hat, sd = _weighted_gaussian(alpha, M)
        idx = np.arange(N)
        t_a = audio_offset_s + idx * audio_period_s
        t_v = video_offset_s + j_hat * video_period_s
        time = t_a
    elif per == "col":
        i_hat, sd = _weighted_gaussian(alpha.T, N)
        idx = np.arange(M)
        t_a = audio_offset_s + i_hat * audio_period_s
        t_v = video_offset_s + idx * video_period_s
        time = t_v
    else:
        raise ValueError("per must be 'row' or 'col'")
    lag = (t_a - t_v) * 1000.0
    keep = np.isfinite(lag)
    return LagTrace(idx[keep], time[keep], lag[keep], sd[keep], audio_period_s, video_period_s)


def symbol_lags(trace: LagTrace, truth: list, frame_time_fn) -> list:
    """Median estimated lag over the audio frames inside each symbol's audio
    span. ``frame_time_fn`` maps audio frame indices to their centre time."""
    centres = frame_time_fn(trace.index)
    out = []
    for seg in truth:
        inside = (centres >= seg["audio_start_s"]) & (centres < seg["audio_end_s"])
        est = float(np.median(trace.lag_ms[inside])) if inside.any() else float("nan")
        out.append(dict(char=seg["char"], true_lag_ms=float(seg["lag_ms"]), est_lag_ms=est))
    return out


# ---------------------------------------------------------------------------
# character language model


class CharLM:
    """Decoder-only character model: LSTM over ``[y_{k-1}; o_D_{k-1}]``,
    ``o_D = W_D h + b_D``, softmax output. No encoder conditioning."""

    def __init__(self, hidden: int = 32, seed: int = 0, vocab: int = VOCAB_SIZE):
        rng = np.random.default_rng(seed)
        self.hidden, self.vocab = hidden, vocab
        self.params = Params()
        lstm_params(self.params, "decoder", vocab + hidden, hidden, rng)
        self.params.create("dec_out.W", (hidden, hidden), rng)
        self.params.create("dec_out.b", (hidden,), rng, init="const")
        # zero output layer: the untrained model is exactly uniform
        self.params.create("vocab_proj.W", (hidden, vocab), rng, init="const")
        self.params.create("vocab_proj.b", (vocab,), rng, init="const")

    def _logits(self, dec_in: np.ndarray):
        B, L = dec_in.shape
        dt = ad.get_default_dtype()
        y = one_hot(dec_in, self.vocab)
        h = ad.Tensor(np.zeros((B, self.hidden), dtype=dt))
        c = ad.Tensor(np.zeros((B, self.hidden), dtype=dt))
        o_D = ad.Tensor(np.zeros((B, self.hidden), dtype=dt))
        out = []
        for k in range(L):
            x = ad.concat([ad.Tensor(y[:, k]), o_D], axis=-1)
            h, c = lstm_cell(x, h, c, self.params["decoder.W"], self.params["decoder.b"])
            o_D, lg = output_layer(h, [], self.params)
            out.append(lg)
        return ad.stack(out, axis=1)

    @staticmethod
    def _arrays(sentences: list):
        L = max(len(s) for s in sentences) + 1
        B = len(sentences)
        dec_in = np.zeros((B, L), dtype=np.int64)
        dec_out = np.zeros((B, L), dtype=np.int64)
        mask = np.zeros((B, L))
        for b, s in enumerate(sentences):
            ids = encode(s)
            dec_in[b, 0] = SOS
            dec_in[b, 1 : len(ids) + 1] = ids
            dec_out[b, : len(ids)] = ids
            dec_out[b, len(ids)] = EOS
            mask[b, : len(ids) + 1] = 1
        return dec_in, dec_out, mask

    def loss(self, sentences: list):
        dec_in, dec_out, mask = self._arrays(sentences)
        return ce_from_logits(self._logits(dec_in), dec_out, mask)

    def score(self, sentence: str) -> float:
        """Mean negative log-probability per character, EOS included (nats)."""
        if not sentence:
            raise ValueError("empty sentence")
        with ad.no_grad():
            return float(self.loss([sentence]).data)


def char_lm(train_labels: list, hidden: int = 32, epochs: int = 30, lr: float = 3e-3, batch_size: int = 16, seed: int = 0) -> CharLM:
    """Train a :class:`CharLM` on training-split labels."""
    from .training import Adam, clip_grads

    if not train_labels:
        raise ValueError("no training labels")
    lm = CharLM(hidden, seed)
    opt = Adam(lr)
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(len(train_labels))
        for i in range(0, len(order), batch_size):
            ad.zero_grad(lm.params.values())
            loss = lm.loss([train_labels[j] for j in order[i : i + batch_size]])
            grads, _ = clip_grads(ad.backward(loss), 1.0)
            opt.step(lm.params, grads)
    return lm


def char_lm_score(lm: CharLM, sentence: str) -> float:
    return lm.score(sentence)


# ---------------------------------------------------------------------------
# per-sentence deltas


@dataclass
class SentenceDelta:
    id: str
    ref: str
    hyp_audio: str
    hyp_av: str
    cer_audio: float
    cer_av: float
    delta: float
    predictability: float


def error_delta_report(results_audio: list, results_av: list, lm: CharLM | None = None, thresholds=None):
    """Per-sentence ``delta = cer_audio - cer_av`` sorted by LM cross-entropy
    (most predictable first), plus a table of the fraction of sentences
    whose improvement is at least each non-negative threshold."""
    a = {r["id"]: r for r in results_audio}
    v = {r["id"]: r for r in results_av}
    if set(a) != set(v) or len(a) != len(results_audio):
        raise ValueError("the two result sets do not cover the same manifest")
    rows = []
    for uid in (r["id"] for r in results_audio):
        ra, rv = a[uid], v[uid]
        if ra["ref"] != rv["ref"]:
            raise ValueError(f"{uid}: references differ")
        pred = lm.score(ra["ref"]) if lm is not None else float("nan")
        rows.append(
            SentenceDelta(uid, ra["ref"], ra["hyp"], rv["hyp"], ra["cer"], rv["cer"], ra["cer"] - rv["cer"], pred)
        )
    if lm is not None:
        rows.sort(key=lambda r: (r.predictability, r.id))
    return rows, improvement_cdf([r.delta for r in rows], thresholds)


def improvement_cdf(deltas, thresholds=None) -> list:
    d = np.asarray(deltas, dtype=np.float64)
    if thresholds is None:
        top = max(float(d.max()) if d.size else 0.0, 0.0)
        thresholds = np.linspace(0.0, top, 21) if top > 0 else np.array([0.0])
    return [(float(t), float(np.mean(d >= t)) if d.size else 0.0) for t in thresholds]


# ---------------------------------------------------------------------------
# dumps


def write_pgm(path, mat: np.ndarray) -> None:
    """8-bit binary PGM, scaled so the maximum maps to 255."""
    mat = np.asarray(mat, dtype=np.float64)
    peak = mat.max() if mat.size and mat.max() > 0 else 1.0
    img = np.clip(np.round(mat / peak * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def write_alignment_csv(path, rec: AlignmentRecord) -> None:
    """Header row names each block (``alpha``, ``beta``, ``beta_video``) with
    its shape; rows follow in row-major order."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for name in ("alpha", "beta", "beta_video"):
            mat = getattr(rec, name)
            if mat is None:
                continue
            w.writerow([name, mat.shape[0], mat.shape[1]])
            for row in mat:
                w.writerow([f"{x:.8g}" for x in row])


def read_alignment_csv(path) -> AlignmentRecord:
    rec = AlignmentRecord()
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    i = 0
    while i < len(rows):
        name, r, _ = rows[i][0], int(rows[i][1]), int(rows[i][2])
        setattr(rec, name, np.array([[float(x) for x in row] for row in rows[i + 1 : i + 1 + r]]))
        i += 1 + r
    return rec
