"""Synthetic audio-visual corpus with known cross-modal lag.

Every character owns a symbol: an audio snippet (a harmonic tone shaped by
two formant resonances), a 128-dim visual signature, a mouth-opening profile
and a signed audio-visual lag (positive: video leads). Characters in a
confusable group share the *identical* audio snippet and differ only in the
visual stream, so audio alone cannot tell them apart.
"""

from __future__ import annotations

import json
import string
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import audio as af
from .tensorio import FormatError, read_tensors, write_tensors

# ---------------------------------------------------------------------------
# vocabulary

PAD, SOS, EOS = 0, 1, 2
CHARS = string.ascii_lowercase + " '"
SPECIALS = ("<pad>", "<sos>", "<eos>")
VOCAB_SIZE = len(SPECIALS) + len(CHARS)
_CHAR_TO_ID = {c: i + len(SPECIALS) for i, c in enumerate(CHARS)}


def encode(text: str) -> list:
    try:
        return [_CHAR_TO_ID[c] for c in text]
    except KeyError as e:
        raise ValueError(f"character {e.args[0]!r} is outside the vocabulary") from None


def decode(ids) -> str:
    out = []
    for i in ids:
        i = int(i)
        if i == EOS:
            break
        if i >= len(SPECIALS):
            out.append(CHARS[i - len(SPECIALS)])
    return "".join(out)


# ---------------------------------------------------------------------------
# action units

AU_GAINS = (3.0, 2.4)  # mouth opening -> raw AU25, AU26 intensity
VIDEO_DIM = 128
VIDEO_PERIOD_S = 0.040
IMAGE_SIZE = 36


def normalize_au(intensity):
    """Map a raw AU intensity (0..5 scale) to [0, 1]: clip at 3, divide by 3."""
    x = np.asarray(intensity, dtype=np.float64)
    if np.any(x < 0):
        raise ValueError("AU intensity must be non-negative")
    out = np.minimum(x, 3.0) / 3.0
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# symbols


@dataclass
class SymbolSpec:
    char: str
    duration_s: float
    pitch_hz: float
    formants_hz: tuple
    audio_seed: int
    openness: float
    width: float
    video_vector: np.ndarray = field(repr=False)
    av_lag_ms: float = 0.0
    confusable_group: int | None = None

    def __post_init__(self):
        if abs(self.av_lag_ms) > 200.0:
            raise ValueError("|av_lag_ms| must not exceed 200")

    def audio_template(self) -> np.ndarray:
        n = int(round(self.duration_s * af.SAMPLE_RATE))
        if self.char == " ":
            return np.zeros(n)
        return _tone(n, self.pitch_hz, self.formants_hz, np.random.default_rng(self.audio_seed))

    def to_json(self) -> dict:
        d = asdict(self)
        d["video_vector"] = self.video_vector.tolist()
        d["formants_hz"] = list(self.formants_hz)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SymbolSpec":
        d = dict(d)
        d["video_vector"] = np.asarray(d["video_vector"], dtype=np.float64)
        d["formants_hz"] = tuple(d["formants_hz"])
        return cls(**d)


def _tone(n: int, f0: float, formants, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / af.SAMPLE_RATE
    out = np.zeros(n)
    n_harm = int(min(40, (af.SAMPLE_RATE / 2 - 200) // f0))
    for k in range(1, n_harm + 1):
        fk = k * f0
        amp = sum(np.exp(-0.5 * ((fk - F) / 120.0) ** 2) for F in formants) + 0.02
        out += amp * np.sin(2 * np.pi * fk * t + rng.uniform(0, 2 * np.pi))
    ramp = min(n // 4, int(0.02 * af.SAMPLE_RATE))
    env = np.ones(n)
    if ramp > 0:
        env[:ramp] = np.linspace(0, 1, ramp)
        env[-ramp:] = np.linspace(1, 0, ramp)
    out *= env
    return 0.3 * out / (np.max(np.abs(out)) + 1e-12)


DEFAULT_PAIRS = (("m", "n"), ("p", "b"), ("f", "v"), ("t", "d"), ("k", "g"), ("s", "z"))


def make_symbols(
    seed: int = 0,
    lag_range_ms=(0.0, 0.0),
    confusable_pairs=DEFAULT_PAIRS,
    duration_range_s=(0.12, 0.24),
) -> dict:
    """Build one :class:`SymbolSpec` per content character."""
    rng = np.random.default_rng(seed)
    group_of = {}
    for g, pair in enumerate(confusable_pairs):
        for c in pair:
            group_of[c] = g
    # acoustic identities: one per non-confusable char plus one per group
    acoustic = {}
    f1_grid = np.linspace(300, 1000, 8)
    f2_grid = np.linspace(1100, 3200, 6)
    combos = [(a, b) for a in f1_grid for b in f2_grid]
    order = rng.permutation(len(combos))
    pitches = rng.uniform(100, 260, size=len(CHARS))
    durations = rng.uniform(*duration_range_s, size=len(CHARS))
    specs = {}
    for ci, c in enumerate(CHARS):
        key = ("g", group_of[c]) if c in group_of else ("c", c)
        if key not in acoustic:
            k = len(acoustic)
            acoustic[key] = dict(
                pitch_hz=float(pitches[k]),
                formants_hz=tuple(float(f) for f in combos[order[k]]),
                duration_s=float(durations[k]),
                audio_seed=int(rng.integers(2**31)),
            )
        vec = rng.normal(size=VIDEO_DIM)
        vec /= np.linalg.norm(vec) / np.sqrt(VIDEO_DIM)
        openness = 0.0 if c == " " else float(rng.uniform(0.3, 1.0))
        specs[c] = SymbolSpec(
            char=c,
            openness=openness,
            width=float(rng.uniform(0.0, 1.0)),
            video_vector=np.zeros(VIDEO_DIM) if c == " " else vec,
            av_lag_ms=0.0 if c == " " else float(rng.uniform(*lag_range_ms)),
            confusable_group=group_of.get(c),
            **acoustic[key],
        )
    return specs


# ---------------------------------------------------------------------------
# utterances


@dataclass
class UtteranceSample:
    id: str
    label: str
    waveform: af.Waveform
    video: np.ndarray  # M x 128 features, or M x 36 x 36 x 3 images in [0, 255]
    au_targets: np.ndarray  # M x 2 in [0, 1]
    truth_alignment: list = field(default_factory=list)
    video_period_s: float = VIDEO_PERIOD_S
    features: np.ndarray | None = None  # precomputed N x 240 audio, bypasses the waveform

    @property
    def n_video(self) -> int:
        return self.video.shape[0]

    @property
    def video_mode(self) -> str:
        return "images" if self.video.ndim == 4 else "features"

    def audio_features(self, noise: af.Waveform | None = None, snr_db: float | None = None) -> np.ndarray:
        if self.features is not None:
            return self.features
        w = self.waveform
        if snr_db is not None:
            w = af.mix_noise(w, noise, snr_db)
        return af.audio_features(w).vectors


def _envelope(t: np.ndarray, start: float, dur: float) -> np.ndarray:
    u = (t - start) / dur
    inside = (u >= 0) & (u <= 1)
    return np.where(inside, np.sin(np.pi * np.clip(u, 0, 1)) ** 2, 0.0)


def mouth_track(symbols: dict, text: str, starts, t: np.ndarray):
    """Mouth opening, width and visual signature at times ``t``."""
    open_, width = np.zeros_like(t), np.zeros_like(t)
    feat = np.zeros((len(t), VIDEO_DIM))
    for c, s in zip(text, starts):
        sp = symbols[c]
        env = _envelope(t, s - sp.av_lag_ms / 1000.0, sp.duration_s)
        open_ += sp.openness * env
        width += sp.width * env
        feat += env[:, None] * sp.video_vector[None, :]
    return open_, width, feat


def au_from_mouth(mouth: np.ndarray) -> np.ndarray:
    """3-frame triangular smoothing, two gains, then clip-and-scale."""
    padded = np.pad(mouth, 1, mode="edge")
    smooth = 0.25 * padded[:-2] + 0.5 * padded[1:-1] + 0.25 * padded[2:]
    raw = np.stack([g * smooth for g in AU_GAINS], axis=1)
    return normalize_au(np.clip(raw, 0.0, 5.0))


def render_mouth(open_: float, width: float, tint: np.ndarray) -> np.ndarray:
    """A 36x36 RGB lip image: dark ellipse on a skin background."""
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE] + 0.5
    c = IMAGE_SIZE / 2
    ry = 1.5 + 10.0 * open_
    rx = 7.0 + 7.0 * width
    inside = ((yy - c) / ry) ** 2 + ((xx - c) / rx) ** 2 <= 1.0
    lips = (((yy - c) / (ry + 2.5)) ** 2 + ((xx - c) / (rx + 2.5)) ** 2 <= 1.0) & ~inside
    img = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3))
    img[:] = (205.0, 160.0, 140.0)
    img[lips] = np.clip(np.array([170.0, 80.0, 90.0]) + 30.0 * tint, 0, 255)
    img[inside] = (40.0, 20.0, 25.0)
    return img


def generate_utterance(
    symbols: dict,
    text: str,
    seed: int = 0,
    uid: str = "utt",
    video_mode: str = "features",
    feature_noise: float = 0.1,
    pad_s: float = 0.15,
) -> UtteranceSample:
    """Concatenate symbol audio; lay out each symbol's visual track shifted
    earlier by its lag; derive AU targets from the mouth opening."""
    missing = sorted({c for c in text if c not in symbols})
    if missing:
        raise ValueError(f"no symbol spec for characters {missing}")
    if not text:
        raise ValueError("empty text")
    rng = np.random.default_rng(seed)
    pad = np.zeros(int(round(pad_s * af.SAMPLE_RATE)))
    pieces, starts, truth = [pad], [], []
    cursor = len(pad)
    for c in text:
        sp = symbols[c]
        tpl = sp.audio_template()
        start_s = cursor / af.SAMPLE_RATE
        end_s = (cursor + len(tpl)) / af.SAMPLE_RATE
        lag_s = sp.av_lag_ms / 1000.0
        starts.append(start_s)
        truth.append(
            dict(
                char=c,
                audio_start_s=start_s,
                audio_end_s=end_s,
                video_start_s=start_s - lag_s,
                video_end_s=end_s - lag_s,
                lag_ms=sp.av_lag_ms,
            )
        )
        pieces.append(tpl)
        cursor += len(tpl)
    pieces.append(pad)
    wav = np.concatenate(pieces)
    total_s = len(wav) / af.SAMPLE_RATE
    M = int(total_s / VIDEO_PERIOD_S)
    t = np.arange(M) * VIDEO_PERIOD_S
    mouth, width, feat = mouth_track(symbols, text, starts, t)
    if video_mode == "features":
        video = feat + feature_noise * rng.normal(size=feat.shape)
    elif video_mode == "images":
        tint = feat[:, :3] / np.sqrt(VIDEO_DIM)
        video = np.stack([render_mouth(mouth[j], width[j], tint[j]) for j in range(M)])
        video = np.clip(video + feature_noise * 20.0 * rng.normal(size=video.shape), 0.0, 255.0)
    else:
        raise ValueError(f"unknown video mode {video_mode!r}")
    return UtteranceSample(
        id=uid,
        label=text,
        waveform=af.Waveform(wav),
        video=video,
        au_targets=au_from_mouth(mouth),
        truth_alignment=truth,
    )


# ---------------------------------------------------------------------------
# corpora


@dataclass
class CorpusConfig:
    n_train: int = 300
    n_test: int = 50
    min_len: int = 5
    max_len: int = 12
    confusable_fraction: float = 0.5
    lag_range_ms: tuple = (-20.0, 80.0)
    confusable_pairs: tuple = DEFAULT_PAIRS
    video_mode: str = "features"
    feature_noise: float = 0.1
    space_prob: float = 0.0
    symbol_seed: int | None = None
    n_plain: int | None = None  # use only the first n non-confusable letters
    pad_s: float = 0.15
    duration_range_s: tuple = (0.12, 0.24)

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        d = dict(d)
        if "lag_range_ms" in d:
            d["lag_range_ms"] = tuple(d["lag_range_ms"])
        if "duration_range_s" in d:
            d["duration_range_s"] = tuple(d["duration_range_s"])
        if "confusable_pairs" in d:
            d["confusable_pairs"] = tuple(tuple(p) for p in d["confusable_pairs"])
        return cls(**d)


@dataclass
class Corpus:
    config: CorpusConfig
    symbols: dict
    train: list
    test: list


def _sample_text(rng, length: int, conf_chars: list, plain_chars: list, frac: float, space_prob: float) -> str:
    out = []
    for k in range(length):
        if 0 < k < length - 1 and out[-1] != " " and rng.random() < space_prob:
            out.append(" ")
        elif conf_chars and rng.random() < frac:
            out.append(conf_chars[rng.integers(len(conf_chars))])
        else:
            out.append(plain_chars[rng.integers(len(plain_chars))])
    return "".join(out)


def generate_corpus(config: CorpusConfig, seed: int = 0) -> Corpus:
    """Deterministic per seed; train and test sentences are disjoint."""
    rng = np.random.default_rng(seed)
    sym_seed = seed if config.symbol_seed is None else config.symbol_seed
    symbols = make_symbols(sym_seed, config.lag_range_ms, config.confusable_pairs, config.duration_range_s)
    conf = sorted(c for c, s in symbols.items() if s.confusable_group is not None)
    plain = sorted(c for c, s in symbols.items() if s.confusable_group is None and c not in " '")
    if config.n_plain is not None:
        plain = plain[: config.n_plain]
    texts, seen = [], set()
    total = config.n_train + config.n_test
    attempts = 0
    while len(texts) < total:
        attempts += 1
        if attempts > 100 * total:
            raise RuntimeError("could not draw enough distinct sentences")
        n = int(rng.integers(config.min_len, config.max_len + 1))
        t = _sample_text(rng, n, conf, plain, config.confusable_fraction, config.space_prob)
        if t not in seen:
            seen.add(t)
            texts.append(t)
    samples = [
        generate_utterance(
            symbols,
            t,
            seed=int(rng.integers(2**31)),
            uid=f"{'train' if i < config.n_train else 'test'}{i if i < config.n_train else i - config.n_train:05d}",
            video_mode=config.video_mode,
            feature_noise=config.feature_noise,
            pad_s=config.pad_s,
        )
        for i, t in enumerate(texts)
    ]
    return Corpus(config, symbols, samples[: config.n_train], samples[config.n_train :])


def babble_noise(n_samples: int, seed: int = 0, talkers: int = 6) -> af.Waveform:
    """Pseudo-babble: ``talkers`` streams of random-pitch, random-formant
    symbol-like tones, summed."""
    rng = np.random.default_rng(seed)
    out = np.zeros(n_samples)
    for _ in range(talkers):
        pos = -int(rng.integers(0, int(0.2 * af.SAMPLE_RATE)))
        stream = np.zeros(n_samples)
        while pos < n_samples:
            n = int(rng.uniform(0.1, 0.3) * af.SAMPLE_RATE)
            tone = _tone(n, rng.uniform(90, 280), (rng.uniform(300, 1000), rng.uniform(1100, 3200)), rng)
            lo, hi = max(pos, 0), min(pos + n, n_samples)
            if hi > lo:
                stream[lo:hi] += tone[lo - pos : hi - pos]
            pos += n
        out += stream
    return af.Waveform(out)


# ---------------------------------------------------------------------------
# on-disk format


def write_corpus(corpus: Corpus, out_dir) -> dict:
    """Write tensor files plus ``train.json``/``test.json`` manifests and
    ``symbols.json``. Returns the manifest paths."""
    out = Path(out_dir)
    (out / "data").mkdir(parents=True, exist_ok=True)
    paths = {}
    for split, samples in (("train", corpus.train), ("test", corpus.test)):
        rows = []
        for s in samples:
            a = out / "data" / f"{s.id}.audio.avt"
            v = out / "data" / f"{s.id}.video.avt"
            u = out / "data" / f"{s.id}.au.avt"
            write_tensors(a, {"waveform": s.waveform.samples}, {"sample_rate": s.waveform.sample_rate})
            key = "frames" if s.video_mode == "images" else "features"
            write_tensors(v, {key: s.video}, {"frame_period_s": s.video_period_s})
            write_tensors(u, {"au": s.au_targets}, {"normalized": True})
            rows.append(
                dict(
                    id=s.id,
                    audio_path=str(a.relative_to(out)),
                    video_path=str(v.relative_to(out)),
                    au_path=str(u.relative_to(out)),
                    label=s.label,
                    truth_alignment=s.truth_alignment,
                )
            )
        p = out / f"{split}.json"
        p.write_text(json.dumps(rows, indent=1, sort_keys=True))
        paths[split] = p
    cfg = asdict(corpus.config)
    (out / "symbols.json").write_text(
        json.dumps({"config": cfg, "symbols": {c: s.to_json() for c, s in corpus.symbols.items()}}, sort_keys=True)
    )
    return paths


def load_manifest(path, load_video: bool = True) -> list:
    """Read a manifest into :class:`UtteranceSample` objects.

    Audio files may hold a ``waveform`` (plus ``sample_rate``) or ready-made
    ``features`` (N x 240). AU files holding raw 0..5 intensities declare
    ``normalized: false`` and are clipped and scaled here.
    """
    path = Path(path)
    base = path.parent
    rows = json.loads(path.read_text())
    samples = []
    for r in rows:
        at, ameta = read_tensors(base / r["audio_path"])
        feats = None
        if "features" in at:
            feats = af.AudioFeatureSeq(at["features"]).vectors
            wav = af.Waveform(np.zeros(0) if "waveform" not in at else at["waveform"])
        elif "waveform" in at:
            wav = af.resample(af.Waveform(at["waveform"], int(ameta.get("sample_rate", af.SAMPLE_RATE))))
        else:
            raise FormatError(f"{r['audio_path']}: no waveform or features")
        video, period = np.zeros((0, VIDEO_DIM)), VIDEO_PERIOD_S
        if load_video:
            from .visual import ingest_video  # local import: visual depends on autodiff only

            video, period = ingest_video(base / r["video_path"])
        au = np.zeros((len(video), 2))
        if r.get("au_path"):
            ut, umeta = read_tensors(base / r["au_path"])
            au = ut["au"]
            if not umeta.get("normalized", True):
                au = normalize_au(au)
        samples.append(
            UtteranceSample(
                id=r["id"],
                label=r["label"],
                waveform=wav,
                video=video,
                au_targets=np.asarray(au, dtype=np.float64),
                truth_alignment=r.get("truth_alignment", []),
                video_period_s=period,
                features=feats,
            )
        )
    return samples


def load_symbols(path) -> dict:
    d = json.loads(Path(path).read_text())
    return {c: SymbolSpec.from_json(s) for c, s in d["symbols"].items()}
