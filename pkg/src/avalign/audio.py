"""Audio front-end: log-mel features, frame stacking, SNR-controlled mixing.

Constants follow the 22.05 kHz pipeline: 25 ms Hann window (551 samples),
10 ms hop (220 samples), 1024-point FFT, 30 mel bands over 80-11025 Hz,
8 frames stacked into a 240-dim vector every 3 hops.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass

import numpy as np

SAMPLE_RATE = 22050
WIN_LENGTH = 551
HOP_LENGTH = 220
N_FFT = 1024
N_MELS = 30
F_MIN = 80.0
F_MAX = 11025.0
LOG_FLOOR = 1e-6
STACK = 8
STACK_SHIFT = 3
FEATURE_DIM = STACK * N_MELS
# seconds between consecutive stacked vectors
AUDIO_PERIOD_S = STACK_SHIFT * HOP_LENGTH / SAMPLE_RATE


class LengthError(ValueError):
    pass


class DegeneratePowerError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        self.samples = np.asarray(self.samples, dtype=np.float64)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class AudioFeatureSeq:
    vectors: np.ndarray
    frame_period_s: float = AUDIO_PERIOD_S

    def __post_init__(self):
        v = np.asarray(self.vectors)
        if v.ndim != 2 or v.shape[1] != FEATURE_DIM or v.shape[0] < 1:
            raise ValueError(f"audio features must be N x {FEATURE_DIM} with N >= 1, got {v.shape}")
        self.vectors = v

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @staticmethod
    def frame_center_s(i) -> np.ndarray:
        """Centre time of stacked vector ``i`` (middle of its 8 STFT windows)."""
        first = np.asarray(i) * STACK_SHIFT * HOP_LENGTH
        span = (STACK - 1) * HOP_LENGTH + WIN_LENGTH
        return (first + span / 2.0) / SAMPLE_RATE


def resample(w: Waveform, rate: int = SAMPLE_RATE) -> Waveform:
    """Linear-interpolation resampling."""
    if w.sample_rate == rate:
        return Waveform(w.samples.copy(), rate)
    n_out = int(round(len(w.samples) * rate / w.sample_rate))
    t_out = np.arange(n_out) / rate
    t_in = np.arange(len(w.samples)) / w.sample_rate
    return Waveform(np.interp(t_out, t_in, w.samples), rate)


def read_wav(path) -> Waveform:
    """Read 16-bit PCM mono RIFF and resample to 22050 Hz."""
    with wave.open(str(path), "rb") as fh:
        if fh.getsampwidth() != 2 or fh.getnchannels() != 1:
            raise ValueError(f"{path}: expected 16-bit mono PCM")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return resample(Waveform(samples, rate))


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(w.sample_rate))
        fh.writeframes(pcm.tobytes())


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_edges_hz() -> np.ndarray:
    """The 32 band edges, equally spaced on the mel scale."""
    return mel_to_hz(np.linspace(hz_to_mel(F_MIN), hz_to_mel(F_MAX), N_MELS + 2))


def mel_filterbank(sample_rate: int = SAMPLE_RATE, n_fft: int = N_FFT) -> np.ndarray:
    """``N_MELS x (n_fft//2 + 1)`` triangular filters with unit peak."""
    edges = mel_edges_hz()
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def _hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


_FBANK = mel_filterbank()
_WINDOW = _hann(WIN_LENGTH)


def n_stft_frames(n_samples: int) -> int:
    return 1 + (n_samples - WIN_LENGTH) // HOP_LENGTH


def n_stacked(n_frames: int) -> int:
    return 1 + (n_frames - STACK) // STACK_SHIFT


def log_mel_spectrogram(w: Waveform) -> np.ndarray:
    """``T x 30`` log mel magnitudes, ``T = 1 + (len - 551) // 220``."""
    if w.sample_rate != SAMPLE_RATE:
        w = resample(w)
    x = w.samples
    if len(x) < WIN_LENGTH:
        raise LengthError(f"waveform of {len(x)} samples is shorter than one window")
    T = n_stft_frames(len(x))
    idx = np.arange(WIN_LENGTH)[None, :] + HOP_LENGTH * np.arange(T)[:, None]
    frames = x[idx] * _WINDOW
    mag = np.abs(np.fft.rfft(frames, n=N_FFT, axis=1))
    return np.log(mag @ _FBANK.T + LOG_FLOOR)


def stack_frames(spec: np.ndarray) -> AudioFeatureSeq:
    """Stack 8 consecutive frames (row-major) every 3 frames."""
    spec = np.asarray(spec)
    T = spec.shape[0]
    if T < STACK:
        raise LengthError(f"need at least {STACK} frames, got {T}")
    N = n_stacked(T)
    idx = np.arange(STACK)[None, :] + STACK_SHIFT * np.arange(N)[:, None]
    return AudioFeatureSeq(spec[idx].reshape(N, STACK * spec.shape[1]))


def audio_features(w: Waveform) -> AudioFeatureSeq:
    return stack_frames(log_mel_spectrogram(w))


def normalize_features(vectors: np.ndarray) -> np.ndarray:
    """Per-utterance mean/variance normalisation of each feature dimension."""
    mu = vectors.mean(axis=0, keepdims=True)
    sd = vectors.std(axis=0, keepdims=True)
    return (vectors - mu) / np.maximum(sd, 1e-3)


def power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


def noise_gain(clean: np.ndarray, noise: np.ndarray, snr_db: float) -> float:
    p_clean, p_noise = power(clean), power(noise)
    if p_clean == 0.0 or p_noise == 0.0:
        raise DegeneratePowerError("clean or noise signal has zero power")
    return float(np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0))))


def _fit_noise(noise: np.ndarray, n: int) -> np.ndarray:
    if len(noise) == 0:
        raise DegeneratePowerError("empty noise signal")
    reps = -(-n // len(noise))
    return np.tile(noise, reps)[:n]


def scaled_noise(clean: Waveform, noise: Waveform, snr_db: float) -> np.ndarray:
    """The additive noise component ``g * noise`` of :func:`mix_noise`."""
    n = _fit_noise(noise.samples, len(clean.samples))
    return noise_gain(clean.samples, n, snr_db) * n


def mix_noise(clean: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    """``clean + g * noise`` with ``g`` set so that the utterance-level power
    ratio equals ``snr_db``. Noise shorter than the clean signal is tiled."""
    if noise.sample_rate != clean.sample_rate:
        noise = resample(noise, clean.sample_rate)
    return Waveform(clean.samples + scaled_noise(clean, noise, snr_db), clean.sample_rate)


def measured_snr_db(clean: np.ndarray, noise_component: np.ndarray) -> float:
    return 10.0 * np.log10(power(clean) / power(noise_component))
