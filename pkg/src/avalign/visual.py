"""Lip-image CNN: 36x36x3 frames to 128-dim features.

Layer plan (output shapes)::

    rescale           36x36x3
    conv 3x3          36x36x8
    res block         36x36x8
    res block /2      18x18x16
    res block /2       9x9x32
    res block /2       5x5x64   (ceil division)
    conv 5x5 valid     1x1x128

Residual blocks use full pre-activation (norm, relu, conv, norm, relu, conv);
downsampling blocks stride the first conv and project the skip path with a
1x1 stride-2 conv.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .nn import Params, conv2d, instance_norm
from .tensorio import FormatError, read_tensors, write_tensors

FEATURE_DIM = 128


@dataclass(frozen=True)
class CNNConfig:
    in_size: int = 36
    in_channels: int = 3
    stem: int = 8
    blocks: tuple = ((8, 1), (16, 2), (32, 2), (64, 2))
    out_dim: int = FEATURE_DIM

    @property
    def final_kernel(self) -> int:
        s = self.in_size
        for _, stride in self.blocks:
            s = -(-s // stride)
        return s


def rescale(frames):
    """Map pixel values in [0, 255] linearly onto [-1, 1]."""
    return np.asarray(frames, dtype=np.float64) / 127.5 - 1.0


def init_cnn(params: Params, rng, cfg: CNNConfig = CNNConfig(), prefix: str = "cnn") -> None:
    params.create(f"{prefix}.stem.k", (3, 3, cfg.in_channels, cfg.stem), rng)
    params.create(f"{prefix}.stem.b", (cfg.stem,), rng, init="const")
    c_in = cfg.stem
    for i, (c_out, stride) in enumerate(cfg.blocks):
        p = f"{prefix}.block{i}"
        params.create(f"{p}.norm1.g", (c_in,), rng, init="const", fill=1.0)
        params.create(f"{p}.norm1.b", (c_in,), rng, init="const")
        params.create(f"{p}.conv1.k", (3, 3, c_in, c_out), rng)
        params.create(f"{p}.norm2.g", (c_out,), rng, init="const", fill=1.0)
        params.create(f"{p}.norm2.b", (c_out,), rng, init="const")
        params.create(f"{p}.conv2.k", (3, 3, c_out, c_out), rng)
        params.create(f"{p}.conv2.b", (c_out,), rng, init="const")
        if stride != 1 or c_in != c_out:
            params.create(f"{p}.proj.k", (1, 1, c_in, c_out), rng)
        c_in = c_out
    params.create(f"{prefix}.head_norm.g", (c_in,), rng, init="const", fill=1.0)
    params.create(f"{prefix}.head_norm.b", (c_in,), rng, init="const")
    k = cfg.final_kernel
    params.create(f"{prefix}.head.k", (k, k, c_in, cfg.out_dim), rng)
    params.create(f"{prefix}.head.b", (cfg.out_dim,), rng, init="const")


def res_block(x, params, p: str, stride: int):
    y = ad.relu(instance_norm(x, params[f"{p}.norm1.g"], params[f"{p}.norm1.b"]))
    y = conv2d(y, params[f"{p}.conv1.k"], stride=stride)
    y = ad.relu(instance_norm(y, params[f"{p}.norm2.g"], params[f"{p}.norm2.b"]))
    y = conv2d(y, params[f"{p}.conv2.k"], params[f"{p}.conv2.b"])
    skip = conv2d(x, params[f"{p}.proj.k"], stride=stride) if f"{p}.proj.k" in params else x
    return ad.add(skip, y)


def cnn_forward(images, params, cfg: CNNConfig = CNNConfig(), prefix: str = "cnn", trace: list | None = None):
    """``B x H x W x 3`` rescaled images -> ``B x out_dim`` features.

    When ``trace`` is a list, the output shape of each layer is appended.
    """
    x = ad.as_tensor(images)
    if x.ndim == 3:
        x = ad.reshape(x, (1,) + x.shape)
    if trace is not None:
        trace.append(x.shape[1:])
    x = conv2d(x, params[f"{prefix}.stem.k"], params[f"{prefix}.stem.b"])
    if trace is not None:
        trace.append(x.shape[1:])
    for i, (_, stride) in enumerate(cfg.blocks):
        x = res_block(x, params, f"{prefix}.block{i}", stride)
        if trace is not None:
            trace.append(x.shape[1:])
    x = ad.relu(instance_norm(x, params[f"{prefix}.head_norm.g"], params[f"{prefix}.head_norm.b"]))
    x = conv2d(x, params[f"{prefix}.head.k"], params[f"{prefix}.head.b"], padding="valid")
    if trace is not None:
        trace.append(x.shape[1:])
    return ad.reshape(x, (x.shape[0], cfg.out_dim))


@dataclass
class VisualFeatureSeq:
    features: np.ndarray
    frame_period_s: float = 0.04

    def __post_init__(self):
        f = np.asarray(self.features)
        if f.ndim != 2 or f.shape[1] != FEATURE_DIM:
            raise FormatError(f"visual features must be M x {FEATURE_DIM}, got {f.shape}")
        if f.shape[0] == 0:
            raise FormatError("empty visual feature sequence")
        self.features = f


def write_features(path, seq: VisualFeatureSeq) -> None:
    write_tensors(path, {"features": seq.features}, {"frame_period_s": seq.frame_period_s})


def ingest_features(path) -> VisualFeatureSeq:
    tensors, meta = read_tensors(path)
    if "features" not in tensors:
        raise FormatError(f"{path}: no 'features' tensor")
    return VisualFeatureSeq(tensors["features"], float(meta.get("frame_period_s", 0.04)))


def ingest_video(path) -> tuple:
    """Load either a feature file or a ``frames`` (M x 36 x 36 x 3) file."""
    tensors, meta = read_tensors(path)
    period = float(meta.get("frame_period_s", 0.04))
    if "features" in tensors:
        return VisualFeatureSeq(tensors["features"], period).features, period
    if "frames" in tensors:
        fr = tensors["frames"]
        if fr.ndim != 4 or fr.shape[1:] != (36, 36, 3) or fr.shape[0] == 0:
            raise FormatError(f"{path}: frames must be M x 36 x 36 x 3, got {fr.shape}")
        return fr, period
    raise FormatError(f"{path}: no 'features' or 'frames' tensor")


def read_image_dir(directory) -> np.ndarray:
    """Frames from a directory of PNG/PPM files, sorted by name, resized to 36x36."""
    from pathlib import Path

    from PIL import Image

    files = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in (".png", ".ppm"))
    if not files:
        raise FormatError(f"{directory}: no PNG/PPM frames")
    frames = [np.asarray(Image.open(f).convert("RGB").resize((36, 36), Image.BILINEAR), dtype=np.float64) for f in files]
    return np.stack(frames)
