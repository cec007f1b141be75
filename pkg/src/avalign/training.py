"""Optimisation, staged-SNR curriculum, checkpoints and multi-seed trials."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .corpus import babble_noise
from .models import Batch, ModelConfig, build_model, make_batch
from .models.seq2seq import Seq2SeqModel
from .nn import Params
from .tensorio import read_tensors, write_tensors

logger = logging.getLogger(__name__)

CLEAN = None  # stage marker for noise-free audio


class DivergenceError(RuntimeError):
    pass


def parse_snr(value):
    if value is None or (isinstance(value, str) and value.lower() == "clean"):
        return None
    return float(value)


def snr_tag(snr) -> str:
    return "clean" if snr is None else f"{snr:g}dB"


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    max_epochs: int = 20
    max_steps: int | None = None
    clip_norm: float = 1.0
    stages: list = field(default_factory=lambda: [None, 10.0, 0.0, -5.0])
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    eval_every: int = 1
    patience: int = 5
    val_fraction: float = 0.1
    dtype: str = "float64"

    def __post_init__(self):
        self.stages = [parse_snr(s) for s in self.stages]
        noisy = [s for s in self.stages if s is not None]
        if any(s is None for s in self.stages[1:]):
            raise ValueError("the clean stage may only come first")
        if any(b >= a for a, b in zip(noisy, noisy[1:])):
            raise ValueError("stage SNRs must strictly decrease")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls(**json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = ["clean" if s is None else s for s in self.stages]
        return d


# ---------------------------------------------------------------------------
# optimisation


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m, self.v = {}, {}

    def step(self, params: Params, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        for name, g in grads.items():
            p = params[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)


def global_norm(grads: dict) -> float:
    return math.sqrt(float(np.sum([np.sum(g * g) for g in grads.values()])))


def clip_grads(grads: dict, max_norm: float) -> tuple:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if max_norm and norm > max_norm:
        s = max_norm / norm
        grads = {k: g * s for k, g in grads.items()}
    return grads, norm


def train_step(model: Seq2SeqModel, batch: Batch, opt: Adam, clip_norm: float) -> dict:
    ad.zero_grad(model.params.values())
    loss, comps = model.loss(batch)
    if not np.isfinite(comps["total"]):
        raise DivergenceError(f"loss became {comps['total']}")
    grads = ad.backward(loss)
    grads, norm = clip_grads(grads, clip_norm)
    opt.step(model.params, grads)
    comps["grad_norm"] = norm
    return comps


# ---------------------------------------------------------------------------
# data


class FeatureCache:
    """Audio features per (utterance, SNR). Each utterance mixes with its own
    seeded babble, so every stage sees the same noise realisation."""

    def __init__(self):
        self._cache = {}

    def get(self, sample, snr):
        key = (id(sample), snr)
        if key not in self._cache:
            if snr is None or sample.features is not None:
                feats = sample.audio_features()
            else:
                noise = babble_noise(len(sample.waveform.samples), seed=zlib.crc32(sample.id.encode()))
                feats = sample.audio_features(noise, snr)
            self._cache[key] = (sample, feats)
        return self._cache[key][1]


def batch_of(samples: list, snr, cache: FeatureCache, with_video: bool = True) -> Batch:
    feats = [cache.get(s, snr) for s in samples]
    if with_video:
        videos = [s.video for s in samples]
        aus = [s.au_targets for s in samples]
    else:
        videos = [np.zeros((1, 1)) for _ in samples]
        aus = [None for _ in samples]
    return make_batch(feats, videos, aus, [s.label for s in samples], [s.id for s in samples])


def bucketed_batches(samples: list, batch_size: int, rng: np.random.Generator, cache: FeatureCache, snr) -> list:
    """Group by audio length, then shuffle the group order."""
    order = sorted(range(len(samples)), key=lambda i: (cache.get(samples[i], snr).shape[0], samples[i].id))
    groups = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    return [groups[i] for i in rng.permutation(len(groups))]


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: Seq2SeqModel, stage: str, extra: dict | None = None) -> None:
    meta = {"model": model.cfg.to_dict(), "kind": model.cfg.kind, "stage": stage}
    meta.update(extra or {})
    write_tensors(path, model.params.arrays(), meta)


def load_checkpoint(path) -> tuple:
    arrays, meta = read_tensors(path)
    cfg = ModelConfig(**meta["model"])
    model = build_model(cfg, seed=0)
    model.params.load_arrays(arrays)
    return model, meta


def copy_params(model: Seq2SeqModel) -> dict:
    return {k: v.copy() for k, v in model.params.arrays().items()}


# ---------------------------------------------------------------------------
# stages


@dataclass
class StageResult:
    stage: str
    rows: list
    best_val_ce: float
    steps: int
    checkpoint: str | None = None


def evaluate_ce(model: Seq2SeqModel, samples: list, snr, cache: FeatureCache, batch_size: int = 32) -> float:
    if not samples:
        return float("nan")
    total = 0.0
    with ad.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i : i + batch_size]
            _, comps = model.loss(batch_of(chunk, snr, cache, model.cfg.arch != "audio"))
            total += comps["ce"] * len(chunk)
    return total / len(samples)


def run_stage(
    model: Seq2SeqModel,
    train: list,
    val: list,
    snr,
    cfg: TrainConfig,
    rng: np.random.Generator,
    cache: FeatureCache | None = None,
    init_params: dict | None = None,
    checkpoint_path=None,
    seed: int | None = None,
    callback=None,
) -> StageResult:
    """Teacher-forced training at one SNR until the epoch/step budget or
    early stop. ``init_params`` (previous stage) are copied in first; the
    best-validation parameters are kept at the end."""
    cache = cache or FeatureCache()
    if init_params is not None:
        model.params.load_arrays(init_params)
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    tag = snr_tag(snr)
    with_video = model.cfg.arch != "audio"
    rows, steps = [], 0
    best, best_params, bad = math.inf, None, 0
    for epoch in range(cfg.max_epochs):
        losses = []
        for idx in bucketed_batches(train, cfg.batch_size, rng, cache, snr):
            comps = train_step(model, batch_of([train[i] for i in idx], snr, cache, with_video), opt, cfg.clip_norm)
            losses.append(comps)
            steps += 1
            if callback is not None:
                callback(steps, comps)
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
        row = dict(
            seed=seed,
            stage=tag,
            epoch=epoch,
            train_ce=float(np.mean([c["ce"] for c in losses])),
            train_au=float(np.mean([c["au"] for c in losses])),
            val_ce=float("nan"),
        )
        stop = cfg.max_steps is not None and steps >= cfg.max_steps
        if val and ((epoch + 1) % cfg.eval_every == 0 or stop):
            row["val_ce"] = evaluate_ce(model, val, snr, cache)
            if row["val_ce"] < best:
                best, best_params, bad = row["val_ce"], copy_params(model), 0
            else:
                bad += 1
        rows.append(row)
        logger.info("stage %s epoch %d train_ce %.4f val_ce %.4f", tag, epoch, row["train_ce"], row["val_ce"])
        if stop or bad >= cfg.patience:
            break
    if best_params is not None:
        model.params.load_arrays(best_params)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, tag, {"seed": seed, "steps": steps})
    return StageResult(tag, rows, best, steps, None if checkpoint_path is None else str(checkpoint_path))


def split_validation(train: list, fraction: float) -> tuple:
    n_val = int(round(len(train) * fraction))
    if n_val == 0:
        return train, []
    return train[:-n_val], train[-n_val:]


def run_curriculum(
    model_cfg: ModelConfig,
    train: list,
    cfg: TrainConfig,
    seed: int,
    out_dir=None,
    cache: FeatureCache | None = None,
    val: list | None = None,
) -> tuple:
    """Train through every stage, copying parameters from stage to stage.
    Returns ``(model, [StageResult], {stage: params})``."""
    with ad.default_dtype(np.dtype(cfg.dtype).type):
        cache = cache or FeatureCache()
        rng = np.random.default_rng(seed)
        model = build_model(model_cfg, seed=seed)
        if val is None:
            train, val = split_validation(train, cfg.val_fraction)
        results, snapshots, prev = [], {}, None
        for snr in cfg.stages:
            ck = None
            if out_dir is not None:
                ck = Path(out_dir) / f"{model_cfg.kind}_seed{seed}_{snr_tag(snr)}.avt"
            res = run_stage(model, train, val, snr, cfg, rng, cache, prev, ck, seed)
            prev = copy_params(model)
            snapshots[res.stage] = prev
            results.append(res)
    return model, results, snapshots


# ---------------------------------------------------------------------------
# evaluation and trials


def evaluate(model: Seq2SeqModel, samples: list, snr, cache: FeatureCache, batch_size: int = 32, max_len: int = 40):
    """Greedy-decode ``samples``; returns a list of dicts with id, ref, hyp,
    cer and the :class:`AlignmentRecord`."""
    from .analysis import cer

    out = []
    with_video = model.cfg.arch != "audio"
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        results = model.greedy_decode(batch_of(chunk, snr, cache, with_video), max_len=max_len)
        for s, r in zip(chunk, results):
            out.append(dict(id=s.id, ref=s.label, hyp=r.text, cer=cer(r.text, s.label), alignment=r.alignment))
    return out


def t_interval(values) -> tuple:
    """Mean, sample stddev and Student-t 95% half-width (``None`` for one value)."""
    from scipy import stats

    v = np.asarray(values, dtype=np.float64)
    mean = float(v.mean())
    if len(v) < 2:
        return mean, None, None
    sd = float(v.std(ddof=1))
    half = float(stats.t.ppf(0.975, len(v) - 1) * sd / np.sqrt(len(v)))
    return mean, sd, half


@dataclass
class TrainReport:
    rows: list
    cers: dict  # stage -> list of per-seed mean test CER
    wall_clock_s: float

    def summary(self) -> list:
        out = []
        for stage, vals in self.cers.items():
            mean, sd, half = t_interval(vals)
            out.append(dict(stage=stage, n=len(vals), mean_cer=mean, std=sd, ci95=half))
        return out

    def write_csv(self, path) -> None:
        import csv

        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["seed", "stage", "epoch", "train_ce", "train_au", "val_ce"])
            w.writeheader()
            for r in self.rows:
                w.writerow({k: r[k] for k in w.fieldnames})
        with open(path.with_name(path.stem + "_summary.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["stage", "n_seeds", "mean_cer", "std", "ci95"])
            for s in self.summary():
                w.writerow(
                    [s["stage"], s["n"], f"{s['mean_cer']:.6f}"]
                    + ["n/a" if s[k] is None else f"{s[k]:.6f}" for k in ("std", "ci95")]
                )


def run_trials(model_cfg: ModelConfig, train: list, test: list, cfg: TrainConfig, out_dir=None) -> TrainReport:
    """One independent curriculum per seed; test CER after every stage."""
    t0 = time.time()
    rows, cers = [], {}
    cache = FeatureCache()
    for seed in cfg.seeds:
        model, results, snaps = run_curriculum(model_cfg, train, cfg, seed, out_dir, cache)
        with ad.default_dtype(np.dtype(cfg.dtype).type):
            for res in results:
                rows.extend(res.rows)
                model.params.load_arrays(snaps[res.stage])
                snr = parse_snr(res.stage.replace("dB", ""))
                ev = evaluate(model, test, snr, cache)
                cers.setdefault(res.stage, []).append(float(np.mean([e["cer"] for e in ev])))
    return TrainReport(rows, cers, time.time() - t0)


def deep_copy_model(model: Seq2SeqModel) -> Seq2SeqModel:
    return build_model(copy.deepcopy(model.cfg), params=_clone_params(model.params))


def _clone_params(params: Params) -> Params:
    from .autodiff import Parameter

    out = Params()
    for k, p in params.items():
        out[k] = Parameter(k, p.data.copy(), p.trainable)
    return out
