"""Command-line entry point: synth, train, eval, control, analyze.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
divergence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import analysis as an
from . import autodiff as ad
from .audio import AUDIO_PERIOD_S, AudioFeatureSeq
from .corpus import CorpusConfig, FormatError, generate_corpus, load_manifest, write_corpus
from .models import MODEL_KINDS, ModelConfig
from .training import (
    DivergenceError,
    FeatureCache,
    TrainConfig,
    batch_of,
    evaluate,
    load_checkpoint,
    parse_snr,
    run_trials,
    snr_tag,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

logger = logging.getLogger("avalign")


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from None


def _pick(args, cfg: dict, name: str, default=None):
    """Command-line flags win; the JSON config fills flags left unset."""
    v = getattr(args, name, None)
    if v is not None:
        return v
    return cfg.get(name, default)


def _model_config(args, cfg: dict) -> ModelConfig:
    kind = _pick(args, cfg, "model", "av_align_au")
    if kind not in MODEL_KINDS:
        raise ConfigError(f"unknown model kind {kind!r}")
    au = _pick(args, cfg, "au")
    extra = dict(cfg.get("model_options", {}))
    fusion = _pick(args, cfg, "fusion", "baseline")
    try:
        mc = ModelConfig.for_kind(kind, fusion=fusion, **extra)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    if au is not None and mc.arch != "audio":
        mc.au_loss = au in ("on", True)
    return mc


def _train_config(args, cfg: dict) -> TrainConfig:
    d = dict(cfg.get("train", {}))
    seed = _pick(args, cfg, "seed")
    if seed is not None and "seeds" not in d:
        d["seeds"] = [int(seed)]
    try:
        return TrainConfig(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"train config: {e}") from None


def _load_split(data_dir, split: str, load_video: bool = True) -> list:
    p = Path(data_dir) / f"{split}.json"
    if not p.exists():
        raise DataError(f"manifest not found: {p}")
    try:
        return load_manifest(p, load_video)
    except (FormatError, KeyError, OSError, ValueError) as e:
        raise DataError(f"{p}: {e}") from None


def _write_run_json(out: Path, args, extra: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    argv = {k: v for k, v in vars(args).items() if k != "func"}
    doc = {"version": __version__, "args": argv, "python": platform.python_version(), "numpy": np.__version__}
    doc.update(extra)
    (out / "run.json").write_text(json.dumps(doc, indent=1, sort_keys=True, default=str))


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> dict:
    cfg = _read_config(args.config)
    try:
        cc = CorpusConfig.from_dict(cfg.get("corpus", cfg))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"corpus config: {e}") from None
    seed = int(_pick(args, cfg, "seed", 0))
    corpus = generate_corpus(cc, seed)
    paths = write_corpus(corpus, args.out)
    hashes = {k: _sha256(p) for k, p in paths.items()}
    logger.info("wrote %d train / %d test utterances to %s", len(corpus.train), len(corpus.test), args.out)
    return {"seed": seed, "corpus": cfg.get("corpus", cfg), "manifest_sha256": hashes}


def cmd_train(args) -> dict:
    cfg = _read_config(args.config)
    mc = _model_config(args, cfg)
    tc = _train_config(args, cfg)
    data = _pick(args, cfg, "data")
    if data is None:
        raise ConfigError("--data is required")
    with_video = mc.arch != "audio"
    train = _load_split(data, "train", with_video)
    test = _load_split(data, "test", with_video)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = run_trials(mc, train, test, tc, out)
    report.write_csv(out / f"report_{mc.kind}.csv")
    return {"model": mc.to_dict(), "train": tc.to_dict(), "summary": report.summary(), "wall_clock_s": report.wall_clock_s}


def _load_model(path):
    if path is None or not Path(path).exists():
        raise DataError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except (FormatError, KeyError, OSError) as e:
        raise DataError(f"{path}: {e}") from None


def _dump_alignments(out: Path, uid: str, rec, suffix: str = "") -> None:
    an.write_alignment_csv(out / f"{uid}{suffix}.csv", rec)
    for name in ("alpha", "beta", "beta_video"):
        mat = getattr(rec, name)
        if mat is not None:
            an.write_pgm(out / f"{uid}{suffix}.{name}.pgm", mat)


def _write_results(out: Path, results: list) -> float:
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "ref", "hyp", "cer", "first_frame_mass", "mean_row_entropy", "monotonicity"])
        for r in results:
            a = r["alignment"].alpha
            diag = an.collapse_diagnostic(a) if a is not None else None
            mono = an.monotonicity_score(a) if a is not None else None
            w.writerow(
                [r["id"], r["ref"], r["hyp"], f"{r['cer']:.6f}"]
                + (["n/a", "n/a"] if diag is None else [f"{diag['first_frame_mass']:.6f}", f"{diag['mean_row_entropy']:.6f}"])
                + ["n/a" if mono is None else f"{mono:.6f}"]
            )
    return float(np.mean([r["cer"] for r in results]))


def cmd_eval(args) -> dict:
    cfg = _read_config(args.config)
    model, meta = _load_model(args.checkpoint)
    snr = parse_snr(_pick(args, cfg, "snr", "clean"))
    data = _pick(args, cfg, "data")
    if data is None:
        raise ConfigError("--data is required")
    test = _load_split(data, "test", model.cfg.arch != "audio")
    out = Path(args.out)
    (out / "alignments").mkdir(parents=True, exist_ok=True)
    with ad.default_dtype(np.float64):
        results = evaluate(model, test, snr, FeatureCache())
    for r in results:
        _dump_alignments(out / "alignments", r["id"], r["alignment"])
    mean = _write_results(out, results)
    logger.info("mean CER %.4f over %d utterances", mean, len(results))
    return {"checkpoint": str(args.checkpoint), "checkpoint_meta": meta, "snr": snr_tag(snr), "mean_cer": mean, "n": len(results)}


def cmd_control(args) -> dict:
    cfg = _read_config(args.config)
    model, _ = _load_model(args.checkpoint)
    if model.cfg.arch == "audio":
        raise ConfigError("controls need a model with a video stream")
    snr = parse_snr(_pick(args, cfg, "snr", "clean"))
    data = _pick(args, cfg, "data")
    if data is None:
        raise ConfigError("--data is required")
    test = _load_split(data, "test")
    out = Path(args.out)
    (out / "alignments").mkdir(parents=True, exist_ok=True)
    cache = FeatureCache()
    seed = int(_pick(args, cfg, "seed", 0))
    info = {"control": args.which, "snr": snr_tag(snr), "seed": seed}
    rows = []
    with ad.default_dtype(np.float64):
        for i in range(0, len(test), 32):
            chunk = test[i : i + 32]
            batch = batch_of(chunk, snr, cache)
            clean = model.greedy_decode(batch)
            if args.which == "random":
                ctrl = an.control_random_memory(model, batch, seed=seed + i)
            elif args.which == "reverse":
                ctrl = an.control_time_reverse(model, batch)
            elif args.which == "blank":
                ctrl, (n_pre, n_post) = an.control_blank_ends(model, batch, args.pre_s, args.post_s)
                info["memory_length_delta"] = n_pre + n_post
            else:
                raise ConfigError(f"unknown control {args.which!r}")
            for s, a, b in zip(chunk, clean, ctrl):
                _dump_alignments(out / "alignments", s.id, a.alignment, ".clean")
                _dump_alignments(out / "alignments", s.id, b.alignment, f".{args.which}")
                rows.append((s.id, s.label, a.text, b.text, an.cer(a.text, s.label), an.cer(b.text, s.label)))
    with open(out / "transcripts.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "ref", "hyp_clean", "hyp_control", "cer_clean", "cer_control"])
        for r in rows:
            w.writerow(list(r[:4]) + [f"{r[4]:.6f}", f"{r[5]:.6f}"])
    info["mean_cer_clean"] = float(np.mean([r[4] for r in rows]))
    info["mean_cer_control"] = float(np.mean([r[5] for r in rows]))
    info["identical_transcripts"] = all(r[2] == r[3] for r in rows)
    return info


def _read_results(run_dir) -> list:
    p = Path(run_dir) / "results.csv"
    if not p.exists():
        raise DataError(f"no results.csv in {run_dir}")
    with open(p, newline="") as fh:
        return [dict(r, cer=float(r["cer"])) for r in csv.DictReader(fh)]


def cmd_analyze(args) -> dict:
    cfg = _read_config(args.config)
    data = _pick(args, cfg, "data")
    if data is None:
        raise ConfigError("--data is required")
    res_a, res_b = _read_results(args.run_a), _read_results(args.run_b)
    train = _load_split(data, "train", load_video=False)
    test_rows = json.loads((Path(data) / "test.json").read_text())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lm_opts = cfg.get("lm", {})
    with ad.default_dtype(np.float64):
        lm = an.char_lm([s.label for s in train], seed=int(_pick(args, cfg, "seed", 0)), **lm_opts)
        try:
            deltas, cdf = an.error_delta_report(res_a, res_b, lm)
        except ValueError as e:
            raise DataError(str(e)) from None
    with open(out / "deltas.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "sentence", "cross_entropy", "prediction_a", "prediction_av", "cer_a", "cer_av", "delta"])
        for d in deltas:
            w.writerow([d.id, d.ref, f"{d.predictability:.6f}", d.hyp_audio, d.hyp_av, f"{d.cer_audio:.6f}", f"{d.cer_av:.6f}", f"{d.delta:.6f}"])
    with open(out / "cdf.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "fraction"])
        for t, f in cdf:
            w.writerow([f"{t:.6f}", f"{f:.6f}"])
    # lag traces from the AV run's alignment dumps
    n_lag = 0
    lag_dir = out / "lag"
    lag_dir.mkdir(exist_ok=True)
    for row in test_rows:
        p = Path(args.run_b) / "alignments" / f"{row['id']}.csv"
        if not p.exists():
            continue
        rec = an.read_alignment_csv(p)
        if rec.alpha is None:
            continue
        trace = an.modality_lag(
            rec.alpha,
            AUDIO_PERIOD_S,
            args.video_period,
            audio_offset_s=AudioFeatureSeq.frame_center_s(0),
            per=args.per,
        )
        trace.write_csv(lag_dir / f"{row['id']}.csv")
        n_lag += 1
    return {"n_sentences": len(deltas), "mean_delta": float(np.mean([d.delta for d in deltas])), "lag_traces": n_lag}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="avalign", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="JSON config; flags given on the command line take precedence")
        sp.add_argument("--seed", type=int)
        if out:
            sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("synth", help="generate a synthetic corpus")
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="staged-SNR training over one or more seeds")
    common(sp)
    sp.add_argument("--data", help="corpus directory")
    sp.add_argument("--model", choices=sorted(MODEL_KINDS))
    sp.add_argument("--fusion", choices=["baseline", "m1", "m2", "m3", "m4", "m5"])
    sp.add_argument("--au", choices=["on", "off"])
    sp.set_defaults(func=cmd_train)

    for name, fn in (("eval", cmd_eval), ("control", cmd_control)):
        sp = sub.add_parser(name, help="greedy decoding" if name == "eval" else "inference-time video corruption")
        if name == "control":
            sp.add_argument("which", choices=["random", "blank", "reverse"])
            sp.add_argument("--pre-s", type=float, default=1.0)
            sp.add_argument("--post-s", type=float, default=1.0)
        common(sp)
        sp.add_argument("--data")
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--snr", choices=["clean", "10", "0", "-5"])
        sp.set_defaults(func=fn)

    sp = sub.add_parser("analyze", help="per-sentence deltas, CDF, LM ranking and lag traces")
    common(sp)
    sp.add_argument("--data")
    sp.add_argument("--run-a", required=True, help="eval directory of the audio-only system")
    sp.add_argument("--run-b", required=True, help="eval directory of the audio-visual system")
    sp.add_argument("--per", choices=["row", "col"], default="row")
    sp.add_argument("--video-period", type=float, default=0.04)
    sp.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    t0 = time.time()
    try:
        extra = args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        print(f"numeric divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    extra["elapsed_s"] = round(time.time() - t0, 3)
    extra["command"] = args.command
    _write_run_json(Path(args.out), args, extra)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
