import math

import numpy as np
import pytest

from avalign import corpus as C
from avalign import training as T
from avalign.autodiff import Parameter
from avalign.models import ModelConfig
from avalign.nn import Params


@pytest.fixture(scope="module")
def tiny_corpus():
    return C.generate_corpus(C.CorpusConfig(n_train=8, n_test=3), seed=0)


def tiny_cfg(kind="av_align_au"):
    return ModelConfig.for_kind(kind, hidden=6, audio_layers=1)


def test_adam_first_step_moves_by_lr():
    p = Params()
    p["w"] = Parameter("w", np.array([1.0, -2.0, 3.0]))
    opt = T.Adam(lr=0.1)
    opt.step(p, {"w": np.array([0.5, -4.0, 1e-3])})
    # bias-corrected first step is lr * g / |g| (up to eps)
    assert np.allclose(p["w"].data, [0.9, -1.9, 2.9], atol=1e-6)


def test_adam_zero_gradient_is_a_no_op():
    p = Params()
    p["w"] = Parameter("w", np.array([1.0, 2.0]))
    T.Adam(lr=0.5).step(p, {"w": np.zeros(2)})
    assert np.array_equal(p["w"].data, [1.0, 2.0])


def test_clip_bounds_global_norm(rng):
    grads = {"a": rng.normal(size=(3, 4)) * 10, "b": rng.normal(size=5) * 10}
    clipped, norm = T.clip_grads(grads, 1.0)
    assert norm == pytest.approx(math.sqrt(sum(np.sum(g**2) for g in grads.values())))
    assert T.global_norm(clipped) <= 1.0 + 1e-12
    # direction is kept
    assert np.allclose(clipped["a"] / grads["a"], clipped["b"][0] / grads["b"][0])


def test_clip_leaves_small_gradients():
    grads = {"a": np.array([0.3, 0.4])}
    clipped, norm = T.clip_grads(grads, 1.0)
    assert norm == pytest.approx(0.5)
    assert np.array_equal(clipped["a"], grads["a"])


def test_train_config_validation():
    assert T.TrainConfig(stages=["clean", 10, 0, -5]).stages == [None, 10.0, 0.0, -5.0]
    with pytest.raises(ValueError):
        T.TrainConfig(stages=[10, "clean"])
    with pytest.raises(ValueError):
        T.TrainConfig(stages=[0, 10])
    with pytest.raises(ValueError):
        T.TrainConfig(seeds=[])


def test_train_config_json_round_trip(tmp_path):
    cfg = T.TrainConfig(lr=3e-3, stages=["clean", 5])
    (tmp_path / "c.json").write_text(__import__("json").dumps(cfg.to_dict()))
    assert T.TrainConfig.from_json(tmp_path / "c.json") == cfg


def test_snr_helpers():
    assert T.parse_snr("clean") is None and T.parse_snr("-5") == -5.0
    assert T.snr_tag(None) == "clean" and T.snr_tag(-5.0) == "-5dB"


def test_t_interval():
    assert T.t_interval([0.3]) == (0.3, None, None)
    mean, sd, half = T.t_interval([1.0, 2.0, 3.0])
    assert mean == 2.0 and sd == 1.0
    assert half == pytest.approx(4.302652729911275 / math.sqrt(3))


def test_stage_initialised_from_previous_stage(tiny_corpus, monkeypatch):
    seen = []
    real = T.train_step

    def spy(model, batch, opt, clip):
        seen.append(T.copy_params(model))
        return real(model, batch, opt, clip)

    monkeypatch.setattr(T, "train_step", spy)
    cfg = T.TrainConfig(stages=["clean", 10], max_steps=2, batch_size=4, seeds=[0])
    model, results, snaps = T.run_curriculum(tiny_cfg(), tiny_corpus.train, cfg, seed=0)
    first_of_stage2 = seen[results[0].steps]
    for k, v in snaps["clean"].items():
        assert first_of_stage2[k].tobytes() == v.tobytes()
    assert [r.stage for r in results] == ["clean", "10dB"]


def test_fixed_seed_reruns_are_identical(tiny_corpus):
    cfg = T.TrainConfig(stages=["clean"], max_steps=3, batch_size=4)
    _, r1, s1 = T.run_curriculum(tiny_cfg(), tiny_corpus.train, cfg, seed=4)
    _, r2, s2 = T.run_curriculum(tiny_cfg(), tiny_corpus.train, cfg, seed=4)
    assert r1[0].rows == r2[0].rows
    assert all(s1["clean"][k].tobytes() == s2["clean"][k].tobytes() for k in s1["clean"])
    _, _, s3 = T.run_curriculum(tiny_cfg(), tiny_corpus.train, cfg, seed=5)
    assert any(s1["clean"][k].tobytes() != s3["clean"][k].tobytes() for k in s1["clean"])


def test_best_validation_parameters_are_restored(tiny_corpus):
    cfg = T.TrainConfig(stages=["clean"], max_epochs=4, batch_size=4, lr=0.05, patience=10)
    model, results, _ = T.run_curriculum(tiny_cfg("audio"), tiny_corpus.train, cfg, seed=0)
    train, val = T.split_validation(tiny_corpus.train, cfg.val_fraction)
    assert T.evaluate_ce(model, val, None, T.FeatureCache()) == pytest.approx(results[0].best_val_ce, rel=1e-12)


def test_checkpoint_round_trip(tmp_path, tiny_corpus):
    cfg = T.TrainConfig(stages=["clean"], max_steps=1, batch_size=4)
    model, results, _ = T.run_curriculum(tiny_cfg(), tiny_corpus.train, cfg, seed=0, out_dir=tmp_path)
    back, meta = T.load_checkpoint(results[0].checkpoint)
    assert meta["stage"] == "clean" and meta["kind"] == "av_align_au"
    for k, v in model.params.arrays().items():
        assert back.params[k].data.tobytes() == v.tobytes()


def test_divergence_is_reported(tiny_corpus):
    cfg = T.TrainConfig(stages=["clean"], max_steps=1, batch_size=4)
    model = T.build_model(tiny_cfg("audio"), seed=0)
    model.params["vocab_proj.W"].data[0, 0] = np.nan
    with pytest.raises(T.DivergenceError):
        T.run_stage(model, tiny_corpus.train, [], None, cfg, np.random.default_rng(0))


def test_babble_features_are_cached_per_snr(tiny_corpus):
    cache = T.FeatureCache()
    s = tiny_corpus.train[0]
    a = cache.get(s, 0.0)
    assert cache.get(s, 0.0) is a
    assert not np.array_equal(a, cache.get(s, None))


def test_bucketed_batches_cover_every_sample(tiny_corpus):
    cache = T.FeatureCache()
    groups = T.bucketed_batches(tiny_corpus.train, 3, np.random.default_rng(0), cache, None)
    assert sorted(i for g in groups for i in g) == list(range(len(tiny_corpus.train)))
    assert max(len(g) for g in groups) == 3


def test_run_trials_rows_and_summary(tmp_path, tiny_corpus):
    cfg = T.TrainConfig(stages=["clean", 0], max_steps=1, batch_size=4, seeds=[0, 1])
    report = T.run_trials(tiny_cfg("av_cat"), tiny_corpus.train, tiny_corpus.test, cfg)
    assert set(report.cers) == {"clean", "0dB"}
    assert all(len(v) == 2 for v in report.cers.values())
    assert {r["seed"] for r in report.rows} == {0, 1}
    report.write_csv(tmp_path / "trials.csv")
    summary = (tmp_path / "trials_summary.csv").read_text().splitlines()
    assert summary[0] == "stage,n_seeds,mean_cer,std,ci95" and len(summary) == 3


def test_single_seed_summary_has_no_interval(tmp_path, tiny_corpus):
    cfg = T.TrainConfig(stages=["clean"], max_steps=1, batch_size=4, seeds=[0])
    report = T.run_trials(tiny_cfg("audio"), tiny_corpus.train, tiny_corpus.test, cfg)
    (row,) = report.summary()
    assert row["std"] is None and row["ci95"] is None
    report.write_csv(tmp_path / "t.csv")
    assert (tmp_path / "t_summary.csv").read_text().splitlines()[1].endswith("n/a,n/a")
