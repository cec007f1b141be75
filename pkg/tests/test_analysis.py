import math
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avalign import analysis as A
from avalign.models import AlignmentRecord, build_model, make_batch, ModelConfig


def edit_oracle(a, b):
    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0 or j == 0:
            return i + j
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return d(len(a), len(b))


# -- CER ------------------------------------------------------------------


def test_cer_examples():
    assert A.cer("sitting", "kitten") == 3 / 6
    assert A.cer("kitten", "sitting") == 3 / 7
    assert A.cer("aaaa", "a") == 3.0
    assert A.cer("abc", "abc") == 0.0
    assert A.cer("", "abc") == 1.0


def test_cer_empty_reference():
    with pytest.raises(ValueError):
        A.cer("a", "")


def test_levenshtein_matches_recursive_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        a = "".join(rng.choice(list("abc d"), size=rng.integers(0, 12)))
        b = "".join(rng.choice(list("abc d"), size=rng.integers(0, 12)))
        assert A.levenshtein(a, b) == edit_oracle(a, b)


@settings(max_examples=60, deadline=None)
@given(*[st.text(alphabet="ab ", max_size=8)] * 3)
def test_levenshtein_metric_laws(a, b, c):
    assert A.levenshtein(a, b) == A.levenshtein(b, a)
    assert A.levenshtein(a, c) <= A.levenshtein(a, b) + A.levenshtein(b, c)
    assert (A.levenshtein(a, b) == 0) == (a == b)


# -- alignment statistics -------------------------------------------------


def test_mean_alignment_of_transposed_diagonals():
    out = A.mean_alignment([np.eye(5), np.eye(5).T], shape=(5, 5))
    assert np.allclose(out, np.eye(5))


def test_bilinear_resample_corners_and_constant():
    m = np.arange(12.0).reshape(3, 4)
    r = A.resample_bilinear(m, (7, 9))
    assert r[0, 0] == 0 and r[-1, -1] == 11 and r[0, -1] == 3
    assert np.allclose(A.resample_bilinear(np.full((3, 5), 0.2), (64, 64)), 0.2)


def test_mean_alignment_rejects_empty():
    with pytest.raises(ValueError):
        A.mean_alignment([])


def test_monotonicity_diagonal_and_reverse():
    assert A.monotonicity_score(np.eye(6)) == pytest.approx(1.0)
    assert A.monotonicity_score(np.eye(6)[::-1]) == pytest.approx(-1.0)


def test_monotonicity_conventions():
    collapsed = np.zeros((5, 4))
    collapsed[:, 0] = 1
    assert A.monotonicity_score(collapsed) == 0.0
    assert A.argmax_collapsed(collapsed)
    assert A.monotonicity_score(np.ones((1, 4)) / 4) is None


def test_collapse_diagnostic():
    collapsed = np.zeros((5, 4))
    collapsed[:, 0] = 1
    assert A.collapse_diagnostic(collapsed) == {"first_frame_mass": 1.0, "mean_row_entropy": 0.0}
    d = A.collapse_diagnostic(np.full((3, 4), 0.25))
    assert abs(d["mean_row_entropy"] - math.log(4)) <= 1e-9
    assert d["first_frame_mass"] == 0.25


# -- controls -------------------------------------------------------------


@pytest.fixture(scope="module")
def micro():
    rng = np.random.default_rng(3)
    model = build_model(ModelConfig.for_kind("av_align_au", hidden=6, audio_layers=1, audio_dim=5, video_dim=4), seed=1)
    lengths = ((6, 4), (4, 3))
    batch = make_batch(
        [rng.normal(size=(n, 5)) for n, _ in lengths],
        [rng.normal(size=(m, 4)) for _, m in lengths],
        [rng.random(size=(m, 2)) for _, m in lengths],
        ["ab", "c"],
        normalize=False,
    )
    return model, batch


def test_random_memory_is_deterministic_and_in_range(micro):
    _, batch = micro
    fn = A.random_memory_transform(9)
    a, b = fn(batch.video, batch.video_mask), fn(batch.video, batch.video_mask)
    assert np.array_equal(a, b)
    v = batch.video[0, :4]
    assert a[0, :4].min() >= v.min() and a[0, :4].max() <= v.max()
    assert np.array_equal(a[1, 3:], batch.video[1, 3:])  # padding untouched
    r1 = [r.text for r in A.control_random_memory(*micro, seed=2)]
    assert r1 == [r.text for r in A.control_random_memory(*micro, seed=2)]


def test_reverse_twice_is_identity(micro):
    _, batch = micro
    once = A.reverse_memory(batch.video, batch.video_mask)
    assert np.array_equal(once[1, :3], batch.video[1, :3][::-1])
    assert np.array_equal(A.reverse_memory(once, batch.video_mask), batch.video)


def test_time_reverse_flips_alpha(micro):
    model, batch = micro
    clean = model.greedy_decode(batch)
    rev = A.control_time_reverse(model, batch)
    for c, r, m in zip(clean, rev, (4, 3)):
        assert c.text == r.text
        assert np.allclose(r.alignment.alpha[:, :m], c.alignment.alpha[:, :m][:, ::-1], atol=1e-6)


def test_blank_ends_padding(micro):
    model, batch = micro
    results, (n_pre, n_post) = A.control_blank_ends(model, batch, 1.0, 0.4)
    assert (n_pre, n_post) == (25, 10)
    padded = A.pad_video(batch, n_pre, n_post)
    assert padded.video.shape[1] == batch.video.shape[1] + 35
    assert np.all(padded.video[0, :25] == 0) and np.array_equal(padded.video[0, 25:29], batch.video[0, :4])
    assert padded.video_mask[1].sum() == 3 + 35
    assert results[0].alignment.alpha.shape[1] == 4 + 35


def test_blank_ends_zero_is_clean_run(micro):
    model, batch = micro
    clean = model.greedy_decode(batch)
    same, _ = A.control_blank_ends(model, batch, 0.0, 0.0)
    for c, s in zip(clean, same):
        assert c.text == s.text
        assert c.alignment.alpha.tobytes() == s.alignment.alpha.tobytes()


def test_blank_ends_bounds(micro):
    with pytest.raises(ValueError):
        A.control_blank_ends(*micro, 4.5, 0.0)
    with pytest.raises(ValueError):
        A.control_blank_ends(*micro, 0.0, -1.0)


# -- modality lag ---------------------------------------------------------


def test_lag_of_identity_alignment_is_zero():
    tr = A.modality_lag(np.eye(5), 0.04, 0.04)
    assert np.allclose(tr.lag_ms, 0.0)
    assert np.allclose(tr.spread_frames, 0.0)


def test_lag_single_peak():
    alpha = np.zeros((2, 4))
    alpha[:, 1] = 1
    tr = A.modality_lag(alpha, 0.03, 0.04)
    # row 0: t_a = 0, t_v = 0.04 -> video trails by 40 ms
    assert tr.lag_ms[0] == pytest.approx(-40.0)
    assert tr.lag_ms[1] == pytest.approx(-10.0)


def test_lag_uniform_row_centroid():
    tr = A.modality_lag(np.full((1, 5), 0.2), 0.04, 0.04)
    assert tr.lag_ms[0] == pytest.approx(-2 * 40.0)
    assert tr.spread_frames[0] == pytest.approx(math.sqrt(2.0))


def test_lag_per_column_and_offsets():
    tr = A.modality_lag(np.eye(3), 0.04, 0.04, audio_offset_s=0.01, per="col")
    assert np.allclose(tr.lag_ms, 10.0)
    with pytest.raises(ValueError):
        A.modality_lag(np.eye(3), 0.0, 0.04)
    with pytest.raises(ValueError):
        A.modality_lag(np.eye(3), 0.04, 0.04, per="diag")


def test_lag_drops_empty_rows(tmp_path):
    alpha = np.eye(3)
    alpha[1] = 0
    tr = A.modality_lag(alpha, 0.04, 0.04)
    assert list(tr.index) == [0, 2]
    tr.write_csv(tmp_path / "lag.csv")
    lines = (tmp_path / "lag.csv").read_text().splitlines()
    assert lines[0] == "frame,time_s,lag_ms" and len(lines) == 3


def test_symbol_lags_recover_shift():
    # video shifted 2 frames earlier than audio on a common 40 ms grid
    alpha = np.zeros((10, 10))
    for i in range(10):
        alpha[i, max(i - 2, 0)] = 1
    truth = [dict(char="a", audio_start_s=0.1, audio_end_s=0.4, lag_ms=80.0)]
    (row,) = A.symbol_lags(A.modality_lag(alpha, 0.04, 0.04), truth, lambda i: np.asarray(i) * 0.04)
    assert row["est_lag_ms"] == pytest.approx(80.0) and row["true_lag_ms"] == 80.0


# -- character LM and deltas ----------------------------------------------


def test_untrained_lm_is_uniform():
    assert abs(A.CharLM(hidden=8).score("hello") - math.log(31)) <= 1e-9


def test_lm_rejects_empty():
    with pytest.raises(ValueError):
        A.CharLM(hidden=4).score("")
    with pytest.raises(ValueError):
        A.char_lm([])


def test_lm_learns_repeated_sentence():
    lm = A.char_lm(["abab abab"] * 8, hidden=16, epochs=300, lr=0.02, batch_size=8)
    assert lm.score("abab abab") < 0.3
    assert lm.score("abab abab") < lm.score("zqxj vkwp")


def _results(pairs):
    return [dict(id=f"u{i}", ref=r, hyp=h, cer=A.cer(h, r)) for i, (r, h) in enumerate(pairs)]


def test_identical_systems_have_zero_delta():
    res = _results([("abc", "abd"), ("hello", "hallo")])
    rows, cdf = A.error_delta_report(res, res)
    assert all(r.delta == 0 for r in rows)
    assert cdf == [(0.0, 1.0)]


def test_delta_mean_is_difference_of_means():
    refs = ["abc", "hello", "the cat", "dog"]
    a = _results(zip(refs, ["xbc", "hxllo", "tha bat", "dog"]))
    v = _results(zip(refs, ["abc", "hxllo", "the cat", "dg"]))
    rows, cdf = A.error_delta_report(a, v, lm=A.CharLM(hidden=4))
    mean_a = np.mean([r["cer"] for r in a])
    mean_v = np.mean([r["cer"] for r in v])
    assert np.mean([r.delta for r in rows]) == pytest.approx(mean_a - mean_v, abs=1e-12)
    fr = [f for _, f in cdf]
    assert all(x >= y for x, y in zip(fr, fr[1:]))
    assert cdf[0][0] == 0.0


def test_delta_report_sorted_by_predictability():
    lm = A.char_lm(["aaaa"] * 8, hidden=8, epochs=30, lr=0.02)
    refs = ["zqzq", "aaaa"]
    rows, _ = A.error_delta_report(_results(zip(refs, refs)), _results(zip(refs, refs)), lm)
    assert [r.ref for r in rows] == ["aaaa", "zqzq"]


def test_delta_report_rejects_mismatch():
    with pytest.raises(ValueError):
        A.error_delta_report(_results([("ab", "ab")]), _results([("ab", "ab"), ("cd", "cd")]))


# -- dumps ----------------------------------------------------------------


def test_pgm_round_trip(tmp_path):
    m = np.array([[0.0, 0.5], [1.0, 0.25]])
    A.write_pgm(tmp_path / "a.pgm", m)
    assert np.array_equal(A.read_pgm(tmp_path / "a.pgm"), [[0, 128], [255, 64]])


def test_alignment_csv_round_trip(tmp_path, rng):
    rec = AlignmentRecord(alpha=rng.dirichlet(np.ones(4), size=6), beta=rng.dirichlet(np.ones(6), size=3))
    A.write_alignment_csv(tmp_path / "a.csv", rec)
    back = A.read_alignment_csv(tmp_path / "a.csv")
    assert np.allclose(back.alpha, rec.alpha, atol=1e-8) and np.allclose(back.beta, rec.beta, atol=1e-8)
    assert back.beta_video is None
