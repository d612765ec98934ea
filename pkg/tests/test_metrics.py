import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stylereg.errors import InvalidArgumentError
from stylereg.metrics import (
    MetricReport,
    MockEmbedder,
    antonym_softmax,
    build_report,
    clip_iqa_score,
    clip_r_precision,
    color_histogram,
    pixel_hist_score,
    rank_markers,
    render_comparison,
    render_report,
)

from oracles import FixedSimilarityEmbedder, LookupEmbedder, RandomEmbedder, one_hot, pixel_hist_oracle

IMG8 = arrays(np.uint8, (8, 8, 3))


def test_histogram_normalised():
    img = np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    h = color_histogram(img)
    assert h.counts.shape == (3, 16)
    assert np.allclose(h.counts.sum(axis=1), 1.0, atol=1e-9)
    assert (h.counts >= 0).all()


def test_pixel_hist_endpoints():
    img = np.random.default_rng(1).integers(0, 256, (8, 8, 3), dtype=np.uint8)
    assert pixel_hist_score(img, [img]) == 1.0
    black = np.zeros((8, 8, 3), np.uint8)
    white = np.full((8, 8, 3), 255, np.uint8)
    assert pixel_hist_score(black, [white]) == 0.0


def test_pixel_hist_errors():
    img = np.zeros((4, 4, 3), np.uint8)
    with pytest.raises(InvalidArgumentError):
        pixel_hist_score(img, [])
    with pytest.raises(InvalidArgumentError):
        pixel_hist_score(np.zeros((4, 4), np.uint8), [img])
    with pytest.raises(InvalidArgumentError):
        pixel_hist_score(img.astype(np.float32), [img])


@given(IMG8, IMG8)
@settings(max_examples=40, deadline=None)
def test_pixel_hist_matches_oracle(a, b):
    assert abs(pixel_hist_score(a, [b]) - pixel_hist_oracle(a, [b])) < 1e-9


@given(IMG8, st.lists(IMG8, min_size=1, max_size=3))
@settings(max_examples=20, deadline=None)
def test_pixel_hist_multi_reference_oracle_and_bounds(a, refs):
    score = pixel_hist_score(a, refs)
    assert 0.0 <= score <= 1.0
    assert abs(score - pixel_hist_oracle(a, refs)) < 1e-9


@given(IMG8, st.randoms())
@settings(max_examples=30, deadline=None)
def test_pixel_hist_permutation_invariance_and_symmetry(a, rnd):
    flat = a.reshape(-1, 3).copy()
    order = list(range(len(flat)))
    rnd.shuffle(order)
    shuffled = flat[order].reshape(a.shape)
    b = np.random.default_rng(rnd.randint(0, 2**31)).integers(0, 256, a.shape, dtype=np.uint8)
    assert pixel_hist_score(a, [b]) == pixel_hist_score(shuffled, [b])
    assert pixel_hist_score(a, [b]) == pixel_hist_score(b, [a])


def _pairs(n):
    return [(np.zeros((2, 2, 3), np.uint8) + i, f"prompt {i}") for i in range(n)]


def test_r_precision_oracle_and_adversarial():
    pairs = _pairs(5)
    d = 10
    distractors = [f"distractor {j}" for j in range(4)]
    texts = {p: one_hot(i, d) for i, (_, p) in enumerate(pairs)}
    texts.update({t: one_hot(5 + j, d) for j, t in enumerate(distractors)})
    oracle = LookupEmbedder({id(img): one_hot(i, d) for i, (img, _) in enumerate(pairs)}, texts)
    assert clip_r_precision(pairs, distractors, oracle) == 1.0
    adversarial = LookupEmbedder({id(img): one_hot(5, d) for img, _ in pairs}, texts)
    assert clip_r_precision(pairs, distractors, adversarial) == 0.0


def test_r_precision_tie_is_miss():
    pairs = _pairs(1)
    emb = LookupEmbedder({id(pairs[0][0]): [1.0, 0.0]}, {"prompt 0": [1.0, 0.0], "other": [1.0, 0.0]})
    assert clip_r_precision(pairs, ["other"], emb) == 0.0


def test_r_precision_errors():
    pairs = _pairs(2)
    emb = MockEmbedder()
    with pytest.raises(InvalidArgumentError):
        clip_r_precision(pairs, ["prompt 0"], emb)
    with pytest.raises(InvalidArgumentError):
        clip_r_precision(pairs, ["x", "x"], emb)
    with pytest.raises(InvalidArgumentError):
        clip_r_precision([], ["x"], emb)
    with pytest.raises(InvalidArgumentError):
        clip_r_precision(pairs, [], emb)


@given(st.randoms())
@settings(max_examples=20, deadline=None)
def test_r_precision_distractor_permutation(rnd):
    pairs = _pairs(6)
    distractors = [f"d{j}" for j in range(7)]
    shuffled = distractors[:]
    rnd.shuffle(shuffled)
    emb = MockEmbedder(dim=8)
    assert clip_r_precision(pairs, distractors, emb) == clip_r_precision(pairs, shuffled, emb)


def test_r_precision_chance_level():
    emb = RandomEmbedder(seed=3)
    img = np.zeros((2, 2, 3), np.uint8)
    pairs = [(img, f"t{i}") for i in range(2000)]
    hits = 0
    for i, pair in enumerate(pairs):
        distractors = [f"t{(i + k) % 2000}" for k in range(1, 10)]
        hits += clip_r_precision([pair], distractors, emb)
    assert abs(hits / 2000 - 0.1) <= 0.03


def test_iqa_values():
    img = np.zeros((2, 2, 3), np.uint8)
    assert clip_iqa_score(img, FixedSimilarityEmbedder({"Good photo.": 0.3, "Bad photo.": 0.3})) == 0.5
    assert clip_iqa_score(img, FixedSimilarityEmbedder({"Good photo.": 1.0, "Bad photo.": -1.0})) > 0.999
    emb = FixedSimilarityEmbedder({"a": 0.2, "b": 0.2, "c": 0.9, "d": -0.9})
    assert clip_iqa_score(img, emb, [("a", "b"), ("c", "d")]) == pytest.approx(0.75, abs=1e-12)
    with pytest.raises(InvalidArgumentError):
        clip_iqa_score(img, emb, [])


def test_iqa_hand_evaluated_softmax():
    # softmax([1, -1] / 0.01)[0] = 1 / (1 + e^-200)
    assert antonym_softmax(1.0, -1.0) == 1.0 / (1.0 + math.exp(-200.0))
    assert antonym_softmax(0.0, 0.01) == pytest.approx(1 / (1 + math.e), rel=1e-12)


@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-10, 10))
def test_iqa_shift_invariance(a, b, c):
    assert abs(antonym_softmax(a + c, b + c) - antonym_softmax(a, b)) <= 1e-12


def test_mock_embedder_unit_and_deterministic():
    emb = MockEmbedder()
    img = np.random.default_rng(0).integers(0, 256, (9, 9, 3), dtype=np.uint8)
    for v in (emb.embed_image(img), emb.embed_text("hello")):
        assert abs(np.linalg.norm(v) - 1) < 1e-6
    assert np.array_equal(emb.embed_text("x"), MockEmbedder().embed_text("x"))
    assert np.array_equal(emb.embed_image(img), MockEmbedder().embed_image(img))


def test_report_single_category():
    r = build_report({"c": {"pixel_hist": 0.7392, "clip_r_precision": 0.7714, "clip_iqa": 0.6253}})
    assert r.aggregate == {"pixel_hist": 0.7392, "clip_r_precision": 0.7714, "clip_iqa": 0.6253}
    assert "0.7392" in render_report(r)


def test_report_mean_and_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    data = {f"c{i}": dict(zip(("pixel_hist", "clip_r_precision", "clip_iqa"), rng.uniform(size=3)))
            for i in range(7)}
    r = build_report(data, run_id="r", embedder_id="mock")
    for m in r.aggregate:
        assert abs(r.aggregate[m] - sum(v[m] for v in data.values()) / 7) <= 1e-12
    again = MetricReport.load(r.save(tmp_path / "r.json"))
    assert again.per_category == r.per_category and again.aggregate == r.aggregate


def test_report_errors():
    with pytest.raises(InvalidArgumentError):
        build_report({})
    with pytest.raises(InvalidArgumentError):
        build_report({"c": {"pixel_hist": 1.0}})


def test_comparison_one_best_marker_per_column():
    a = build_report({"c": {"pixel_hist": 0.5, "clip_r_precision": 0.9, "clip_iqa": 0.5}})
    b = build_report({"c": {"pixel_hist": 0.6, "clip_r_precision": 0.8, "clip_iqa": 0.5}})
    table = render_comparison({"ours": a, "baseline": b})
    body = table.splitlines()[2:4]
    assert sum(cell.endswith("*") for row in body for cell in row.split()) == 3
    assert sum(cell.endswith("+") for row in body for cell in row.split()) == 3
    assert rank_markers([0.5, 0.5]) == ["*", "+"]
