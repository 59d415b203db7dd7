"""QA formulation: question building, span heads, extraction, pooling
and logistic-regression calibration."""

import math
import re

import numpy as np
import pytest

from gapcoref.data import GapRecord
from gapcoref.errors import (
    AnswerTruncated,
    DegenerateLabels,
    EmptySpan,
    PronounNotFound,
)
from gapcoref.qa import (
    LrModel,
    PooledFeatures,
    SpanLogits,
    build_qa_example,
    build_qa_input,
    build_question,
    candidate_encoded_spans,
    decode_answer,
    extract_best_span,
    fit_span_lr,
    lr_objective,
    qa_forward,
    qa_head_init,
    qa_loss,
    qa_loss_batch,
    qa_probabilities,
    span_pool_features,
)


def record_for(text, pronoun, pronoun_offset, a=("X", None), b=("Y", None),
               a_coref=False, b_coref=False, rid="t"):
    """Helper building a valid record; None offsets resolve by search."""
    a_name, a_off = a
    b_name, b_off = b
    if a_off is None:
        a_off = text.index(a_name)
    if b_off is None:
        b_off = text.index(b_name)
    return GapRecord(
        id=rid, text=text, pronoun=pronoun, pronoun_offset=pronoun_offset,
        a_name=a_name, a_offset=a_off, a_coref=a_coref,
        b_name=b_name, b_offset=b_off, b_coref=b_coref, url="u",
    ).validate()


WORKED_TEXT = "They say John and his wife Carol had a son"


class TestBuildQuestion:
    def test_worked_example(self):
        record = record_for(
            WORKED_TEXT, "his", WORKED_TEXT.index("his"),
            a=("John", None), b=("Carol", None), a_coref=True,
        )
        assert build_question(record) == "John and his wife Carol"

    def test_pronoun_first_word(self):
        text = "He ran Moss and Finn"
        record = record_for(text, "He", 0, a=("Moss", None), b=("Finn", None))
        assert build_question(record) == "He ran Moss"

    def test_pronoun_last_word(self):
        text = "Moss and Finn saw him"
        record = record_for(text, "him", text.index("him"),
                            a=("Moss", None), b=("Finn", None))
        assert build_question(record) == "Finn saw him"

    def test_second_occurrence_selected(self):
        text = "his dog bit Ann on his leg near Bea"
        second = text.index("his", 1)
        record = record_for(text, "his", second, a=("Ann", None), b=("Bea", None))
        assert build_question(record) == "Ann on his leg near"

    def test_punctuation_stays_attached(self):
        text = "married in 1900. She was some years junior to Ann and Bea"
        record = record_for(text, "She", text.index("She"),
                            a=("Ann", None), b=("Bea", None))
        assert build_question(record) == "in 1900. She was some"

    def test_offset_in_whitespace_rejected(self):
        text = "Ann saw her dog Bea"
        record = record_for(text, "her", 8, a=("Ann", None), b=("Bea", None))
        bad = GapRecord(**{**record.__dict__, "pronoun_offset": 7, "pronoun": " "})
        with pytest.raises(PronounNotFound):
            build_question(bad)

    def test_window_one(self):
        record = record_for(WORKED_TEXT, "his", WORKED_TEXT.index("his"),
                            a=("John", None), b=("Carol", None))
        assert build_question(record, window=1) == "his"

    def test_random_boundary_cases_match_oracle(self):
        # independent oracle: regex word spans, slice of +-2 neighbours
        rng = np.random.default_rng(42)
        vocab_words = ["aa", "b", "ccc", "dd,", "e.", "ff", "ggg!", "hh"]
        for _ in range(200):
            n = int(rng.integers(1, 12))
            words = [vocab_words[i] for i in rng.integers(0, len(vocab_words), n)]
            center = int(rng.integers(0, n))
            words[center] = "he"
            text = " ".join(words) + " Ann Bea"
            spans = [m.span() for m in re.finditer(r"\S+", text)]
            offset = spans[center][0]
            record = record_for(text, "he", offset,
                                a=("Ann", None), b=("Bea", None))
            expected_words = [
                text[s:e] for s, e in spans[max(0, center - 2): center + 3]
            ]
            assert build_question(record) == " ".join(expected_words)


class TestBuildQaExample:
    def test_neither_returns_none_for_training(self, toy_vocab):
        record = record_for(WORKED_TEXT, "his", WORKED_TEXT.index("his"),
                            a=("John", None), b=("Carol", None))
        assert build_qa_example(record, toy_vocab) is None

    def test_gold_a_single_token_answer(self, toy_vocab):
        record = record_for(WORKED_TEXT, "his", WORKED_TEXT.index("his"),
                            a=("John", None), b=("Carol", None), a_coref=True)
        example = build_qa_example(record, toy_vocab)
        start, end = example.answer_span
        assert start == end
        token_id = example.encoded.ids[start]
        assert token_id == toy_vocab["john"]
        lo, hi = example.encoded.passage_token_range
        assert lo <= start <= end <= hi

    def test_multi_token_answer_with_parenthetical(self, toy_vocab):
        text = "his wife Carol ( Lazy ) had a son"
        record = GapRecord(
            id="m", text=text, pronoun="his", pronoun_offset=0,
            a_name="wife", a_offset=4, a_coref=False,
            b_name="Carol ( Lazy )", b_offset=9, b_coref=True, url="u",
        ).validate()
        example = build_qa_example(record, toy_vocab)
        start, end = example.answer_span
        pieces = [example.encoded.ids[t] for t in range(start, end + 1)]
        expected = [toy_vocab[t] for t in ("carol", "(", "lazy", ")")]
        assert pieces == expected

    def test_answer_beyond_truncation_raises(self, toy_vocab):
        words = ["fox"] * 40 + ["Carol", "had", "a", "son"]
        text = "his dog . " + " ".join(words)
        record = GapRecord(
            id="t", text=text, pronoun="his", pronoun_offset=0,
            a_name="Carol", a_offset=text.index("Carol"), a_coref=True,
            b_name="dog", b_offset=4, b_coref=False, url="u",
        ).validate()
        with pytest.raises(AnswerTruncated):
            build_qa_example(record, toy_vocab, max_seq_len=30)

    def test_inference_input_has_no_answer(self, toy_vocab):
        record = record_for(WORKED_TEXT, "his", WORKED_TEXT.index("his"),
                            a=("John", None), b=("Carol", None), a_coref=True)
        example = build_qa_input(record, toy_vocab)
        assert example.answer_span is None

    def test_candidate_spans_found(self, toy_vocab):
        record = record_for(WORKED_TEXT, "his", WORKED_TEXT.index("his"),
                            a=("John", None), b=("Carol", None), a_coref=True)
        example = build_qa_input(record, toy_vocab)
        a_span, b_span = candidate_encoded_spans(record, example)
        assert example.encoded.ids[a_span[0]] == toy_vocab["john"]
        assert example.encoded.ids[b_span[0]] == toy_vocab["carol"]


class TestQaHead:
    def test_zero_head_gives_zero_logits(self):
        states = np.random.default_rng(0).standard_normal((4, 8))
        head = {"qa.w": np.zeros((8, 2)), "qa.b": np.zeros(2)}
        logits = qa_forward(states, head)
        assert np.all(logits.start == 0.0) and np.all(logits.end == 0.0)

    def test_identity_columns(self):
        states = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        head = {"qa.w": np.eye(2), "qa.b": np.zeros(2)}
        logits = qa_forward(states, head)
        np.testing.assert_array_equal(logits.start, [1.0, 3.0, 5.0])
        np.testing.assert_array_equal(logits.end, [2.0, 4.0, 6.0])

    def test_deterministic(self):
        head = qa_head_init(8, seed=3)
        states = np.random.default_rng(1).standard_normal((5, 8))
        a = qa_forward(states, head)
        b = qa_forward(states, head)
        np.testing.assert_array_equal(a.start, b.start)


class TestQaLoss:
    def test_uniform_logits(self):
        n = 7
        logits = SpanLogits(start=np.zeros(n), end=np.zeros(n))
        assert qa_loss(logits, (2, 3)) == pytest.approx(math.log(n), abs=1e-12)

    def test_dominant_gold_logit_drives_loss_to_zero(self):
        start = np.zeros(5)
        end = np.zeros(5)
        start[1] = 50.0
        end[2] = 50.0
        logits = SpanLogits(start=start, end=end)
        assert qa_loss(logits, (1, 2)) < 1e-15

    def test_matches_independent_softmax_ce(self):
        rng = np.random.default_rng(9)
        start = rng.standard_normal(5)
        end = rng.standard_normal(5)
        span = (3, 4)
        # independent arithmetic oracle
        p_start = np.exp(start) / np.exp(start).sum()
        p_end = np.exp(end) / np.exp(end).sum()
        expected = 0.5 * (-np.log(p_start[span[0]]) - np.log(p_end[span[1]]))
        value = qa_loss(SpanLogits(start=start, end=end), span)
        assert value == pytest.approx(expected, rel=1e-12)

    def test_batch_loss_matches_singles_and_ignores_padding(self):
        rng = np.random.default_rng(4)
        logits = rng.standard_normal((2, 6, 2))
        mask = np.array([[1, 1, 1, 1, 0, 0], [1, 1, 1, 1, 1, 1]])
        starts = np.array([1, 2])
        ends = np.array([2, 4])
        loss, d_logits = qa_loss_batch(logits, mask, starts, ends)
        singles = [
            qa_loss(SpanLogits(logits[0, :4, 0], logits[0, :4, 1]), (1, 2)),
            qa_loss(SpanLogits(logits[1, :, 0], logits[1, :, 1]), (2, 4)),
        ]
        assert loss == pytest.approx(np.mean(singles), rel=1e-12)
        assert np.all(d_logits[0, 4:] == 0.0)
        # changing padded logits does not change the loss
        logits2 = logits.copy()
        logits2[0, 4:] = 99.0
        loss2, _ = qa_loss_batch(logits2, mask, starts, ends)
        assert loss2 == pytest.approx(loss, abs=1e-15)


def brute_force_best_span(start, end, passage_range, max_answer_len):
    """Exhaustive O(n^2) oracle with explicit tie-breaking."""
    lo, hi = passage_range
    best = None
    for i in range(lo, hi + 1):
        for j in range(i, hi + 1):
            if j - i + 1 > max_answer_len:
                continue
            score = start[i] + end[j]
            if best is None or score > best[0]:
                best = (score, i, j)
    return (best[1], best[2])


class TestExtractBestSpan:
    def test_single_token_passage(self):
        logits = SpanLogits(start=np.array([0.0, 1.0]), end=np.array([0.0, 2.0]))
        assert extract_best_span(logits, (1, 1)) == (1, 1)

    def test_crafted_maximum(self):
        start = np.array([0.0, 5.0, 0.0, 0.0, 0.0])
        end = np.array([0.0, 0.0, 0.0, 7.0, 0.0])
        logits = SpanLogits(start=start, end=end)
        assert extract_best_span(logits, (0, 4)) == (1, 3)

    def test_max_answer_len_respected(self):
        start = np.array([5.0, 0.0, 0.0, 0.0])
        end = np.array([0.0, 0.0, 0.0, 5.0])
        logits = SpanLogits(start=start, end=end)
        assert extract_best_span(logits, (0, 3), max_answer_len=2) != (0, 3)

    def test_tie_breaking_smallest_i_then_j(self):
        logits = SpanLogits(start=np.zeros(4), end=np.zeros(4))
        assert extract_best_span(logits, (0, 3)) == (0, 0)

    def test_question_region_never_selected(self):
        start = np.array([99.0, 99.0, 0.0, 1.0, 0.0])
        end = np.array([99.0, 99.0, 0.0, 1.0, 0.0])
        logits = SpanLogits(start=start, end=end)
        assert extract_best_span(logits, (2, 4)) == (3, 3)

    def test_matches_brute_force_random(self):
        rng = np.random.default_rng(17)
        for _ in range(50):
            n = int(rng.integers(2, 40))
            start = rng.standard_normal(n)
            end = rng.standard_normal(n)
            lo = int(rng.integers(0, n - 1))
            hi = int(rng.integers(lo, n - 1))
            max_len = int(rng.integers(1, 12))
            logits = SpanLogits(start=start, end=end)
            assert extract_best_span(logits, (lo, hi), max_len) == \
                brute_force_best_span(start, end, (lo, hi), max_len)


class TestSpanPoolFeatures:
    def test_single_token_spans(self):
        logits = SpanLogits(
            start=np.array([1.0, 2.0, 3.0]), end=np.array([4.0, 5.0, 6.0])
        )
        f = span_pool_features(logits, (0, 0), (2, 2))
        assert (f.max_start_a, f.max_end_a) == (1.0, 4.0)
        assert (f.max_start_b, f.max_end_b) == (3.0, 6.0)
        assert (f.max_start_global, f.max_end_global) == (3.0, 6.0)

    def test_whole_sequence_span_equals_global(self):
        rng = np.random.default_rng(3)
        logits = SpanLogits(start=rng.standard_normal(9),
                            end=rng.standard_normal(9))
        f = span_pool_features(logits, (0, 8), (2, 4))
        assert f.max_start_a == f.max_start_global
        assert f.max_end_a == f.max_end_global

    def test_global_dominates(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            n = int(rng.integers(2, 30))
            logits = SpanLogits(start=rng.standard_normal(n),
                                end=rng.standard_normal(n))
            a_lo = int(rng.integers(0, n)); a_hi = int(rng.integers(a_lo, n))
            b_lo = int(rng.integers(0, n)); b_hi = int(rng.integers(b_lo, n))
            f = span_pool_features(logits, (a_lo, a_hi), (b_lo, b_hi))
            # exhaustive per-span oracle
            assert f.max_start_a == max(logits.start[a_lo:a_hi + 1])
            assert f.max_end_b == max(logits.end[b_lo:b_hi + 1])
            assert f.max_start_global >= max(f.max_start_a, f.max_start_b)
            assert f.max_end_global >= max(f.max_end_a, f.max_end_b)

    def test_empty_span_rejected(self):
        logits = SpanLogits(start=np.zeros(3), end=np.zeros(3))
        with pytest.raises(EmptySpan):
            span_pool_features(logits, (2, 1), (0, 0))


def separable_features(n, seed):
    rng = np.random.default_rng(seed)
    true_w = rng.standard_normal((3, 6)) * 3.0
    X, y = [], []
    while len(X) < n:
        x = rng.standard_normal(6)
        scores = true_w @ x
        order = np.sort(scores)
        if order[-1] - order[-2] < 1.0:
            continue  # enforce a margin so the data is cleanly separable
        X.append(x)
        y.append("ABN"[int(np.argmax(scores))])
    return np.array(X), y


class TestFitSpanLr:
    def test_degenerate_labels(self):
        X = np.random.default_rng(0).standard_normal((10, 6))
        with pytest.raises(DegenerateLabels):
            fit_span_lr(X, ["A"] * 10)

    def test_separable_data_high_accuracy(self):
        X, y = separable_features(300, seed=8)
        model = fit_span_lr(X, y, c=1e6)
        scores = X @ model.weights.T + model.bias
        predicted = ["ABN"[i] for i in np.argmax(scores, axis=1)]
        accuracy = np.mean([p == g for p, g in zip(predicted, y)])
        assert accuracy >= 0.99

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(12)
        X = rng.standard_normal((20, 6))
        y = np.array([int(v) for v in rng.integers(0, 3, 20)])
        point = rng.standard_normal(21) * 0.3
        _, grad = lr_objective(point, X, y, 0.1)
        fd = np.zeros_like(grad)
        h = 1e-5
        for k in range(len(point)):
            plus = point.copy(); plus[k] += h
            minus = point.copy(); minus[k] -= h
            fd[k] = (lr_objective(plus, X, y, 0.1)[0]
                     - lr_objective(minus, X, y, 0.1)[0]) / (2 * h)
        rel = np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-12)
        assert rel < 1e-6

    def test_deterministic(self):
        X, y = separable_features(100, seed=3)
        m1 = fit_span_lr(X, y, c=0.1)
        m2 = fit_span_lr(X, y, c=0.1)
        np.testing.assert_array_equal(m1.weights, m2.weights)
        np.testing.assert_array_equal(m1.bias, m2.bias)

    def test_regularization_shrinks_weights(self):
        X, y = separable_features(100, seed=3)
        small_c = fit_span_lr(X, y, c=0.01)
        large_c = fit_span_lr(X, y, c=100.0)
        assert np.linalg.norm(small_c.weights) < np.linalg.norm(large_c.weights)


class TestQaProbabilities:
    def _features(self, values):
        return PooledFeatures(*values)

    def test_zero_model_uniform(self):
        model = LrModel(weights=np.zeros((3, 6)), bias=np.zeros(3), c=0.1)
        p = qa_probabilities(model, self._features([1, 2, 3, 4, 5, 6]))
        np.testing.assert_allclose(p.as_tuple(), [1 / 3] * 3, atol=1e-12)

    def test_simplex(self):
        rng = np.random.default_rng(2)
        model = LrModel(weights=rng.standard_normal((3, 6)),
                        bias=rng.standard_normal(3), c=0.1)
        for _ in range(100):
            p = qa_probabilities(model, self._features(rng.standard_normal(6)))
            assert abs(sum(p.as_tuple()) - 1.0) < 1e-9

    def test_hand_computed_softmax(self):
        W = np.array([[1.0, 0, 0, 0, 0, 0],
                      [0, 1.0, 0, 0, 0, 0],
                      [0, 0, 1.0, 0, 0, 0]])
        b = np.array([0.1, -0.2, 0.0])
        f = self._features([0.5, 1.5, -0.5, 9, 9, 9])
        model = LrModel(weights=W, bias=b, c=0.1)
        scores = np.array([0.5 + 0.1, 1.5 - 0.2, -0.5])
        expected = np.exp(scores) / np.exp(scores).sum()
        np.testing.assert_allclose(
            qa_probabilities(model, f).as_tuple(), expected, rtol=1e-12
        )


class TestDecodeAnswer:
    def test_round_trip_to_text(self, toy_vocab):
        record = record_for(WORKED_TEXT, "his", WORKED_TEXT.index("his"),
                            a=("John", None), b=("Carol", None), a_coref=True)
        example = build_qa_example(record, toy_vocab)
        char_start, char_end = decode_answer(example, example.answer_span)
        assert record.text[char_start:char_end] == "John"
