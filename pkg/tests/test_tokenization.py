"""WordPiece tokenization, span alignment and paired encoding."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gapcoref.errors import (
    DuplicateToken,
    FirstSegmentTooLong,
    MissingSpecialToken,
    NoOverlap,
)
from gapcoref.tokenization import (
    SPECIAL_TOKENS,
    TokenizedText,
    Vocab,
    align_char_span,
    encode_pair,
    encode_single,
    load_vocab,
    wordpiece_tokenize,
)


class TestVocab:
    def test_load_from_lines(self):
        data = "\n".join(SPECIAL_TOKENS + ("alpha", "beta")) + "\n"
        vocab = load_vocab(data.encode("utf-8"))
        assert len(vocab) == 7
        assert vocab["alpha"] == 5

    def test_line_numbers_are_ids(self):
        vocab = load_vocab("\n".join(SPECIAL_TOKENS))
        assert [vocab[t] for t in SPECIAL_TOKENS] == [0, 1, 2, 3, 4]

    def test_duplicate_token(self):
        with pytest.raises(DuplicateToken):
            load_vocab("\n".join(SPECIAL_TOKENS + ("x", "x")))

    def test_missing_special(self):
        tokens = [t for t in SPECIAL_TOKENS if t != "[SEP]"] + ["word"]
        with pytest.raises(MissingSpecialToken):
            load_vocab("\n".join(tokens))

    def test_crlf(self):
        vocab = load_vocab("\r\n".join(SPECIAL_TOKENS) + "\r\n")
        assert len(vocab) == 5

    def test_reference_uncased_vocab_when_available(self):
        import os

        path = os.environ.get("BERT_VOCAB_FILE")
        if not path or not os.path.exists(path):
            pytest.skip("set BERT_VOCAB_FILE to check the 30522-token vocab")
        from gapcoref.tokenization import load_vocab_file

        vocab = load_vocab_file(path)
        assert len(vocab) == 30522


class TestWordpieceTokenize:
    def test_empty(self, toy_vocab):
        assert len(wordpiece_tokenize("", toy_vocab)) == 0

    def test_whitespace_only(self, toy_vocab):
        assert len(wordpiece_tokenize("  \t \n ", toy_vocab)) == 0

    def test_single_word_with_span(self, toy_vocab):
        pieces = wordpiece_tokenize("Carol", toy_vocab).pieces
        assert [(p.text, p.char_start, p.char_end) for p in pieces] == [
            ("carol", 0, 5)
        ]

    def test_greedy_longest_match(self, toy_vocab):
        # hand trace: un|##aff|##able via longest-match-first
        pieces = wordpiece_tokenize("unaffable", toy_vocab).pieces
        assert [p.text for p in pieces] == ["un", "##aff", "##able"]
        assert [(p.char_start, p.char_end) for p in pieces] == [
            (0, 2), (2, 5), (5, 9)
        ]

    def test_punctuation_splits(self, toy_vocab):
        pieces = wordpiece_tokenize("john, and.", toy_vocab).pieces
        assert [p.text for p in pieces] == ["john", ",", "and", "."]
        assert pieces[1].char_start == 4

    def test_unknown_word_keeps_span(self):
        vocab = Vocab(list(SPECIAL_TOKENS) + ["known"])
        pieces = wordpiece_tokenize("known J7% known", vocab).pieces
        texts = [p.text for p in pieces]
        # % splits off as punctuation; j7 has no match at word granularity
        assert texts == ["known", "[UNK]", "[UNK]", "known"]
        assert (pieces[1].char_start, pieces[1].char_end) == (6, 8)

    def test_accent_stripping_alignment(self, toy_vocab):
        pieces = wordpiece_tokenize("Café fox", toy_vocab).pieces
        # "café" -> c|##a|##f|##e single-char fallbacks, spans in original
        assert "".join(p.text.replace("##", "") for p in pieces[:-1]) == "cafe"
        assert pieces[-1].text == "fox"
        assert pieces[-1].char_start == 5

    def test_original_case_spans(self, toy_vocab):
        text = "They say JOHN"
        pieces = wordpiece_tokenize(text, toy_vocab).pieces
        for piece in pieces:
            assert text[piece.char_start:piece.char_end].lower().startswith(
                piece.text.replace("##", "")[0]
            )

    @settings(max_examples=60, deadline=None)
    @given(text=st.text(alphabet="abc defg.h,", min_size=0, max_size=40))
    def test_roundtrip_ascii(self, toy_vocab, text):
        # single ascii letters and ## continuations are all in the vocab,
        # so every word segment must reproduce the non-space char stream
        pieces = wordpiece_tokenize(text, toy_vocab).pieces
        joined = "".join(p.text.replace("##", "", 1) for p in pieces)
        assert joined == "".join(text.lower().split())

    @settings(max_examples=60, deadline=None)
    @given(text=st.text(alphabet="ab c.d", min_size=0, max_size=30))
    def test_span_monotonic_nonoverlap(self, toy_vocab, text):
        pieces = wordpiece_tokenize(text, toy_vocab).pieces
        for prev, cur in zip(pieces, pieces[1:]):
            assert prev.char_end <= cur.char_start
        for p in pieces:
            assert 0 <= p.char_start < p.char_end <= len(text)


def brute_force_align(tokenized: TokenizedText, start: int, length: int):
    """Independent oracle: linear scan of every piece for overlap."""
    if length <= 0:
        return None  # an empty interval overlaps nothing
    end = start + length
    hits = [
        i for i, p in enumerate(tokenized.pieces)
        if p.char_start < end and p.char_end > start
    ]
    return (hits[0], hits[-1]) if hits else None


class TestAlignCharSpan:
    def test_exact_token(self, toy_vocab):
        t = wordpiece_tokenize("john and carol", toy_vocab)
        assert align_char_span(t, 5, 3) == (1, 1)

    def test_two_words(self, toy_vocab):
        t = wordpiece_tokenize("John and his wife", toy_vocab)
        # "John and" covers pieces 0 and 1
        assert align_char_span(t, 0, 8) == (0, 1)

    def test_inside_multipiece_word(self, toy_vocab):
        t = wordpiece_tokenize("unaffable", toy_vocab)
        # chars 3..4 live inside ##aff
        assert align_char_span(t, 3, 1) == (1, 1)
        # chars 1..6 touch all three pieces
        assert align_char_span(t, 1, 5) == (0, 2)

    def test_whitespace_only_span(self, toy_vocab):
        t = wordpiece_tokenize("a b", toy_vocab)
        with pytest.raises(NoOverlap):
            align_char_span(t, 1, 1)

    def test_outside_text(self, toy_vocab):
        t = wordpiece_tokenize("ab", toy_vocab)
        with pytest.raises(NoOverlap):
            align_char_span(t, 10, 3)

    def test_matches_brute_force_on_random_cases(self, toy_vocab):
        rng = np.random.default_rng(1234)
        words = ["john", "and", "his", "unaffable", "wife", "carol", ".",
                 "fox", "a", "zz9"]
        for _ in range(1000):
            n = int(rng.integers(1, 8))
            text = " ".join(words[i] for i in rng.integers(0, len(words), n))
            tokenized = wordpiece_tokenize(text, toy_vocab)
            start = int(rng.integers(0, max(1, len(text))))
            length = int(rng.integers(0, 12))
            expected = brute_force_align(tokenized, start, length)
            if expected is None:
                with pytest.raises(NoOverlap):
                    align_char_span(tokenized, start, length)
            else:
                assert align_char_span(tokenized, start, length) == expected


class TestEncodePair:
    def test_layout_and_segments(self, toy_vocab):
        first = wordpiece_tokenize("john and", toy_vocab)
        second = wordpiece_tokenize("his wife carol", toy_vocab)
        enc = encode_pair(first, second, toy_vocab, max_seq_len=300)
        assert len(enc) == 8
        assert enc.segment_ids == (0, 0, 0, 0, 1, 1, 1, 1)
        assert enc.ids[0] == toy_vocab.cls_id
        assert enc.ids[3] == toy_vocab.sep_id
        assert enc.ids[-1] == toy_vocab.sep_id
        assert enc.mask == (1,) * 8
        assert enc.passage_token_range == (4, 6)

    def test_alignment_covers_non_specials(self, toy_vocab):
        first = wordpiece_tokenize("john and his wife carol", toy_vocab)
        second = wordpiece_tokenize("they say john had a son", toy_vocab)
        enc = encode_pair(first, second, toy_vocab)
        specials = {0, len(first) + 1, len(enc) - 1}
        for t in range(len(enc)):
            if t in specials:
                assert enc.alignment[t] is None
            else:
                assert enc.alignment[t] is not None

    def test_passage_truncated_to_budget(self, toy_vocab):
        first = wordpiece_tokenize("john and", toy_vocab)
        second = wordpiece_tokenize(" ".join(["wife"] * 50), toy_vocab)
        enc = encode_pair(first, second, toy_vocab, max_seq_len=20)
        assert len(enc) == 20
        assert enc.passage_token_range == (4, 18)

    def test_first_segment_too_long(self, toy_vocab):
        first = wordpiece_tokenize(" ".join(["john"] * 30), toy_vocab)
        second = wordpiece_tokenize("son", toy_vocab)
        with pytest.raises(FirstSegmentTooLong):
            encode_pair(first, second, toy_vocab, max_seq_len=32)
        # exactly max - 3 first-segment pieces is allowed
        first29 = wordpiece_tokenize(" ".join(["john"] * 29), toy_vocab)
        enc = encode_pair(first29, second, toy_vocab, max_seq_len=32)
        assert len(enc) == 32

    def test_empty_first_rejected(self, toy_vocab):
        with pytest.raises(ValueError):
            encode_pair(
                TokenizedText(()), wordpiece_tokenize("a", toy_vocab), toy_vocab
            )

    @settings(max_examples=40, deadline=None)
    @given(
        n_first=st.integers(min_value=1, max_value=12),
        n_second=st.integers(min_value=0, max_value=40),
        max_len=st.integers(min_value=16, max_value=64),
    )
    def test_length_budget_property(self, n_first, n_second, max_len, toy_vocab):
        first = wordpiece_tokenize(" ".join(["a"] * n_first), toy_vocab)
        second = wordpiece_tokenize(" ".join(["b"] * n_second), toy_vocab)
        if n_first > max_len - 3:
            with pytest.raises(FirstSegmentTooLong):
                encode_pair(first, second, toy_vocab, max_len)
            return
        enc = encode_pair(first, second, toy_vocab, max_len)
        assert len(enc) <= max_len
        sep_positions = [i for i, t in enumerate(enc.ids) if t == toy_vocab.sep_id]
        assert len(sep_positions) == 2
        boundary = sep_positions[0]
        assert all(s == 0 for s in enc.segment_ids[: boundary + 1])
        assert all(s == 1 for s in enc.segment_ids[boundary + 1:])


class TestAlignmentTotality:
    def test_every_aligned_span_reproduces_its_piece_text(self, toy_vocab):
        rng = np.random.default_rng(7)
        words = ["John", "and", "his", "unaffable", "WIFE", "carol.", "a"]
        for _ in range(50):
            n = int(rng.integers(1, 7))
            first_text = " ".join(words[i] for i in rng.integers(0, len(words), 2))
            second_text = " ".join(words[i] for i in rng.integers(0, len(words), n))
            first = wordpiece_tokenize(first_text, toy_vocab)
            second = wordpiece_tokenize(second_text, toy_vocab)
            enc = encode_pair(first, second, toy_vocab, max_seq_len=64)
            boundary = enc.segment_ids.index(1)
            for t, span in enumerate(enc.alignment):
                if span is None:
                    continue
                source = first_text if t < boundary else second_text
                piece = toy_vocab.id_to_token[enc.ids[t]]
                extracted = source[span[0]:span[1]].lower()
                assert extracted == piece.replace("##", "", 1)


class TestEncodeSingle:
    def test_layout(self, toy_vocab):
        passage = wordpiece_tokenize("john had a son", toy_vocab)
        enc = encode_single(passage, toy_vocab, max_seq_len=300)
        assert enc.ids[0] == toy_vocab.cls_id
        assert enc.ids[-1] == toy_vocab.sep_id
        assert set(enc.segment_ids) == {0}
        assert enc.passage_token_range == (1, len(enc) - 2)

    def test_truncation(self, toy_vocab):
        passage = wordpiece_tokenize(" ".join(["son"] * 50), toy_vocab)
        enc = encode_single(passage, toy_vocab, max_seq_len=16)
        assert len(enc) == 16
        assert enc.passage_token_range == (1, 14)
