"""Lowercased WordPiece tokenization with character-span alignment.

The basic pass lowercases, strips accents and splits on whitespace and on
every punctuation character; the wordpiece pass runs greedy
longest-match-first segmentation against a fixed vocabulary. Every piece
keeps the span of original (pre-lowercasing) characters it was derived
from, so model-space token spans can be mapped back to the source text.
"""

from __future__ import annotations

import bisect
import unicodedata
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from .errors import (
    DuplicateToken,
    FirstSegmentTooLong,
    MissingSpecialToken,
    NoOverlap,
)

CLS, SEP, PAD, UNK, MASK = "[CLS]", "[SEP]", "[PAD]", "[UNK]", "[MASK]"
SPECIAL_TOKENS = (CLS, SEP, PAD, UNK, MASK)


class Vocab:
    """Immutable token -> id mapping with required special tokens."""

    def __init__(self, tokens: Sequence[str]):
        self.token_to_id: dict[str, int] = {}
        for index, token in enumerate(tokens):
            if token in self.token_to_id:
                raise DuplicateToken(f"token {token!r} listed twice")
            self.token_to_id[token] = index
        for special in SPECIAL_TOKENS:
            if special not in self.token_to_id:
                raise MissingSpecialToken(f"vocabulary lacks {special}")
        self.id_to_token = list(tokens)
        self.cls_id = self.token_to_id[CLS]
        self.sep_id = self.token_to_id[SEP]
        self.pad_id = self.token_to_id[PAD]
        self.unk_id = self.token_to_id[UNK]

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def __getitem__(self, token: str) -> int:
        return self.token_to_id[token]


def load_vocab(data: bytes | str) -> Vocab:
    """One token per line, UTF-8; ids are line numbers."""
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    lines = data.split("\n")
    if lines and lines[-1] == "":
        lines = lines[:-1]
    return Vocab([line.rstrip("\r") for line in lines])


def load_vocab_file(path) -> Vocab:
    with open(path, "rb") as fh:
        return load_vocab(fh.read())


def write_vocab_file(path, tokens: Iterable[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for token in tokens:
            fh.write(token + "\n")


@dataclass(frozen=True)
class Piece:
    """One wordpiece and the half-open original-text span it came from."""

    text: str
    char_start: int
    char_end: int


@dataclass(frozen=True)
class TokenizedText:
    pieces: tuple[Piece, ...]

    def __len__(self) -> int:
        return len(self.pieces)

    def piece_strings(self) -> list[str]:
        return [p.text for p in self.pieces]


def _is_whitespace(char: str) -> bool:
    if char in (" ", "\t", "\n", "\r"):
        return True
    return unicodedata.category(char) == "Zs"


def _is_punctuation(char: str) -> bool:
    cp = ord(char)
    # Non-letter/number ASCII counts as punctuation for splitting purposes.
    if 33 <= cp <= 47 or 58 <= cp <= 64 or 91 <= cp <= 96 or 123 <= cp <= 126:
        return True
    return unicodedata.category(char).startswith("P")


def _normalize_char(char: str) -> str:
    """Lowercase and strip combining accents; may yield 0..n characters."""
    out = []
    for lowered in char.lower():
        for piece in unicodedata.normalize("NFD", lowered):
            if unicodedata.category(piece) != "Mn":
                out.append(piece)
    return "".join(out)


def _words_with_spans(text: str) -> list[tuple[int, int]]:
    """Half-open spans of whitespace/punctuation-delimited word chunks.

    Punctuation characters become single-character chunks of their own.
    """
    spans: list[tuple[int, int]] = []
    start: Optional[int] = None
    for index, char in enumerate(text):
        if _is_whitespace(char):
            if start is not None:
                spans.append((start, index))
                start = None
        elif _is_punctuation(char):
            if start is not None:
                spans.append((start, index))
                start = None
            spans.append((index, index + 1))
        else:
            if start is None:
                start = index
    if start is not None:
        spans.append((start, len(text)))
    return spans


def _wordpiece_split(normalized: str, vocab: Vocab) -> Optional[list[tuple[str, int, int]]]:
    """Greedy longest-match-first split of one normalized word.

    Returns (piece, start, end) with positions into `normalized`, or None
    when some position cannot be matched at all.
    """
    pieces: list[tuple[str, int, int]] = []
    start = 0
    while start < len(normalized):
        end = len(normalized)
        found = None
        while start < end:
            candidate = normalized[start:end]
            if start > 0:
                candidate = "##" + candidate
            if candidate in vocab:
                found = candidate
                break
            end -= 1
        if found is None:
            return None
        pieces.append((found, start, end))
        start = end
    return pieces


def wordpiece_tokenize(text: str, vocab: Vocab) -> TokenizedText:
    """Tokenize `text`, aligning every piece to its original char span."""
    pieces: list[Piece] = []
    for word_start, word_end in _words_with_spans(text):
        # Map positions in the normalized word back to original indices;
        # lowercasing and NFD can change the character count.
        normalized_chars: list[str] = []
        norm_to_orig: list[int] = []
        for orig_index in range(word_start, word_end):
            for norm_char in _normalize_char(text[orig_index]):
                normalized_chars.append(norm_char)
                norm_to_orig.append(orig_index)
        normalized = "".join(normalized_chars)
        if not normalized:
            continue
        split = _wordpiece_split(normalized, vocab)
        if split is None:
            pieces.append(Piece(UNK, word_start, word_end))
            continue
        for piece_text, norm_start, norm_end in split:
            pieces.append(
                Piece(
                    piece_text,
                    norm_to_orig[norm_start],
                    norm_to_orig[norm_end - 1] + 1,
                )
            )
    return TokenizedText(tuple(pieces))


def align_char_span(
    tokenized: TokenizedText, char_start: int, char_len: int
) -> tuple[int, int]:
    """Smallest inclusive token interval covering pieces that overlap
    [char_start, char_start + char_len)."""
    char_end = char_start + char_len
    pieces = tokenized.pieces
    if not pieces or char_len <= 0:
        raise NoOverlap(f"span ({char_start}, {char_len}) overlaps no piece")
    # Pieces are sorted by char_start; find the first piece ending after
    # char_start, then extend while pieces still begin before char_end.
    starts = [p.char_start for p in pieces]
    first = bisect.bisect_right(starts, char_start) - 1
    if first < 0 or pieces[first].char_end <= char_start:
        first += 1
    while first < len(pieces) and pieces[first].char_end <= char_start:
        first += 1
    if first >= len(pieces) or pieces[first].char_start >= char_end:
        raise NoOverlap(f"span ({char_start}, {char_len}) overlaps no piece")
    last = first
    while last + 1 < len(pieces) and pieces[last + 1].char_start < char_end:
        last += 1
    return first, last


@dataclass(frozen=True)
class EncodedInput:
    """Delimited id sequence ready for the encoder.

    Layout is [CLS] first-segment [SEP] (second-segment [SEP])?, segment
    ids 0 through the first [SEP] inclusive and 1 after. `alignment` maps
    each position to the half-open char span in its own segment's source
    text (None for special tokens). `passage_token_range` is the inclusive
    token interval of the passage region, or None if it was truncated away.
    """

    ids: tuple[int, ...]
    segment_ids: tuple[int, ...]
    mask: tuple[int, ...]
    passage_token_range: Optional[tuple[int, int]]
    alignment: tuple[Optional[tuple[int, int]], ...]

    def __len__(self) -> int:
        return len(self.ids)


def encode_pair(
    first: TokenizedText,
    second: TokenizedText,
    vocab: Vocab,
    max_seq_len: int = 300,
) -> EncodedInput:
    """Encode a (question, passage) pair, truncating only the passage tail.

    Raises FirstSegmentTooLong when the first segment alone exceeds
    max_seq_len - 3 (room for [CLS] and both [SEP]s).
    """
    if len(first) == 0:
        raise ValueError("first segment must be non-empty")
    if len(first) > max_seq_len - 3:
        raise FirstSegmentTooLong(
            f"first segment has {len(first)} pieces, budget {max_seq_len - 3}"
        )
    budget = max_seq_len - 3 - len(first)
    kept_second = second.pieces[:budget]

    ids = [vocab.cls_id]
    alignment: list[Optional[tuple[int, int]]] = [None]
    for piece in first.pieces:
        ids.append(vocab.token_to_id.get(piece.text, vocab.unk_id))
        alignment.append((piece.char_start, piece.char_end))
    ids.append(vocab.sep_id)
    alignment.append(None)
    first_len = len(ids)

    passage_start = first_len
    for piece in kept_second:
        ids.append(vocab.token_to_id.get(piece.text, vocab.unk_id))
        alignment.append((piece.char_start, piece.char_end))
    ids.append(vocab.sep_id)
    alignment.append(None)

    segment_ids = [0] * first_len + [1] * (len(ids) - first_len)
    passage_range = (
        (passage_start, passage_start + len(kept_second) - 1) if kept_second else None
    )
    return EncodedInput(
        ids=tuple(ids),
        segment_ids=tuple(segment_ids),
        mask=tuple([1] * len(ids)),
        passage_token_range=passage_range,
        alignment=tuple(alignment),
    )


def encode_single(
    passage: TokenizedText, vocab: Vocab, max_seq_len: int = 300
) -> EncodedInput:
    """Encode a lone passage as [CLS] passage [SEP], truncating the tail."""
    budget = max_seq_len - 2
    kept = passage.pieces[:budget]
    ids = [vocab.cls_id]
    alignment: list[Optional[tuple[int, int]]] = [None]
    for piece in kept:
        ids.append(vocab.token_to_id.get(piece.text, vocab.unk_id))
        alignment.append((piece.char_start, piece.char_end))
    ids.append(vocab.sep_id)
    alignment.append(None)
    passage_range = (1, len(kept)) if kept else None
    return EncodedInput(
        ids=tuple(ids),
        segment_ids=tuple([0] * len(ids)),
        mask=tuple([1] * len(ids)),
        passage_token_range=passage_range,
        alignment=tuple(alignment),
    )
