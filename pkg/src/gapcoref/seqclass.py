"""Sequence-classification formulation over concatenated span embeddings.

The passage is encoded alone; the A, B and pronoun token spans each yield a
span embedding (start state, end state, and their elementwise product
concatenated), and the three span embeddings concatenate into a 9H feature
vector fed through a 512-unit ReLU hidden layer to a 3-way softmax.
Training applies inverted dropout to the feature vector; inference never
does.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import LABELS, GapRecord, gold_label
from .errors import EmptySpan, NoOverlap
from .metrics import ProbTriple
from .tokenization import (
    EncodedInput,
    TokenizedText,
    Vocab,
    align_char_span,
    encode_single,
    wordpiece_tokenize,
)

HIDDEN_UNITS = 512


@dataclass(frozen=True)
class SeqExample:
    record_id: str
    encoded: EncodedInput
    a_span: tuple[int, int]
    b_span: tuple[int, int]
    p_span: tuple[int, int]
    gold: str


def _encoded_span(
    passage: TokenizedText,
    encoded: EncodedInput,
    offset: int,
    length: int,
) -> Optional[tuple[int, int]]:
    """Inclusive encoded span of a surface form, clamped to the kept prefix."""
    try:
        start, end = align_char_span(passage, offset, length)
    except NoOverlap:
        return None
    rng = encoded.passage_token_range
    if rng is None:
        return None
    kept = rng[1] - rng[0] + 1
    if start >= kept:
        return None
    end = min(end, kept - 1)
    return (rng[0] + start, rng[0] + end)


def build_seq_example(
    record: GapRecord,
    vocab: Vocab,
    max_seq_len: int = 300,
    strict: bool = True,
) -> Optional[SeqExample]:
    """Single-segment encoding with aligned A/B/pronoun spans.

    With `strict`, a span truncated away yields None (training skips such
    records); otherwise the missing span falls back to the final passage
    token so inference stays total.
    """
    passage = wordpiece_tokenize(record.text, vocab)
    encoded = encode_single(passage, vocab, max_seq_len)
    spans = [
        _encoded_span(passage, encoded, record.a_offset, len(record.a_name)),
        _encoded_span(passage, encoded, record.b_offset, len(record.b_name)),
        _encoded_span(passage, encoded, record.pronoun_offset, len(record.pronoun)),
    ]
    if any(s is None for s in spans):
        if strict:
            return None
        rng = encoded.passage_token_range
        if rng is None:
            return None
        last = (rng[1], rng[1])
        spans = [s if s is not None else last for s in spans]
    return SeqExample(
        record_id=record.id,
        encoded=encoded,
        a_span=spans[0],
        b_span=spans[1],
        p_span=spans[2],
        gold=gold_label(record),
    )


def span_embedding(states: np.ndarray, span: tuple[int, int]) -> np.ndarray:
    """concat(states[start], states[end], states[start] * states[end])."""
    start, end = span
    if start > end or start < 0 or end >= states.shape[0]:
        raise EmptySpan(f"bad span {span} for {states.shape[0]} states")
    s, e = states[start], states[end]
    return np.concatenate([s, e, s * e])


def seq_head_init(hidden_dim: int, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(np.uint64(seed))
    d_in = 9 * hidden_dim
    b1 = np.sqrt(6.0 / (d_in + HIDDEN_UNITS))
    b2 = np.sqrt(6.0 / (HIDDEN_UNITS + 3))
    return {
        "seq.w1": rng.uniform(-b1, b1, size=(d_in, HIDDEN_UNITS)),
        "seq.b1": np.zeros(HIDDEN_UNITS),
        "seq.w2": rng.uniform(-b2, b2, size=(HIDDEN_UNITS, 3)),
        "seq.b2": np.zeros(3),
    }


def seq_features(
    states: np.ndarray,
    a_span: tuple[int, int],
    b_span: tuple[int, int],
    p_span: tuple[int, int],
) -> np.ndarray:
    return np.concatenate(
        [
            span_embedding(states, a_span),
            span_embedding(states, b_span),
            span_embedding(states, p_span),
        ]
    )


def seq_forward(
    states: np.ndarray,
    a_span: tuple[int, int],
    b_span: tuple[int, int],
    p_span: tuple[int, int],
    head: dict[str, np.ndarray],
    training: bool = False,
    dropout: float = 0.1,
    rng: Optional[np.random.Generator] = None,
) -> ProbTriple:
    """Feature -> ReLU hidden layer -> softmax over (A, B, N).

    Inverted dropout hits the feature vector only when `training` is set.
    """
    feature = seq_features(states, a_span, b_span, p_span)
    if training and dropout > 0.0:
        if rng is None:
            raise ValueError("training-mode dropout needs an rng")
        keep = (rng.random(feature.shape) >= dropout).astype(feature.dtype)
        feature = feature * keep / (1.0 - dropout)
    hidden = np.maximum(feature @ head["seq.w1"] + head["seq.b1"], 0.0)
    scores = hidden @ head["seq.w2"] + head["seq.b2"]
    scores -= scores.max()
    e = np.exp(scores)
    p = e / e.sum()
    return ProbTriple(float(p[0]), float(p[1]), float(p[2]))


def seq_loss(probs: ProbTriple, gold: str) -> float:
    """Cross-entropy of the gold label."""
    return float(-np.log(probs.as_tuple()[LABELS.index(gold)]))


def seq_forward_batch(
    features: np.ndarray, head: dict[str, np.ndarray]
) -> tuple[np.ndarray, np.ndarray]:
    """(probabilities, hidden activations) for a (B, 9H) feature batch."""
    hidden = np.maximum(features @ head["seq.w1"] + head["seq.b1"], 0.0)
    scores = hidden @ head["seq.w2"] + head["seq.b2"]
    scores = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(scores)
    probs = e / e.sum(axis=1, keepdims=True)
    return probs, hidden


def seq_loss_and_head_backward(
    features: np.ndarray,
    head: dict[str, np.ndarray],
    gold_ids: np.ndarray,
) -> tuple[float, np.ndarray, dict[str, np.ndarray]]:
    """Mean cross-entropy, gradient wrt features, and head gradients."""
    B = features.shape[0]
    probs, hidden = seq_forward_batch(features, head)
    rows = np.arange(B)
    loss = float(-np.log(probs[rows, gold_ids]).mean())
    d_scores = probs.copy()
    d_scores[rows, gold_ids] -= 1.0
    d_scores /= B
    grads = {
        "seq.w2": hidden.T @ d_scores,
        "seq.b2": d_scores.sum(axis=0),
    }
    d_hidden = d_scores @ head["seq.w2"].T
    d_hidden[hidden <= 0.0] = 0.0
    grads["seq.w1"] = features.T @ d_hidden
    grads["seq.b1"] = d_hidden.sum(axis=0)
    d_features = d_hidden @ head["seq.w1"].T
    return loss, d_features, grads
