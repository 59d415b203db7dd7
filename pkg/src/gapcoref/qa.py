"""Extractive-QA formulation of pronoun resolution.

The question is the pronoun's context window of up to five space-separated
words; the passage is the full snippet. A linear head over encoder states
produces start/end logits per token, the best-scoring span is the answer,
and calibrated (P_A, P_B, P_N) come from span-wise max pooling of the
logits at the candidate offsets fed through a multinomial logistic
regression.

Answer extraction deliberately never sees the candidate names or offsets;
only the calibration stage does.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from .data import LABELS, GapRecord, gold_label
from .errors import (
    AnswerTruncated,
    DegenerateLabels,
    EmptySpan,
    NoOverlap,
    PronounNotFound,
)
from .metrics import ProbTriple
from .tokenization import (
    EncodedInput,
    TokenizedText,
    Vocab,
    align_char_span,
    encode_pair,
    wordpiece_tokenize,
)

# --------------------------------------------------------------------------
# input construction
# --------------------------------------------------------------------------


def _space_separated_words(text: str) -> list[tuple[int, int]]:
    """Half-open spans of maximal non-whitespace runs."""
    spans = []
    start = None
    for index, char in enumerate(text):
        if char.isspace():
            if start is not None:
                spans.append((start, index))
                start = None
        elif start is None:
            start = index
    if start is not None:
        spans.append((start, len(text)))
    return spans


def build_question(record: GapRecord, window: int = 5) -> str:
    """The word containing the pronoun offset plus its neighbours.

    Words are whitespace-separated tokens of the raw text; a window of w
    takes up to (w-1)//2 words on the left and w//2 on the right, fewer
    near a boundary. Joined with single spaces.
    """
    if window < 1:
        raise ValueError("window must be positive")
    spans = _space_separated_words(record.text)
    center = None
    for index, (start, end) in enumerate(spans):
        if start <= record.pronoun_offset < end:
            center = index
            break
    if center is None:
        raise PronounNotFound(
            f"record {record.id!r}: offset {record.pronoun_offset} is not inside a word"
        )
    left = (window - 1) // 2
    right = window // 2
    chosen = spans[max(0, center - left) : center + right + 1]
    return " ".join(record.text[s:e] for s, e in chosen)


@dataclass(frozen=True)
class QaExample:
    """One encoded question/passage pair.

    `answer_span` is the inclusive token interval of the gold name inside
    the encoded sequence (None at inference). `passage_tokens` holds the
    full untruncated passage tokenization for span decoding.
    """

    record_id: str
    encoded: EncodedInput
    passage_tokens: TokenizedText
    answer_span: Optional[tuple[int, int]] = None


def build_qa_input(
    record: GapRecord, vocab: Vocab, window: int = 5, max_seq_len: int = 300
) -> QaExample:
    """Inference-side example: question + passage, no candidate knowledge."""
    question = wordpiece_tokenize(build_question(record, window), vocab)
    passage = wordpiece_tokenize(record.text, vocab)
    encoded = encode_pair(question, passage, vocab, max_seq_len)
    return QaExample(
        record_id=record.id, encoded=encoded, passage_tokens=passage
    )


def passage_span_to_encoded(
    example: QaExample, piece_span: tuple[int, int], clamp: bool = False
) -> Optional[tuple[int, int]]:
    """Map a passage-piece interval into encoded token coordinates.

    Returns None when the span was truncated away; with `clamp`, spans cut
    mid-way are clamped to the surviving prefix instead.
    """
    rng = example.encoded.passage_token_range
    if rng is None:
        return None
    kept = rng[1] - rng[0] + 1
    start, end = piece_span
    if start >= kept:
        return None
    if end >= kept:
        if not clamp:
            return None
        end = kept - 1
    return (rng[0] + start, rng[0] + end)


def build_qa_example(
    record: GapRecord,
    vocab: Vocab,
    window: int = 5,
    max_seq_len: int = 300,
    training: bool = True,
) -> Optional[QaExample]:
    """Training example with the gold name's token span as the answer.

    Returns None for gold label N at training time (no extractable answer).
    Raises AnswerTruncated when the gold span falls beyond the truncation
    boundary; callers skip such examples.
    """
    example = build_qa_input(record, vocab, window, max_seq_len)
    if not training:
        return example
    label = gold_label(record)
    if label == "N":
        return None
    name, offset = (
        (record.a_name, record.a_offset)
        if label == "A"
        else (record.b_name, record.b_offset)
    )
    piece_span = align_char_span(example.passage_tokens, offset, len(name))
    answer = passage_span_to_encoded(example, piece_span)
    if answer is None:
        raise AnswerTruncated(
            f"record {record.id!r}: gold span {piece_span} beyond truncation"
        )
    return QaExample(
        record_id=example.record_id,
        encoded=example.encoded,
        passage_tokens=example.passage_tokens,
        answer_span=answer,
    )


def candidate_encoded_spans(
    record: GapRecord, example: QaExample
) -> tuple[Optional[tuple[int, int]], Optional[tuple[int, int]]]:
    """Encoded token spans of the A and B names (None when unavailable)."""
    spans = []
    for name, offset in (
        (record.a_name, record.a_offset),
        (record.b_name, record.b_offset),
    ):
        try:
            piece_span = align_char_span(example.passage_tokens, offset, len(name))
        except NoOverlap:
            spans.append(None)
            continue
        spans.append(passage_span_to_encoded(example, piece_span, clamp=True))
    return spans[0], spans[1]


# --------------------------------------------------------------------------
# span head
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SpanLogits:
    start: np.ndarray
    end: np.ndarray


def qa_head_init(hidden_dim: int, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(np.uint64(seed))
    bound = np.sqrt(6.0 / (hidden_dim + 2))
    return {
        "qa.w": rng.uniform(-bound, bound, size=(hidden_dim, 2)),
        "qa.b": np.zeros(2),
    }


def qa_forward(states: np.ndarray, head: dict[str, np.ndarray]) -> SpanLogits:
    """Per-token start/end logits from a (T x H) state matrix."""
    logits = states @ head["qa.w"] + head["qa.b"]
    return SpanLogits(start=logits[:, 0], end=logits[:, 1])


def qa_forward_batch(states: np.ndarray, head: dict[str, np.ndarray]) -> np.ndarray:
    return states @ head["qa.w"] + head["qa.b"]


def qa_loss(logits: SpanLogits, answer_span: tuple[int, int]) -> float:
    """Mean of the start and end cross-entropies at the gold positions."""
    start_pos, end_pos = answer_span
    ce_start = logsumexp(logits.start) - logits.start[start_pos]
    ce_end = logsumexp(logits.end) - logits.end[end_pos]
    return float(0.5 * (ce_start + ce_end))


def qa_loss_batch(
    logits: np.ndarray,
    mask: np.ndarray,
    starts: np.ndarray,
    ends: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Batched QA loss and its gradient wrt the logits.

    Softmaxes run over valid (non-padding) positions only, so padding can
    never change the loss. Returns (mean loss, d_logits of shape (B,T,2)).
    """
    B, T, _ = logits.shape
    neg = np.where(mask == 1, 0.0, -np.inf)
    d_logits = np.zeros_like(logits)
    total = 0.0
    rows = np.arange(B)
    for column, positions in ((0, starts), (1, ends)):
        scores = logits[:, :, column] + neg
        row_max = scores.max(axis=1, keepdims=True)
        e = np.exp(scores - row_max)
        z = e.sum(axis=1, keepdims=True)
        log_probs = scores - row_max - np.log(z)
        total += -log_probs[rows, positions].sum()
        grad = e / z
        grad[rows, positions] -= 1.0
        d_logits[:, :, column] = grad
    loss = total / (2.0 * B)
    d_logits /= 2.0 * B
    return loss, d_logits


def qa_head_backward(
    states: np.ndarray, head: dict[str, np.ndarray], d_logits: np.ndarray
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    H = states.shape[-1]
    s2 = states.reshape(-1, H)
    d2 = d_logits.reshape(-1, 2)
    grads = {"qa.w": s2.T @ d2, "qa.b": d2.sum(axis=0)}
    d_states = d_logits @ head["qa.w"].T
    return d_states, grads


# --------------------------------------------------------------------------
# answer extraction (no candidate knowledge)
# --------------------------------------------------------------------------


def extract_best_span(
    logits: SpanLogits,
    passage_range: tuple[int, int],
    max_answer_len: int = 30,
) -> tuple[int, int]:
    """Highest start[i] + end[j] over i <= j within the passage region,
    with j - i + 1 <= max_answer_len; ties prefer smaller i, then smaller j.
    """
    lo, hi = passage_range
    if lo > hi:
        raise EmptySpan(f"empty passage range {passage_range}")
    best_score = -np.inf
    best = (lo, lo)
    start, end = logits.start, logits.end
    for i in range(lo, hi + 1):
        j_hi = min(hi, i + max_answer_len - 1)
        window = end[i : j_hi + 1]
        j_rel = int(np.argmax(window))  # first max: smallest j on ties
        score = start[i] + window[j_rel]
        if score > best_score:
            best_score = score
            best = (i, i + j_rel)
    return best


def decode_answer(
    example: QaExample, token_span: tuple[int, int]
) -> tuple[int, int]:
    """Half-open char span in the record text covered by an encoded span."""
    spans = [
        example.encoded.alignment[t]
        for t in range(token_span[0], token_span[1] + 1)
        if example.encoded.alignment[t] is not None
    ]
    if not spans:
        raise EmptySpan(f"token span {token_span} has no aligned characters")
    return min(s for s, _ in spans), max(e for _, e in spans)


# --------------------------------------------------------------------------
# span-wise max pooling + logistic-regression calibration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PooledFeatures:
    max_start_a: float
    max_end_a: float
    max_start_b: float
    max_end_b: float
    max_start_global: float
    max_end_global: float

    def as_array(self) -> np.ndarray:
        return np.array(
            [
                self.max_start_a,
                self.max_end_a,
                self.max_start_b,
                self.max_end_b,
                self.max_start_global,
                self.max_end_global,
            ]
        )


def span_pool_features(
    logits: SpanLogits, a_span: tuple[int, int], b_span: tuple[int, int]
) -> PooledFeatures:
    """Max start/end logits over each candidate span and the full sequence."""

    def span_max(vec: np.ndarray, span: tuple[int, int]) -> float:
        lo, hi = span
        if lo > hi or lo < 0 or hi >= len(vec):
            raise EmptySpan(f"bad span {span} for length {len(vec)}")
        return float(vec[lo : hi + 1].max())

    return PooledFeatures(
        max_start_a=span_max(logits.start, a_span),
        max_end_a=span_max(logits.end, a_span),
        max_start_b=span_max(logits.start, b_span),
        max_end_b=span_max(logits.end, b_span),
        max_start_global=float(logits.start.max()),
        max_end_global=float(logits.end.max()),
    )


def pooled_features_with_fallback(
    logits: SpanLogits,
    a_span: Optional[tuple[int, int]],
    b_span: Optional[tuple[int, int]],
) -> PooledFeatures:
    """Like span_pool_features, but a candidate whose span was truncated
    away contributes the sequence-minimum logits (weakest evidence)."""

    def pool(vec: np.ndarray, span: Optional[tuple[int, int]]) -> float:
        if span is None:
            return float(vec.min())
        return float(vec[span[0] : span[1] + 1].max())

    return PooledFeatures(
        max_start_a=pool(logits.start, a_span),
        max_end_a=pool(logits.end, a_span),
        max_start_b=pool(logits.start, b_span),
        max_end_b=pool(logits.end, b_span),
        max_start_global=float(logits.start.max()),
        max_end_global=float(logits.end.max()),
    )


@dataclass(frozen=True)
class LrModel:
    """Multinomial logistic regression over the six pooled features."""

    weights: np.ndarray  # (3, 6)
    bias: np.ndarray  # (3,)
    c: float


def lr_objective(
    flat: np.ndarray, features: np.ndarray, label_ids: np.ndarray, c: float
) -> tuple[float, np.ndarray]:
    """Summed cross-entropy plus (1/(2C)) * ||W||^2, bias unpenalized."""
    n, d = features.shape
    W = flat[: 3 * d].reshape(3, d)
    b = flat[3 * d :]
    scores = features @ W.T + b
    lse = logsumexp(scores, axis=1)
    loss = float(np.sum(lse - scores[np.arange(n), label_ids]))
    loss += float(np.sum(W * W)) / (2.0 * c)
    probs = np.exp(scores - lse[:, None])
    probs[np.arange(n), label_ids] -= 1.0
    dW = probs.T @ features + W / c
    db = probs.sum(axis=0)
    return loss, np.concatenate([dW.ravel(), db])


def fit_span_lr(
    features: Sequence[PooledFeatures] | np.ndarray,
    labels: Sequence[str],
    c: float = 0.1,
) -> LrModel:
    """Deterministic fit from zero initialization.

    Runs L-BFGS until the gradient infinity-norm drops below 1e-6 or 1000
    iterations elapse.
    """
    X = (
        np.asarray(features, dtype=float)
        if isinstance(features, np.ndarray)
        else np.stack([f.as_array() for f in features])
    )
    if not np.all(np.isfinite(X)):
        raise ValueError("features must be finite")
    label_ids = np.array([LABELS.index(l) for l in labels])
    if len(set(labels)) < 2:
        raise DegenerateLabels(f"need >= 2 distinct labels, got {set(labels)}")
    if len(label_ids) != len(X):
        raise ValueError("features and labels length mismatch")
    d = X.shape[1]
    result = minimize(
        lr_objective,
        np.zeros(3 * d + 3),
        args=(X, label_ids, c),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": 1000, "gtol": 1e-6, "ftol": 1e-18},
    )
    W = result.x[: 3 * d].reshape(3, d)
    b = result.x[3 * d :]
    return LrModel(weights=W, bias=b, c=c)


def qa_probabilities(model: LrModel, features: PooledFeatures) -> ProbTriple:
    """softmax(W f + b) as a point on the 3-class simplex."""
    scores = model.weights @ features.as_array() + model.bias
    scores = scores - scores.max()
    e = np.exp(scores)
    p = e / e.sum()
    return ProbTriple(float(p[0]), float(p[1]), float(p[2]))


def qa_probabilities_batch(model: LrModel, features: np.ndarray) -> np.ndarray:
    scores = features @ model.weights.T + model.bias
    scores -= scores.max(axis=1, keepdims=True)
    e = np.exp(scores)
    return e / e.sum(axis=1, keepdims=True)
