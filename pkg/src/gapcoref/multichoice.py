"""Multiple-choice formulation: score A, B and "neither" as continuations.

The shared first segment is the passage with "<pronoun> is " appended as an
extra sentence; each choice's second segment is one candidate name or the
literal word "neither". A linear head maps each choice's [CLS] state to a
score and a softmax over the three scores gives (P_A, P_B, P_N).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LABELS, GapRecord, gold_label
from .errors import FirstSegmentTooLong
from .metrics import ProbTriple
from .tokenization import (
    EncodedInput,
    TokenizedText,
    Vocab,
    encode_pair,
    wordpiece_tokenize,
)

NEITHER_WORD = "neither"


@dataclass(frozen=True)
class McExample:
    """Three encoded (passage+probe, choice) pairs in the order A, B, neither."""

    record_id: str
    choice_inputs: tuple[EncodedInput, EncodedInput, EncodedInput]
    gold_choice: int


def build_mc_example(
    record: GapRecord, vocab: Vocab, max_seq_len: int = 300
) -> McExample:
    """Construct the three-choice example for one record.

    The probe sentence is appended as ". <pronoun> is ", matching the
    continuation form the task uses. When the first segment overflows the
    budget it is truncated from the left so the probe tail always survives;
    a budget too small for any passage token raises FirstSegmentTooLong.
    """
    probe_text = record.text + ". " + record.pronoun + " is "
    first = wordpiece_tokenize(probe_text, vocab)
    choices = [
        wordpiece_tokenize(record.a_name, vocab),
        wordpiece_tokenize(record.b_name, vocab),
        wordpiece_tokenize(NEITHER_WORD, vocab),
    ]
    longest_choice = max(len(c) for c in choices)
    budget = max_seq_len - 3 - longest_choice
    if budget < 1:
        raise FirstSegmentTooLong(
            f"record {record.id!r}: no room for the passage within {max_seq_len}"
        )
    if len(first) > budget:
        first = TokenizedText(first.pieces[len(first) - budget :])
    encoded = tuple(
        encode_pair(first, choice, vocab, max_seq_len) for choice in choices
    )
    return McExample(
        record_id=record.id,
        choice_inputs=encoded,  # type: ignore[arg-type]
        gold_choice=LABELS.index(gold_label(record)),
    )


def mc_head_init(hidden_dim: int, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(np.uint64(seed))
    bound = np.sqrt(6.0 / (hidden_dim + 1))
    return {
        "mc.w": rng.uniform(-bound, bound, size=(hidden_dim, 1)),
        "mc.b": np.zeros(1),
    }


def mc_forward(
    choice_states: np.ndarray, head: dict[str, np.ndarray]
) -> ProbTriple:
    """Softmax over the three choices' [CLS] scores.

    choice_states: (3, H) matrix of the per-choice [CLS] states.
    """
    scores = (choice_states @ head["mc.w"]).ravel() + head["mc.b"][0]
    scores = scores - scores.max()
    e = np.exp(scores)
    p = e / e.sum()
    return ProbTriple(float(p[0]), float(p[1]), float(p[2]))


def mc_scores_batch(
    cls_states: np.ndarray, head: dict[str, np.ndarray]
) -> np.ndarray:
    """(B, 3) choice scores from (B, 3, H) stacked [CLS] states."""
    return (cls_states @ head["mc.w"])[..., 0] + head["mc.b"][0]


def mc_softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def mc_loss(probs: ProbTriple, gold_choice: int) -> float:
    """Cross-entropy of the gold choice."""
    return float(-np.log(probs.as_tuple()[gold_choice]))


def mc_loss_batch(
    scores: np.ndarray, gold_choices: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean choice cross-entropy and its gradient wrt the (B, 3) scores."""
    B = scores.shape[0]
    probs = mc_softmax(scores)
    rows = np.arange(B)
    loss = float(-np.log(probs[rows, gold_choices]).mean())
    d_scores = probs.copy()
    d_scores[rows, gold_choices] -= 1.0
    d_scores /= B
    return loss, d_scores


def mc_head_backward(
    cls_states: np.ndarray, head: dict[str, np.ndarray], d_scores: np.ndarray
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Gradients for the head and the stacked (B, 3, H) [CLS] states."""
    H = cls_states.shape[-1]
    flat_states = cls_states.reshape(-1, H)
    flat_d = d_scores.reshape(-1, 1)
    grads = {"mc.w": flat_states.T @ flat_d, "mc.b": flat_d.sum(axis=0)}
    d_cls = (flat_d @ head["mc.w"].T).reshape(cls_states.shape)
    return d_cls, grads
