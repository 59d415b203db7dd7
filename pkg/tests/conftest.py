"""Shared fixtures: toy vocabularies and a synthetic GAP-format corpus.

The synthetic corpus follows a two-sentence template where the second
sentence's subject is a repeated mention of A, of B, or of a third name,
making the gold antecedent genuinely learnable from the text:

    <prefix?> <A> met <B> and <C> at the <place> <when> .
    later <S> said <pronoun> wanted the <thing> .

S = A gives label A, S = B label B, S = C label N (the pronoun refers to
neither candidate). Offsets point at the first mention of each name, so a
QA model must match the second-sentence subject back to its introduction.
The pronoun's five-word context window contains <S>, mirroring how the
window disambiguates the pronoun on real passages.
"""

from __future__ import annotations

import numpy as np
import pytest

from gapcoref.data import GapRecord
from gapcoref.tokenization import SPECIAL_TOKENS, Vocab

MALE_NAMES = (
    "Arthur", "Brian", "Carl", "Dmitri", "Edward", "Felix", "George",
    "Hugo", "Ivan", "Jonas",
)
FEMALE_NAMES = (
    "Alice", "Bella", "Carol", "Daria", "Elena", "Fiona", "Greta",
    "Hanna", "Irene", "Julia",
)
PLACES = ("market", "station", "harbour", "library", "museum")
DAYS = ("monday", "tuesday", "friday", "sunday")
WHENS = ("today", "on {day}", "late on {day}")
THINGS = ("apples", "candles", "maps", "ribbons", "tickets")
PREFIXES = ("", "yesterday ,", "once more ,", "that day ,")

_TEMPLATE_WORDS = (
    "met", "and", "at", "the", "said", "wanted", "later",
    "he", "she", "today", "on", "late", "yesterday", "once", "more",
    "that", "day", ".", ",",
)


def synth_vocab_tokens() -> list[str]:
    tokens = list(SPECIAL_TOKENS)
    tokens += [n.lower() for n in MALE_NAMES + FEMALE_NAMES]
    tokens += list(PLACES) + list(DAYS) + list(THINGS)
    tokens += list(_TEMPLATE_WORDS)
    return tokens


def make_synthetic_records(n: int, seed: int = 0, id_prefix: str = "synth") -> list[GapRecord]:
    rng = np.random.default_rng(seed)
    records = []
    for index in range(n):
        gender = "male" if rng.random() < 0.5 else "female"
        pool = MALE_NAMES if gender == "male" else FEMALE_NAMES
        pronoun = "he" if gender == "male" else "she"
        a_name, b_name, c_name = (
            pool[i] for i in rng.choice(len(pool), size=3, replace=False)
        )
        u = rng.random()
        label = "A" if u < 0.45 else "B" if u < 0.90 else "N"
        subject = {"A": a_name, "B": b_name, "N": c_name}[label]
        when = WHENS[rng.integers(len(WHENS))].format(day=DAYS[rng.integers(len(DAYS))])
        place = PLACES[rng.integers(len(PLACES))]
        thing = THINGS[rng.integers(len(THINGS))]
        prefix = PREFIXES[rng.integers(len(PREFIXES))]

        words = (
            prefix.split()
            + [a_name, "met", b_name, "and", c_name, "at", "the", place]
            + when.split()
            + [".", "later", subject, "said", pronoun, "wanted", "the",
               thing, "."]
        )
        text = " ".join(words)
        a_offset = text.index(a_name)
        b_offset = text.index(b_name)
        pronoun_offset = text.index(" " + pronoun + " ") + 1
        records.append(
            GapRecord(
                id=f"{id_prefix}-{index}",
                text=text,
                pronoun=pronoun,
                pronoun_offset=pronoun_offset,
                a_name=a_name,
                a_offset=a_offset,
                a_coref=label == "A",
                b_name=b_name,
                b_offset=b_offset,
                b_coref=label == "B",
                url=f"http://example.org/{index}",
            ).validate()
        )
    return records


def records_to_tsv(records) -> str:
    lines = [
        "ID\tText\tPronoun\tPronoun-offset\tA\tA-offset\tA-coref\t"
        "B\tB-offset\tB-coref\tURL"
    ]
    for r in records:
        lines.append(
            f"{r.id}\t{r.text}\t{r.pronoun}\t{r.pronoun_offset}\t"
            f"{r.a_name}\t{r.a_offset}\t{str(r.a_coref).upper()}\t"
            f"{r.b_name}\t{r.b_offset}\t{str(r.b_coref).upper()}\t{r.url}"
        )
    return "\n".join(lines) + "\n"


@pytest.fixture(scope="session")
def synth_vocab() -> Vocab:
    return Vocab(synth_vocab_tokens())


@pytest.fixture(scope="session")
def synth_records() -> list[GapRecord]:
    return make_synthetic_records(60, seed=11)


@pytest.fixture(scope="session")
def toy_vocab() -> Vocab:
    """Small hand-built vocabulary incl. the classic multi-piece example."""
    tokens = list(SPECIAL_TOKENS) + [
        "un", "##aff", "##able", "##ly",
        "john", "and", "his", "wife", "carol", "had", "son", "they",
        "say", "the", "fox", "jumped", "over", "dog", "lazy",
        ".", ",", "'", "-", "(", ")",
    ] + [c for c in "abcdefghijklmnopqrstuvwxyz0123456789"] + [
        "##" + c for c in "abcdefghijklmnopqrstuvwxyz0123456789"
    ]
    return Vocab(tokens)
