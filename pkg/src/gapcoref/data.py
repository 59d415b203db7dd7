"""GAP-format dataset handling.

Parses the 11-column tab-separated format (ID, Text, Pronoun,
Pronoun-offset, A, A-offset, A-coref, B, B-offset, B-coref, URL),
derives gold labels and pronoun gender, computes dataset statistics and
builds gender-stratified k-fold plans.

Offsets are Unicode scalar-value indices into the decoded text, i.e.
plain Python string indices.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    BothCorefTrue,
    MalformedRow,
    OffsetMismatch,
    TooFewRecords,
    UnknownPronoun,
)

LABELS = ("A", "B", "N")
MALE, FEMALE = "male", "female"

GAP_COLUMNS = (
    "ID", "Text", "Pronoun", "Pronoun-offset",
    "A", "A-offset", "A-coref",
    "B", "B-offset", "B-coref",
    "URL",
)

# Closed mapping; anything else is a hard error so corpus drift is caught.
PRONOUN_GENDER = {
    "he": MALE, "him": MALE, "his": MALE,
    "she": FEMALE, "her": FEMALE, "hers": FEMALE,
}


@dataclass(frozen=True)
class GapRecord:
    """One dataset row with validated offsets and coreference flags."""

    id: str
    text: str
    pronoun: str
    pronoun_offset: int
    a_name: str
    a_offset: int
    a_coref: bool
    b_name: str
    b_offset: int
    b_coref: bool
    url: str = ""

    def validate(self) -> "GapRecord":
        for name, offset, what in (
            (self.pronoun, self.pronoun_offset, "Pronoun"),
            (self.a_name, self.a_offset, "A"),
            (self.b_name, self.b_offset, "B"),
        ):
            if not (0 <= offset < len(self.text)):
                raise OffsetMismatch(
                    f"record {self.id!r}: {what} offset {offset} outside text"
                )
            if not self.text.startswith(name, offset):
                raise OffsetMismatch(
                    f"record {self.id!r}: {what} surface form {name!r} "
                    f"not found at offset {offset}"
                )
        if self.a_coref and self.b_coref:
            raise BothCorefTrue(f"record {self.id!r}: A-coref and B-coref both true")
        return self


@dataclass(frozen=True)
class DatasetStats:
    total: int
    a_count: int
    b_count: int
    n_count: int


@dataclass(frozen=True)
class FoldPlan:
    """Assignment of every record id to exactly one fold in [0, k)."""

    k: int
    assignments: Mapping[str, int]

    def fold_ids(self, fold: int) -> list[str]:
        return [rid for rid, f in self.assignments.items() if f == fold]

    def train_ids(self, fold: int) -> list[str]:
        """Ids outside `fold`. A k=1 plan degenerates to training on everything."""
        if self.k == 1:
            return list(self.assignments)
        return [rid for rid, f in self.assignments.items() if f != fold]


def _parse_bool(token: str, record_id: str) -> bool:
    low = token.strip().lower()
    if low == "true":
        return True
    if low == "false":
        return False
    raise MalformedRow(f"record {record_id!r}: bad boolean {token!r}")


def _parse_int(token: str, record_id: str, column: str) -> int:
    try:
        return int(token)
    except ValueError:
        raise MalformedRow(
            f"record {record_id!r}: column {column} is not an integer: {token!r}"
        ) from None


def parse_gap_tsv(data: bytes | str) -> list[GapRecord]:
    """Parse GAP-format TSV content into validated records.

    Accepts raw bytes (decoded as UTF-8) or text; tolerates LF and CRLF
    line endings. Fields are split on raw tabs (the format carries no
    quoting; passages may contain double quotes). The header row must
    carry the 11 GAP column names.
    """
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    lines = [line.rstrip("\r") for line in data.split("\n")]
    if not lines or not lines[0]:
        raise MalformedRow("empty file: missing header row")
    header = lines[0].split("\t")
    if tuple(h.strip() for h in header) != GAP_COLUMNS:
        raise MalformedRow(f"unexpected header columns: {header!r}")

    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        row = line.split("\t")
        if len(row) != len(GAP_COLUMNS):
            raise MalformedRow(
                f"line {lineno}: expected {len(GAP_COLUMNS)} columns, got {len(row)}"
            )
        rid = row[0]
        record = GapRecord(
            id=rid,
            text=row[1],
            pronoun=row[2],
            pronoun_offset=_parse_int(row[3], rid, "Pronoun-offset"),
            a_name=row[4],
            a_offset=_parse_int(row[5], rid, "A-offset"),
            a_coref=_parse_bool(row[6], rid),
            b_name=row[7],
            b_offset=_parse_int(row[8], rid, "B-offset"),
            b_coref=_parse_bool(row[9], rid),
            url=row[10],
        )
        records.append(record.validate())
    return records


def load_gap_tsv(path) -> list[GapRecord]:
    with open(path, "rb") as fh:
        return parse_gap_tsv(fh.read())


def gold_label(record: GapRecord) -> str:
    """A if the pronoun corefers with A, B with B, else N."""
    if record.a_coref and record.b_coref:
        raise BothCorefTrue(f"record {record.id!r}: both coref flags set")
    if record.a_coref:
        return "A"
    if record.b_coref:
        return "B"
    return "N"


def pronoun_gender(record: GapRecord) -> str:
    """Gender from the lowercased pronoun surface form (closed mapping)."""
    gender = PRONOUN_GENDER.get(record.pronoun.lower())
    if gender is None:
        raise UnknownPronoun(f"record {record.id!r}: pronoun {record.pronoun!r}")
    return gender


def dataset_stats(records: Iterable[GapRecord]) -> DatasetStats:
    counts = {"A": 0, "B": 0, "N": 0}
    total = 0
    for record in records:
        counts[gold_label(record)] += 1
        total += 1
    return DatasetStats(total, counts["A"], counts["B"], counts["N"])


def stratified_folds(records: Sequence[GapRecord], k: int, seed: int) -> FoldPlan:
    """Gender-stratified fold assignment, deterministic for a fixed seed.

    Each gender bucket is shuffled with a seeded PRNG and dealt round-robin
    into k folds, so per-fold gender counts differ from perfect
    stratification by at most one. Stratification is on gender only; the
    label mix per fold is whatever the shuffle produces.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if not records:
        raise ValueError("records must be non-empty")
    buckets: dict[str, list[str]] = {}
    for record in records:
        buckets.setdefault(pronoun_gender(record), []).append(record.id)
    for gender, ids in sorted(buckets.items()):
        if len(ids) < k:
            raise TooFewRecords(
                f"only {len(ids)} {gender} records for {k} folds"
            )
    rng = np.random.default_rng(np.uint64(seed))
    assignments: dict[str, int] = {}
    for gender in sorted(buckets):
        ids = buckets[gender]
        order = rng.permutation(len(ids))
        for position, index in enumerate(order):
            assignments[ids[index]] = position % k
    # Preserve the input record order in the mapping for readable output.
    ordered = {record.id: assignments[record.id] for record in records}
    return FoldPlan(k=k, assignments=ordered)


def degenerate_fold_plan(records: Sequence[GapRecord]) -> FoldPlan:
    """Single-fold plan: one model trained on all records."""
    return FoldPlan(k=1, assignments={record.id: 0 for record in records})
