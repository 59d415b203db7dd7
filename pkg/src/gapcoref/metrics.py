"""Evaluation and ensembling: gender-split F1, bias ratio, log loss,
probability averaging and exact-answer matching.

F1 follows the GAP scorer convention: every example contributes two binary
coreference decisions (pronoun-A, pronoun-B) which are micro-averaged into
precision/recall/F1. A macro-over-genders overall F1 is available behind a
flag since conventions differ.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

from .data import GapRecord, gold_label, pronoun_gender
from .errors import CoverageMismatch, EmptyGenderSubset, NoOverlap
from .tokenization import TokenizedText, align_char_span

LOG_LOSS_CLIP = 1e-15
_SIMPLEX_TOL = 1e-9


@dataclass(frozen=True)
class ProbTriple:
    """Calibrated probabilities over (A, B, N)."""

    p_a: float
    p_b: float
    p_n: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.p_a, self.p_b, self.p_n)

    def validate(self, tol: float = _SIMPLEX_TOL) -> "ProbTriple":
        values = self.as_tuple()
        if any(p < -tol or p > 1 + tol for p in values):
            raise ValueError(f"probabilities outside [0, 1]: {values}")
        if abs(sum(values) - 1.0) > tol:
            raise ValueError(f"probabilities sum to {sum(values)}, not 1")
        return self

    def prob(self, label: str) -> float:
        return {"A": self.p_a, "B": self.p_b, "N": self.p_n}[label]


@dataclass(frozen=True)
class MetricsReport:
    male_f1: float
    female_f1: float
    overall_f1: float
    bias: float
    log_loss: Optional[float]
    male_count: int
    female_count: int

    def display_bias(self) -> str:
        return f"{self.bias:.2f}"


def _require_same_ids(mappings: Sequence[Mapping], what: str) -> list[str]:
    if not mappings:
        raise CoverageMismatch(f"no {what} given")
    ids = set(mappings[0])
    for m in mappings[1:]:
        if set(m) != ids:
            missing = ids.symmetric_difference(m)
            raise CoverageMismatch(
                f"{what} cover different ids (e.g. {sorted(missing)[:5]})"
            )
    return sorted(ids)


def ensemble_average(
    systems: Sequence[Mapping[str, ProbTriple]]
) -> dict[str, ProbTriple]:
    """Per-id arithmetic mean of several systems' probabilities."""
    ids = _require_same_ids(systems, "prediction mappings")
    n = len(systems)
    out: dict[str, ProbTriple] = {}
    for rid in ids:
        a = sum(s[rid].p_a for s in systems) / n
        b = sum(s[rid].p_b for s in systems) / n
        c = sum(s[rid].p_n for s in systems) / n
        out[rid] = ProbTriple(a, b, c)
    return out


def argmax_label(p: ProbTriple) -> str:
    """Highest-probability label; exact ties resolve in the order A, B, N."""
    best_label, best_value = "A", p.p_a
    for label, value in (("B", p.p_b), ("N", p.p_n)):
        if value > best_value:
            best_label, best_value = label, value
    return best_label


def gap_f1(
    preds: Mapping[str, str], golds: Mapping[str, tuple[bool, bool]]
) -> tuple[float, float, float]:
    """(precision, recall, F1) over the two binary decisions per example.

    A predicted label maps to decisions: A -> (yes, no), B -> (no, yes),
    N -> (no, no); gold decisions are the record's coreference flags.
    """
    if set(preds) != set(golds):
        raise CoverageMismatch("predictions and golds cover different ids")
    tp = fp = fn = 0
    for rid, label in preds.items():
        pred_pair = (label == "A", label == "B")
        gold_pair = golds[rid]
        for p, g in zip(pred_pair, gold_pair):
            if p and g:
                tp += 1
            elif p and not g:
                fp += 1
            elif g and not p:
                fn += 1
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0.0:
        return precision, recall, 0.0
    return precision, recall, 2 * precision * recall / (precision + recall)


def log_loss(
    probs: Mapping[str, ProbTriple],
    golds: Mapping[str, str],
    clip: float = LOG_LOSS_CLIP,
) -> float:
    """Mean multiclass log loss with the shared-task clipping convention."""
    if set(probs) != set(golds):
        raise CoverageMismatch("probabilities and golds cover different ids")
    if not probs:
        raise CoverageMismatch("empty prediction mapping")
    total = 0.0
    for rid, triple in probs.items():
        p = min(max(triple.prob(golds[rid]), clip), 1.0 - clip)
        total -= math.log(p)
    return total / len(probs)


def gold_flag_pairs(records: Iterable[GapRecord]) -> dict[str, tuple[bool, bool]]:
    return {r.id: (r.a_coref, r.b_coref) for r in records}


def gender_metrics(
    preds: Mapping[str, str],
    golds: Mapping[str, tuple[bool, bool]],
    genders: Mapping[str, str],
    probs: Optional[Mapping[str, ProbTriple]] = None,
    macro_overall: bool = False,
) -> MetricsReport:
    """F1 per gender subset plus overall, bias ratio and log loss.

    `macro_overall` switches the overall F1 from micro over all decisions
    to the unweighted mean of the two per-gender F1 scores.
    """
    ids = _require_same_ids([preds, golds, genders], "metric inputs")
    male_ids = [i for i in ids if genders[i] == "male"]
    female_ids = [i for i in ids if genders[i] == "female"]
    if not male_ids or not female_ids:
        raise EmptyGenderSubset(
            f"need both genders, got {len(male_ids)} male / {len(female_ids)} female"
        )

    def subset_f1(subset: list[str]) -> float:
        return gap_f1(
            {i: preds[i] for i in subset}, {i: golds[i] for i in subset}
        )[2]

    male_f1 = subset_f1(male_ids)
    female_f1 = subset_f1(female_ids)
    overall = (
        (male_f1 + female_f1) / 2.0 if macro_overall else gap_f1(preds, golds)[2]
    )
    bias = female_f1 / male_f1 if male_f1 > 0 else math.inf
    loss = None
    if probs is not None:
        gold_labels = {
            i: ("A" if golds[i][0] else "B" if golds[i][1] else "N") for i in ids
        }
        loss = log_loss(probs, gold_labels)
    return MetricsReport(
        male_f1=male_f1,
        female_f1=female_f1,
        overall_f1=overall,
        bias=bias,
        log_loss=loss,
        male_count=len(male_ids),
        female_count=len(female_ids),
    )


def metrics_for_records(
    probs: Mapping[str, ProbTriple],
    records: Sequence[GapRecord],
    macro_overall: bool = False,
) -> MetricsReport:
    """Convenience wrapper deriving golds and genders from parsed records."""
    by_id = {r.id: r for r in records}
    if set(probs) != set(by_id):
        raise CoverageMismatch("predictions do not cover the gold records")
    preds = {rid: argmax_label(p) for rid, p in probs.items()}
    golds = gold_flag_pairs(records)
    genders = {r.id: pronoun_gender(r) for r in records}
    return gender_metrics(preds, golds, genders, probs, macro_overall)


def format_report(report: MetricsReport) -> str:
    """Aligned table plus machine-readable key/value lines."""
    loss = "N/A" if report.log_loss is None else f"{report.log_loss:.4f}"
    lines = [
        f"{'M':>8} {'F':>8} {'B':>8} {'O':>8} {'L':>8}",
        f"{100 * report.male_f1:8.1f} {100 * report.female_f1:8.1f} "
        f"{report.display_bias():>8} {100 * report.overall_f1:8.1f} {loss:>8}",
        "",
        f"male_f1 = {report.male_f1:.6f}",
        f"female_f1 = {report.female_f1:.6f}",
        f"overall_f1 = {report.overall_f1:.6f}",
        f"bias = {report.bias:.6f}",
        f"log_loss = {'' if report.log_loss is None else f'{report.log_loss:.6f}'}",
        f"male_count = {report.male_count}",
        f"female_count = {report.female_count}",
    ]
    return "\n".join(lines)


# --------------------------------------------------------------------------
# exact-answer matching for span extraction
# --------------------------------------------------------------------------


def _normalize_answer(text: str) -> str:
    return " ".join(text.lower().split())


def exact_answer_match(
    predicted_span: tuple[int, int],
    predicted_text: str,
    record: GapRecord,
    passage_tokens: TokenizedText,
) -> bool:
    """Whether an extracted answer counts as correct for its record.

    True iff the gold candidate exists (label A or B), the predicted token
    span overlaps the gold name's aligned token span, and the normalized
    predicted string equals the gold name or is a leading whole-word prefix
    of it (the head of the name). Over-long spans that extend past the gold
    name therefore do not count.
    """
    label = gold_label(record)
    if label == "N":
        return False
    name, offset = (
        (record.a_name, record.a_offset)
        if label == "A"
        else (record.b_name, record.b_offset)
    )
    try:
        gold_span = align_char_span(passage_tokens, offset, len(name))
    except NoOverlap:
        return False
    if predicted_span[1] < gold_span[0] or predicted_span[0] > gold_span[1]:
        return False
    pred = _normalize_answer(predicted_text)
    gold = _normalize_answer(name)
    if not pred:
        return False
    return pred == gold or gold.startswith(pred + " ")


# --------------------------------------------------------------------------
# prediction CSV (shared-task submission format)
# --------------------------------------------------------------------------

PREDICTION_HEADER = ("ID", "A", "B", "NEITHER")


def _format_probability(x: float) -> str:
    """Shortest decimal that parses back to the exact float, with at least
    six digits after the point."""
    s = repr(float(x))
    if "e" in s or "E" in s:
        return f"{x:.17e}"
    decimals = len(s.split(".")[1]) if "." in s else 0
    return f"{x:.6f}" if decimals < 6 else s


def format_predictions_csv(probs: Mapping[str, ProbTriple]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(PREDICTION_HEADER)
    for rid in probs:
        p = probs[rid]
        writer.writerow(
            [rid] + [_format_probability(v) for v in p.as_tuple()]
        )
    return buf.getvalue()


def write_predictions_csv(path, probs: Mapping[str, ProbTriple]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(format_predictions_csv(probs))


def parse_predictions_csv(data: bytes | str) -> dict[str, ProbTriple]:
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    reader = csv.reader(io.StringIO(data, newline=""))
    try:
        header = next(reader)
    except StopIteration:
        raise CoverageMismatch("empty prediction file") from None
    if tuple(h.strip() for h in header) != PREDICTION_HEADER:
        raise CoverageMismatch(f"unexpected prediction header {header!r}")
    out: dict[str, ProbTriple] = {}
    for row in reader:
        if not row:
            continue
        if len(row) != 4:
            raise CoverageMismatch(f"bad prediction row {row!r}")
        out[row[0]] = ProbTriple(float(row[1]), float(row[2]), float(row[3]))
    return out


def load_predictions_csv(path) -> dict[str, ProbTriple]:
    with open(path, "rb") as fh:
        return parse_predictions_csv(fh.read())
