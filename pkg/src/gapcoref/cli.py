"""Command-line interface.

Subcommands: stats, folds, train, extract-answers, predict, ensemble,
evaluate. Training reads an optional line-oriented "key = value" config
file; command-line flags override file values and every effective value is
echoed at startup so runs are reproducible from their logs.

Exit codes: 0 success, 2 usage or configuration error, 3 data or coverage
error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys
from dataclasses import dataclass
from typing import Optional

from .data import (
    dataset_stats,
    degenerate_fold_plan,
    load_gap_tsv,
    stratified_folds,
)
from .encoder import ExternalEmbeddings
from .errors import ConfigError, DataError, GapCorefError, NumericError
from .estimators import QaResolver, load_resolver, make_resolver
from .metrics import (
    ensemble_average,
    format_report,
    load_predictions_csv,
    metrics_for_records,
    write_predictions_csv,
)
from .tokenization import load_vocab_file
from .training import average_folds, derive_seed, train_cross_validation

ANSWER_HEADER = ("record_id", "char_start", "char_end", "answer_text")


@dataclass
class RunConfig:
    """Everything a training run needs; None means "use the kind default"."""

    model: str = "qa"
    data: Optional[str] = None
    test_data: Optional[str] = None
    vocab: Optional[str] = None
    embeddings: Optional[str] = None
    output_dir: str = "runs"
    folds: int = 5
    seed: int = 0
    num_layers: int = 4
    hidden_dim: int = 128
    num_heads: int = 4
    ffn_dim: Optional[int] = None
    frozen_layers: str = ""
    output_layer: Optional[int] = None
    learning_rate: float = 1e-5
    batch_size: Optional[int] = None
    epochs: Optional[int] = None
    weight_decay: float = 0.01
    decoupled_decay: bool = True
    warmup_fraction: float = 0.10
    schedule: Optional[str] = None
    triangular_steps_per_cycle: Optional[int] = None
    clip_norm: float = 1.0
    window: int = 5
    max_seq_len: int = 300
    max_answer_len: int = 30
    calibration_c: float = 0.1
    calibration: str = "per_fold"
    dropout: float = 0.1


_KIND_DEFAULTS = {
    "qa": {"batch_size": 12, "epochs": 2, "schedule": "warmup_linear"},
    "mc": {"batch_size": 4, "epochs": 2, "schedule": "warmup_linear"},
    "seq": {"batch_size": 10, "epochs": 30, "schedule": "triangular"},
}

_BOOL_VALUES = {"true": True, "false": False, "1": True, "0": False}


def _parse_field(name: str, raw: str):
    field_types = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    if name not in field_types:
        raise ConfigError(f"unknown config key {name!r}")
    raw = raw.strip()
    kind = field_types[name]
    if kind in ("int", "Optional[int]"):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{name}: expected integer, got {raw!r}") from None
    if kind == "float":
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{name}: expected number, got {raw!r}") from None
    if kind == "bool":
        if raw.lower() not in _BOOL_VALUES:
            raise ConfigError(f"{name}: expected true/false, got {raw!r}")
        return _BOOL_VALUES[raw.lower()]
    return raw


def load_config_file(path) -> dict:
    """Parse "key = value" lines; '#' starts a comment."""
    values = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                key, raw = line.split("=", 1)
                key = key.strip().replace("-", "_")
                values[key] = _parse_field(key, raw)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    return values


def parse_frozen_layers(spec: str) -> tuple[int, ...]:
    """"" -> (), "1-3" -> (1, 2, 3), "1,4" -> (1, 4)."""
    spec = spec.strip()
    if not spec:
        return ()
    layers: list[int] = []
    for part in spec.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-", 1)
            layers.extend(range(int(lo), int(hi) + 1))
        else:
            layers.append(int(part))
    return tuple(layers)


def resolve_config(cfg: RunConfig) -> RunConfig:
    if cfg.model not in _KIND_DEFAULTS:
        raise ConfigError(f"unknown model kind {cfg.model!r}; expected qa, mc or seq")
    if cfg.calibration not in ("per_fold", "pooled"):
        raise ConfigError(f"unknown calibration mode {cfg.calibration!r}")
    if cfg.calibration == "pooled" and cfg.model != "qa":
        raise ConfigError("pooled calibration applies to the qa model only")
    defaults = _KIND_DEFAULTS[cfg.model]
    updates = {k: v for k, v in defaults.items() if getattr(cfg, k) is None}
    return dataclasses.replace(cfg, **updates)


def echo_config(cfg: RunConfig, out=None) -> None:
    out = out or sys.stdout
    for f in dataclasses.fields(RunConfig):
        print(f"{f.name} = {getattr(cfg, f.name)}", file=out)


def _estimator_params(cfg: RunConfig) -> dict:
    params = dict(
        num_layers=cfg.num_layers,
        hidden_dim=cfg.hidden_dim,
        num_heads=cfg.num_heads,
        ffn_dim=cfg.ffn_dim,
        frozen_layers=parse_frozen_layers(cfg.frozen_layers),
        output_layer=cfg.output_layer,
        learning_rate=cfg.learning_rate,
        batch_size=cfg.batch_size,
        epochs=cfg.epochs,
        weight_decay=cfg.weight_decay,
        decoupled_decay=cfg.decoupled_decay,
        warmup_fraction=cfg.warmup_fraction,
        schedule=cfg.schedule,
        triangular_steps_per_cycle=cfg.triangular_steps_per_cycle,
        clip_norm=cfg.clip_norm,
        max_seq_len=cfg.max_seq_len,
        seed=cfg.seed,
    )
    if cfg.model == "qa":
        params.update(
            window=cfg.window,
            max_answer_len=cfg.max_answer_len,
            calibration_c=cfg.calibration_c,
        )
    elif cfg.model == "seq":
        params.update(dropout=cfg.dropout)
    return params


def _require_file(path: Optional[str], what: str) -> str:
    if not path:
        raise ConfigError(f"missing required {what}")
    if not os.path.exists(path):
        raise ConfigError(f"{what} not found: {path}")
    return path


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def _print_stats(title, stats):
    print(title)
    print(f"{'total':>8} {'A':>8} {'B':>8} {'N':>8}")
    print(
        f"{stats.total:8d} {stats.a_count:8d} "
        f"{stats.b_count:8d} {stats.n_count:8d}"
    )
    print(f"total = {stats.total}")
    print(f"a_count = {stats.a_count}")
    print(f"b_count = {stats.b_count}")
    print(f"n_count = {stats.n_count}")


def cmd_stats(args) -> int:
    combined = []
    for path in args.data:
        records = load_gap_tsv(_require_file(path, "data file"))
        combined.extend(records)
        _print_stats(path, dataset_stats(records))
    if len(args.data) > 1:
        _print_stats("combined", dataset_stats(combined))
    return 0


def cmd_folds(args) -> int:
    records = load_gap_tsv(_require_file(args.data, "data file"))
    plan = stratified_folds(records, args.k, derive_seed(args.seed, "fold-plan"))
    lines = ["id,fold"] + [f"{rid},{fold}" for rid, fold in plan.assignments.items()]
    text = "\n".join(lines) + "\n"
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_train(args) -> int:
    values = load_config_file(args.config) if args.config else {}
    for key, value in vars(args).items():
        if key in {f.name for f in dataclasses.fields(RunConfig)} and value is not None:
            values[key] = value
    cfg = resolve_config(RunConfig(**values))
    echo_config(cfg)

    records = load_gap_tsv(_require_file(cfg.data, "training data"))
    provider = None
    if cfg.embeddings:
        provider = ExternalEmbeddings.from_file(
            _require_file(cfg.embeddings, "embeddings file")
        )
    vocab = load_vocab_file(_require_file(cfg.vocab, "vocab file"))
    estimator = make_resolver(
        cfg.model, vocab=vocab, embedding_provider=provider, **_estimator_params(cfg)
    )

    if cfg.folds >= 2:
        plan = stratified_folds(records, cfg.folds, derive_seed(cfg.seed, "fold-plan"))
    else:
        plan = degenerate_fold_plan(records)
    eval_records = (
        load_gap_tsv(_require_file(cfg.test_data, "test data"))
        if cfg.test_data
        else []
    )

    os.makedirs(cfg.output_dir, exist_ok=True)
    run = train_cross_validation(
        estimator, records, plan, eval_records, calibration=cfg.calibration
    )

    for fold, model in run.models.items():
        model.save(os.path.join(cfg.output_dir, f"fold{fold}.ckpt"))
        with open(
            os.path.join(cfg.output_dir, f"train_log_fold{fold}.csv"),
            "w", encoding="utf-8", newline="",
        ) as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["step", "lr", "loss"])
            for row in model.train_logs_:
                writer.writerow([row.step, f"{row.lr:.12g}", f"{row.loss:.12g}"])

    write_predictions_csv(
        os.path.join(cfg.output_dir, "oof_predictions.csv"), run.oof
    )
    if eval_records:
        averaged = average_folds(run.eval_predictions)
        write_predictions_csv(
            os.path.join(cfg.output_dir, "test_predictions.csv"), averaged
        )
    print(f"artifacts written to {cfg.output_dir}")
    return 0


def _provider_from(args):
    if not getattr(args, "embeddings", None):
        return None
    return ExternalEmbeddings.from_file(_require_file(args.embeddings, "embeddings file"))


def cmd_extract_answers(args) -> int:
    resolver = load_resolver(
        _require_file(args.checkpoint, "checkpoint"), _provider_from(args)
    )
    if not isinstance(resolver, QaResolver):
        raise ConfigError("extract-answers needs a QA checkpoint")
    records = load_gap_tsv(_require_file(args.data, "data file"))
    rows = resolver.extract_answers(records)
    lines = ["\t".join(ANSWER_HEADER)]
    lines += [
        f"{rid}\t{start}\t{end}\t{text}" for rid, start, end, text in rows
    ]
    text = "\n".join(lines) + "\n"
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_predict(args) -> int:
    records = load_gap_tsv(_require_file(args.data, "data file"))
    provider = _provider_from(args)
    systems = []
    for path in args.checkpoint:
        resolver = load_resolver(_require_file(path, "checkpoint"), provider)
        systems.append(resolver.predict_proba_by_id(records))
    averaged = ensemble_average(systems)
    write_predictions_csv(args.output, averaged)
    print(f"predictions written to {args.output}")
    return 0


def cmd_ensemble(args) -> int:
    systems = [
        load_predictions_csv(_require_file(path, "prediction file"))
        for path in args.inputs
    ]
    averaged = ensemble_average(systems)
    write_predictions_csv(args.output, averaged)
    print(f"ensemble written to {args.output}")
    return 0


def cmd_evaluate(args) -> int:
    probs = load_predictions_csv(_require_file(args.predictions, "prediction file"))
    records = load_gap_tsv(_require_file(args.gold, "gold data file"))
    report = metrics_for_records(probs, records, macro_overall=args.macro)
    print(format_report(report))
    return 0


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gapcoref",
        description="Pronoun resolution on GAP-format data: train, predict "
        "and evaluate the QA, multiple-choice and sequence formulations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", help="dataset label statistics")
    p.add_argument("data", nargs="+", help="GAP-format TSV file(s)")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("folds", help="gender-stratified fold assignment")
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output")
    p.set_defaults(func=cmd_folds)

    p = sub.add_parser("train", help="k-fold training with prediction averaging")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--model", choices=("qa", "mc", "seq"))
    p.add_argument("--data")
    p.add_argument("--test-data", dest="test_data")
    p.add_argument("--vocab")
    p.add_argument("--embeddings", help="external-embedding file (CSEM1)")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--folds", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--num-layers", dest="num_layers", type=int)
    p.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    p.add_argument("--num-heads", dest="num_heads", type=int)
    p.add_argument("--ffn-dim", dest="ffn_dim", type=int)
    p.add_argument("--frozen-layers", dest="frozen_layers")
    p.add_argument("--output-layer", dest="output_layer", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--warmup-fraction", dest="warmup_fraction", type=float)
    p.add_argument("--schedule", choices=("warmup_linear", "triangular"))
    p.add_argument(
        "--triangular-steps-per-cycle", dest="triangular_steps_per_cycle", type=int
    )
    p.add_argument("--clip-norm", dest="clip_norm", type=float)
    p.add_argument("--window", type=int)
    p.add_argument("--max-seq-len", dest="max_seq_len", type=int)
    p.add_argument("--max-answer-len", dest="max_answer_len", type=int)
    p.add_argument("--calibration-c", dest="calibration_c", type=float)
    p.add_argument("--calibration", choices=("per_fold", "pooled"))
    p.add_argument("--dropout", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser(
        "extract-answers", help="QA answers without candidate knowledge"
    )
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--embeddings", help="reattach an external-embedding file")
    p.add_argument("--output")
    p.set_defaults(func=cmd_extract_answers)

    p = sub.add_parser("predict", help="predict with saved checkpoints")
    p.add_argument("--checkpoint", nargs="+", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--embeddings", help="reattach an external-embedding file")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ensemble", help="average prediction files")
    p.add_argument("inputs", nargs="+", help="prediction CSV files")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("evaluate", help="gender-split F1, bias and log loss")
    p.add_argument("--predictions", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument(
        "--macro", action="store_true",
        help="overall F1 as the mean of per-gender F1 instead of micro",
    )
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except (DataError, GapCorefError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
