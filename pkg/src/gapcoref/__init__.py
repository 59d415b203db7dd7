"""Pronoun resolution on GAP-format data.

Three formulations of the task, each as a scikit-learn style estimator
over a compact trainable token encoder: extractive QA with span-max-pool
calibration (QaResolver), multiple choice over candidate continuations
(MultiChoiceResolver) and sequence classification over span embeddings
(SeqResolver). Cross-validation, ensembling and gender-split evaluation
live alongside.
"""

from .data import (
    DatasetStats,
    FoldPlan,
    GapRecord,
    dataset_stats,
    degenerate_fold_plan,
    gold_label,
    load_gap_tsv,
    parse_gap_tsv,
    pronoun_gender,
    stratified_folds,
)
from .encoder import (
    EncoderConfig,
    EncoderParams,
    ExternalEmbeddings,
    InMemoryEmbeddings,
    encoder_forward,
    freeze_layers,
    init_params,
    write_external_embeddings,
)
from .estimators import (
    MultiChoiceResolver,
    QaResolver,
    SeqResolver,
    load_resolver,
    make_resolver,
)
from .metrics import (
    MetricsReport,
    ProbTriple,
    argmax_label,
    ensemble_average,
    exact_answer_match,
    gap_f1,
    gender_metrics,
    log_loss,
    metrics_for_records,
)
from .qa import (
    build_qa_example,
    build_question,
    extract_best_span,
    fit_span_lr,
    qa_probabilities,
    span_pool_features,
)
from .tokenization import (
    EncodedInput,
    TokenizedText,
    Vocab,
    align_char_span,
    encode_pair,
    load_vocab,
    wordpiece_tokenize,
)
from .training import (
    FoldRun,
    TrainerConfig,
    adam_step,
    average_folds,
    derive_seed,
    train,
    train_cross_validation,
    triangular_lr,
    warmup_linear_lr,
)

__version__ = "0.1.0"

__all__ = [
    "DatasetStats", "FoldPlan", "GapRecord", "dataset_stats",
    "degenerate_fold_plan", "gold_label", "load_gap_tsv", "parse_gap_tsv",
    "pronoun_gender", "stratified_folds",
    "EncoderConfig", "EncoderParams", "ExternalEmbeddings",
    "InMemoryEmbeddings", "encoder_forward", "freeze_layers", "init_params",
    "write_external_embeddings",
    "MultiChoiceResolver", "QaResolver", "SeqResolver", "load_resolver",
    "make_resolver",
    "MetricsReport", "ProbTriple", "argmax_label", "ensemble_average",
    "exact_answer_match", "gap_f1", "gender_metrics", "log_loss",
    "metrics_for_records",
    "build_qa_example", "build_question", "extract_best_span", "fit_span_lr",
    "qa_probabilities", "span_pool_features",
    "EncodedInput", "TokenizedText", "Vocab", "align_char_span",
    "encode_pair", "load_vocab", "wordpiece_tokenize",
    "FoldRun", "TrainerConfig", "adam_step", "average_folds", "derive_seed",
    "train", "train_cross_validation", "triangular_lr", "warmup_linear_lr",
]
