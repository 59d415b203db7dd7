"""Optimization loops and cross-validation orchestration.

Adam with decoupled weight decay, warmup-linear and triangular cyclical
learning-rate schedules, seeded epoch/batch management, per-fold training
with prediction averaging, and versioned checkpoint files.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from sklearn.base import clone

from .data import FoldPlan, GapRecord
from .errors import ConfigError, CoverageMismatch, DataError, NumericError, ShapeMismatch
from .metrics import ProbTriple, ensemble_average


def derive_seed(root: int, *labels) -> int:
    """Stable 63-bit seed derived from a root seed and a label path."""
    material = "|".join([str(int(root))] + [str(l) for l in labels])
    digest = hashlib.sha256(material.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


# --------------------------------------------------------------------------
# learning-rate schedules
# --------------------------------------------------------------------------


def warmup_linear_lr(
    step: float, total_steps: float, base_lr: float, warmup_fraction: float = 0.10
) -> float:
    """Linear 0 -> base over the warmup fraction, then linear base -> 0."""
    if not 0.0 < warmup_fraction < 1.0:
        raise ConfigError(f"warmup_fraction must be in (0, 1), got {warmup_fraction}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = warmup_fraction * total_steps
    if step <= warmup:
        return base_lr * step / warmup
    return base_lr * (total_steps - step) / (total_steps - warmup)


def triangular_lr(step: float, base_lr: float, steps_per_cycle: int) -> float:
    """Repeating symmetric triangle: 0 at cycle ends, base_lr at half cycle."""
    if steps_per_cycle <= 0 or steps_per_cycle % 2 != 0:
        raise ConfigError(f"steps_per_cycle must be even and positive, got {steps_per_cycle}")
    half = steps_per_cycle / 2.0
    phase = math.fmod(step, steps_per_cycle)
    if phase <= half:
        return base_lr * phase / half
    return base_lr * (steps_per_cycle - phase) / half


# --------------------------------------------------------------------------
# Adam with decoupled weight decay
# --------------------------------------------------------------------------


@dataclass
class TrainerConfig:
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    decoupled_decay: bool = True  # False folds decay into the gradient instead
    warmup_fraction: float = 0.10
    batch_size: int = 12
    epochs: int = 2
    schedule: str = "warmup_linear"  # or "triangular"
    triangular_steps_per_cycle: Optional[int] = None  # None: 100 * train size
    clip_norm: Optional[float] = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ConfigError("warmup_fraction must be in (0, 1)")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("learning_rate, batch_size, epochs out of range")
        if self.schedule not in ("warmup_linear", "triangular"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        spc = self.triangular_steps_per_cycle
        if spc is not None and (spc <= 0 or spc % 2 != 0):
            raise ConfigError("triangular_steps_per_cycle must be even and positive")


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def _decays(name: str, array: np.ndarray) -> bool:
    # Matrices decay; biases and normalization gains (1-D) do not.
    return array.ndim >= 2


def adam_step(
    params: dict[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    config: TrainerConfig,
    lr: float,
    frozen: frozenset | set = frozenset(),
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One Adam update over every non-frozen parameter present in `grads`.

    Moments use the standard bias correction; weight decay is decoupled
    (lr * weight_decay * param subtracted alongside the Adam step) unless
    config.decoupled_decay is off, in which case it is added to the
    gradient. Frozen parameters are left bitwise untouched.
    """
    state.step += 1
    t = state.step
    b1, b2, eps, wd = config.beta1, config.beta2, config.adam_eps, config.weight_decay
    for name in grads:
        if name in frozen or name not in params:
            continue
        p = params[name]
        g = np.asarray(grads[name])
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: grad {g.shape} vs param {p.shape}")
        if wd and not config.decoupled_decay and _decays(name, p):
            g = g + wd * p
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        update = lr * m_hat / (np.sqrt(v_hat) + eps)
        if wd and config.decoupled_decay and _decays(name, p):
            update = update + lr * wd * p
        p -= update
    return params, state


def clip_global_norm(
    grads: dict[str, np.ndarray],
    max_norm: float,
    frozen: frozenset | set = frozenset(),
) -> float:
    """Scale gradients in place so their joint L2 norm is at most max_norm.

    Returns the pre-clip norm. Frozen names are excluded from the norm and
    left unscaled (they are never applied anyway).
    """
    total = 0.0
    names = [n for n in sorted(grads) if n not in frozen]
    for name in names:
        g = grads[name]
        total += float(np.dot(g.ravel(), g.ravel()))
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for name in names:
            grads[name] *= scale
    return norm


# --------------------------------------------------------------------------
# epoch / batch loop
# --------------------------------------------------------------------------


@dataclass
class StepLog:
    step: int
    lr: float
    loss: float


def fit_epochs(
    loss_and_grads: Callable[[np.ndarray], tuple[float, dict[str, np.ndarray]]],
    params: dict[str, np.ndarray],
    n_examples: int,
    config: TrainerConfig,
    frozen: frozenset | set = frozenset(),
    shuffle_seed: Optional[int] = None,
) -> list[StepLog]:
    """Generic training loop over example indices.

    Each epoch shuffles indices with a seed derived per epoch; batches of
    config.batch_size are formed in order, keeping the last partial batch.
    The schedule is sampled at the midpoint of each step so neither the
    first nor the last update sees a zero learning rate.
    """
    if n_examples < 1:
        raise ValueError("nothing to train on")
    root = config.seed if shuffle_seed is None else shuffle_seed
    steps_per_epoch = math.ceil(n_examples / config.batch_size)
    total_steps = max(1, config.epochs * steps_per_epoch)
    spc = config.triangular_steps_per_cycle
    if config.schedule == "triangular" and spc is None:
        spc = 100 * n_examples
        if spc % 2:
            spc += 1

    state = AdamState()
    logs: list[StepLog] = []
    step = 0
    for epoch in range(config.epochs):
        rng = np.random.default_rng(np.uint64(derive_seed(root, "shuffle", epoch)))
        order = rng.permutation(n_examples)
        for start in range(0, n_examples, config.batch_size):
            batch = order[start : start + config.batch_size]
            loss, grads = loss_and_grads(batch)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss {loss} at step {step}")
            if config.clip_norm:
                clip_global_norm(grads, config.clip_norm, frozen)
            if config.schedule == "triangular":
                lr = triangular_lr(step + 0.5, config.learning_rate, spc)
            else:
                lr = warmup_linear_lr(
                    step + 0.5, total_steps, config.learning_rate,
                    config.warmup_fraction,
                )
            adam_step(params, grads, state, config, lr, frozen)
            logs.append(StepLog(step=step, lr=lr, loss=float(loss)))
            step += 1
    return logs


# --------------------------------------------------------------------------
# cross-validation orchestration
# --------------------------------------------------------------------------

FoldPredictions = dict[int, dict[str, ProbTriple]]


@dataclass
class FoldRun:
    """Fitted per-fold models with their held-out and evaluation outputs."""

    models: dict[int, object]
    oof: dict[str, ProbTriple]
    eval_predictions: FoldPredictions


def train_cross_validation(
    estimator,
    records: Sequence[GapRecord],
    plan: FoldPlan,
    eval_records: Sequence[GapRecord] = (),
    calibration: str = "per_fold",
) -> FoldRun:
    """Clone and fit `estimator` once per fold of `plan`.

    Each clone gets a seed derived from the estimator's root seed and the
    fold index. Held-out predictions are collected fold by fold into a
    single out-of-fold mapping; every fold also predicts `eval_records`.

    calibration="pooled" refits one shared probability calibration on the
    pooled out-of-fold span features (QA formulation only); the default
    keeps each fold's own calibration fitted on its training records.
    """
    if calibration not in ("per_fold", "pooled"):
        raise ValueError(f"unknown calibration mode {calibration!r}")
    by_id = {r.id: r for r in records}
    missing = [rid for rid in plan.assignments if rid not in by_id]
    if missing:
        raise CoverageMismatch(f"plan ids missing from records: {missing[:5]}")
    root_seed = estimator.get_params().get("seed", 0)

    models: dict[int, object] = {}
    for fold in range(plan.k):
        model = clone(estimator)
        model.set_params(seed=derive_seed(root_seed, "fold", fold))
        train_records = [by_id[rid] for rid in plan.train_ids(fold)]
        model.fit(train_records)
        models[fold] = model

    if calibration == "pooled":
        _pool_calibration(models, plan, by_id)

    oof: dict[str, ProbTriple] = {}
    eval_predictions: FoldPredictions = {}
    for fold, model in models.items():
        heldout = [by_id[rid] for rid in plan.fold_ids(fold)]
        if heldout:
            oof.update(model.predict_proba_by_id(heldout))
        eval_predictions[fold] = (
            model.predict_proba_by_id(eval_records) if eval_records else {}
        )
    return FoldRun(models=models, oof=oof, eval_predictions=eval_predictions)


def _pool_calibration(models: dict, plan: FoldPlan, by_id: dict) -> None:
    """Replace per-fold calibrations with one fit on pooled out-of-fold
    features, so every fold shares the identical probability mapping."""
    from .qa import fit_span_lr

    if not all(hasattr(m, "calib_") for m in models.values()):
        raise ValueError("pooled calibration applies to the qa formulation only")
    features = []
    labels: list[str] = []
    for fold, model in models.items():
        heldout = [by_id[rid] for rid in plan.fold_ids(fold)]
        if not heldout:
            continue
        X, y = model._features_for(heldout)
        features.append(X)
        labels.extend(y)
    pooled = fit_span_lr(
        np.vstack(features), labels,
        c=next(iter(models.values())).calibration_c,
    )
    for model in models.values():
        model.calib_ = pooled


def train(
    model_kind: str,
    records: Sequence[GapRecord],
    folds: FoldPlan,
    eval_records: Sequence[GapRecord],
    estimator,
) -> FoldPredictions:
    """Per-fold predictions of `estimator` (of kind `model_kind`) on the
    shared evaluation set."""
    if getattr(estimator, "kind", model_kind) != model_kind:
        raise ValueError(
            f"estimator kind {estimator.kind!r} does not match {model_kind!r}"
        )
    return train_cross_validation(estimator, records, folds, eval_records).eval_predictions


def average_folds(fold_predictions: FoldPredictions) -> dict[str, ProbTriple]:
    """Arithmetic mean of each fold's probabilities per record id."""
    if not fold_predictions:
        raise CoverageMismatch("no folds to average")
    return ensemble_average([fold_predictions[f] for f in sorted(fold_predictions)])


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

_CKPT_MAGIC = b"CSCK1"
_CKPT_VERSION = 1


def save_checkpoint(
    path, meta: dict, arrays: Mapping[str, np.ndarray], frozen: set[str] | frozenset = frozenset()
) -> None:
    """Versioned binary checkpoint: magic, version, JSON metadata, arrays."""
    header = dict(meta)
    header["frozen"] = sorted(frozen)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    np.savez(buf, **{k: np.ascontiguousarray(v) for k, v in arrays.items()})
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(_CKPT_VERSION.to_bytes(4, "little"))
        fh.write(len(blob).to_bytes(4, "little"))
        fh.write(blob)
        fh.write(buf.getvalue())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray], set[str]]:
    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise DataError(f"not a checkpoint file: magic {magic!r}")
        version = int.from_bytes(fh.read(4), "little")
        if version != _CKPT_VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        meta_len = int.from_bytes(fh.read(4), "little")
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
        payload = io.BytesIO(fh.read())
    with np.load(payload) as npz:
        arrays = {k: npz[k] for k in npz.files}
    frozen = set(meta.pop("frozen", []))
    return meta, arrays, frozen
