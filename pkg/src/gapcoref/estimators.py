"""scikit-learn style estimators for the three task formulations.

Each resolver is fit on a sequence of parsed GAP records (labels derive
from the records' coreference flags) and predicts (P_A, P_B, P_N) per
record. All randomness flows from the single `seed` parameter through
labeled derivations, so same-seed fits are bitwise reproducible.

Passing an embedding provider (ExternalEmbeddings or InMemoryEmbeddings)
replaces the trainable encoder with fixed precomputed states; only the
task head (and, for the QA resolver, the calibration stage) trains.
"""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from . import multichoice as mc
from . import qa
from . import seqclass as seq
from .data import LABELS, GapRecord, gold_label
from .encoder import (
    EncoderConfig,
    EncoderParams,
    backward_batch,
    forward_batch,
    init_params,
    pad_batch,
)
from .errors import AnswerTruncated, DataError, DimensionMismatch
from .metrics import ProbTriple, argmax_label
from .tokenization import Vocab
from .training import (
    TrainerConfig,
    derive_seed,
    fit_epochs,
    load_checkpoint,
    save_checkpoint,
)

logger = logging.getLogger(__name__)

_PREDICT_CHUNK = 32


def _check_records(X) -> list[GapRecord]:
    records = list(X)
    for r in records:
        if not isinstance(r, GapRecord):
            raise TypeError(f"expected GapRecord inputs, got {type(r).__name__}")
    return records


class _BaseResolver(BaseEstimator, ClassifierMixin):
    """Shared fit/predict plumbing; subclasses provide the formulation."""

    kind = ""

    def __init__(
        self,
        vocab=None,
        num_layers=4,
        hidden_dim=128,
        num_heads=4,
        ffn_dim=None,
        frozen_layers=(),
        output_layer=None,
        learning_rate=1e-5,
        batch_size=12,
        epochs=2,
        weight_decay=0.01,
        decoupled_decay=True,
        warmup_fraction=0.10,
        schedule="warmup_linear",
        triangular_steps_per_cycle=None,
        clip_norm=1.0,
        max_seq_len=300,
        seed=0,
        embedding_provider=None,
    ):
        self.vocab = vocab
        self.num_layers = num_layers
        self.hidden_dim = hidden_dim
        self.num_heads = num_heads
        self.ffn_dim = ffn_dim
        self.frozen_layers = frozen_layers
        self.output_layer = output_layer
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.weight_decay = weight_decay
        self.decoupled_decay = decoupled_decay
        self.warmup_fraction = warmup_fraction
        self.schedule = schedule
        self.triangular_steps_per_cycle = triangular_steps_per_cycle
        self.clip_norm = clip_norm
        self.max_seq_len = max_seq_len
        self.seed = seed
        self.embedding_provider = embedding_provider

    # -- configuration -----------------------------------------------------

    def _require_vocab(self) -> Vocab:
        if self.embedding_provider is None and self.vocab is None:
            raise DataError("a vocab is required unless an embedding provider is set")
        if self.vocab is None:
            raise DataError("a vocab is required (inputs must still be encoded)")
        return self.vocab

    def _effective_hidden(self) -> int:
        if self.embedding_provider is not None:
            return int(self.embedding_provider.hidden_dim)
        return self.hidden_dim

    def _encoder_config(self, vocab: Vocab) -> EncoderConfig:
        return EncoderConfig(
            num_layers=self.num_layers,
            hidden_dim=self.hidden_dim,
            num_heads=self.num_heads,
            ffn_dim=self.ffn_dim,
            max_positions=self.max_seq_len,
            vocab_size=len(vocab),
            frozen_layers=frozenset(self.frozen_layers),
            output_layer=self.output_layer,
            seed=derive_seed(self.seed, "init", "encoder"),
        )

    def _trainer_config(self) -> TrainerConfig:
        return TrainerConfig(
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            decoupled_decay=self.decoupled_decay,
            warmup_fraction=self.warmup_fraction,
            batch_size=self.batch_size,
            epochs=self.epochs,
            schedule=self.schedule,
            triangular_steps_per_cycle=self.triangular_steps_per_cycle,
            clip_norm=self.clip_norm,
            seed=self.seed,
        )

    # -- state provision ----------------------------------------------------

    def _provider_states(self, keys: Sequence[str], encodeds) -> np.ndarray:
        provider = self.embedding_provider
        mats = []
        for key, encoded in zip(keys, encodeds):
            m = np.asarray(provider.get(key), dtype=float)
            if m.shape[0] != len(encoded):
                raise DimensionMismatch(
                    f"{key}: provider has {m.shape[0]} token states, "
                    f"encoding has {len(encoded)} tokens"
                )
            mats.append(m)
        T = max(m.shape[0] for m in mats)
        H = mats[0].shape[1]
        states = np.zeros((len(mats), T, H))
        for i, m in enumerate(mats):
            states[i, : m.shape[0]] = m
        return states

    def _batch_states(self, keys, encodeds, want_cache):
        """(states, cache, mask); cache is None on the provider path."""
        ids, segs, mask = pad_batch(encodeds, self._pad_id())
        if self.embedding_provider is not None:
            return self._provider_states(keys, encodeds), None, mask
        states, cache = forward_batch(self.encoder_, ids, segs, mask, want_cache)
        return states, cache, mask

    def _pad_id(self) -> int:
        return self.vocab.pad_id if self.vocab is not None else 0

    # -- sklearn surface -----------------------------------------------------

    def fit(self, X, y=None):
        """Train on parsed GAP records; `y` is ignored (labels come from
        the records' coreference flags)."""
        records = _check_records(X)
        if not records:
            raise DataError("no records to fit on")
        self._require_vocab()
        self.classes_ = np.array(LABELS)
        self._init_model_state()
        loss_and_grads, n_examples = self._training_fn(records)
        params = dict(self.head_)
        if self.encoder_ is not None:
            params.update(self.encoder_.arrays)
        self.train_logs_ = fit_epochs(
            loss_and_grads, params, n_examples, self._trainer_config(),
            self.frozen_, shuffle_seed=derive_seed(self.seed, "shuffle"),
        )
        self._post_fit(records)
        return self

    def _init_model_state(self) -> None:
        """Fresh encoder and head parameters for a new fit."""
        if self.embedding_provider is None:
            self.encoder_ = init_params(self._encoder_config(self.vocab))
            self.frozen_ = frozenset(self.encoder_.frozen)
        else:
            self.encoder_ = None
            self.frozen_ = frozenset()
        self.head_ = self._init_head()

    def predict_proba(self, X) -> np.ndarray:
        records = _check_records(X)
        self._check_fitted()
        triples = self._predict_records(records)
        return np.array([t.as_tuple() for t in triples])

    def predict_proba_by_id(self, X) -> dict[str, ProbTriple]:
        records = _check_records(X)
        self._check_fitted()
        return dict(zip((r.id for r in records), self._predict_records(records)))

    def predict(self, X) -> np.ndarray:
        records = _check_records(X)
        self._check_fitted()
        return np.array([argmax_label(t) for t in self._predict_records(records)])

    def _check_fitted(self):
        if not hasattr(self, "head_"):
            raise DataError(f"{type(self).__name__} is not fitted")

    # -- checkpointing --------------------------------------------------------

    def save(self, path) -> None:
        self._check_fitted()
        params = {k: v for k, v in self.get_params().items()
                  if k not in ("vocab", "embedding_provider")}
        meta = {
            "kind": self.kind,
            "params": params,
            "vocab": list(self.vocab.id_to_token) if self.vocab else None,
            "has_encoder": self.encoder_ is not None,
        }
        meta.update(self._extra_meta())
        arrays = dict(self.head_)
        if self.encoder_ is not None:
            arrays.update(self.encoder_.arrays)
        arrays.update(self._extra_arrays())
        save_checkpoint(path, meta, arrays, self.frozen_)

    def _restore(self, meta, arrays, frozen, embedding_provider=None) -> "_BaseResolver":
        params = dict(meta["params"])
        if params.get("frozen_layers") is not None:
            params["frozen_layers"] = tuple(params["frozen_layers"])
        self.set_params(**params)
        if meta["vocab"] is not None:
            self.vocab = Vocab(meta["vocab"])
        self.embedding_provider = embedding_provider
        self.classes_ = np.array(LABELS)
        head_names = self._head_names()
        self.head_ = {k: arrays[k] for k in head_names}
        if meta["has_encoder"]:
            cfg = self._encoder_config(self.vocab)
            enc_arrays = {
                k: arrays[k] for k in arrays
                if k.startswith("emb.") or k.startswith("layer")
            }
            self.encoder_ = EncoderParams(cfg, enc_arrays, set(frozen))
        else:
            self.encoder_ = None
        self.frozen_ = frozenset(frozen)
        self._restore_extra(meta, arrays)
        return self

    def _extra_meta(self) -> dict:
        return {}

    def _extra_arrays(self) -> dict:
        return {}

    def _restore_extra(self, meta, arrays) -> None:
        pass

    # -- formulation hooks ------------------------------------------------------

    def _init_head(self) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def _head_names(self) -> tuple[str, ...]:
        raise NotImplementedError

    def _training_fn(self, records):
        """(loss_and_grads closure over batch indices, example count)."""
        raise NotImplementedError

    def _post_fit(self, records) -> None:
        pass

    def _predict_records(self, records) -> list[ProbTriple]:
        raise NotImplementedError


class QaResolver(_BaseResolver):
    """Extractive-QA formulation with span-max-pool + LR calibration."""

    kind = "qa"

    def __init__(
        self,
        vocab=None,
        num_layers=4,
        hidden_dim=128,
        num_heads=4,
        ffn_dim=None,
        frozen_layers=(),
        output_layer=None,
        learning_rate=1e-5,
        batch_size=12,
        epochs=2,
        weight_decay=0.01,
        decoupled_decay=True,
        warmup_fraction=0.10,
        schedule="warmup_linear",
        triangular_steps_per_cycle=None,
        clip_norm=1.0,
        max_seq_len=300,
        seed=0,
        embedding_provider=None,
        window=5,
        max_answer_len=30,
        calibration_c=0.1,
    ):
        super().__init__(
            vocab=vocab,
            num_layers=num_layers,
            hidden_dim=hidden_dim,
            num_heads=num_heads,
            ffn_dim=ffn_dim,
            frozen_layers=frozen_layers,
            output_layer=output_layer,
            learning_rate=learning_rate,
            batch_size=batch_size,
            epochs=epochs,
            weight_decay=weight_decay,
            decoupled_decay=decoupled_decay,
            warmup_fraction=warmup_fraction,
            schedule=schedule,
            triangular_steps_per_cycle=triangular_steps_per_cycle,
            clip_norm=clip_norm,
            max_seq_len=max_seq_len,
            seed=seed,
            embedding_provider=embedding_provider,
        )
        self.window = window
        self.max_answer_len = max_answer_len
        self.calibration_c = calibration_c

    def _init_head(self):
        return qa.qa_head_init(self._effective_hidden(), derive_seed(self.seed, "init", "head"))

    def _head_names(self):
        return ("qa.w", "qa.b")

    def _training_fn(self, records):
        examples = []
        for record in records:
            try:
                ex = qa.build_qa_example(
                    record, self.vocab, self.window, self.max_seq_len, training=True
                )
            except AnswerTruncated:
                logger.warning("skipping %s: gold answer beyond truncation", record.id)
                continue
            if ex is not None:
                examples.append(ex)
        if not examples:
            raise DataError("no trainable QA examples (all neither or truncated)")
        encodeds = [ex.encoded for ex in examples]
        keys = [ex.record_id for ex in examples]
        starts = np.array([ex.answer_span[0] for ex in examples])
        ends = np.array([ex.answer_span[1] for ex in examples])

        def loss_and_grads(batch):
            batch_enc = [encodeds[i] for i in batch]
            batch_keys = [keys[i] for i in batch]
            states, cache, mask = self._batch_states(batch_keys, batch_enc, True)
            logits = qa.qa_forward_batch(states, self.head_)
            loss, d_logits = qa.qa_loss_batch(logits, mask, starts[batch], ends[batch])
            d_states, grads = qa.qa_head_backward(states, self.head_, d_logits)
            if cache is not None:
                grads.update(backward_batch(self.encoder_, cache, d_states))
            return loss, grads

        return loss_and_grads, len(examples)

    def _post_fit(self, records) -> None:
        """Fit the span-feature calibration on the full training set; the
        neither examples excluded from QA training do take part here."""
        features, labels = self._features_for(records)
        self.calib_ = qa.fit_span_lr(features, labels, self.calibration_c)

    def _features_for(self, records) -> tuple[np.ndarray, list[str]]:
        """Pooled span features plus gold labels, all records included."""
        features = np.zeros((len(records), 6))
        labels = []
        for chunk_start in range(0, len(records), _PREDICT_CHUNK):
            chunk = records[chunk_start : chunk_start + _PREDICT_CHUNK]
            inputs = [
                qa.build_qa_input(r, self.vocab, self.window, self.max_seq_len)
                for r in chunk
            ]
            encodeds = [ex.encoded for ex in inputs]
            states, _, _ = self._batch_states(
                [ex.record_id for ex in inputs], encodeds, False
            )
            for i, (record, example) in enumerate(zip(chunk, inputs)):
                n = len(example.encoded)
                logits = qa.qa_forward(states[i, :n], self.head_)
                a_span, b_span = qa.candidate_encoded_spans(record, example)
                pooled = qa.pooled_features_with_fallback(logits, a_span, b_span)
                features[chunk_start + i] = pooled.as_array()
        for record in records:
            labels.append(gold_label(record))
        return features, labels

    def _predict_records(self, records):
        features, _ = self._features_for(records)
        probs = qa.qa_probabilities_batch(self.calib_, features)
        return [ProbTriple(*row) for row in probs.tolist()]

    def extract_answers(
        self, records: Sequence[GapRecord]
    ) -> list[tuple[str, int, int, str]]:
        """Best answer span per record, without any candidate knowledge.

        Returns (record_id, char_start, char_end, answer_text) rows.
        """
        self._check_fitted()
        rows = []
        for chunk_start in range(0, len(records), _PREDICT_CHUNK):
            chunk = records[chunk_start : chunk_start + _PREDICT_CHUNK]
            inputs = [
                qa.build_qa_input(r, self.vocab, self.window, self.max_seq_len)
                for r in chunk
            ]
            states, _, _ = self._batch_states(
                [ex.record_id for ex in inputs],
                [ex.encoded for ex in inputs],
                False,
            )
            for i, (record, example) in enumerate(zip(chunk, inputs)):
                if example.encoded.passage_token_range is None:
                    continue
                n = len(example.encoded)
                logits = qa.qa_forward(states[i, :n], self.head_)
                span = qa.extract_best_span(
                    logits, example.encoded.passage_token_range, self.max_answer_len
                )
                char_start, char_end = qa.decode_answer(example, span)
                rows.append(
                    (record.id, char_start, char_end, record.text[char_start:char_end])
                )
        return rows

    def _extra_meta(self):
        return {"calibration_c": self.calibration_c}

    def _extra_arrays(self):
        return {"calib.w": self.calib_.weights, "calib.b": self.calib_.bias}

    def _restore_extra(self, meta, arrays):
        self.calib_ = qa.LrModel(
            weights=arrays["calib.w"], bias=arrays["calib.b"],
            c=meta["calibration_c"],
        )


class MultiChoiceResolver(_BaseResolver):
    """Multiple-choice formulation over (A, B, neither) continuations."""

    kind = "mc"

    def __init__(
        self,
        vocab=None,
        num_layers=4,
        hidden_dim=128,
        num_heads=4,
        ffn_dim=None,
        frozen_layers=(),
        output_layer=None,
        learning_rate=1e-5,
        batch_size=4,
        epochs=2,
        weight_decay=0.01,
        decoupled_decay=True,
        warmup_fraction=0.10,
        schedule="warmup_linear",
        triangular_steps_per_cycle=None,
        clip_norm=1.0,
        max_seq_len=300,
        seed=0,
        embedding_provider=None,
    ):
        super().__init__(
            vocab=vocab,
            num_layers=num_layers,
            hidden_dim=hidden_dim,
            num_heads=num_heads,
            ffn_dim=ffn_dim,
            frozen_layers=frozen_layers,
            output_layer=output_layer,
            learning_rate=learning_rate,
            batch_size=batch_size,
            epochs=epochs,
            weight_decay=weight_decay,
            decoupled_decay=decoupled_decay,
            warmup_fraction=warmup_fraction,
            schedule=schedule,
            triangular_steps_per_cycle=triangular_steps_per_cycle,
            clip_norm=clip_norm,
            max_seq_len=max_seq_len,
            seed=seed,
            embedding_provider=embedding_provider,
        )

    def _init_head(self):
        return mc.mc_head_init(self._effective_hidden(), derive_seed(self.seed, "init", "head"))

    def _head_names(self):
        return ("mc.w", "mc.b")

    def _choice_key(self, record_id: str, choice: int) -> str:
        return f"{record_id}#{choice}"

    def _choice_states(self, examples, want_cache):
        """Stacked (3B, T, H) states over the flattened choice inputs."""
        flat_enc = [e for ex in examples for e in ex.choice_inputs]
        flat_keys = [
            self._choice_key(ex.record_id, k) for ex in examples for k in range(3)
        ]
        return self._batch_states(flat_keys, flat_enc, want_cache)

    def _training_fn(self, records):
        examples = [
            mc.build_mc_example(r, self.vocab, self.max_seq_len) for r in records
        ]
        gold = np.array([ex.gold_choice for ex in examples])

        def loss_and_grads(batch):
            batch_examples = [examples[i] for i in batch]
            states, cache, _ = self._choice_states(batch_examples, True)
            B = len(batch_examples)
            cls_states = states[:, 0, :].reshape(B, 3, -1)
            scores = mc.mc_scores_batch(cls_states, self.head_)
            loss, d_scores = mc.mc_loss_batch(scores, gold[batch])
            d_cls, grads = mc.mc_head_backward(cls_states, self.head_, d_scores)
            if cache is not None:
                d_states = np.zeros_like(states)
                d_states[:, 0, :] = d_cls.reshape(3 * B, -1)
                grads.update(backward_batch(self.encoder_, cache, d_states))
            return loss, grads

        return loss_and_grads, len(examples)

    def _predict_records(self, records):
        out = []
        for chunk_start in range(0, len(records), _PREDICT_CHUNK):
            chunk = records[chunk_start : chunk_start + _PREDICT_CHUNK]
            examples = [
                mc.build_mc_example(r, self.vocab, self.max_seq_len) for r in chunk
            ]
            states, _, _ = self._choice_states(examples, False)
            cls_states = states[:, 0, :].reshape(len(chunk), 3, -1)
            probs = mc.mc_softmax(mc.mc_scores_batch(cls_states, self.head_))
            out.extend(ProbTriple(*row) for row in probs.tolist())
        return out


class SeqResolver(_BaseResolver):
    """Sequence classification over concatenated span embeddings."""

    kind = "seq"

    def __init__(
        self,
        vocab=None,
        num_layers=4,
        hidden_dim=128,
        num_heads=4,
        ffn_dim=None,
        frozen_layers=(),
        output_layer=None,
        learning_rate=1e-5,
        batch_size=10,
        epochs=30,
        weight_decay=0.01,
        decoupled_decay=True,
        warmup_fraction=0.10,
        schedule="triangular",
        triangular_steps_per_cycle=None,
        clip_norm=1.0,
        max_seq_len=300,
        seed=0,
        embedding_provider=None,
        dropout=0.1,
    ):
        super().__init__(
            vocab=vocab,
            num_layers=num_layers,
            hidden_dim=hidden_dim,
            num_heads=num_heads,
            ffn_dim=ffn_dim,
            frozen_layers=frozen_layers,
            output_layer=output_layer,
            learning_rate=learning_rate,
            batch_size=batch_size,
            epochs=epochs,
            weight_decay=weight_decay,
            decoupled_decay=decoupled_decay,
            warmup_fraction=warmup_fraction,
            schedule=schedule,
            triangular_steps_per_cycle=triangular_steps_per_cycle,
            clip_norm=clip_norm,
            max_seq_len=max_seq_len,
            seed=seed,
            embedding_provider=embedding_provider,
        )
        self.dropout = dropout

    def _init_head(self):
        return seq.seq_head_init(self._effective_hidden(), derive_seed(self.seed, "init", "head"))

    def _head_names(self):
        return ("seq.w1", "seq.b1", "seq.w2", "seq.b2")

    @staticmethod
    def _gather_features(states, examples):
        feats = []
        for i, ex in enumerate(examples):
            feats.append(
                seq.seq_features(states[i], ex.a_span, ex.b_span, ex.p_span)
            )
        return np.stack(feats)

    @staticmethod
    def _scatter_features(states, examples, d_features):
        H = states.shape[-1]
        d_states = np.zeros_like(states)
        for i, ex in enumerate(examples):
            df = d_features[i]
            for block, span in enumerate((ex.a_span, ex.b_span, ex.p_span)):
                s_pos, e_pos = span
                base = 3 * block * H
                d_s = df[base : base + H]
                d_e = df[base + H : base + 2 * H]
                d_prod = df[base + 2 * H : base + 3 * H]
                s, e = states[i, s_pos], states[i, e_pos]
                d_states[i, s_pos] += d_s + d_prod * e
                d_states[i, e_pos] += d_e + d_prod * s
        return d_states

    def _training_fn(self, records):
        examples = []
        for record in records:
            ex = seq.build_seq_example(record, self.vocab, self.max_seq_len, strict=True)
            if ex is None:
                logger.warning("skipping %s: span beyond truncation", record.id)
                continue
            examples.append(ex)
        if not examples:
            raise DataError("no trainable sequence examples")
        gold = np.array([LABELS.index(ex.gold) for ex in examples])
        encodeds = [ex.encoded for ex in examples]
        keys = [ex.record_id for ex in examples]
        dropout_rng = np.random.default_rng(
            np.uint64(derive_seed(self.seed, "dropout"))
        )

        def loss_and_grads(batch):
            batch_examples = [examples[i] for i in batch]
            states, cache, _ = self._batch_states(
                [keys[i] for i in batch], [encodeds[i] for i in batch], True
            )
            features = self._gather_features(states, batch_examples)
            if self.dropout > 0.0:
                keep = (
                    dropout_rng.random(features.shape) >= self.dropout
                ).astype(features.dtype)
                scale = keep / (1.0 - self.dropout)
                features_dropped = features * scale
            else:
                scale = None
                features_dropped = features
            loss, d_feat, grads = seq.seq_loss_and_head_backward(
                features_dropped, self.head_, gold[batch]
            )
            if scale is not None:
                d_feat = d_feat * scale
            if cache is not None:
                d_states = self._scatter_features(states, batch_examples, d_feat)
                grads.update(backward_batch(self.encoder_, cache, d_states))
            return loss, grads

        return loss_and_grads, len(examples)

    def _predict_records(self, records):
        out = []
        for chunk_start in range(0, len(records), _PREDICT_CHUNK):
            chunk = records[chunk_start : chunk_start + _PREDICT_CHUNK]
            examples = [
                seq.build_seq_example(r, self.vocab, self.max_seq_len, strict=False)
                for r in chunk
            ]
            if any(ex is None for ex in examples):
                raise DataError("record with empty passage cannot be scored")
            states, _, _ = self._batch_states(
                [ex.record_id for ex in examples],
                [ex.encoded for ex in examples],
                False,
            )
            features = self._gather_features(states, examples)
            probs, _ = seq.seq_forward_batch(features, self.head_)
            out.extend(ProbTriple(*row) for row in probs.tolist())
        return out


RESOLVER_KINDS = {
    "qa": QaResolver,
    "mc": MultiChoiceResolver,
    "seq": SeqResolver,
}


def make_resolver(kind: str, **params) -> _BaseResolver:
    try:
        cls = RESOLVER_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown model kind {kind!r}; expected qa, mc or seq") from None
    return cls(**params)


def load_resolver(path, embedding_provider=None) -> _BaseResolver:
    """Rebuild a fitted resolver from a checkpoint file."""
    meta, arrays, frozen = load_checkpoint(path)
    cls = RESOLVER_KINDS[meta["kind"]]
    resolver = cls()
    resolver._restore(meta, arrays, frozen, embedding_provider)
    return resolver
