"""Weighted cross-entropy, AdamW, and the pretraining and fine-tuning loops."""

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from veille import model as mdl
from veille import monitoring
from veille import numerics as nx
from veille.corpus import LabeledDataset
from veille.errors import (
    ConfigError,
    ContractError,
    DataError,
    DegenerateWeightsError,
    DimensionError,
    NumericalError,
)
from veille.lora import AdaptedModel
from veille.metrics import ConfusionMatrix, confusion
from veille.model import ModelConfig, TransformerWeights
from veille.numerics import Tensor
from veille.tokenizer import BpeVocab, encode, encode_for_model

logger = logging.getLogger(__name__)

INVERSE_FREQUENCY = "inverse_frequency"

ClassWeights = Union[None, str, Tuple[float, ...]]


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 2e-5
    adam_eps: float = 1e-8
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    epochs: int = 20
    batch_size: int = 8
    class_weights: ClassWeights = None
    seed: int = 0
    max_seq_len: Optional[int] = None
    truncation: str = "tail"

    def validate(self) -> "TrainingConfig":
        errors = []
        if self.learning_rate <= 0:
            errors.append(f"training.learning_rate: expected > 0, got {self.learning_rate}")
        if self.adam_eps <= 0:
            errors.append(f"training.adam_eps: expected > 0, got {self.adam_eps}")
        if len(self.adam_betas) != 2 or not all(0.0 <= b < 1.0 for b in self.adam_betas):
            errors.append(f"training.adam_betas: expected two values in [0, 1), got {list(self.adam_betas)}")
        if self.weight_decay < 0:
            errors.append(f"training.weight_decay: expected >= 0, got {self.weight_decay}")
        if self.epochs < 1:
            errors.append(f"training.epochs: expected >= 1, got {self.epochs}")
        if self.batch_size < 1:
            errors.append(f"training.batch_size: expected >= 1, got {self.batch_size}")
        if self.max_seq_len is not None and self.max_seq_len < 1:
            errors.append(f"training.max_seq_len: expected >= 1, got {self.max_seq_len}")
        if self.truncation not in ("tail", "head"):
            errors.append(f"training.truncation: expected 'tail' or 'head', got '{self.truncation}'")
        cw = self.class_weights
        if isinstance(cw, str):
            if cw != INVERSE_FREQUENCY:
                errors.append(f"training.class_weights: expected a list or '{INVERSE_FREQUENCY}', got '{cw}'")
        elif cw is not None:
            if any(w < 0 for w in cw):
                errors.append(f"training.class_weights: weights must be nonnegative, got {list(cw)}")
            elif not any(w > 0 for w in cw):
                errors.append("training.class_weights: weights must not all be zero")
        if errors:
            raise ConfigError("Invalid training configuration:\n" + "\n".join(f" - {e}" for e in errors))
        return self

    def to_dict(self) -> Dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        if isinstance(self.class_weights, tuple):
            d["class_weights"] = list(self.class_weights)
        return d


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float
    seconds: float


@dataclass
class TrainingLog:
    phase: str
    epochs: List[EpochRecord] = field(default_factory=list)
    step_losses: List[float] = field(default_factory=list)

    def records(self) -> List[Dict]:
        return [{"epoch": e.epoch, "loss": e.loss, "accuracy": e.accuracy} for e in self.epochs]

    def timing_records(self) -> List[Dict]:
        return [{"epoch": e.epoch, "seconds": e.seconds} for e in self.epochs]

    def write(self, log_path: str, timings_path: Optional[str] = None) -> None:
        """Loss/accuracy records are reproducible; wall-clock times go to a separate file."""
        _write_jsonl(log_path, self.records())
        if timings_path:
            _write_jsonl(timings_path, self.timing_records())


def _write_jsonl(path: str, records: Sequence[Dict]) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "w", encoding="utf-8", newline="\n") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    os.replace(tmp_path, path)


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------


def weighted_cross_entropy(logits: Tensor, targets: Sequence[int], weights) -> Tensor:
    """sum_n -w[y_n] log softmax(x_n)[y_n] / sum_n w[y_n]."""
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise DimensionError(f"weighted_cross_entropy: expected logits [N, C] with N >= 1, got {logits.shape}")
    n, c = logits.shape
    w = np.asarray(weights, dtype=nx.DTYPE)
    if w.shape != (c,):
        raise DimensionError(f"weighted_cross_entropy: {w.shape[0] if w.ndim else 0} class weights for {c} classes")
    y = np.asarray(targets, dtype=np.int64)
    if y.shape != (n,):
        raise DimensionError(f"weighted_cross_entropy: {y.size} targets for {n} rows")
    bad = [int(t) for t in y if not 0 <= t < c]
    if bad:
        raise DataError(f"weighted_cross_entropy: targets {bad} outside [0, {c})")
    w_y = w[y]
    denom = float(w_y.sum())
    if denom == 0.0:
        raise DegenerateWeightsError(f"weighted_cross_entropy: class weights {w.tolist()} sum to 0 over targets")
    picked = nx.pick_columns(nx.log_softmax_rows(logits), y)
    return nx.weighted_sum(picked, -w_y / denom)


def resolve_class_weights(spec: ClassWeights, labels: Sequence[int], n_classes: int) -> np.ndarray:
    if spec is None:
        return np.ones(n_classes)
    if isinstance(spec, str):
        if spec != INVERSE_FREQUENCY:
            raise ConfigError(f"unknown class weighting '{spec}'")
        counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes).astype(nx.DTYPE)
        out = np.zeros(n_classes)
        present = counts > 0
        out[present] = len(labels) / (n_classes * counts[present])
        return out
    w = np.asarray(spec, dtype=nx.DTYPE)
    if w.shape != (n_classes,):
        raise ConfigError(f"training.class_weights: {w.size} weights for {n_classes} classes")
    return w


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]

    @classmethod
    def create(cls, params: Sequence[Tuple[str, Tensor]]) -> "AdamState":
        return cls(
            step=0,
            m={n: np.zeros_like(p.data) for n, p in params},
            v={n: np.zeros_like(p.data) for n, p in params},
        )


def adamw_step(params: Sequence[Tuple[str, Tensor]], state: AdamState, config: TrainingConfig) -> AdamState:
    """One AdamW update with decoupled weight decay, applied in place to `params`."""
    missing = [n for n, p in params if p.requires_grad and p.grad is None]
    if missing:
        raise ContractError(f"adamw_step: no gradient for {missing}")
    lr, eps, wd = config.learning_rate, config.adam_eps, config.weight_decay
    b1, b2 = config.adam_betas
    t = state.step + 1
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for name, p in params:
        if not p.requires_grad:
            continue
        g = p.grad
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        decayed = p.data * (1.0 - lr * wd)
        updated = decayed - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        if not np.all(np.isfinite(updated)):
            raise NumericalError(f"adamw_step: update of '{name}' is not finite")
        p.data = updated
        state.m[name], state.v[name] = m, v
    state.step = t
    return state


# ---------------------------------------------------------------------------
# Loops
# ---------------------------------------------------------------------------


def _batches(n: int, batch_size: int, seed: int, epoch: int):
    order = np.random.default_rng([seed, epoch]).permutation(n)
    for step, lo in enumerate(range(0, n, batch_size)):
        yield step, order[lo : lo + batch_size]


def check_vocab_compatible(vocab: BpeVocab, config: ModelConfig) -> None:
    if vocab.size != config.vocab_size:
        raise ConfigError(f"tokenizer has {vocab.size} tokens but the model expects vocab_size {config.vocab_size}")


def _sequence_limit(config: TrainingConfig, model_config: ModelConfig) -> int:
    return min(config.max_seq_len or model_config.max_seq_len, model_config.max_seq_len)


def _finish_epoch(log: TrainingLog, epoch: int, loss: float, accuracy: float, started: float) -> None:
    seconds = time.monotonic() - started
    log.epochs.append(EpochRecord(epoch=epoch, loss=loss, accuracy=accuracy, seconds=seconds))
    monitoring.record_epoch(log.phase, loss, accuracy, seconds)
    logger.info(f"[{log.phase}] epoch {epoch}: loss {loss:.6f}, accuracy {accuracy:.4f}, {seconds:.1f}s")


def _lm_windows(vocab: BpeVocab, corpus: Sequence[str], max_seq_len: int) -> List[List[int]]:
    """Token windows of at most max_seq_len + 1 ids; consecutive windows share one token."""
    windows = []
    for doc in corpus:
        ids = encode(vocab, doc)
        for start in range(0, max(len(ids) - 1, 0), max_seq_len):
            chunk = ids[start : start + max_seq_len + 1]
            if len(chunk) >= 2:
                windows.append(chunk)
    return windows


def pretrain_lm(
    weights: TransformerWeights, vocab: BpeVocab, corpus: Sequence[str], config: TrainingConfig
) -> Tuple[TransformerWeights, TrainingLog]:
    """Next-token training of every trunk and LM-head parameter."""
    config.validate()
    if not corpus:
        raise DataError("pretrain_lm: corpus is empty")
    if weights.adapted:
        raise ConfigError("pretrain_lm: weights carry LoRA adapters")
    model_config = weights.config
    check_vocab_compatible(vocab, model_config)
    windows = _lm_windows(vocab, corpus, _sequence_limit(config, model_config))
    if not windows:
        raise DataError("pretrain_lm: no document encodes to at least two tokens")

    weights.unfreeze()
    # The classification head is not part of the language-model graph.
    weights.freeze(["classifier_head"])
    params = weights.trainable()
    state = AdamState.create(params)
    uniform = np.ones(model_config.vocab_size)
    log = TrainingLog(phase="pretrain")
    logger.info(f"Pretraining on {len(windows)} windows from {len(corpus)} documents")

    for epoch in range(1, config.epochs + 1):
        started = time.monotonic()
        loss_sum, correct, n_tokens = 0.0, 0, 0
        for _, idx in _batches(len(windows), config.batch_size, config.seed, epoch):
            logits = nx.concat_rows([mdl.forward_lm(weights, model_config, windows[i][:-1]) for i in idx])
            targets = [t for i in idx for t in windows[i][1:]]
            loss = weighted_cross_entropy(logits, targets, uniform)
            for _, p in params:
                p.zero_grad()
            nx.backward(loss)
            state = adamw_step(params, state, config)
            monitoring.metric_training_steps_total.labels(phase=log.phase).inc()
            log.step_losses.append(loss.item())
            loss_sum += loss.item() * len(targets)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == np.asarray(targets)))
            n_tokens += len(targets)
        _finish_epoch(log, epoch, loss_sum / n_tokens, correct / n_tokens, started)

    weights.unfreeze(["classifier_head"])
    return weights, log


def _check_labels(dataset: LabeledDataset, n_classes: int) -> List[int]:
    labels = dataset.labels
    bad = sorted({y for y in labels if not 0 <= y < n_classes})
    if bad:
        raise DataError(f"labels {bad} outside [0, {n_classes})")
    return labels


def finetune_classifier(
    model: AdaptedModel, vocab: BpeVocab, train_set: LabeledDataset, config: TrainingConfig
) -> Tuple[AdaptedModel, TrainingLog]:
    """Minimizes the weighted cross-entropy over adapter factors and the classifier head."""
    config.validate()
    if not len(train_set):
        raise DataError("finetune_classifier: training set is empty")
    model_config = model.config
    check_vocab_compatible(vocab, model_config)
    labels = _check_labels(train_set, model_config.n_classes)
    limit = _sequence_limit(config, model_config)
    encoded = [encode_for_model(vocab, e.text, limit, config.truncation) for e in train_set]
    class_weights = resolve_class_weights(config.class_weights, labels, model_config.n_classes)

    params = model.trainable_tensors()
    state = AdamState.create(params)
    total, trainable = model.count_params()
    monitoring.metric_trainable_parameters.labels(phase="finetune").set(trainable)
    log = TrainingLog(phase="finetune")
    logger.info(
        f"Fine-tuning on {len(train_set)} examples, {trainable} of {total} parameters trainable, "
        f"class weights {class_weights.tolist()}"
    )

    for epoch in range(1, config.epochs + 1):
        started = time.monotonic()
        loss_sum, correct = 0.0, 0
        for step, idx in _batches(len(encoded), config.batch_size, config.seed, epoch):
            rng = np.random.default_rng([config.seed, epoch, step])
            logits = nx.stack_rows([model.forward_classifier(encoded[i], training=True, rng=rng) for i in idx])
            targets = [labels[i] for i in idx]
            loss = weighted_cross_entropy(logits, targets, class_weights)
            for _, p in params:
                p.zero_grad()
            nx.backward(loss)
            state = adamw_step(params, state, config)
            monitoring.metric_training_steps_total.labels(phase=log.phase).inc()
            log.step_losses.append(loss.item())
            loss_sum += loss.item() * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == np.asarray(targets)))
        _finish_epoch(log, epoch, loss_sum / len(encoded), correct / len(encoded), started)
    return model, log


@dataclass
class Evaluation:
    predictions: List[int]
    probabilities: List[List[float]]
    confusion: Optional[ConfusionMatrix]


def classifier_logits(model: Union[AdaptedModel, TransformerWeights], token_ids: Sequence[int]) -> Tensor:
    if isinstance(model, AdaptedModel):
        return model.forward_classifier(token_ids, training=False)
    return mdl.forward_classifier(model, model.config, token_ids)


def predict_texts(
    model: Union[AdaptedModel, TransformerWeights],
    vocab: BpeVocab,
    texts: Sequence[str],
    config: TrainingConfig = TrainingConfig(),
) -> Tuple[List[int], List[List[float]]]:
    check_vocab_compatible(vocab, model.config)
    limit = _sequence_limit(config, model.config)
    predictions, probabilities = [], []
    for text in texts:
        probs = mdl.predict_proba(classifier_logits(model, encode_for_model(vocab, text, limit, config.truncation)))
        predictions.append(int(np.argmax(probs)))
        probabilities.append(probs.tolist())
    return predictions, probabilities


def evaluate_classifier(
    model: Union[AdaptedModel, TransformerWeights],
    vocab: BpeVocab,
    dataset: LabeledDataset,
    config: TrainingConfig = TrainingConfig(),
) -> Evaluation:
    """Evaluation-mode predictions, class probabilities and, for binary models, the confusion matrix."""
    if not len(dataset):
        raise DataError("evaluate_classifier: dataset is empty")
    labels = _check_labels(dataset, model.config.n_classes)
    predictions, probabilities = predict_texts(model, vocab, dataset.texts, config)
    cm = confusion(predictions, labels) if model.config.n_classes == 2 else None
    return Evaluation(predictions=predictions, probabilities=probabilities, confusion=cm)
