"""Decoder-only transformer: pre-norm RMSNorm, SwiGLU feed-forward, rotary attention.

Projections are stored as [out, in] matrices and applied as x @ W.T. The same
trunk feeds a causal language-model head and a C-class classification head
read from the final token position.
"""

import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from veille import numerics as nx
from veille.container import CHECKPOINT_MAGIC, read_container, write_container
from veille.errors import ConfigError, ContractError, DataError
from veille.numerics import Tensor

logger = logging.getLogger(__name__)

INIT_STD = 0.02

# Matrix role -> weight name suffix inside a layer.
ROLES: Dict[str, str] = {
    "query_projection": "attention.query",
    "key_projection": "attention.key",
    "value_projection": "attention.value",
    "output_projection": "attention.output",
    "gate_projection": "feed_forward.gate",
    "up_projection": "feed_forward.up",
    "down_projection": "feed_forward.down",
}

# (weight name, x) -> x @ W.T; lets adapters stand in for a plain projection.
Projector = Callable[[str, Tensor], Tensor]


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 2048
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_seq_len: int = 128
    n_classes: int = 2
    rope_theta: float = nx.DEFAULT_ROPE_THETA
    rmsnorm_eps: float = 1e-6

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def validate(self) -> "ModelConfig":
        errors = []
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                errors.append(f"model.{name}: expected positive int, got {value}")
        if errors:
            raise ConfigError("Invalid model configuration:\n" + "\n".join(f" - {e}" for e in errors))
        if self.d_model % self.n_heads:
            errors.append(f"model.d_model ({self.d_model}) is not divisible by model.n_heads ({self.n_heads})")
        elif self.head_dim % 2:
            errors.append(f"model: head dimension {self.head_dim} must be even for rotary embeddings")
        if self.n_classes < 2:
            errors.append(f"model.n_classes: expected >= 2, got {self.n_classes}")
        if self.rope_theta <= 0:
            errors.append(f"model.rope_theta: expected > 0, got {self.rope_theta}")
        if self.rmsnorm_eps <= 0:
            errors.append(f"model.rmsnorm_eps: expected > 0, got {self.rmsnorm_eps}")
        if errors:
            raise ConfigError("Invalid model configuration:\n" + "\n".join(f" - {e}" for e in errors))
        return self

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"model config has unknown fields {sorted(unknown)}")
        return cls(**d)


def layer_prefix(i: int) -> str:
    return f"layers.{i}"


def role_weight_names(config: ModelConfig, role: str) -> List[str]:
    if role not in ROLES:
        raise ConfigError(f"unknown matrix role '{role}', expected one of {sorted(ROLES)}")
    return [f"{layer_prefix(i)}.{ROLES[role]}" for i in range(config.n_layers)]


def parameter_shapes(config: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    d, f = config.d_model, config.d_ff
    shapes: List[Tuple[str, Tuple[int, ...]]] = [("tok_embeddings", (config.vocab_size, d))]
    for i in range(config.n_layers):
        p = layer_prefix(i)
        shapes += [
            (f"{p}.attention_norm", (d,)),
            (f"{p}.attention.query", (d, d)),
            (f"{p}.attention.key", (d, d)),
            (f"{p}.attention.value", (d, d)),
            (f"{p}.attention.output", (d, d)),
            (f"{p}.ffn_norm", (d,)),
            (f"{p}.feed_forward.gate", (f, d)),
            (f"{p}.feed_forward.up", (f, d)),
            (f"{p}.feed_forward.down", (d, f)),
        ]
    shapes += [
        ("norm", (d,)),
        ("lm_head", (d, config.vocab_size)),
        ("classifier_head", (d, config.n_classes)),
    ]
    return shapes


def expected_param_count(config: ModelConfig) -> int:
    d, f, v = config.d_model, config.d_ff, config.vocab_size
    per_layer = 4 * d * d + 3 * d * f + 2 * d
    return v * d + config.n_layers * per_layer + d + d * v + d * config.n_classes


class TransformerWeights:
    """Named parameter tensors; a tensor is frozen when it does not require grad."""

    def __init__(self, config: ModelConfig, tensors: Dict[str, Tensor]):
        self.config = config
        self.tensors = tensors
        self.adapted = False
        for name, shape in parameter_shapes(config):
            if name not in tensors:
                raise DataError(f"weights: missing tensor '{name}'")
            if tensors[name].shape != shape:
                raise DataError(f"weights: tensor '{name}' has shape {tensors[name].shape}, expected {shape}")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def is_frozen(self, name: str) -> bool:
        return not self.tensors[name].requires_grad

    def freeze(self, names: Optional[Iterable[str]] = None) -> None:
        for name in self.tensors if names is None else names:
            self.tensors[name].requires_grad = False
            self.tensors[name].grad = None

    def unfreeze(self, names: Optional[Iterable[str]] = None) -> None:
        for name in self.tensors if names is None else names:
            self.tensors[name].requires_grad = True

    def trainable(self) -> List[Tuple[str, Tensor]]:
        return [(n, t) for n, t in self.tensors.items() if t.requires_grad]

    def copy(self) -> "TransformerWeights":
        tensors = {n: Tensor(t.data, requires_grad=t.requires_grad, name=n) for n, t in self.tensors.items()}
        return TransformerWeights(self.config, tensors)

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.tensors.items()}


def init_weights(config: ModelConfig, seed: int) -> TransformerWeights:
    config.validate()
    rng = np.random.default_rng(seed)
    tensors: Dict[str, Tensor] = {}
    for name, shape in parameter_shapes(config):
        if len(shape) == 1:
            data = np.ones(shape)
        else:
            data = rng.normal(0.0, INIT_STD, size=shape)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    logger.debug(f"Initialized {expected_param_count(config)} parameters with seed {seed}")
    return TransformerWeights(config, tensors)


def count_params(weights: TransformerWeights, adapter_tensors: Iterable[Tensor] = ()) -> Tuple[int, int]:
    """(total, trainable) over base matrices plus any attached adapter factors."""
    total = trainable = 0
    for t in list(weights.tensors.values()) + list(adapter_tensors):
        total += t.size
        if t.requires_grad:
            trainable += t.size
    return total, trainable


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def _check_tokens(config: ModelConfig, token_ids: Sequence[int]) -> List[int]:
    ids = [int(t) for t in token_ids]
    if not ids:
        raise ContractError("forward: token sequence is empty")
    if len(ids) > config.max_seq_len:
        raise ContractError(f"forward: {len(ids)} tokens exceed max_seq_len {config.max_seq_len}")
    for pos, t in enumerate(ids):
        if not 0 <= t < config.vocab_size:
            raise DataError(f"forward: token id {t} at position {pos} outside vocabulary of {config.vocab_size}")
    return ids


def _attention(weights, prefix: str, x: Tensor, positions: np.ndarray, project: Projector) -> Tensor:
    config = weights.config
    dh = config.head_dim
    q = project(f"{prefix}.attention.query", x)
    k = project(f"{prefix}.attention.key", x)
    v = project(f"{prefix}.attention.value", x)
    score_scale = 1.0 / math.sqrt(dh)
    heads = []
    for h in range(config.n_heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = nx.rope_apply(nx.slice_columns(q, lo, hi), positions, config.rope_theta)
        kh = nx.rope_apply(nx.slice_columns(k, lo, hi), positions, config.rope_theta)
        scores = nx.scale(nx.matmul(qh, nx.transpose(kh)), score_scale)
        probs = nx.softmax_rows(scores, causal=True)
        heads.append(nx.matmul(probs, nx.slice_columns(v, lo, hi)))
    return project(f"{prefix}.attention.output", nx.concat_columns(heads))


def _feed_forward(prefix: str, x: Tensor, project: Projector) -> Tensor:
    gate = nx.silu(project(f"{prefix}.feed_forward.gate", x))
    up = project(f"{prefix}.feed_forward.up", x)
    return project(f"{prefix}.feed_forward.down", nx.mul(gate, up))


def hidden_states(
    weights: TransformerWeights,
    config: ModelConfig,
    token_ids: Sequence[int],
    projector: Optional[Projector] = None,
) -> Tensor:
    """Final-normalized hidden states, one row per input position."""
    ids = _check_tokens(config, token_ids)
    if projector is None:

        def projector(name: str, x: Tensor) -> Tensor:
            return nx.linear(x, weights[name])

    positions = np.arange(len(ids))
    eps = config.rmsnorm_eps
    h = nx.embedding(weights["tok_embeddings"], ids)
    for i in range(config.n_layers):
        p = layer_prefix(i)
        h = nx.add(h, _attention(weights, p, nx.rmsnorm(h, weights[f"{p}.attention_norm"], eps), positions, projector))
        h = nx.add(h, _feed_forward(p, nx.rmsnorm(h, weights[f"{p}.ffn_norm"], eps), projector))
    return nx.rmsnorm(h, weights["norm"], eps)


def forward_lm(
    weights: TransformerWeights,
    config: ModelConfig,
    token_ids: Sequence[int],
    projector: Optional[Projector] = None,
) -> Tensor:
    """Next-token logits [len, vocab_size]; row t scores token t+1."""
    return nx.matmul(hidden_states(weights, config, token_ids, projector), weights["lm_head"])


def forward_classifier(
    weights: TransformerWeights,
    config: ModelConfig,
    token_ids: Sequence[int],
    projector: Optional[Projector] = None,
) -> Tensor:
    """C unnormalized class logits from the last position's hidden state."""
    h = hidden_states(weights, config, token_ids, projector)
    logits = nx.matmul(nx.take_row(h, -1), weights["classifier_head"])
    return nx.reshape(logits, (config.n_classes,))


def predict_proba(logits: Tensor) -> np.ndarray:
    return nx.softmax_rows(nx.as_tensor(logits).detach()).numpy()


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(weights: TransformerWeights, path: str) -> None:
    meta = {"kind": "checkpoint", "model": weights.config.to_dict()}
    entries = [(n, t.data, t.requires_grad) for n, t in weights.items()]
    write_container(path, CHECKPOINT_MAGIC, meta, entries)
    logger.info(f"Wrote checkpoint {path} ({sum(t.size for t in weights.tensors.values())} parameters)")


def load_checkpoint(path: str) -> TransformerWeights:
    meta, entries = read_container(path, CHECKPOINT_MAGIC)
    if meta.get("kind") != "checkpoint" or "model" not in meta:
        raise DataError(f"{path}: container is not a model checkpoint")
    try:
        config = ModelConfig.from_dict(meta["model"]).validate()
    except ConfigError as e:
        raise DataError(f"{path}: stored model configuration is invalid: {e}") from e
    tensors = {name: Tensor(arr, requires_grad=trainable, name=name) for name, arr, trainable in entries}
    expected = [name for name, _ in parameter_shapes(config)]
    if sorted(tensors) != sorted(expected):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise DataError(f"{path}: tensor names disagree with config (missing {missing}, unexpected {extra})")
    return TransformerWeights(config, {name: tensors[name] for name in expected})
