"""Low-rank adapters on frozen projection matrices.

For a frozen W0 [d, k] the adapted projection is

    h = x W0^T + (alpha / r) * (dropout(x) W_B^T) W_A^T

with W_A [d, r] starting at zero and W_B [r, k] Gaussian, so the adapted
model reproduces the base model exactly until the first update.
"""

import logging
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from veille import model as mdl
from veille import numerics as nx
from veille.container import ADAPTER_MAGIC, read_container, write_container
from veille.errors import ConfigError, ContractError, DataError
from veille.model import ModelConfig, Projector, TransformerWeights
from veille.numerics import Tensor

logger = logging.getLogger(__name__)

DEFAULT_TARGETS = ("query_projection", "value_projection")

RngLike = Union[None, int, Sequence[int], np.random.Generator]


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 8
    alpha: float = 16.0
    dropout_p: float = 0.1
    target_matrices: Tuple[str, ...] = DEFAULT_TARGETS
    init_std: float = 0.02

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def validate(self) -> "LoraConfig":
        errors = []
        if not isinstance(self.rank, int) or self.rank < 1:
            errors.append(f"lora.rank: expected positive int, got {self.rank}")
        if self.alpha <= 0:
            errors.append(f"lora.alpha: expected > 0, got {self.alpha}")
        if not 0.0 <= self.dropout_p < 1.0:
            errors.append(f"lora.dropout_p: expected value in [0, 1), got {self.dropout_p}")
        if self.init_std <= 0:
            errors.append(f"lora.init_std: expected > 0, got {self.init_std}")
        if not self.target_matrices:
            errors.append("lora.target_matrices: at least one matrix role is required")
        for role in self.target_matrices:
            if role not in mdl.ROLES:
                errors.append(f"lora.target_matrices: unknown matrix role '{role}', expected one of {sorted(mdl.ROLES)}")
        if len(set(self.target_matrices)) != len(self.target_matrices):
            errors.append(f"lora.target_matrices: duplicate roles in {list(self.target_matrices)}")
        if errors:
            raise ConfigError("Invalid LoRA configuration:\n" + "\n".join(f" - {e}" for e in errors))
        return self

    def to_dict(self) -> Dict:
        d = asdict(self)
        d["target_matrices"] = list(self.target_matrices)
        return d

    @classmethod
    def from_dict(cls, d: Dict) -> "LoraConfig":
        known = {f.name for f in fields(cls)}
        if set(d) - known:
            raise DataError(f"LoRA config has unknown fields {sorted(set(d) - known)}")
        d = dict(d)
        if "target_matrices" in d:
            d["target_matrices"] = tuple(d["target_matrices"])
        return cls(**d)


class LoraAdapter:
    """Factor pair attached to one frozen base matrix."""

    def __init__(self, name: str, base: Tensor, w_a: Tensor, w_b: Tensor, scale: float, dropout_p: float):
        d, k = base.shape
        r = w_a.shape[1]
        if w_a.shape != (d, r) or w_b.shape != (r, k):
            raise DataError(
                f"adapter '{name}': factor shapes {w_a.shape} and {w_b.shape} do not fit base matrix {base.shape}"
            )
        self.name = name
        self.base = base
        self.w_a = w_a
        self.w_b = w_b
        self.scale = float(scale)
        self.dropout_p = float(dropout_p)

    @property
    def rank(self) -> int:
        return self.w_a.shape[1]

    def tensors(self) -> Tuple[Tensor, Tensor]:
        return self.w_a, self.w_b


def _as_rng(rng: RngLike) -> Optional[np.random.Generator]:
    if rng is None or isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def adapted_forward(adapter: LoraAdapter, x: Tensor, training: bool, rng: RngLike = None) -> Tensor:
    """Frozen projection plus the scaled low-rank branch; dropout hits the branch input only."""
    frozen = nx.linear(x, adapter.base)
    x_branch = x
    if training and adapter.dropout_p > 0.0:
        gen = _as_rng(rng)
        if gen is None:
            raise ContractError(f"adapter '{adapter.name}': training-mode dropout needs a random stream")
        x_branch = nx.dropout(x, adapter.dropout_p, gen)
    branch = nx.linear(nx.linear(x_branch, adapter.w_b), adapter.w_a)
    return nx.add(frozen, nx.scale(branch, adapter.scale))


def merge(adapter: LoraAdapter) -> Tensor:
    """W0 + scale * W_A W_B as a new frozen matrix; W0 itself is left alone."""
    delta = adapter.w_a.data @ adapter.w_b.data
    return Tensor(adapter.base.data + adapter.scale * delta, requires_grad=False, name=adapter.name)


class AdaptedModel:
    def __init__(self, base: TransformerWeights, lora_config: LoraConfig, adapters: Dict[str, LoraAdapter]):
        self.base = base
        self.lora_config = lora_config
        self.adapters = adapters

    @property
    def config(self) -> ModelConfig:
        return self.base.config

    def projector(self, training: bool = False, rng: RngLike = None) -> Projector:
        gen = _as_rng(rng)

        def project(name: str, x: Tensor) -> Tensor:
            adapter = self.adapters.get(name)
            if adapter is None:
                return nx.linear(x, self.base[name])
            return adapted_forward(adapter, x, training, gen)

        return project

    def forward_classifier(self, token_ids: Sequence[int], training: bool = False, rng: RngLike = None) -> Tensor:
        return mdl.forward_classifier(self.base, self.config, token_ids, self.projector(training, rng))

    def forward_lm(self, token_ids: Sequence[int], training: bool = False, rng: RngLike = None) -> Tensor:
        return mdl.forward_lm(self.base, self.config, token_ids, self.projector(training, rng))

    def adapter_tensors(self) -> List[Tuple[str, Tensor]]:
        out = []
        for name in sorted(self.adapters):
            adapter = self.adapters[name]
            out += [(f"{name}.lora_a", adapter.w_a), (f"{name}.lora_b", adapter.w_b)]
        return out

    def trainable_tensors(self) -> List[Tuple[str, Tensor]]:
        return self.adapter_tensors() + self.base.trainable()

    def count_params(self) -> Tuple[int, int]:
        return mdl.count_params(self.base, (t for _, t in self.adapter_tensors()))

    def merge(self) -> TransformerWeights:
        """Adapter-free weights with every targeted matrix replaced by its merged form."""
        merged = self.base.copy()
        for name, adapter in self.adapters.items():
            merged.tensors[name] = merge(adapter)
        return merged


def _targeted_names(config: ModelConfig, lora_config: LoraConfig) -> List[str]:
    targeted = set()
    for role in lora_config.target_matrices:
        targeted.update(mdl.role_weight_names(config, role))
    # Parameter order keeps adapter creation independent of set ordering.
    return [name for name, _ in mdl.parameter_shapes(config) if name in targeted]


def _check_rank(name: str, shape: Tuple[int, int], rank: int) -> None:
    limit = min(shape) / 2
    if rank > limit:
        raise ConfigError(f"lora.rank {rank} too large for '{name}' {shape}: must satisfy r <= min(d,k)/2 = {limit:g}")
    if rank == limit:
        logger.warning(f"lora.rank {rank} equals min(d,k)/2 for '{name}' {shape}; the update is not low-rank")


def _prepare_base(weights, lora_config: LoraConfig) -> List[str]:
    if isinstance(weights, AdaptedModel) or getattr(weights, "adapted", False):
        raise ConfigError("model already carries LoRA adapters; stacking adapters is not supported")
    lora_config.validate()
    names = _targeted_names(weights.config, lora_config)
    for name in names:
        _check_rank(name, weights[name].shape, lora_config.rank)
    return names


def _finish_base(weights: TransformerWeights) -> None:
    weights.freeze()
    weights.unfreeze(["classifier_head"])
    weights.adapted = True


def inject(weights: TransformerWeights, config: LoraConfig, seed: int) -> AdaptedModel:
    """Freezes the base in place and attaches a fresh adapter to every targeted matrix."""
    names = _prepare_base(weights, config)
    rng = np.random.default_rng(seed)
    adapters: Dict[str, LoraAdapter] = {}
    for name in names:
        d, k = weights[name].shape
        w_a = Tensor(np.zeros((d, config.rank)), requires_grad=True, name=f"{name}.lora_a")
        w_b = Tensor(rng.normal(0.0, config.init_std, size=(config.rank, k)), requires_grad=True, name=f"{name}.lora_b")
        adapters[name] = LoraAdapter(name, weights[name], w_a, w_b, config.scale, config.dropout_p)
    _finish_base(weights)
    model = AdaptedModel(weights, config, adapters)
    total, trainable = model.count_params()
    logger.info(
        f"Injected {len(adapters)} adapters (r={config.rank}, alpha={config.alpha}); "
        f"trainable {trainable} of {total} parameters ({100.0 * trainable / total:.3f}%)"
    )
    return model


def save_adapters(model: AdaptedModel, path: str) -> None:
    """Writes LoRA settings, factor matrices and the classifier head."""
    meta = {
        "kind": "adapters",
        "lora": model.lora_config.to_dict(),
        "model": model.config.to_dict(),
        "targets": sorted(model.adapters),
    }
    entries = [(n, t.data, True) for n, t in model.adapter_tensors()]
    entries.append(("classifier_head", model.base["classifier_head"].data, True))
    write_container(path, ADAPTER_MAGIC, meta, entries)
    logger.info(f"Wrote {len(model.adapters)} adapters to {path}")


def load_adapters(weights: TransformerWeights, path: str) -> AdaptedModel:
    """Re-attaches saved adapters and head to a shape-compatible base."""
    meta, entries = read_container(path, ADAPTER_MAGIC)
    if meta.get("kind") != "adapters":
        raise DataError(f"{path}: container is not an adapter file")
    try:
        lora_config = LoraConfig.from_dict(meta["lora"])
    except (KeyError, TypeError) as e:
        raise DataError(f"{path}: unreadable LoRA settings: {e}") from e
    stored = meta.get("model", {})
    current = weights.config.to_dict()
    differing = sorted(k for k in set(stored) | set(current) if stored.get(k) != current.get(k))
    if differing:
        details = ", ".join(f"{k}: file {stored.get(k)} vs base {current.get(k)}" for k in differing)
        raise DataError(f"{path}: adapters were trained for a different base model ({details})")

    try:
        names = _prepare_base(weights, lora_config)
    except ConfigError as e:
        raise DataError(f"{path}: {e}") from e
    if sorted(names) != sorted(meta.get("targets", names)):
        raise DataError(f"{path}: adapter targets {meta.get('targets')} disagree with {names}")
    arrays = {name: arr for name, arr, _ in entries}
    adapters: Dict[str, LoraAdapter] = {}
    for name in names:
        try:
            w_a = Tensor(arrays[f"{name}.lora_a"], requires_grad=True, name=f"{name}.lora_a")
            w_b = Tensor(arrays[f"{name}.lora_b"], requires_grad=True, name=f"{name}.lora_b")
        except KeyError as e:
            raise DataError(f"{path}: missing factor matrix {e}") from e
        adapters[name] = LoraAdapter(name, weights[name], w_a, w_b, lora_config.scale, lora_config.dropout_p)
    head = arrays.get("classifier_head")
    if head is None or head.shape != weights["classifier_head"].shape:
        raise DataError(f"{path}: classifier head missing or shaped {None if head is None else head.shape}")
    weights.tensors["classifier_head"] = Tensor(head, requires_grad=True, name="classifier_head")
    _finish_base(weights)
    return AdaptedModel(weights, lora_config, adapters)
