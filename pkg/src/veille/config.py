import copy
import difflib
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import yaml

from veille.errors import ConfigError
from veille.lora import DEFAULT_TARGETS, LoraConfig
from veille.model import ROLES, ModelConfig
from veille.tokenizer import DEFAULT_VOCAB_SIZE, MIN_VOCAB_SIZE
from veille.training import INVERSE_FREQUENCY, TrainingConfig

logger = logging.getLogger(__name__)

SECTIONS = ("global", "model", "tokenizer", "lora", "pretraining", "training", "data")
PRETRAINING_DEFAULTS = {"learning_rate": 1e-3, "epochs": 5, "batch_size": 8, "weight_decay": 0.01}
LOGGING_LEVELS = {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}


@dataclass(frozen=True)
class TokenizerConfig:
    vocab_size: int = DEFAULT_VOCAB_SIZE


@dataclass(frozen=True)
class TabularSource:
    path: str
    text_column: str = "text"
    label_column: str = "label"
    positive_token: str = "1"
    negative_token: Optional[str] = None
    delimiter: str = ","


@dataclass(frozen=True)
class Pan12Source:
    train_xml: str
    train_predators: str
    test_xml: str
    test_predators: str


@dataclass(frozen=True)
class DataConfig:
    source: str
    tabular: Optional[TabularSource] = None
    pan12: Optional[Pan12Source] = None
    pretrain_corpus: Optional[str] = None
    train_fraction: float = 0.8

    def input_paths(self) -> List[str]:
        paths: List[str] = []
        if self.tabular:
            paths.append(self.tabular.path)
        if self.pan12:
            p = self.pan12
            paths += [p.train_xml, p.train_predators, p.test_xml, p.test_predators]
        if self.pretrain_corpus:
            paths.append(self.pretrain_corpus)
        return paths


@dataclass(frozen=True)
class RunConfig:
    output_dir: str
    seed: int
    model: ModelConfig
    tokenizer: TokenizerConfig
    lora: LoraConfig
    pretraining: TrainingConfig
    training: TrainingConfig
    data: DataConfig
    log_dir: Optional[str] = None
    logging_level: str = "INFO"
    logging_levels: Dict[str, str] = field(default_factory=dict)
    log_max_bytes: int = 10_000_000
    log_backup_count: int = 5

    def path(self, *parts: str) -> str:
        return os.path.join(self.output_dir, *parts)

    def to_dict(self) -> Dict:
        """Snapshot written into run manifests."""
        data = {"source": self.data.source, "train_fraction": self.data.train_fraction}
        if self.data.tabular:
            data["tabular"] = dict(vars(self.data.tabular))
        if self.data.pan12:
            data["pan12"] = dict(vars(self.data.pan12))
        if self.data.pretrain_corpus:
            data["pretrain_corpus"] = self.data.pretrain_corpus
        model = self.model.to_dict()
        del model["vocab_size"]
        return {
            "global": {
                "output_dir": self.output_dir,
                "seed": self.seed,
                "logging_level": self.logging_level,
            },
            "model": model,
            "tokenizer": {"vocab_size": self.tokenizer.vocab_size},
            "lora": self.lora.to_dict(),
            "pretraining": {k: getattr(self.pretraining, k) for k in PRETRAINING_DEFAULTS},
            "training": {k: v for k, v in self.training.to_dict().items() if k != "seed"},
            "data": data,
        }


def _log_config_diff(section_name: str, before: Dict, after: Dict):
    """Logs the difference between two configuration dictionaries using YAML."""
    before_str = yaml.dump(before, sort_keys=True, default_flow_style=False, indent=2)
    after_str = yaml.dump(after, sort_keys=True, default_flow_style=False, indent=2)

    if before_str != after_str:
        diff = difflib.unified_diff(
            before_str.splitlines(keepends=True),
            after_str.splitlines(keepends=True),
            fromfile=f"{section_name}_original",
            tofile=f"{section_name}_validated",
        )
        diff_str = "".join(diff)
        logger.info(
            f"Configuration for '{section_name}' has been completed with defaults.\n"
            f"Configuration diff for '{section_name}':\n{diff_str}"
        )


def _int(value, path, errors, default=None, min_value=None, max_value=None):
    if value is None:
        return default
    if isinstance(value, int) and not isinstance(value, bool):
        if (min_value is not None and value < min_value) or (max_value is not None and value > max_value):
            errors.append(f"{path}: expected int in range [{min_value},{max_value}], got {value}")
            return default
        return value
    errors.append(f"{path}: expected int, got {type(value).__name__}")
    return default


def _float(value, path, errors, default=None, min_value=None, max_value=None, exclusive=False):
    if value is None:
        return default
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        v = float(value)
        below = min_value is not None and (v <= min_value if exclusive else v < min_value)
        above = max_value is not None and (v >= max_value if exclusive else v > max_value)
        if below or above:
            brackets = "()" if exclusive else "[]"
            errors.append(
                f"{path}: expected number in range {brackets[0]}{min_value},{max_value}{brackets[1]}, got {value}"
            )
            return default
        return v
    errors.append(f"{path}: expected number, got {type(value).__name__}")
    return default


def _str(value, path, errors, default=None, choices=None):
    if value is None:
        return default
    if isinstance(value, str):
        if choices and value not in choices:
            errors.append(f"{path}: expected one of {sorted(list(choices))}, got '{value}'")
            return default
        return value
    errors.append(f"{path}: expected str, got {type(value).__name__}")
    return default


def _dict(value, path, errors, default=None):
    if value is None:
        return default or {}
    if isinstance(value, dict):
        return value
    errors.append(f"{path}: expected mapping, got {type(value).__name__}")
    return default or {}


def _list(value, path, errors, default=None):
    if value is None:
        return default
    if isinstance(value, list):
        return value
    errors.append(f"{path}: expected list, got {type(value).__name__}")
    return default


def _path(value, path, errors, must_exist=True):
    raw = _str(value, path, errors)
    if not raw:
        errors.append(f"{path}: required path is missing")
        return None
    expanded = os.path.expanduser(os.path.expandvars(raw))
    if "$" in expanded:
        errors.append(f"{path}: unresolved environment variable in '{raw}'")
        return None
    resolved = os.path.abspath(expanded)
    if must_exist and not os.path.exists(resolved):
        errors.append(f"{path}: '{resolved}' does not exist")
        return None
    return resolved


def _warn_unknown_keys(section_name: str, got: Dict, allowed_keys: set):
    for k in got.keys():
        if k not in allowed_keys:
            logger.warning(f"{section_name}: unknown key '{k}' will be ignored")


def _validate_global(cfg: Dict, errors) -> Dict:
    allowed = {
        "output_dir",
        "log_dir",
        "logging_level",
        "logging_levels",
        "log_max_bytes",
        "log_backup_count",
        "seed",
    }
    _warn_unknown_keys("global", cfg, allowed)

    out: Dict = {}
    output_dir = _str(cfg.get("output_dir"), "global.output_dir", errors)
    if not output_dir:
        errors.append("global.output_dir: required string is missing")
    else:
        out["output_dir"] = os.path.abspath(os.path.expandvars(output_dir))

    log_dir = cfg.get("log_dir")
    if log_dir is not None:
        log_dir = _str(log_dir, "global.log_dir", errors)
        if log_dir:
            out["log_dir"] = os.path.abspath(os.path.expandvars(log_dir))

    level = _str(cfg.get("logging_level", "INFO"), "global.logging_level", errors)
    if isinstance(level, str):
        level = level.upper()
        if level not in LOGGING_LEVELS:
            errors.append(f"global.logging_level: unsupported value '{level}' (DEBUG, INFO, WARNING, ERROR, CRITICAL)")
    out["logging_level"] = level or "INFO"

    logging_levels = cfg.get("logging_levels")
    if logging_levels is not None and not isinstance(logging_levels, dict):
        errors.append("global.logging_levels: expected mapping of module->level")
        out["logging_levels"] = {}
    else:
        out["logging_levels"] = logging_levels or {}

    out["log_max_bytes"] = _int(
        cfg.get("log_max_bytes"), "global.log_max_bytes", errors, default=10_000_000, min_value=1024
    )
    out["log_backup_count"] = _int(
        cfg.get("log_backup_count"), "global.log_backup_count", errors, default=5, min_value=0
    )

    if cfg.get("seed") is None:
        errors.append("global.seed: required int is missing")
    else:
        out["seed"] = _int(cfg.get("seed"), "global.seed", errors, min_value=0)
    return out


def _validate_model(cfg: Dict, errors) -> Dict:
    defaults = ModelConfig()
    allowed = {"d_model", "n_layers", "n_heads", "d_ff", "max_seq_len", "n_classes", "rope_theta", "rmsnorm_eps"}
    _warn_unknown_keys("model", cfg, allowed)
    out = {}
    for key in ("d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
        out[key] = _int(cfg.get(key), f"model.{key}", errors, default=getattr(defaults, key), min_value=1)
    out["n_classes"] = _int(cfg.get("n_classes"), "model.n_classes", errors, default=defaults.n_classes, min_value=2)
    out["rope_theta"] = _float(
        cfg.get("rope_theta"), "model.rope_theta", errors, default=defaults.rope_theta, min_value=0.0, exclusive=True
    )
    out["rmsnorm_eps"] = _float(
        cfg.get("rmsnorm_eps"), "model.rmsnorm_eps", errors, default=defaults.rmsnorm_eps, min_value=0.0, exclusive=True
    )
    return out


def _validate_tokenizer(cfg: Dict, errors) -> Dict:
    _warn_unknown_keys("tokenizer", cfg, {"vocab_size"})
    return {
        "vocab_size": _int(
            cfg.get("vocab_size"), "tokenizer.vocab_size", errors, default=DEFAULT_VOCAB_SIZE, min_value=MIN_VOCAB_SIZE
        )
    }


def _validate_lora(cfg: Dict, errors) -> Dict:
    defaults = LoraConfig()
    _warn_unknown_keys("lora", cfg, {"rank", "alpha", "dropout_p", "target_matrices", "init_std"})
    out = {
        "rank": _int(cfg.get("rank"), "lora.rank", errors, default=defaults.rank, min_value=1),
        "alpha": _float(cfg.get("alpha"), "lora.alpha", errors, default=defaults.alpha, min_value=0.0, exclusive=True),
        "dropout_p": _float(cfg.get("dropout_p"), "lora.dropout_p", errors, default=defaults.dropout_p, min_value=0.0),
        "init_std": _float(
            cfg.get("init_std"), "lora.init_std", errors, default=defaults.init_std, min_value=0.0, exclusive=True
        ),
    }
    if out["dropout_p"] is not None and out["dropout_p"] >= 1.0:
        errors.append(f"lora.dropout_p: expected number in range [0.0,1.0), got {out['dropout_p']}")
        out["dropout_p"] = defaults.dropout_p
    targets = _list(cfg.get("target_matrices"), "lora.target_matrices", errors, default=list(DEFAULT_TARGETS))
    for idx, role in enumerate(targets):
        _str(role, f"lora.target_matrices[{idx}]", errors, choices=set(ROLES))
    out["target_matrices"] = targets
    return out


def _validate_training(cfg: Dict, errors) -> Dict:
    defaults = TrainingConfig()
    allowed = {
        "learning_rate",
        "adam_eps",
        "adam_betas",
        "weight_decay",
        "epochs",
        "batch_size",
        "class_weights",
        "max_seq_len",
        "truncation",
    }
    _warn_unknown_keys("training", cfg, allowed)
    out = {
        "learning_rate": _float(
            cfg.get("learning_rate"),
            "training.learning_rate",
            errors,
            default=defaults.learning_rate,
            min_value=0.0,
            exclusive=True,
        ),
        "adam_eps": _float(
            cfg.get("adam_eps"), "training.adam_eps", errors, default=defaults.adam_eps, min_value=0.0, exclusive=True
        ),
        "weight_decay": _float(
            cfg.get("weight_decay"), "training.weight_decay", errors, default=defaults.weight_decay, min_value=0.0
        ),
        "epochs": _int(cfg.get("epochs"), "training.epochs", errors, default=defaults.epochs, min_value=1),
        "batch_size": _int(cfg.get("batch_size"), "training.batch_size", errors, default=defaults.batch_size, min_value=1),
        "max_seq_len": _int(cfg.get("max_seq_len"), "training.max_seq_len", errors, min_value=1),
        "truncation": _str(
            cfg.get("truncation"), "training.truncation", errors, default=defaults.truncation, choices={"tail", "head"}
        ),
    }
    betas = _list(cfg.get("adam_betas"), "training.adam_betas", errors, default=list(defaults.adam_betas))
    if len(betas) != 2:
        errors.append(f"training.adam_betas: expected two values, got {betas}")
        betas = list(defaults.adam_betas)
    out["adam_betas"] = [
        _float(b, f"training.adam_betas[{i}]", errors, default=defaults.adam_betas[i], min_value=0.0, max_value=0.999999)
        for i, b in enumerate(betas)
    ]

    cw = cfg.get("class_weights")
    if cw is None or cw == INVERSE_FREQUENCY:
        out["class_weights"] = cw
    elif isinstance(cw, list):
        out["class_weights"] = [
            _float(w, f"training.class_weights[{i}]", errors, default=1.0, min_value=0.0) for i, w in enumerate(cw)
        ]
        if not any(w > 0 for w in out["class_weights"]):
            errors.append("training.class_weights: weights must not all be zero")
    else:
        errors.append(f"training.class_weights: expected list of numbers or '{INVERSE_FREQUENCY}', got {cw!r}")
        out["class_weights"] = None
    return out


def _validate_pretraining(cfg: Dict, errors) -> Dict:
    d = PRETRAINING_DEFAULTS
    _warn_unknown_keys("pretraining", cfg, set(d))
    return {
        "learning_rate": _float(
            cfg.get("learning_rate"),
            "pretraining.learning_rate",
            errors,
            default=d["learning_rate"],
            min_value=0.0,
            exclusive=True,
        ),
        "epochs": _int(cfg.get("epochs"), "pretraining.epochs", errors, default=d["epochs"], min_value=1),
        "batch_size": _int(cfg.get("batch_size"), "pretraining.batch_size", errors, default=d["batch_size"], min_value=1),
        "weight_decay": _float(
            cfg.get("weight_decay"), "pretraining.weight_decay", errors, default=d["weight_decay"], min_value=0.0
        ),
    }


def _validate_data(cfg: Dict, errors) -> Dict:
    _warn_unknown_keys("data", cfg, {"source", "tabular", "pan12", "pretrain_corpus", "train_fraction"})
    out: Dict = {}
    source = _str(cfg.get("source"), "data.source", errors, choices={"tabular", "pan12"})
    if not source:
        errors.append("data.source: required, one of ['pan12', 'tabular']")
    out["source"] = source
    out["train_fraction"] = _float(
        cfg.get("train_fraction"), "data.train_fraction", errors, default=0.8, min_value=0.0, max_value=1.0, exclusive=True
    )

    if source == "tabular":
        tab = _dict(cfg.get("tabular"), "data.tabular", errors)
        _warn_unknown_keys(
            "data.tabular", tab, {"path", "text_column", "label_column", "positive_token", "negative_token", "delimiter"}
        )
        out["tabular"] = {
            "path": _path(tab.get("path"), "data.tabular.path", errors),
            "text_column": _str(tab.get("text_column"), "data.tabular.text_column", errors, default="text"),
            "label_column": _str(tab.get("label_column"), "data.tabular.label_column", errors, default="label"),
            "positive_token": str(tab.get("positive_token", "1")),
            "negative_token": None if tab.get("negative_token") is None else str(tab.get("negative_token")),
            "delimiter": _str(tab.get("delimiter"), "data.tabular.delimiter", errors, default=","),
        }
        if len(out["tabular"]["delimiter"] or "") != 1:
            errors.append(f"data.tabular.delimiter: expected a single character, got {out['tabular']['delimiter']!r}")
    elif source == "pan12":
        pan = _dict(cfg.get("pan12"), "data.pan12", errors)
        keys = ("train_xml", "train_predators", "test_xml", "test_predators")
        _warn_unknown_keys("data.pan12", pan, set(keys))
        out["pan12"] = {k: _path(pan.get(k), f"data.pan12.{k}", errors) for k in keys}

    if cfg.get("pretrain_corpus") is not None:
        out["pretrain_corpus"] = _path(cfg.get("pretrain_corpus"), "data.pretrain_corpus", errors)
    return out


def _set_dotted(raw: Dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = raw
    for part in parts[:-1]:
        child = node.get(part)
        if not isinstance(child, dict):
            child = {}
            node[part] = child
        node = child
    node[parts[-1]] = value


def apply_overrides(raw: Dict, overrides: Optional[Dict[str, Any]]) -> Dict:
    """Returns a copy of `raw` with dotted-key overrides applied; None values are skipped."""
    merged = copy.deepcopy(raw)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key.split(".")[0] not in SECTIONS:
            raise ConfigError(f"override '{key}' does not name a configuration section")
        _set_dotted(merged, key, value)
        logger.debug(f"Override {key}={value!r}")
    return merged


def _build(sections: Dict[str, Dict], errors: List[str]) -> Optional[RunConfig]:
    g, m, t, lo, pt, tr, d = (sections[s] for s in SECTIONS)
    try:
        model = ModelConfig(vocab_size=t["vocab_size"], **m).validate()
        lora = LoraConfig(**{**lo, "target_matrices": tuple(lo["target_matrices"])}).validate()
        class_weights = tr["class_weights"]
        training = TrainingConfig(
            **{
                **tr,
                "adam_betas": tuple(tr["adam_betas"]),
                "class_weights": tuple(class_weights) if isinstance(class_weights, list) else class_weights,
                "seed": g["seed"],
            }
        ).validate()
        pretraining = TrainingConfig(
            **pt,
            adam_eps=training.adam_eps,
            adam_betas=training.adam_betas,
            seed=g["seed"],
            max_seq_len=training.max_seq_len,
        ).validate()
    except ConfigError as e:
        errors.extend(line[3:] for line in str(e).splitlines()[1:])
        return None
    if isinstance(training.class_weights, tuple) and len(training.class_weights) != model.n_classes:
        errors.append(
            f"training.class_weights: {len(training.class_weights)} weights for model.n_classes={model.n_classes}"
        )
        return None
    data = DataConfig(
        source=d["source"],
        tabular=TabularSource(**d["tabular"]) if d.get("tabular") else None,
        pan12=Pan12Source(**d["pan12"]) if d.get("pan12") else None,
        pretrain_corpus=d.get("pretrain_corpus"),
        train_fraction=d["train_fraction"],
    )
    return RunConfig(
        output_dir=g["output_dir"],
        seed=g["seed"],
        model=model,
        tokenizer=TokenizerConfig(vocab_size=t["vocab_size"]),
        lora=lora,
        pretraining=pretraining,
        training=training,
        data=data,
        log_dir=g.get("log_dir"),
        logging_level=g["logging_level"],
        logging_levels=g["logging_levels"],
        log_max_bytes=g["log_max_bytes"],
        log_backup_count=g["log_backup_count"],
    )


def validate_config(raw: Dict) -> RunConfig:
    errors: List[str] = []
    if not isinstance(raw, dict):
        raise ConfigError(f"Invalid configuration:\n - top level: expected mapping, got {type(raw).__name__}")
    _warn_unknown_keys("config", raw, set(SECTIONS))
    validators = {
        "global": _validate_global,
        "model": _validate_model,
        "tokenizer": _validate_tokenizer,
        "lora": _validate_lora,
        "pretraining": _validate_pretraining,
        "training": _validate_training,
        "data": _validate_data,
    }
    sections: Dict[str, Dict] = {}
    for name in SECTIONS:
        section = _dict(raw.get(name), name, errors)
        sections[name] = validators[name](section, errors)
        _log_config_diff(name, section, sections[name])

    run_config = None if errors else _build(sections, errors)
    if errors:
        msg = "Invalid configuration:\n" + "\n".join(f" - {e}" for e in errors)
        logger.error(msg)
        raise ConfigError(msg)
    return run_config


def config_load(config_file_path: str, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    try:
        with open(config_file_path, "r") as f:
            raw = yaml.safe_load(f) or {}
    except FileNotFoundError as e:
        logger.error(f"Configuration file {config_file_path} not found.")
        raise ConfigError(f"configuration file {config_file_path} not found") from e
    except OSError as e:
        logger.error(f"Cannot read configuration file {config_file_path}: {e}")
        raise ConfigError(f"cannot read {config_file_path}: {e.strerror or e}") from e
    except yaml.YAMLError as e:
        logger.error(f"Error parsing YAML configuration file {config_file_path}: {e}")
        raise ConfigError(f"cannot parse {config_file_path}: {e}") from e
    return validate_config(apply_overrides(raw, overrides))
