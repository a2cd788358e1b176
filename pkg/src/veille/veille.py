#!/usr/bin/env python3
"""veille: byte-BPE tokenizer, small transformer and LoRA classifier pipeline.

Usage: veille <command> --config config.yaml [flags]

Commands: preprocess, train-tokenizer, pretrain, finetune, merge, evaluate,
predict, stats. Every command writes a manifest under <output_dir>/manifests.
"""

import dataclasses
import hashlib
import json
import logging
import os
import sys
from typing import Callable, Dict, List, Optional, Tuple

import yaml
from absl import app, flags

from veille import corpus, metrics, monitoring
from veille.config import RunConfig, config_load
from veille.corpus import FilterStats, LabeledDataset
from veille.errors import ConfigError, DataError, VeilleError
from veille.logging_utils import apply_module_levels, setup_logging
from veille.lora import inject, load_adapters, save_adapters
from veille.model import TransformerWeights, init_weights, load_checkpoint, save_checkpoint
from veille.tokenizer import BpeVocab, load_vocab, save_vocab, train_bpe
from veille.training import (
    check_vocab_compatible,
    evaluate_classifier,
    finetune_classifier,
    predict_texts,
    pretrain_lm,
)

logger = logging.getLogger(__name__)

if "config" not in flags.FLAGS:
    flags.DEFINE_string("config", "config.yaml", "path to YAML config file")
if "debug" not in flags.FLAGS:
    flags.DEFINE_boolean("debug", False, "Enable debug logging.")
flags.DEFINE_string("output_dir", None, "Overrides global.output_dir.")
flags.DEFINE_integer("seed", None, "Overrides global.seed.")
flags.DEFINE_integer("epochs", None, "Overrides the epoch count of the running phase.")
flags.DEFINE_float("learning_rate", None, "Overrides the learning rate of the running phase.")
flags.DEFINE_integer("batch_size", None, "Overrides the batch size of the running phase.")
flags.DEFINE_integer("vocab_size", None, "Overrides tokenizer.vocab_size.")
flags.DEFINE_float("train_fraction", None, "Overrides data.train_fraction (e.g. 0.8 or 0.9).")
flags.DEFINE_string("checkpoint", None, "Model checkpoint to read instead of the default one.")
flags.DEFINE_string("adapters", None, "Adapter file to attach to the checkpoint.")
flags.DEFINE_string("input", None, "Text file with one input per line, for predict.")

FLAGS = flags.FLAGS

USAGE = "usage: veille <preprocess|train-tokenizer|pretrain|finetune|merge|evaluate|predict|stats> [flags]"


class RunContext:
    """Records the inputs a command reads so the manifest can pin them by digest."""

    def __init__(self, command: str, config: RunConfig):
        self.command = command
        self.config = config
        self.inputs: Dict[str, str] = {}

    def input(self, path: str) -> str:
        path = os.path.abspath(path)
        if not os.path.exists(path):
            raise DataError(f"{self.command}: input {path} not found")
        digest = hashlib.sha256()
        try:
            with open(path, "rb") as f:
                for chunk in iter(lambda: f.read(1 << 20), b""):
                    digest.update(chunk)
        except OSError as e:
            raise DataError(f"{self.command}: cannot read input {path}: {e.strerror or e}") from e
        self.inputs[path] = digest.hexdigest()
        return path

    def output(self, *parts: str) -> str:
        path = self.config.path(*parts)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        return path

    def write_manifest(self) -> str:
        manifest = {
            "command": self.command,
            "seed": self.config.seed,
            "config": self.config.to_dict(),
            "inputs": dict(sorted(self.inputs.items())),
        }
        path = self.output("manifests", f"{self.command}.yaml")
        _write_text(path, yaml.safe_dump(manifest, sort_keys=True, allow_unicode=True))
        return path


# ---------------------------------------------------------------------------
# Shared loaders
# ---------------------------------------------------------------------------


def _load_source(ctx: RunContext) -> Tuple[LabeledDataset, LabeledDataset, Optional[Dict[str, FilterStats]]]:
    data = ctx.config.data
    if data.source == "pan12":
        p = data.pan12
        train_examples, train_filter = corpus.load_pan12_split(ctx.input(p.train_xml), ctx.input(p.train_predators))
        test_examples, test_filter = corpus.load_pan12_split(ctx.input(p.test_xml), ctx.input(p.test_predators))
        train = LabeledDataset(tuple(train_examples), name="pan12", split="train")
        test = LabeledDataset(tuple(test_examples), name="pan12", split="test")
        return train, test, {"train": train_filter, "test": test_filter}
    t = data.tabular
    examples = corpus.load_tabular(
        ctx.input(t.path), t.text_column, t.label_column, t.positive_token, t.negative_token, t.delimiter
    )
    train, test = corpus.split_dataset(examples, data.train_fraction, ctx.config.seed)
    return train, test, None


def _load_split(ctx: RunContext, split: str) -> LabeledDataset:
    path = ctx.config.path("datasets", f"{split}.tsv")
    if not os.path.exists(path):
        raise DataError(f"{path} not found; run 'veille preprocess' first")
    return LabeledDataset(tuple(corpus.load_examples(ctx.input(path))), split=split)


def _load_vocab(ctx: RunContext) -> BpeVocab:
    path = ctx.config.path("tokenizer", "vocab.bpe")
    if not os.path.exists(path):
        raise DataError(f"{path} not found; run 'veille train-tokenizer' first")
    return load_vocab(ctx.input(path))


def _pretrain_corpus(ctx: RunContext) -> List[str]:
    source = ctx.config.data.pretrain_corpus
    if not source:
        return _load_split(ctx, "train").texts
    return [line for line in _read_lines(ctx.input(source)) if line.strip()]


def _base_checkpoint(ctx: RunContext) -> str:
    return FLAGS.checkpoint or ctx.config.path("checkpoints", "base.ckpt")


def _load_classifier(ctx: RunContext):
    """Explicit flags win; otherwise a merged checkpoint, else base plus adapters."""
    checkpoint, adapters = FLAGS.checkpoint, FLAGS.adapters
    if checkpoint is None:
        merged = ctx.config.path("checkpoints", "merged.ckpt")
        if adapters is None and os.path.exists(merged):
            checkpoint = merged
        else:
            checkpoint = ctx.config.path("checkpoints", "base.ckpt")
            adapters = adapters or ctx.config.path("adapters", "adapters.lora")
    weights = load_checkpoint(ctx.input(checkpoint))
    if adapters:
        return load_adapters(weights, ctx.input(adapters))
    return weights


def _read_lines(path: str) -> List[str]:
    """Lines of a UTF-8 text file without their line terminators."""
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            content = f.read()
    except UnicodeDecodeError as e:
        raise DataError(f"{path}: not valid UTF-8 at byte offset {e.start}") from e
    except OSError as e:
        raise DataError(f"cannot read {path}: {e.strerror or e}") from e
    lines = content.split("\n")
    if lines[-1] == "":
        lines.pop()
    return [line[:-1] if line.endswith("\r") else line for line in lines]


def _write_text(path: str, text: str) -> None:
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    os.replace(tmp_path, path)


def _write_json(path: str, payload) -> None:
    _write_text(path, json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=False) + "\n")


def _stats_table(rows: Dict[str, corpus.DatasetStats]) -> str:
    header = ("split", "total", "positives", "negatives", "min_len", "max_len", "imbalance_pct")
    lines = [header]
    for name, s in rows.items():
        imbalance = "n/a" if s.imbalance_pct is None else f"{s.imbalance_pct:.2f}"
        lines.append((name, str(s.total), str(s.positives), str(s.negatives), str(s.min_len), str(s.max_len), imbalance))
    widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip() for line in lines) + "\n"


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _split_stats(train: LabeledDataset, test: LabeledDataset) -> Dict[str, corpus.DatasetStats]:
    return {
        "train": train.stats,
        "test": test.stats,
        "all": LabeledDataset.concat([train, test]).stats,
    }


def cmd_preprocess(ctx: RunContext) -> None:
    train, test, filters = _load_source(ctx)
    corpus.save_examples(ctx.output("datasets", "train.tsv"), train)
    corpus.save_examples(ctx.output("datasets", "test.tsv"), test)
    stats = {k: v.to_dict() for k, v in _split_stats(train, test).items()}
    if filters:
        stats["filter"] = {k: v.to_dict() for k, v in filters.items()}
    _write_json(ctx.output("datasets", "stats.json"), stats)
    logger.info(f"Wrote {len(train)} training and {len(test)} test examples under {ctx.config.path('datasets')}")


def cmd_stats(ctx: RunContext) -> None:
    train, test, filters = _load_source(ctx)
    sys.stdout.write(_stats_table(_split_stats(train, test)))
    for split, f in (filters or {}).items():
        sys.stdout.write(
            f"{split}: kept {f.kept} of {f.total} conversations "
            f"(removed {f.removed_authors} by author count, {f.removed_short} by length)\n"
        )


def cmd_train_tokenizer(ctx: RunContext) -> None:
    texts = _load_split(ctx, "train").texts
    if ctx.config.data.pretrain_corpus:
        texts = _pretrain_corpus(ctx) + texts
    vocab = train_bpe(texts, ctx.config.tokenizer.vocab_size, ctx.config.seed)
    save_vocab(vocab, ctx.output("tokenizer", "vocab.bpe"))
    logger.info(f"Tokenizer has {vocab.size} tokens ({len(vocab.merges)} merges)")


def cmd_pretrain(ctx: RunContext) -> None:
    vocab = _load_vocab(ctx)
    model_config = dataclasses.replace(ctx.config.model, vocab_size=vocab.size)
    weights = init_weights(model_config, ctx.config.seed)
    weights, log = pretrain_lm(weights, vocab, _pretrain_corpus(ctx), ctx.config.pretraining)
    save_checkpoint(weights, ctx.output("checkpoints", "base.ckpt"))
    log.write(ctx.output("logs", "pretrain_log.jsonl"), ctx.output("logs", "pretrain_timings.jsonl"))


def cmd_finetune(ctx: RunContext) -> None:
    vocab = _load_vocab(ctx)
    weights = load_checkpoint(ctx.input(_base_checkpoint(ctx)))
    check_vocab_compatible(vocab, weights.config)
    train = _load_split(ctx, "train")
    model = inject(weights, ctx.config.lora, ctx.config.seed)
    model, log = finetune_classifier(model, vocab, train, ctx.config.training)
    save_adapters(model, ctx.output("adapters", "adapters.lora"))
    log.write(ctx.output("logs", "finetune_log.jsonl"), ctx.output("logs", "finetune_timings.jsonl"))


def cmd_merge(ctx: RunContext) -> None:
    weights = load_checkpoint(ctx.input(_base_checkpoint(ctx)))
    adapters = FLAGS.adapters or ctx.config.path("adapters", "adapters.lora")
    merged: TransformerWeights = load_adapters(weights, ctx.input(adapters)).merge()
    save_checkpoint(merged, ctx.output("checkpoints", "merged.ckpt"))


def cmd_evaluate(ctx: RunContext) -> None:
    vocab = _load_vocab(ctx)
    model = _load_classifier(ctx)
    check_vocab_compatible(vocab, model.config)
    test = _load_split(ctx, "test")
    evaluation = evaluate_classifier(model, vocab, test, ctx.config.training)
    if evaluation.confusion is None:
        raise ConfigError("evaluate: metrics are defined for binary classifiers only")
    cm = evaluation.confusion
    rep = metrics.report(cm)
    text = (
        f"examples: {cm.total}  TP={cm.tp} TN={cm.tn} FP={cm.fp} FN={cm.fn}\n\n"
        + metrics.render_table(rep, "fraction")
        + "\n"
        + metrics.render_table(rep, "percent")
    )
    _write_text(ctx.output("reports", "metrics.txt"), text)
    _write_text(
        ctx.output("reports", "metrics.jsonl"),
        "".join(json.dumps(record, sort_keys=True) + "\n" for record in metrics.report_records(rep, cm)),
    )
    monitoring.record_evaluation(rep.to_dict())
    sys.stdout.write(text)


def cmd_predict(ctx: RunContext) -> None:
    if not FLAGS.input:
        raise ConfigError("predict: --input is required")
    texts = _read_lines(ctx.input(FLAGS.input))
    vocab = _load_vocab(ctx)
    model = _load_classifier(ctx)
    predictions, probabilities = predict_texts(model, vocab, texts, ctx.config.training)
    _write_text(
        ctx.output("predictions.jsonl"),
        "".join(
            json.dumps({"text": text, "label": label, "probabilities": probs}, ensure_ascii=False) + "\n"
            for text, label, probs in zip(texts, predictions, probabilities)
        ),
    )
    logger.info(f"Wrote {len(texts)} predictions ({sum(predictions)} positive)")


COMMANDS: Dict[str, Callable[[RunContext], None]] = {
    "preprocess": cmd_preprocess,
    "train-tokenizer": cmd_train_tokenizer,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "merge": cmd_merge,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "stats": cmd_stats,
}


def _overrides(command: str) -> Dict:
    phase = "pretraining" if command == "pretrain" else "training"
    return {
        "global.output_dir": FLAGS.output_dir,
        "global.seed": FLAGS.seed,
        f"{phase}.epochs": FLAGS.epochs,
        f"{phase}.learning_rate": FLAGS.learning_rate,
        f"{phase}.batch_size": FLAGS.batch_size,
        "tokenizer.vocab_size": FLAGS.vocab_size,
        "data.train_fraction": FLAGS.train_fraction,
    }


def dispatch(args: List[str]) -> int:
    """Runs one command on already-parsed flags and returns the exit code."""
    setup_logging(level="DEBUG" if FLAGS.debug else "INFO")
    if len(args) != 1 or args[0] not in COMMANDS:
        logger.error(f"expected exactly one command, got {args}\n{USAGE}")
        return 2
    command = args[0]
    try:
        config = config_load(FLAGS.config, _overrides(command))
        setup_logging(
            config.log_dir,
            "DEBUG" if FLAGS.debug else config.logging_level,
            log_max_bytes=config.log_max_bytes,
            log_backup_count=config.log_backup_count,
        )
        apply_module_levels(config.logging_levels)
        ctx = RunContext(command, config)
        ctx.input(FLAGS.config)
        COMMANDS[command](ctx)
        manifest = ctx.write_manifest()
        monitoring.write_metrics(ctx.output("metrics.prom"))
    except VeilleError as e:
        logger.error(f"{e.category}: {e}")
        return 1
    except OSError as e:
        logger.error(f"i/o error: {e}")
        return 1
    logger.info(f"{command} finished; manifest {manifest}")
    return 0


def cli_dispatch(argv: List[str]) -> int:
    """Parses `argv` (program name first) from scratch and runs the command."""
    FLAGS.unparse_flags()
    try:
        remaining = FLAGS(argv)
    except flags.Error as e:
        sys.stderr.write(f"usage error: {e}\n{USAGE}\n")
        return 2
    return dispatch(remaining[1:])


def _parse_flags(argv: List[str]) -> List[str]:
    try:
        return FLAGS(argv)
    except flags.Error as e:
        sys.stderr.write(f"usage error: {e}\n{USAGE}\n")
        sys.exit(2)


def main(argv):
    return dispatch(argv[1:])


def run():
    app.run(main, flags_parser=_parse_flags)


if __name__ == "__main__":
    run()
