"""Chat-log and comment corpora: parsing, filtering, labeling, splitting, statistics."""

import csv
import logging
import os
import re
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Set, Tuple

import numpy as np
from lxml import etree

from veille.errors import ConfigError, DataError, ParseError, SchemaError

logger = logging.getLogger(__name__)

MIN_MESSAGES = 7
REQUIRED_AUTHORS = 2


@dataclass(frozen=True)
class Message:
    author_id: str
    line_no: int
    text: str
    time: Optional[str] = None


@dataclass(frozen=True)
class Conversation:
    id: str
    messages: Tuple[Message, ...]

    @property
    def authors(self) -> Set[str]:
        return {m.author_id for m in self.messages}


@dataclass(frozen=True)
class LabeledExample:
    text: str
    label: int
    source_id: Optional[str] = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {self.label!r}")


@dataclass(frozen=True)
class DatasetStats:
    total: int
    positives: int
    negatives: int
    min_len: int
    max_len: int
    imbalance_pct: Optional[float]

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass(frozen=True)
class FilterStats:
    total: int
    kept: int
    removed_authors: int
    removed_short: int

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass(frozen=True)
class LabeledDataset:
    examples: Tuple[LabeledExample, ...]
    name: str = ""
    split: Optional[str] = None
    metadata: Dict = field(default_factory=dict, compare=False)

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self) -> Iterator[LabeledExample]:
        return iter(self.examples)

    @property
    def texts(self) -> List[str]:
        return [e.text for e in self.examples]

    @property
    def labels(self) -> List[int]:
        return [e.label for e in self.examples]

    @property
    def stats(self) -> DatasetStats:
        return dataset_stats(self.examples)

    @classmethod
    def concat(cls, parts: Sequence["LabeledDataset"], name: str = "") -> "LabeledDataset":
        examples: Tuple[LabeledExample, ...] = tuple(e for p in parts for e in p.examples)
        return cls(examples=examples, name=name)


# ---------------------------------------------------------------------------
# PAN12 chat logs
# ---------------------------------------------------------------------------


def _message_from_element(elem, conv_id: str, index: int) -> Message:
    author = elem.findtext("author")
    if author is None or not author.strip():
        raise SchemaError(f"conversation '{conv_id}': message {index + 1} has no author")
    line = elem.get("line")
    try:
        line_no = int(line) if line is not None else index + 1
    except ValueError as e:
        raise SchemaError(f"conversation '{conv_id}': message line attribute '{line}' is not an integer") from e
    return Message(
        author_id=author.strip(),
        line_no=line_no,
        text=elem.findtext("text") or "",
        time=elem.findtext("time"),
    )


def parse_pan12_xml(path: str) -> List[Conversation]:
    """Reads every <conversation> of a PAN12 file; fails without partial output."""
    if not os.path.exists(path):
        raise DataError(f"PAN12 file {path} not found")
    conversations: List[Conversation] = []
    seen: Set[str] = set()
    try:
        for _, elem in etree.iterparse(path, events=("end",), tag="conversation", huge_tree=True):
            conv_id = elem.get("id")
            if not conv_id:
                raise SchemaError(f"{path}: conversation on line {elem.sourceline} has no id")
            if conv_id in seen:
                raise SchemaError(f"{path}: duplicate conversation id '{conv_id}'")
            seen.add(conv_id)
            messages = tuple(_message_from_element(m, conv_id, i) for i, m in enumerate(elem.iterfind("message")))
            conversations.append(Conversation(id=conv_id, messages=messages))
            elem.clear()
    except etree.XMLSyntaxError as e:
        line, column = e.position if e.position else (e.lineno or 0, 0)
        raise ParseError(f"{path}: malformed XML: {e.msg}", line=line, column=column) from e
    logger.info(f"Parsed {len(conversations)} conversations from {path}")
    return conversations


def filter_conversations(conversations: Iterable[Conversation]) -> Tuple[List[Conversation], FilterStats]:
    """Keeps two-author conversations with at least MIN_MESSAGES messages."""
    kept: List[Conversation] = []
    total = removed_authors = removed_short = 0
    for conv in conversations:
        total += 1
        if len(conv.authors) != REQUIRED_AUTHORS:
            removed_authors += 1
        elif len(conv.messages) < MIN_MESSAGES:
            removed_short += 1
        else:
            kept.append(conv)
    stats = FilterStats(total=total, kept=len(kept), removed_authors=removed_authors, removed_short=removed_short)
    logger.info(
        f"Kept {stats.kept} of {total} conversations "
        f"({removed_authors} removed for author count, {removed_short} for length)"
    )
    return kept, stats


def render_conversation(conv: Conversation) -> str:
    return "\n".join(f"{m.author_id}: {m.text}" for m in conv.messages)


def label_conversations(conversations: Iterable[Conversation], predator_ids: Set[str]) -> List[LabeledExample]:
    if not predator_ids:
        raise DataError("label_conversations: predator id list is empty")
    return [
        LabeledExample(
            text=render_conversation(conv),
            label=int(bool(conv.authors & predator_ids)),
            source_id=conv.id,
        )
        for conv in conversations
    ]


def load_predator_ids(path: str) -> Set[str]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            ids = {line.strip() for line in f if line.strip()}
    except FileNotFoundError as e:
        raise DataError(f"predator id file {path} not found") from e
    logger.info(f"Loaded {len(ids)} predator ids from {path}")
    return ids


def load_pan12_split(xml_path: str, predator_ids_path: str) -> Tuple[List[LabeledExample], FilterStats]:
    predator_ids = load_predator_ids(predator_ids_path)
    kept, stats = filter_conversations(parse_pan12_xml(xml_path))
    return label_conversations(kept, predator_ids), stats


# ---------------------------------------------------------------------------
# Tabular comment datasets
# ---------------------------------------------------------------------------


def load_tabular(
    path: str,
    text_column: str,
    label_column: str,
    positive_token: str,
    negative_token: Optional[str] = None,
    delimiter: str = ",",
) -> List[LabeledExample]:
    """Rows of a delimited UTF-8 file with header; label 1 iff the cell equals positive_token.

    With negative_token set, any other label value is rejected. Without it, every
    other value is negative and a warning lists them when there is more than one.
    """
    examples: List[LabeledExample] = []
    negatives_seen: Set[str] = set()
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            reader = csv.DictReader(f, delimiter=delimiter, strict=True)
            header = reader.fieldnames or []
            for column in (text_column, label_column):
                if column not in header:
                    raise SchemaError(f"{path}: missing column '{column}' (columns: {header})")
            for row in reader:
                row_no = reader.line_num
                if None in row or any(v is None for v in row.values()):
                    raise DataError(f"{path}: row {row_no} has {len(header)} expected fields but a different count")
                token = row[label_column].strip()
                if negative_token is not None and token not in (positive_token, negative_token):
                    raise DataError(
                        f"{path}: row {row_no} has unknown label '{token}' "
                        f"(expected '{positive_token}' or '{negative_token}')"
                    )
                if token != positive_token:
                    negatives_seen.add(token)
                examples.append(
                    LabeledExample(text=row[text_column], label=int(token == positive_token), source_id=str(row_no))
                )
    except FileNotFoundError as e:
        raise DataError(f"dataset file {path} not found") from e
    except UnicodeDecodeError as e:
        raise DataError(f"{path}: not valid UTF-8 at byte offset {e.start}") from e
    except csv.Error as e:
        raise DataError(f"{path}: unparseable row: {e}") from e
    except OSError as e:
        raise DataError(f"cannot read dataset file {path}: {e.strerror or e}") from e
    if negative_token is None and len(negatives_seen) > 1:
        logger.warning(
            f"{path}: no negative label token configured; treating every label other than "
            f"'{positive_token}' as negative: {sorted(negatives_seen)}"
        )
    logger.info(f"Loaded {len(examples)} examples from {path}")
    return examples


# ---------------------------------------------------------------------------
# Splits and statistics
# ---------------------------------------------------------------------------


def split_dataset(
    examples: Sequence[LabeledExample], train_fraction: float, seed: int
) -> Tuple[LabeledDataset, LabeledDataset]:
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    if not examples:
        raise DataError("split_dataset: no examples to split")
    n = len(examples)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(train_fraction * n + 0.5)
    meta = {"seed": seed, "train_fraction": train_fraction}
    train = LabeledDataset(tuple(examples[i] for i in order[:n_train]), split="train", metadata=meta)
    test = LabeledDataset(tuple(examples[i] for i in order[n_train:]), split="test", metadata=meta)
    return train, test


def dataset_stats(examples: Iterable[LabeledExample]) -> DatasetStats:
    examples = list(examples)
    positives = sum(e.label for e in examples)
    negatives = len(examples) - positives
    lengths = [len(e.text) for e in examples]
    return DatasetStats(
        total=len(examples),
        positives=positives,
        negatives=negatives,
        min_len=min(lengths, default=0),
        max_len=max(lengths, default=0),
        imbalance_pct=100.0 * positives / negatives if negatives else None,
    )


# ---------------------------------------------------------------------------
# Processed dataset files: "<label>\t<escaped text>\n"
# ---------------------------------------------------------------------------

_ESCAPES = {"\\": "\\\\", "\n": "\\n", "\r": "\\r", "\t": "\\t"}
_UNESCAPES = {v[1]: k for k, v in _ESCAPES.items()}
_ESCAPE_RE = re.compile(r"[\\\n\r\t]")
_UNESCAPE_RE = re.compile(r"\\(.?)", re.DOTALL)


def escape_text(text: str) -> str:
    return _ESCAPE_RE.sub(lambda m: _ESCAPES[m.group(0)], text)


def unescape_text(text: str) -> str:
    def _sub(m):
        if m.group(1) not in _UNESCAPES:
            raise ValueError(f"unknown escape '\\{m.group(1)}'" if m.group(1) else "dangling backslash")
        return _UNESCAPES[m.group(1)]

    return _UNESCAPE_RE.sub(_sub, text)


def save_examples(path: str, examples: Iterable[LabeledExample]) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "w", encoding="utf-8", newline="\n") as f:
        for e in examples:
            f.write(f"{e.label}\t{escape_text(e.text)}\n")
    os.replace(tmp_path, path)


def load_examples(path: str) -> List[LabeledExample]:
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            content = f.read()
    except FileNotFoundError as e:
        raise DataError(f"dataset file {path} not found") from e
    except UnicodeDecodeError as e:
        raise DataError(f"{path}: not valid UTF-8 at byte offset {e.start}") from e
    lines = content.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    examples = []
    for line_no, line in enumerate(lines, start=1):
        label, sep, text = line.partition("\t")
        if not sep or label not in ("0", "1"):
            raise DataError(f"{path}:{line_no}: expected '<0|1>\\t<text>', got '{line[:40]}'")
        try:
            examples.append(LabeledExample(text=unescape_text(text), label=int(label)))
        except ValueError as e:
            raise DataError(f"{path}:{line_no}: {e}") from e
    return examples
