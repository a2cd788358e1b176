"""Byte-level BPE: every UTF-8 byte is a base token, merges are learned greedily.

There is no pre-tokenization, so merges may span spaces and any script is
representable without special handling.
"""

import heapq
import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Set, Tuple

from veille.errors import ConfigError, DataError

logger = logging.getLogger(__name__)

N_BYTE_TOKENS = 256
N_SPECIAL_TOKENS = 1
MIN_VOCAB_SIZE = N_BYTE_TOKENS + N_SPECIAL_TOKENS
DEFAULT_VOCAB_SIZE = 2048
VOCAB_FILE_MAGIC = "veille-bpe"
VOCAB_FILE_VERSION = 1

Pair = Tuple[bytes, bytes]


@dataclass(frozen=True)
class BpeVocab:
    merges: Tuple[Pair, ...]
    tokens: Tuple[bytes, ...] = field(init=False, repr=False)
    token_to_id: Dict[bytes, int] = field(init=False, repr=False, compare=False)
    ranks: Dict[Pair, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        tokens = [bytes([b]) for b in range(N_BYTE_TOKENS)]
        token_to_id = {t: i for i, t in enumerate(tokens)}
        for left, right in self.merges:
            if left not in token_to_id or right not in token_to_id:
                raise DataError(f"merge ({left!r}, {right!r}) uses a token not yet in the vocabulary")
            merged = left + right
            if merged in token_to_id:
                raise DataError(f"merge ({left!r}, {right!r}) duplicates token {merged!r}")
            token_to_id[merged] = len(tokens)
            tokens.append(merged)
        object.__setattr__(self, "tokens", tuple(tokens))
        object.__setattr__(self, "token_to_id", token_to_id)
        object.__setattr__(self, "ranks", {pair: i for i, pair in enumerate(self.merges)})

    @property
    def pad_id(self) -> int:
        return len(self.tokens)

    @property
    def size(self) -> int:
        return len(self.tokens) + N_SPECIAL_TOKENS


def _pair_counts(sequences: Dict[int, List[bytes]], weights: Dict[int, int]):
    counts: Counter = Counter()
    where: Dict[Pair, Set[int]] = {}
    for idx, seq in sequences.items():
        w = weights[idx]
        for pair in zip(seq, seq[1:]):
            counts[pair] += w
            where.setdefault(pair, set()).add(idx)
    return counts, where


def _merge_sequence(seq: List[bytes], pair: Pair) -> List[bytes]:
    left, right = pair
    merged = left + right
    out = []
    i = 0
    while i < len(seq):
        if i + 1 < len(seq) and seq[i] == left and seq[i + 1] == right:
            out.append(merged)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return out


def train_bpe(corpus: Sequence[str], vocab_size: int = DEFAULT_VOCAB_SIZE, seed: int = 0) -> BpeVocab:
    """Learns merges until `vocab_size` is reached or no adjacent pair repeats.

    The most frequent pair wins; ties go to the lexicographically smallest
    (left, right) pair, so the result does not depend on `seed` or on dict order.
    `seed` is accepted for interface symmetry with the other trainers.
    """
    del seed
    if vocab_size < MIN_VOCAB_SIZE:
        raise ConfigError(f"tokenizer.vocab_size must be >= {MIN_VOCAB_SIZE}, got {vocab_size}")
    if not corpus:
        raise DataError("train_bpe: corpus is empty")

    distinct = Counter(corpus)
    sequences: Dict[int, List[bytes]] = {}
    weights: Dict[int, int] = {}
    for idx, (text, count) in enumerate(sorted(distinct.items())):
        sequences[idx] = [bytes([b]) for b in text.encode("utf-8")]
        weights[idx] = count

    counts, where = _pair_counts(sequences, weights)
    heap = [(-c, pair) for pair, c in counts.items()]
    heapq.heapify(heap)

    target_merges = vocab_size - MIN_VOCAB_SIZE
    merges: List[Pair] = []
    known: Set[bytes] = {bytes([b]) for b in range(N_BYTE_TOKENS)}
    # Pairs whose concatenation already exists under another split stay unmerged.
    banned: Set[Pair] = set()
    while len(merges) < target_merges and heap:
        neg_count, pair = heapq.heappop(heap)
        if pair in banned or counts.get(pair, 0) != -neg_count:
            continue  # stale entry
        if -neg_count < 2:
            break
        if pair[0] + pair[1] in known:
            banned.add(pair)
            continue
        merges.append(pair)
        known.add(pair[0] + pair[1])
        touched: Set[Pair] = set()
        for idx in sorted(where.pop(pair, ())):
            seq, w = sequences[idx], weights[idx]
            for old in zip(seq, seq[1:]):
                counts[old] -= w
                touched.add(old)
            seq = _merge_sequence(seq, pair)
            sequences[idx] = seq
            for new in zip(seq, seq[1:]):
                counts[new] += w
                where.setdefault(new, set()).add(idx)
                touched.add(new)
        for p in sorted(touched):
            if p in banned:
                continue
            c = counts.get(p, 0)
            if c <= 0:
                counts.pop(p, None)
                where.pop(p, None)
            else:
                heapq.heappush(heap, (-c, p))
    logger.info(f"Learned {len(merges)} merges from {len(corpus)} documents")
    return BpeVocab(merges=tuple(merges))


def encode(vocab: BpeVocab, text: str) -> List[int]:
    seq = [bytes([b]) for b in text.encode("utf-8")]
    ranks = vocab.ranks
    while len(seq) > 1:
        best = min(
            (ranks[p] for p in zip(seq, seq[1:]) if p in ranks),
            default=None,
        )
        if best is None:
            break
        seq = _merge_sequence(seq, vocab.merges[best])
    return [vocab.token_to_id[t] for t in seq]


def decode(vocab: BpeVocab, ids: Iterable[int]) -> str:
    chunks = []
    for i in ids:
        if i == vocab.pad_id:
            continue
        if not 0 <= i < len(vocab.tokens):
            raise DataError(f"decode: unknown token id {i} (vocabulary size {vocab.size})")
        chunks.append(vocab.tokens[i])
    raw = b"".join(chunks)
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise DataError(f"decode: invalid UTF-8 at byte offset {e.start}") from e


def encode_for_model(vocab: BpeVocab, text: str, max_len: int, keep: str = "tail") -> List[int]:
    """Encodes and truncates; an empty text becomes a single padding token."""
    ids = encode(vocab, text) or [vocab.pad_id]
    return truncate(ids, max_len, keep)


def truncate(ids: Sequence[int], max_len: int, keep: str = "tail") -> List[int]:
    if keep not in ("tail", "head"):
        raise ConfigError(f"truncation must be 'tail' or 'head', got '{keep}'")
    if len(ids) <= max_len:
        return list(ids)
    return list(ids[-max_len:]) if keep == "tail" else list(ids[:max_len])


def save_vocab(vocab: BpeVocab, path: str) -> None:
    lines = [f"{VOCAB_FILE_MAGIC} {VOCAB_FILE_VERSION} {vocab.size} {len(vocab.merges)}"]
    lines.extend(f"{left.hex()} {right.hex()}" for left, right in vocab.merges)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "w", encoding="ascii", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
    os.replace(tmp_path, path)


def load_vocab(path: str) -> BpeVocab:
    try:
        with open(path, "r", encoding="ascii") as f:
            lines = f.read().splitlines()
    except FileNotFoundError as e:
        raise DataError(f"vocabulary file {path} not found") from e
    except UnicodeDecodeError as e:
        raise DataError(f"vocabulary file {path} is not ASCII") from e
    if not lines:
        raise DataError(f"{path}: empty vocabulary file")
    header = lines[0].split()
    if len(header) != 4 or header[0] != VOCAB_FILE_MAGIC:
        raise DataError(f"{path}:1: not a vocabulary file header: '{lines[0]}'")
    if header[1] != str(VOCAB_FILE_VERSION):
        raise DataError(f"{path}:1: unsupported vocabulary version {header[1]}")
    try:
        size, n_merges = int(header[2]), int(header[3])
    except ValueError as e:
        raise DataError(f"{path}:1: size fields must be integers: '{lines[0]}'") from e
    merges = []
    for line_no, line in enumerate(lines[1:], start=2):
        parts = line.split()
        try:
            left, right = (bytes.fromhex(p) for p in parts)
        except ValueError as e:
            raise DataError(f"{path}:{line_no}: malformed merge line '{line}'") from e
        merges.append((left, right))
    if len(merges) != n_merges:
        raise DataError(f"{path}: header announces {n_merges} merges, found {len(merges)}")
    vocab = BpeVocab(merges=tuple(merges))
    if vocab.size != size:
        raise DataError(f"{path}: header size {size} disagrees with {vocab.size} tokens")
    return vocab
