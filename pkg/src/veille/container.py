"""Versioned binary container for named float64 matrices.

Layout (all integers little-endian):

    magic        8 bytes   b"VEILLECK" (checkpoint) or b"VEILLELA" (adapters)
    version      uint32    currently 1
    header_len   uint64    length in bytes of the header that follows
    header       UTF-8 JSON, keys sorted, no whitespace:
                 {"meta": {...}, "tensors": [{"name", "shape", "trainable"}, ...]}
    payload      for each header tensor in order, its values as float64 ("<f8")
                 in row-major order

Nothing time- or host-dependent is written, so identical inputs give identical
bytes.
"""

import json
import os
import struct
from typing import Any, Dict, List, Tuple

import numpy as np

from veille.errors import DataError

CONTAINER_VERSION = 1
CHECKPOINT_MAGIC = b"VEILLECK"
ADAPTER_MAGIC = b"VEILLELA"

Entry = Tuple[str, np.ndarray, bool]


def write_container(path: str, magic: bytes, meta: Dict[str, Any], entries: List[Entry]) -> None:
    header = {
        "meta": meta,
        "tensors": [
            {"name": name, "shape": list(arr.shape), "trainable": bool(trainable)}
            for name, arr, trainable in entries
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<IQ", CONTAINER_VERSION, len(header_bytes)))
        f.write(header_bytes)
        for _, arr, _ in entries:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    os.replace(tmp_path, path)


def read_container(path: str, magic: bytes) -> Tuple[Dict[str, Any], List[Entry]]:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except FileNotFoundError as e:
        raise DataError(f"{path}: file not found") from e

    prefix = len(magic) + struct.calcsize("<IQ")
    if len(blob) < prefix or blob[: len(magic)] != magic:
        raise DataError(f"{path}: not a {magic.decode()} file")
    version, header_len = struct.unpack_from("<IQ", blob, len(magic))
    if version != CONTAINER_VERSION:
        raise DataError(f"{path}: unsupported container version {version}")
    try:
        header = json.loads(blob[prefix : prefix + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: corrupt header: {e}") from e

    offset = prefix + header_len
    entries: List[Entry] = []
    for spec in header.get("tensors", []):
        shape = tuple(int(d) for d in spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if offset + nbytes > len(blob):
            raise DataError(f"{path}: truncated payload at tensor '{spec['name']}'")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
        entries.append((spec["name"], arr.astype(np.float64), bool(spec["trainable"])))
        offset += nbytes
    if offset != len(blob):
        raise DataError(f"{path}: {len(blob) - offset} trailing bytes after payload")
    return header.get("meta", {}), entries
