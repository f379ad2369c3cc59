"""One-hot encoding of RNA sequences for the CNN input layer."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from premirna.sequence_io import ALPHABET, MAX_LENGTH, RnaSequence

_BASE_INDEX = {b: i for i, b in enumerate(ALPHABET)}
_DUMP_MAGIC = b"PMOH"


@dataclass(frozen=True)
class OneHotMatrix:
    values: np.ndarray  # (4, width), rows A, C, G, U
    valid_length: int

    def decode(self) -> str:
        cols = self.values[:, : self.valid_length]
        return "".join(ALPHABET[i] for i in cols.argmax(axis=0))


def one_hot_encode(seq: RnaSequence | str, width: int = MAX_LENGTH) -> OneHotMatrix:
    """Encode ``seq`` as a 4 x width 0/1 matrix, zero-padded on the right."""
    bases = seq.bases if isinstance(seq, RnaSequence) else seq
    if len(bases) > width:
        raise ValueError(f"sequence of length {len(bases)} exceeds encoder width {width}")
    values = np.zeros((4, width), dtype=np.float64)
    idx = np.fromiter((_BASE_INDEX[b] for b in bases), dtype=np.int64, count=len(bases))
    values[idx, np.arange(len(bases))] = 1.0
    return OneHotMatrix(values, len(bases))


def encode_batch(seqs, width: int = MAX_LENGTH) -> np.ndarray:
    """Stack encodings into a ``(n, 4, width)`` float64 array."""
    out = np.zeros((len(seqs), 4, width), dtype=np.float64)
    for n, seq in enumerate(seqs):
        out[n] = one_hot_encode(seq, width).values
    return out


def dump_onehot(matrices: list[OneHotMatrix], path) -> None:
    """Cache encodings: magic, JSON header line, then row-major uint8 entries."""
    width = matrices[0].values.shape[1] if matrices else MAX_LENGTH
    header = {
        "version": 1,
        "count": len(matrices),
        "rows": 4,
        "width": width,
        "valid_lengths": [m.valid_length for m in matrices],
    }
    with open(path, "wb") as fh:
        fh.write(_DUMP_MAGIC)
        fh.write(json.dumps(header).encode() + b"\n")
        for m in matrices:
            fh.write(m.values.astype(np.uint8).tobytes(order="C"))


def load_onehot(path) -> list[OneHotMatrix]:
    data = Path(path).read_bytes()
    if not data.startswith(_DUMP_MAGIC):
        raise ValueError(f"{path}: not a one-hot dump")
    nl = data.index(b"\n", len(_DUMP_MAGIC))
    header = json.loads(data[len(_DUMP_MAGIC):nl])
    if header.get("version") != 1:
        raise ValueError(f"{path}: unsupported dump version {header.get('version')}")
    rows, width, count = header["rows"], header["width"], header["count"]
    payload = np.frombuffer(data[nl + 1:], dtype=np.uint8)
    if payload.size != count * rows * width:
        raise ValueError(f"{path}: truncated payload")
    arr = payload.reshape(count, rows, width).astype(np.float64)
    return [OneHotMatrix(arr[i], n) for i, n in enumerate(header["valid_lengths"])]
