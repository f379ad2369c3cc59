"""FASTA ingestion and labeled dataset containers."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

MAX_LENGTH = 160
ALPHABET = "ACGU"
POSITIVE = "positive"
NEGATIVE = "negative"
LABELS = (POSITIVE, NEGATIVE)


class SequenceError(ValueError):
    """Raised for malformed FASTA input or invalid sequences."""


@dataclass(frozen=True)
class RnaSequence:
    id: str
    bases: str

    def __post_init__(self):
        if not self.id:
            raise SequenceError("sequence id must be non-empty")
        if not 1 <= len(self.bases) <= MAX_LENGTH:
            raise SequenceError(
                f"{self.id}: length {len(self.bases)} outside 1..{MAX_LENGTH}"
            )
        bad = set(self.bases) - set(ALPHABET)
        if bad:
            raise SequenceError(f"{self.id}: invalid bases {sorted(bad)}")

    @property
    def length(self) -> int:
        return len(self.bases)

    def __len__(self):
        return len(self.bases)


@dataclass(frozen=True)
class LabeledDataset:
    """Immutable list of ``(RnaSequence, label)`` pairs.

    Labels are ``"positive"`` or ``"negative"``; ``None`` marks an
    unlabeled (prediction-mode) example.
    """

    examples: tuple = ()
    provenance: str = ""
    _index: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        examples = tuple(self.examples)
        object.__setattr__(self, "examples", examples)
        index = {}
        for i, (seq, label) in enumerate(examples):
            if label is not None and label not in LABELS:
                raise SequenceError(f"{seq.id}: unknown label {label!r}")
            if seq.id in index:
                raise SequenceError(f"duplicate id {seq.id!r}")
            index[seq.id] = i
        object.__setattr__(self, "_index", index)

    def __len__(self):
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, i):
        return self.examples[i]

    @property
    def ids(self) -> list[str]:
        return [s.id for s, _ in self.examples]

    @property
    def sequences(self) -> list[RnaSequence]:
        return [s for s, _ in self.examples]

    @property
    def labels(self) -> list:
        return [lab for _, lab in self.examples]

    def y(self) -> np.ndarray:
        """Labels as an int array, positive = 1."""
        return np.array([1 if lab == POSITIVE else 0 for lab in self.labels], dtype=np.int64)

    def count(self, label: str) -> int:
        return sum(1 for lab in self.labels if lab == label)

    def index_of(self, seq_id: str) -> int:
        return self._index[seq_id]

    def subset(self, ids: Iterable[str], provenance: str | None = None) -> "LabeledDataset":
        picked = [self.examples[self._index[i]] for i in ids]
        return LabeledDataset(picked, provenance if provenance is not None else self.provenance)

    def take(self, indices: Sequence[int]) -> "LabeledDataset":
        return LabeledDataset([self.examples[i] for i in indices], self.provenance)


def parse_fasta(text: str) -> list[RnaSequence]:
    """Parse FASTA text into validated RNA sequences.

    Sequence lines are concatenated, uppercased, and T is read as U.
    Blank lines are ignored. Raises ``SequenceError`` on an empty record,
    an unknown character, a duplicate id, or a record longer than 160 nt.
    """
    records: list[tuple[str, list[str]]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith(">"):
            header = line[1:].strip()
            seq_id = header.split()[0] if header else ""
            if not seq_id:
                raise SequenceError(f"line {lineno}: empty FASTA header")
            records.append((seq_id, []))
        else:
            if not records:
                raise SequenceError(f"line {lineno}: sequence data before first header")
            records[-1][1].append(line)

    out = []
    seen = set()
    for seq_id, chunks in records:
        if seq_id in seen:
            raise SequenceError(f"duplicate id {seq_id!r}")
        seen.add(seq_id)
        bases = "".join(chunks).upper().replace("T", "U")
        if not bases:
            raise SequenceError(f"{seq_id}: empty record body")
        out.append(RnaSequence(seq_id, bases))
    return out


def serialize_fasta(sequences: Iterable[RnaSequence], width: int = 60) -> str:
    lines = []
    for seq in sequences:
        lines.append(f">{seq.id}")
        for i in range(0, len(seq.bases), width):
            lines.append(seq.bases[i:i + width])
    return "\n".join(lines) + ("\n" if lines else "")


def read_fasta(path) -> list[RnaSequence]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise SequenceError(f"{path}: cannot read ({exc.strerror or exc})") from exc
    try:
        return parse_fasta(text)
    except SequenceError as exc:
        raise SequenceError(f"{path}: {exc}") from exc


def write_fasta(sequences: Iterable[RnaSequence], path) -> None:
    Path(path).write_text(serialize_fasta(sequences), encoding="utf-8")


def load_dataset(positive_path, negative_path) -> LabeledDataset:
    positives = read_fasta(positive_path)
    negatives = read_fasta(negative_path)
    for name, seqs in ((POSITIVE, positives), (NEGATIVE, negatives)):
        if not seqs:
            log.warning("%s class is empty", name)
    log.info("loaded %d positive, %d negative sequences", len(positives), len(negatives))
    examples = [(s, POSITIVE) for s in positives] + [(s, NEGATIVE) for s in negatives]
    return LabeledDataset(examples, provenance=f"positives={positive_path}; negatives={negative_path}")


def write_manifest(dataset: LabeledDataset, path) -> None:
    """Write the two-column ``id,label`` manifest."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "label"])
        for seq, label in dataset:
            writer.writerow([seq.id, label or ""])


def read_manifest(path) -> dict[str, str]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["id", "label"]:
            raise SequenceError(f"{path}: manifest header must be 'id,label'")
        return {row["id"]: row["label"] for row in reader}


def drop_multiloop(dataset: LabeledDataset) -> LabeledDataset:
    """Keep only sequences whose predicted fold has at most one hairpin."""
    from premirna.folding import fold

    kept = [(s, lab) for s, lab in dataset if fold(s).hairpin_count <= 1]
    return LabeledDataset(kept, dataset.provenance + "; multiloop hairpins dropped")
