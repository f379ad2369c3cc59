"""Pre-miRNA classification from raw sequence (1D CNN) and from
structure/composition features (deep belief network)."""

from premirna.sequence_io import (
    LabeledDataset,
    RnaSequence,
    SequenceError,
    load_dataset,
    parse_fasta,
    serialize_fasta,
)

__version__ = "0.1.0"

__all__ = [
    "LabeledDataset",
    "RnaSequence",
    "SequenceError",
    "load_dataset",
    "parse_fasta",
    "serialize_fasta",
    "__version__",
]
