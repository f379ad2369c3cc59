"""Sequence, structure, thermodynamic, ensemble, and z-score features.

Every feature is named after its column in the pre-miRNA feature catalogue
(``XY``, ``XYZ``, ``A+U%``, ``dG``, ``MFEI1`` ... ``%L``). Zero
denominators (no stems, no loops, no G/C, zero std) yield 0 so vectors
are always finite.
"""

from __future__ import annotations

import csv
import itertools
import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from premirna import folding
from premirna.folding import DEFAULT_MODEL, EnergyModel, SecondaryStructure
from premirna.sequence_io import ALPHABET, RnaSequence

DINUCLEOTIDES = ["".join(p) for p in itertools.product(ALPHABET, repeat=2)]
TRINUCLEOTIDES = ["".join(p) for p in itertools.product(ALPHABET, repeat=3)]

COMPOSITION_NAMES = DINUCLEOTIDES + TRINUCLEOTIDES + ["A+U%", "G+C%", "L"]
STRUCTURE_NAMES = [
    "dP", "dG", "dF",
    "MFEI1", "MFEI2", "MFEI3", "MFEI4", "MFEI5",
    "BP/GC", "BP/GU", "BP/AU", "G/C", "Avg_BP_Stem",
    "|A-U|/L", "|G-C|/L", "|G-U|/L",
    "|A-U|%/n_stems", "|G-C|%/n_stems", "|G-U|%/n_stems",
    "IH", "IL", "IC", "%L",
]
THERMO_NAMES = ["dS", "dS/L", "dH", "dH/L", "Tm", "Tm/L"]
ENSEMBLE_NAMES = ["Freq", "dD", "dQ", "dPs", "EAFE", "CE/L", "Diff"]
ZSCORE_NAMES = ["zP", "zG", "zD", "zQ", "zSP"]

FEATURE_NAMES = (
    DINUCLEOTIDES + TRINUCLEOTIDES + ["A+U%", "G+C%", "L"]
    + ["Freq", "dP", "dG", "dD", "dQ", "dF"]
    + ["MFEI1", "MFEI2", "MFEI3", "MFEI4", "MFEI5"]
    + THERMO_NAMES
    + ["BP/GC", "BP/GU", "BP/AU", "G/C", "Avg_BP_Stem"]
    + ["|A-U|/L", "|G-C|/L", "|G-U|/L"]
    + ["|A-U|%/n_stems", "|G-C|%/n_stems", "|G-U|%/n_stems"]
    + ZSCORE_NAMES
    + ["dPs", "EAFE", "CE/L", "Diff"]
    + ["IH", "IL", "IC", "%L"]
)

SELECTED20 = [
    "A+U%", "AG", "AU", "CU", "GA", "UU", "MFEI4", "dPs", "EAFE", "Freq",
    "dH/L", "Tm", "Tm/L", "|G-C|/L", "|A-U|%/n_stems", "|G-U|%/n_stems",
    "L", "CE/L", "zG", "zSP",
]

SUBSETS = {"full": FEATURE_NAMES, "selected20": SELECTED20}

# Per-pair duplex constants: enthalpy in kcal/mol, entropy in cal/(mol K).
PAIR_ENTHALPY = {"GC": -10.0, "AU": -7.0, "GU": -5.5}
PAIR_ENTROPY = {"GC": -26.0, "AU": -20.0, "GU": -16.0}
GAS_CONSTANT = 1.987
STRAND_CONCENTRATION = 1e-4
TM_RANGE = (0.0, 100.0)  # Celsius


def _bases(seq) -> str:
    return seq.bases if isinstance(seq, RnaSequence) else seq


def _div(a: float, b: float) -> float:
    return a / b if b else 0.0


@dataclass(frozen=True)
class FeatureConfig:
    n_samples: int = 200
    temperature: float = 1.0
    n_shuffles: int = 100
    shuffle_samples: int = 50
    seed: int = 0
    model: EnergyModel = DEFAULT_MODEL

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["model"] = dict(self.model.__dict__)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureConfig":
        d = dict(d)
        if "model" in d:
            d["model"] = EnergyModel(**d["model"])
        return cls(**d)


@dataclass(frozen=True)
class FeatureVector:
    values: dict
    feature_order: tuple = tuple(FEATURE_NAMES)

    def __getitem__(self, name):
        return self.values[name]

    def subset(self, name: str = "full") -> "FeatureVector":
        names = SUBSETS[name]
        return FeatureVector({k: self.values[k] for k in names}, tuple(names))

    def as_array(self, names=None) -> np.ndarray:
        names = self.feature_order if names is None else names
        return np.array([self.values[k] for k in names], dtype=np.float64)


# --------------------------------------------------------------- composition

def composition_features(seq) -> dict[str, float]:
    """Di-/trinucleotide frequencies, A+U and G+C fractions, and length."""
    bases = _bases(seq)
    n = len(bases)
    if n < 3:
        raise ValueError(f"trinucleotide frequency (XYZ) needs length >= 3, got {n}")
    out = {}
    di = dict.fromkeys(DINUCLEOTIDES, 0)
    for k in range(n - 1):
        di[bases[k:k + 2]] += 1
    tri = dict.fromkeys(TRINUCLEOTIDES, 0)
    for k in range(n - 2):
        tri[bases[k:k + 3]] += 1
    for name, c in di.items():
        out[name] = c / (n - 1)
    for name, c in tri.items():
        out[name] = c / (n - 2)
    au = (bases.count("A") + bases.count("U")) / n
    out["A+U%"] = au
    out["G+C%"] = 1.0 - au
    out["L"] = float(n)
    return out


# ----------------------------------------------------------------- structure

def tree_compactness(ss: SecondaryStructure) -> float:
    """Second-smallest Laplacian eigenvalue of the coarse stem/loop tree."""
    n_nodes = ss.stem_count + 1
    if n_nodes < 2:
        return 0.0
    lap = np.zeros((n_nodes, n_nodes))
    for a, b in ss.tree_edges:
        lap[a, b] -= 1
        lap[b, a] -= 1
        lap[a, a] += 1
        lap[b, b] += 1
    return float(np.linalg.eigvalsh(lap)[1])


def structure_features(seq, ss: SecondaryStructure) -> dict[str, float]:
    bases = _bases(seq)
    n = len(bases)
    st = folding.pairing_stats(ss)
    gc_frac = (bases.count("G") + bases.count("C")) / n
    au_frac = 1.0 - gc_frac
    total = st["total_bases"]
    stems = st["stems"]
    dG = ss.energy / n
    out = {
        "dP": total / n,
        "dG": dG,
        "dF": tree_compactness(ss),
        "MFEI1": _div(dG, gc_frac),
        "MFEI2": _div(dG, stems),
        "MFEI3": _div(dG, st["loops"]),
        "MFEI4": _div(dG, total),
        "MFEI5": _div(dG, au_frac),
        "BP/GC": _div(total, st["|G-C|"]),
        "BP/GU": _div(total, st["|G-U|"]),
        "BP/AU": _div(total, st["|A-U|"]),
        "G/C": float(bases.count("G") + bases.count("C")),
        "Avg_BP_Stem": st["Avg_BP_Stem"],
    }
    for pair in ("A-U", "G-C", "G-U"):
        count = st[f"|{pair}|"]
        out[f"|{pair}|/L"] = count / n
        out[f"|{pair}|%/n_stems"] = _div(count, stems)
    for key in ("IH", "IL", "IC", "%L"):
        out[key] = st[key]
    return out


# -------------------------------------------------------------------- thermo

def melting_temperature(n_au: int, n_gc: int, n_gu: int) -> float:
    """Duplex melting temperature in Celsius from pair counts.

    Tm = 1000 dH / (dS + R ln(C/4)), clamped to ``TM_RANGE``; 0 without pairs.
    """
    if n_au + n_gc + n_gu == 0:
        return 0.0
    dH = n_au * PAIR_ENTHALPY["AU"] + n_gc * PAIR_ENTHALPY["GC"] + n_gu * PAIR_ENTHALPY["GU"]
    dS = n_au * PAIR_ENTROPY["AU"] + n_gc * PAIR_ENTROPY["GC"] + n_gu * PAIR_ENTROPY["GU"]
    salt = GAS_CONSTANT * math.log(STRAND_CONCENTRATION / 4)
    tm = 1000.0 * dH / (dS + salt) - 273.15
    return float(min(max(tm, TM_RANGE[0]), TM_RANGE[1]))


def thermo_features(seq, ss: SecondaryStructure) -> dict[str, float]:
    n = len(_bases(seq))
    st = folding.pairing_stats(ss)
    n_au, n_gc, n_gu = int(st["|A-U|"]), int(st["|G-C|"]), int(st["|G-U|"])
    dH = n_au * PAIR_ENTHALPY["AU"] + n_gc * PAIR_ENTHALPY["GC"] + n_gu * PAIR_ENTHALPY["GU"]
    dS = n_au * PAIR_ENTROPY["AU"] + n_gc * PAIR_ENTROPY["GC"] + n_gu * PAIR_ENTROPY["GU"]
    tm = melting_temperature(n_au, n_gc, n_gu)
    return {"dS": dS, "dS/L": dS / n, "dH": dH, "dH/L": dH / n, "Tm": tm, "Tm/L": tm / n}


# ------------------------------------------------------------------ ensemble

def _partner_energies(codes: np.ndarray, samples: np.ndarray, model: EnergyModel) -> np.ndarray:
    """Energies of many partner arrays at once (rows of ``samples``)."""
    n = codes.shape[0]
    if n == 0:
        return np.zeros(len(samples))
    idx = np.arange(n)
    opener = samples > idx
    table = model.score_table()
    partner = np.where(opener, samples, 0)
    pair_score = np.where(opener, table[codes[idx][None, :], codes[partner]], 0.0)
    inner = np.full_like(samples, -2)
    inner[:, :-1] = samples[:, 1:]
    stacked = opener & (inner == samples - 1) & (samples - idx > 2)
    closing = opener & ~stacked
    return pair_score.sum(axis=1) + model.loop_penalty * closing.sum(axis=1)


def _pair_probabilities(samples: np.ndarray) -> np.ndarray:
    n_samples, n = samples.shape
    probs = np.zeros((n, n))
    rows, cols = np.nonzero(samples > np.arange(n))
    np.add.at(probs, (cols, samples[rows, cols]), 1.0)
    return probs / n_samples


def _entropy_terms(p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(p)
    mask = p > 0
    out[mask] = -p[mask] * np.log(p[mask])
    return out


def _ensemble_summary(probs: np.ndarray, n: int) -> tuple[float, float, float]:
    """Return (dD, dQ, dPs) from an upper-triangular pair-probability matrix."""
    upper = probs
    dQ = float(_entropy_terms(upper).sum()) / n
    dD = float((2.0 * upper * (1.0 - upper)).sum()) / n
    full = upper + upper.T
    unpaired = np.clip(1.0 - full.sum(axis=1), 0.0, 1.0)
    pos = _entropy_terms(full).sum(axis=1) + _entropy_terms(unpaired)
    dPs = float(pos.mean())
    return dD, dQ, dPs


def ensemble_features(seq, n_samples: int = 200, temperature: float = 1.0, seed: int = 0,
                      model: EnergyModel = DEFAULT_MODEL) -> dict[str, float]:
    """Ensemble-derived features from ``n_samples`` stochastic tracebacks.

    The sampled set stands in for the Boltzmann ensemble: pair
    probabilities are sample frequencies, the ensemble free energy is
    ``-T ln sum exp(-E/T)`` over the distinct sampled structures plus the
    MFE structure, and the centroid keeps pairs with probability > 0.5.
    """
    bases = _bases(seq)
    n = len(bases)
    tables = folding.fold_tables(bases, model)
    codes, W, V = tables
    mfe_partner = folding._traceback(W, V, codes, model.score_table(), model.loop_penalty,
                                     model.min_loop)
    mfe_energy = float(W[0, n - 1]) if n else 0.0
    samples = folding.sample_structures(bases, n_samples, temperature, seed, model, tables)

    freq = float(np.mean(np.all(samples == mfe_partner, axis=1)))
    probs = _pair_probabilities(samples)
    dD, dQ, dPs = _ensemble_summary(probs, n)

    distinct = np.unique(np.vstack([samples, mfe_partner[None, :]]), axis=0)
    energies = _partner_energies(codes, distinct, model)
    scaled = -energies / temperature
    top = scaled.max()
    efe = float(-temperature * (top + np.log(np.exp(scaled - top).sum())))

    rows, cols = np.nonzero(probs > 0.5)
    centroid_energy = folding.structure_energy(bases, list(zip(rows, cols)), model)
    return {
        "Freq": freq,
        "dD": dD,
        "dQ": dQ,
        "dPs": dPs,
        "EAFE": efe / n,
        "CE/L": centroid_energy / n,
        "Diff": abs(mfe_energy - efe) / n,
    }


# ------------------------------------------------------------------- shuffle

def dinucleotide_shuffle(seq, rng: np.random.Generator) -> str:
    """Random sequence with the same dinucleotide counts, first and last base.

    Altschul-Erikson shuffle via a random Eulerian trail: a random
    arborescence of last-exit edges rooted at the final base is drawn with
    Wilson's loop-erased walks, the remaining out-edges of every vertex are
    permuted, and the trail is read off from the first base.
    """
    bases = _bases(seq)
    if len(bases) <= 2:
        return bases
    edges: dict[str, list[str]] = {b: [] for b in ALPHABET}
    for a, b in zip(bases, bases[1:]):
        edges[a].append(b)
    last = bases[-1]
    in_tree = {last}
    exit_edge: dict[str, int] = {}
    for start in ALPHABET:
        if start in in_tree or not edges[start]:
            continue
        nxt: dict[str, int] = {}
        u = start
        while u not in in_tree:
            k = int(rng.integers(len(edges[u])))
            nxt[u] = k
            u = edges[u][k]
        u = start
        while u not in in_tree:
            exit_edge[u] = nxt[u]
            in_tree.add(u)
            u = edges[u][nxt[u]]
    order: dict[str, list[str]] = {}
    for v, out in edges.items():
        if not out:
            order[v] = []
            continue
        if v in exit_edge:
            k = exit_edge[v]
            rest = out[:k] + out[k + 1:]
            perm = rng.permutation(len(rest))
            order[v] = [rest[p] for p in perm] + [out[k]]
        else:
            perm = rng.permutation(len(out))
            order[v] = [out[p] for p in perm]
    pos = dict.fromkeys(ALPHABET, 0)
    result = [bases[0]]
    u = bases[0]
    for _ in range(len(bases) - 1):
        v = order[u][pos[u]]
        pos[u] += 1
        result.append(v)
        u = v
    return "".join(result)


# ------------------------------------------------------------------- z-score

def folding_measures(bases: str, n_samples: int, temperature: float, seed: int,
                     model: EnergyModel = DEFAULT_MODEL) -> np.ndarray:
    """(dP, dG, dD, dQ, dPs) of one sequence; the measures behind the z-scores."""
    n = len(bases)
    tables = folding.fold_tables(bases, model)
    codes, W, V = tables
    partner = folding._traceback(W, V, codes, model.score_table(), model.loop_penalty,
                                 model.min_loop)
    dP = float(np.count_nonzero(partner >= 0)) / n
    dG = float(W[0, n - 1]) / n if n else 0.0
    samples = folding.sample_structures(bases, n_samples, temperature, seed, model, tables)
    dD, dQ, dPs = _ensemble_summary(_pair_probabilities(samples), n)
    return np.array([dP, dG, dD, dQ, dPs])


def zscore_features(seq, n_shuffles: int = 100, seed: int = 0, n_samples: int = 50,
                    temperature: float = 1.0, model: EnergyModel = DEFAULT_MODEL) -> dict[str, float]:
    """z = (x - mean) / std of each folding measure against dinucleotide shuffles."""
    if n_shuffles < 10:
        raise ValueError("n_shuffles must be >= 10")
    bases = _bases(seq)
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 0x5AFF1E])
    # one sampling seed for the sequence and all its shuffles, so identical
    # shuffles give identical measures
    sample_seed = int(rng.integers(2**31))
    observed = folding_measures(bases, n_samples, temperature, sample_seed, model)
    background = np.empty((n_shuffles, 5))
    for k in range(n_shuffles):
        shuffled = dinucleotide_shuffle(bases, rng)
        background[k] = folding_measures(shuffled, n_samples, temperature, sample_seed, model)
    mean = background.mean(axis=0)
    std = background.std(axis=0)
    # spread below float noise counts as zero (identical shuffles)
    scale = np.maximum(np.abs(mean), 1.0)
    z = np.where(std > 1e-12 * scale, (observed - mean) / np.where(std > 0, std, 1.0), 0.0)
    return dict(zip(ZSCORE_NAMES, (float(v) for v in z)))


# ---------------------------------------------------------------- extraction

def sequence_seed(bases: str, seed: int) -> int:
    """Per-sequence seed: depends on the bases, not on id or file order."""
    return (zlib.crc32(bases.encode()) ^ (seed * 0x9E3779B1)) & 0xFFFFFFFF


def extract_all(seq, config: FeatureConfig = FeatureConfig()) -> FeatureVector:
    """Full feature catalogue for one sequence (length >= 3)."""
    bases = _bases(seq)
    s = sequence_seed(bases, config.seed)
    ss = folding.fold(bases, config.model)
    values = {}
    values.update(composition_features(bases))
    values.update(structure_features(bases, ss))
    values.update(thermo_features(bases, ss))
    values.update(ensemble_features(bases, config.n_samples, config.temperature, s, config.model))
    values.update(zscore_features(bases, config.n_shuffles, s, config.shuffle_samples,
                                  config.temperature, config.model))
    return FeatureVector({k: float(values[k]) for k in FEATURE_NAMES})


def _extract_with_context(seq, config: FeatureConfig) -> FeatureVector:
    try:
        return extract_all(seq, config)
    except ValueError as exc:
        name = seq.id if isinstance(seq, RnaSequence) else _bases(seq)
        raise ValueError(f"{name}: {exc}") from None


def feature_matrix(seqs, config: FeatureConfig = FeatureConfig(), subset: str = "full",
                   jobs: int = 1) -> np.ndarray:
    """Rows of ``subset`` features; results do not depend on ``jobs``."""
    names = SUBSETS[subset]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(jobs) as pool:
            vecs = list(pool.map(_extract_with_context, seqs, itertools.repeat(config), chunksize=8))
    else:
        vecs = [_extract_with_context(s, config) for s in seqs]
    return np.array([v.as_array(names) for v in vecs]).reshape(len(vecs), len(names))


# ------------------------------------------------------------- normalization

@dataclass(frozen=True)
class NormalizationStats:
    names: tuple
    minimum: np.ndarray = field(repr=False)
    maximum: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {"names": list(self.names), "min": self.minimum.tolist(), "max": self.maximum.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(tuple(d["names"]), np.asarray(d["min"], float), np.asarray(d["max"], float))


def fit_normalizer(train: np.ndarray, names=None) -> NormalizationStats:
    """Per-column min-max statistics of a training matrix."""
    train = np.asarray(train, dtype=np.float64)
    if train.ndim != 2 or train.shape[0] == 0:
        raise ValueError("training matrix must be 2-D and non-empty")
    names = tuple(names) if names is not None else tuple(str(i) for i in range(train.shape[1]))
    return NormalizationStats(names, train.min(axis=0), train.max(axis=0))


def apply_normalizer(stats: NormalizationStats, x: np.ndarray) -> np.ndarray:
    """Scale into [0, 1] with training min/max, clamping; constant columns map to 0."""
    x = np.asarray(x, dtype=np.float64)
    span = stats.maximum - stats.minimum
    safe = np.where(span > 0, span, 1.0)
    scaled = np.where(span > 0, (x - stats.minimum) / safe, 0.0)
    return np.clip(scaled, 0.0, 1.0)


# ----------------------------------------------------------------- CSV I/O

def write_feature_csv(path, ids, labels, matrix: np.ndarray, names) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "label", *names])
        for seq_id, label, row in zip(ids, labels, matrix):
            writer.writerow([seq_id, label or "", *(repr(float(v)) for v in row)])


def read_feature_csv(path):
    """Return ``(ids, labels, matrix, names)`` from a feature CSV."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["id", "label"]:
            raise ValueError(f"{path}: feature CSV must start with 'id,label'")
        names = header[2:]
        unknown = set(names) - set(FEATURE_NAMES)
        if unknown:
            raise ValueError(f"{path}: unknown feature columns {sorted(unknown)}")
        ids, labels, rows = [], [], []
        for row in reader:
            ids.append(row[0])
            labels.append(row[1] or None)
            rows.append([float(v) for v in row[2:]])
    matrix = np.array(rows, dtype=np.float64).reshape(len(rows), len(names))
    return ids, labels, matrix, names
