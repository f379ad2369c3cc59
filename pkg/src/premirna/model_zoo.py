"""Architecture presets, metrics, cross-validation and synthetic data.

Seed derivation: every random stream comes from the master seed through
``derive_seed(master, purpose, *indices)`` (a ``numpy.random.SeedSequence``
hash), with purposes ``FOLDS`` (repeat), ``BALANCE`` and ``TRAIN``
(repeat, fold), and ``FINAL`` for the model trained on all data. Feature
extraction seeds come from the master seed and the bases alone.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from premirna import balance, nn, rbm_dbn
from premirna.encoding import encode_batch
from premirna.features import (
    SUBSETS,
    FeatureConfig,
    NormalizationStats,
    apply_normalizer,
    dinucleotide_shuffle,
    feature_matrix,
    fit_normalizer,
)
from premirna.sequence_io import MAX_LENGTH, NEGATIVE, POSITIVE, LabeledDataset, RnaSequence

FOLDS, BALANCE, TRAIN, FINAL = 1, 2, 3, 4

# Hyper-parameter ranges of the CNN search space.
CNN_RANGES = {
    "window": (5, 24), "window2": (5, 24), "window3": (5, 24),
    "filters": (5, 20), "filters2": (5, 20), "filters3": (5, 20),
    "stride": (1, 24),
    "pool_window": (0, 9),  # 0 selects global max pooling
    "pool_stride": (1, 24),
    "units": (1, 4096),
    "dropout": (0.0, 0.4),
    "output_units": (2, 3),
}
RANGE_NAMES = {"window": "filter size", "filters": "number of filters"}
HYPER_ALIASES = {"filter": "window", "filter_size": "window", "n_filters": "filters"}

CNN_DEFAULTS = {
    1: {"window": 12, "filters": 12, "pool_window": 6, "pool_stride": 4, "dropout": 0.3},
    2: {"window": 18, "stride": 4, "filters": 20, "units": 90, "dropout": 0.3},
    3: {"window": 12, "filters": 12, "window2": 6, "filters2": 12, "pool_window": 6,
        "pool_stride": 4, "dropout": 0.3},
    4: {"window": 12, "filters": 12, "window2": 6, "filters2": 12, "window3": 6, "filters3": 12,
        "pool_window": 6, "pool_stride": 4, "dropout": 0.3},
}
PRESETS = {"best2": 2, "best3": 3}

# Published benchmark accuracies are not a reproduction target here.
PUBLISHED_ACCURACY = {"cnn:3": 0.995, "dbn:selected20": 0.990, "dbn:58": 0.968}
REPRODUCIBILITY_NOTE = (
    "The published benchmark accuracies (CNN type 3 = 0.995, DBN on 20 features = 0.990, "
    "DBN on 58 features = 0.968) cannot be reproduced with this package: the exact miRBase 18 "
    "positive set, the coding-region pseudo-hairpin negatives and the original feature tooling "
    "are not available, and folding uses a simplified energy model. The property-based "
    "acceptance suite on synthetic data is the binding check instead."
)


def derive_seed(master: int, *path: int) -> int:
    return int(np.random.SeedSequence([int(master), *map(int, path)]).generate_state(1)[0])


# ------------------------------------------------------------ architectures

class HyperParameterError(ValueError):
    pass


def _check_range(key, value):
    lo, hi = CNN_RANGES[key]
    if not lo <= value <= hi:
        label = RANGE_NAMES.get(key.rstrip("23"), key)
        raise HyperParameterError(f"{key} ({label}) = {value} is outside the allowed range {lo}-{hi}")


def cnn_hyper(arch, hyper=None, check_ranges: bool = True) -> tuple[int, dict]:
    """Resolve an architecture name and overrides to ``(type, full hyper dict)``."""
    arch = str(arch)
    if arch in PRESETS:
        kind = PRESETS[arch]
    elif arch in {"1", "2", "3", "4"}:
        kind = int(arch)
    else:
        raise HyperParameterError(f"unknown CNN architecture {arch!r}; use 1-4, best2 or best3")
    params = dict(CNN_DEFAULTS[kind])
    params["output_units"] = 2
    for key, value in (hyper or {}).items():
        key = HYPER_ALIASES.get(key, key)
        if key not in params:
            raise HyperParameterError(f"hyper-parameter {key!r} does not apply to CNN type {kind}")
        params[key] = value
    if check_ranges:
        for key, value in params.items():
            _check_range(key, value)
    return kind, params


def build_cnn(arch, hyper=None, input_width: int = MAX_LENGTH, check_ranges: bool = True) -> nn.NetworkSpec:
    """NetworkSpec for CNN type 1-4 or a preset ("best2", "best3").

    ``check_ranges=False`` lifts the search-space bounds so scaled-down
    copies can be built for gradient checks.
    """
    kind, h = cnn_hyper(arch, hyper, check_ranges)
    drop = nn.dropout(h["dropout"])
    out = [nn.dense(h["output_units"], "identity"), nn.softmax_layer()]
    if h.get("pool_window", 1) == 0:
        pool = nn.global_max_pool()
    else:
        pool = nn.max_pool(h.get("pool_window", 1), h.get("pool_stride", 1))
    if kind == 1:
        layers = [nn.conv(h["filters"], h["window"]), pool, drop, *out]
    elif kind == 2:
        layers = [nn.conv(h["filters"], h["window"], h["stride"]), nn.dense(h["units"], "relu"), drop, *out]
    elif kind == 3:
        layers = [nn.conv(h["filters"], h["window"]), nn.conv(h["filters2"], h["window2"]), pool, drop, *out]
    else:
        layers = [nn.conv(h["filters"], h["window"]), nn.conv(h["filters2"], h["window2"]),
                  nn.conv(h["filters3"], h["window3"]), pool, drop, *out]
    spec = nn.NetworkSpec((4, input_width), tuple(layers), name=f"cnn:{arch}")
    spec.shapes()  # raise ShapeError early
    return spec


def build_dbn(input_dim: int, head: str = "softmax") -> rbm_dbn.DbnPlan:
    return rbm_dbn.DbnPlan((int(input_dim), *rbm_dbn.DBN_HIDDEN), head)


# ------------------------------------------------------------------ metrics

@dataclass(frozen=True)
class Metrics:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def sensitivity(self) -> float:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def specificity(self) -> float:
        return _ratio(self.tn, self.tn + self.fp)

    @property
    def accuracy(self) -> float:
        return _ratio(self.tp + self.tn, self.total)

    @property
    def precision(self) -> float:
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def f1(self) -> float:
        p, s = self.precision, self.sensitivity
        return _ratio(2 * p * s, p + s)

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in METRIC_NAMES:
            d[name] = getattr(self, name)
        return d

    @classmethod
    def from_predictions(cls, y_true, y_pred) -> "Metrics":
        y_true = np.asarray(y_true).astype(bool)
        y_pred = np.asarray(y_pred).astype(bool)
        if len(y_true) == 0:
            raise ValueError("cannot score an empty test set")
        return cls(int(np.sum(y_true & y_pred)), int(np.sum(~y_true & y_pred)),
                   int(np.sum(~y_true & ~y_pred)), int(np.sum(y_true & ~y_pred)))


METRIC_NAMES = ("sensitivity", "specificity", "accuracy", "precision", "f1")


def _ratio(a, b) -> float:
    return a / b if b else 0.0


# ------------------------------------------------------------ configuration

@dataclass
class ExperimentConfig:
    """Everything that determines a trained model; flat and JSON-friendly.

    CNN hyper-parameters left as ``None`` take the architecture's preset
    value. For the DBN, ``epochs`` counts fine-tuning epochs and 0 trains
    only the output head (for ``head_epochs``) on frozen pretrained layers.
    """

    model: str = "cnn:best3"
    seed: int = 0
    folds: int = 8
    repeats: int = 1
    balance: bool = True
    k_clusters: int = 5
    epochs: int = 100
    learning_rate: float = 0.01
    batch_size: int = 32
    momentum: float = 0.0
    window: int | None = None
    filters: int | None = None
    stride: int | None = None
    window2: int | None = None
    filters2: int | None = None
    window3: int | None = None
    filters3: int | None = None
    pool_window: int | None = None
    pool_stride: int | None = None
    units: int | None = None
    dropout: float | None = None
    output_units: int | None = None
    subset: str = "full"
    head: str = "softmax"
    pretrain_epochs: int = 50
    pretrain_lr: float = 0.05
    head_epochs: int = 100
    n_samples: int = 200
    temperature: float = 1.0
    n_shuffles: int = 100
    shuffle_samples: int = 50

    def __post_init__(self):
        kind = self.kind  # validates the model string
        if kind == "cnn":
            build_cnn(self.arch, self.hyper())
        else:
            build_dbn(1, self.head)
            if self.subset not in SUBSETS:
                raise ValueError(f"unknown feature subset {self.subset!r}; choose from {sorted(SUBSETS)}")
        for key in ("epochs", "pretrain_epochs", "head_epochs", "repeats"):
            if getattr(self, key) < 0:
                raise ValueError(f"{key} must be >= 0")
        if self.batch_size < 1 or self.k_clusters < 1:
            raise ValueError("batch_size and k_clusters must be >= 1")
        if self.learning_rate < 0 or self.pretrain_lr < 0:
            raise ValueError("learning rates must be >= 0")

    @property
    def kind(self) -> str:
        if self.model == "dbn":
            return "dbn"
        if self.model.startswith("cnn:"):
            return "cnn"
        raise ValueError(f"model must be 'dbn' or 'cnn:<1-4|best2|best3>', got {self.model!r}")

    @property
    def arch(self) -> str:
        return self.model.split(":", 1)[1] if self.kind == "cnn" else "dbn"

    def hyper(self) -> dict:
        names = ("window", "filters", "stride", "window2", "filters2", "window3", "filters3",
                 "pool_window", "pool_stride", "units", "dropout", "output_units")
        return {k: getattr(self, k) for k in names if getattr(self, k) is not None}

    def feature_config(self) -> FeatureConfig:
        return FeatureConfig(self.n_samples, self.temperature, self.n_shuffles,
                             self.shuffle_samples, self.seed)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# ------------------------------------------------------------ trained models

@dataclass
class ExampleTable:
    """Model inputs aligned with ids and labels (what a fold plan splits)."""

    ids: list
    labels: list
    x: np.ndarray

    def y(self) -> np.ndarray:
        return np.array([1 if lab == POSITIVE else 0 for lab in self.labels], dtype=np.int64)

    def rows(self, ids) -> np.ndarray:
        index = {i: n for n, i in enumerate(self.ids)}
        return np.array([index[i] for i in ids], dtype=np.int64)


def build_table(config: ExperimentConfig, dataset: LabeledDataset, features=None, jobs: int = 1) -> ExampleTable:
    """One-hot encodings (CNN) or subset feature columns (DBN) for ``dataset``."""
    if config.kind == "cnn":
        x = encode_batch(dataset.sequences)
    elif features is not None:
        x = np.asarray(features, dtype=np.float64)
    else:
        x = feature_matrix(dataset.sequences, config.feature_config(), config.subset, jobs)
    return ExampleTable(dataset.ids, dataset.labels, x)


@dataclass
class FitAudit:
    """Ids that reached each fitting step; lets tests prove test folds stay out."""

    normalizer_ids: list = field(default_factory=list)
    balance_ids: list = field(default_factory=list)
    training_ids: list = field(default_factory=list)


@dataclass
class TrainedModel:
    config: ExperimentConfig
    net: nn.Network
    seed: int
    normalizer: NormalizationStats | None = None
    stack: list | None = None
    history: list = field(default_factory=list)

    @property
    def feature_names(self) -> list | None:
        return list(SUBSETS[self.config.subset]) if self.config.kind == "dbn" else None

    def _inputs(self, x):
        x = np.asarray(x, dtype=np.float64)
        return apply_normalizer(self.normalizer, x) if self.normalizer is not None else x

    def predict_proba(self, x) -> np.ndarray:
        """Positive-class score in [0, 1] for every row."""
        return self.net.predict_proba(self._inputs(x))

    def predict(self, x) -> np.ndarray:
        """1 for positive, 0 for negative (argmax; the positive class is index 1)."""
        if self.net.head == "sigmoid":
            return (self.predict_proba(x) >= 0.5).astype(np.int64)
        out = []
        inputs = self._inputs(x)
        for start in range(0, len(inputs), 256):
            out.append(self.net.forward(inputs[start:start + 256]).argmax(axis=1) == 1)
        return np.concatenate(out).astype(np.int64) if out else np.zeros(0, np.int64)

    def save(self, path) -> None:
        arrays = [a for _, _, a in self.net.parameters()]
        header = {
            "pipeline": self.config.to_dict(),
            "network": self.net.spec.to_dict(),
            "shapes": [list(s) for s in self.net.spec.shapes()],
            "seed": self.seed,
            "n_params": int(sum(a.size for a in arrays)),
            "normalizer": self.normalizer.to_dict() if self.normalizer is not None else None,
            "feature_names": self.feature_names,
            "pretrained_stack": None,
        }
        if self.stack is not None:
            meta, extra = rbm_dbn.stack_to_header(self.stack)
            header["pretrained_stack"] = meta
            arrays = arrays + extra
        nn.save_model(path, header, arrays)

    @classmethod
    def load(cls, path) -> "TrainedModel":
        header, arrays = nn.load_model(path)
        try:
            config = ExperimentConfig(**header["pipeline"])
            spec = nn.NetworkSpec.from_dict(header["network"])
        except (KeyError, TypeError, ValueError) as exc:
            raise nn.ModelFileError(f"{path}: invalid pipeline description ({exc})") from exc
        net = nn.Network(spec, 0)
        n_net = len(net.parameters())
        for (_, _, target), arr in zip(net.parameters(), arrays[:n_net]):
            if target.shape != arr.shape:
                raise nn.ModelFileError(f"{path}: parameter shape {arr.shape} != {target.shape}")
            target[...] = arr
        stack = None
        if header.get("pretrained_stack") is not None:
            stack = rbm_dbn.stack_from_arrays(header["pretrained_stack"], arrays[n_net:])
        norm = header.get("normalizer")
        return cls(config, net, header["seed"],
                   NormalizationStats.from_dict(norm) if norm is not None else None, stack)


def _balanced_rows(config, table, rows, rep, seed, audit):
    """Drop surplus negatives from ``rows`` by k-means under-sampling."""
    y = table.y()[rows]
    pos, neg = rows[y == 1], rows[y == 0]
    if not config.balance or len(neg) <= len(pos) or len(pos) == 0:
        return rows
    neg_ids = [table.ids[i] for i in neg]
    if audit is not None:
        audit.balance_ids.extend(neg_ids)
    keep = set(balance.undersample_negatives(rep[neg].reshape(len(neg), -1), neg_ids, len(pos),
                                             config.k_clusters, seed))
    kept_neg = np.array([i for i in neg if table.ids[i] in keep], dtype=np.int64)
    return np.sort(np.concatenate([pos, kept_neg]))


def train_model(config: ExperimentConfig, table: ExampleTable, rows=None, seed: int | None = None,
                balance_seed: int = 0, audit: FitAudit | None = None) -> TrainedModel:
    """Fit normalizer, balancer and network on ``rows`` of ``table`` only."""
    rows = np.arange(len(table.ids)) if rows is None else np.asarray(rows, dtype=np.int64)
    seed = derive_seed(config.seed, FINAL) if seed is None else seed
    normalizer = None
    rep = table.x
    if config.kind == "dbn":
        normalizer = fit_normalizer(table.x[rows], SUBSETS[config.subset])
        if audit is not None:
            audit.normalizer_ids.extend(table.ids[i] for i in rows)
        rep = apply_normalizer(normalizer, table.x)
    rows = _balanced_rows(config, table, rows, rep, balance_seed, audit)
    if audit is not None:
        audit.training_ids.extend(table.ids[i] for i in rows)
    x, y = rep[rows], table.y()[rows]

    if config.kind == "cnn":
        net = nn.Network(build_cnn(config.arch, config.hyper()), seed)
        train = nn.TrainConfig(config.learning_rate, config.batch_size, config.epochs, config.momentum, seed)
        history = nn.fit(net, x, y, train)
        return TrainedModel(config, net, seed, None, None, history)

    plan = build_dbn(x.shape[1], config.head)
    dbn_config = rbm_dbn.DbnConfig(config.pretrain_lr, config.pretrain_epochs, config.batch_size,
                                   config.learning_rate, config.epochs, config.head_epochs,
                                   config.momentum, seed)
    net, stack, history = rbm_dbn.train_dbn(plan, x, y, dbn_config)
    return TrainedModel(config, net, seed, normalizer, stack, history)


def evaluate(model: TrainedModel, x, y) -> Metrics:
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    return Metrics.from_predictions(np.asarray(y) == 1, model.predict(x) == 1)


# --------------------------------------------------------- cross-validation

class FoldFailure(RuntimeError):
    def __init__(self, repeat, fold, cause):
        super().__init__(f"repeat {repeat} fold {fold} failed: {cause}")
        self.repeat, self.fold, self.cause = repeat, fold, cause


@dataclass
class ExperimentReport:
    model: str
    config: dict
    folds: list  # one dict per (repeat, fold)
    mean: dict
    std: dict
    seeds: dict
    wall_clock: float
    audits: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("audits")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def table(self) -> str:
        head = f"{'run':<12}{'Sensitivity':>13}{'Specificity':>13}{'Accuracy':>10}"
        lines = [f"model {self.model}", head, "-" * len(head)]
        for f in self.folds:
            m = f["metrics"]
            tag = f"r{f['repeat']} f{f['fold']}"
            lines.append(f"{tag:<12}{m['sensitivity']:>13.3f}{m['specificity']:>13.3f}{m['accuracy']:>10.3f}")
        lines.append("-" * len(head))
        lines.append(f"{'mean':<12}{self.mean['sensitivity']:>13.3f}{self.mean['specificity']:>13.3f}"
                     f"{self.mean['accuracy']:>10.3f}")
        lines.append(f"{'std':<12}{self.std['sensitivity']:>13.3f}{self.std['specificity']:>13.3f}"
                     f"{self.std['accuracy']:>10.3f}")
        return "\n".join(lines)


def summarize(per_fold: list[Metrics]) -> tuple[dict, dict]:
    mean, std = {}, {}
    for name in METRIC_NAMES:
        vals = np.array([getattr(m, name) for m in per_fold])
        mean[name] = float(vals.mean())
        std[name] = float(vals.std())
    return mean, std


def cross_validate(config: ExperimentConfig, table: ExampleTable, plans=None) -> ExperimentReport:
    """k-fold evaluation; the fold plan of repeat r is seeded by
    ``derive_seed(seed, FOLDS, r)`` unless ``plans`` are given."""
    start = time.perf_counter()
    if plans is None:
        plans = [balance.stratified_kfold(table, config.folds, derive_seed(config.seed, FOLDS, r))
                 for r in range(max(config.repeats, 1))]
    index = {i: n for n, i in enumerate(table.ids)}
    folds, metrics, audits = [], [], []
    for r, plan in enumerate(plans):
        for f in range(plan.n_folds):
            try:
                train_rows = np.array([index[i] for i in plan.train_ids(f)], dtype=np.int64)
                test_rows = np.array([index[i] for i in plan.test_ids(f)], dtype=np.int64)
            except KeyError as exc:
                raise FoldFailure(r, f, f"fold plan id {exc} not in dataset") from exc
            seed = derive_seed(config.seed, TRAIN, r, f)
            audit = FitAudit()
            t0 = time.perf_counter()
            try:
                model = train_model(config, table, train_rows, seed,
                                    derive_seed(config.seed, BALANCE, r, f), audit)
                m = evaluate(model, table.x[test_rows], table.y()[test_rows])
            except Exception as exc:
                raise FoldFailure(r, f, exc) from exc
            folds.append({
                "repeat": r, "fold": f, "seed": seed, "n_train": len(audit.training_ids),
                "n_test": len(test_rows), "train_seconds": time.perf_counter() - t0,
                "metrics": m.to_dict(),
            })
            metrics.append(m)
            audits.append((list(plan.test_ids(f)), audit))
    mean, std = summarize(metrics)
    seeds = {"master": config.seed, "fold_plans": [p.seed for p in plans]}
    return ExperimentReport(config.model, config.to_dict(), folds, mean, std, seeds,
                            time.perf_counter() - start, audits)


# ------------------------------------------------------------ synthetic data

_COMPLEMENT = {"A": "U", "U": "A", "G": "C", "C": "G"}
SYNTH_STEM = (18, 30)
SYNTH_LOOP = (4, 8)
SYNTH_MUTATION = (0.05, 0.10)
SYNTH_FLANK = 10
SYNTH_LENGTH = (43, 154)


def _random_bases(rng, n) -> str:
    return "".join(np.array(list("ACGU"))[rng.integers(0, 4, n)])


def synthetic_hairpin(rng: np.random.Generator) -> str:
    """Stem-loop with a mutated complementary arm and short random flanks."""
    stem = int(rng.integers(SYNTH_STEM[0], SYNTH_STEM[1] + 1))
    loop = int(rng.integers(SYNTH_LOOP[0], SYNTH_LOOP[1] + 1))
    arm = _random_bases(rng, stem)
    other = [_COMPLEMENT[b] for b in reversed(arm)]
    rate = rng.uniform(*SYNTH_MUTATION)
    for i in np.flatnonzero(rng.random(stem) < rate):
        other[i] = "ACGU".replace(other[i], "")[rng.integers(3)]
    core = arm + _random_bases(rng, loop) + "".join(other)
    left, right = (int(v) for v in rng.integers(0, SYNTH_FLANK + 1, 2))
    short = SYNTH_LENGTH[0] - (len(core) + left + right)
    if short > 0:
        left += short
    return _random_bases(rng, left) + core + _random_bases(rng, right)


def synth_dataset(n_pos: int, n_neg: int, seed: int = 0) -> LabeledDataset:
    """Hairpin positives and dinucleotide-shuffled hairpin negatives.

    Each negative shuffles its own freshly drawn hairpin, so no negative
    is a permutation of a positive in the set.
    """
    if n_pos < 1 or n_neg < 1:
        raise ValueError("synth_dataset needs at least one example per class")
    rng = np.random.default_rng([seed, FINAL + 1])
    examples = []
    for k in range(n_pos):
        examples.append((RnaSequence(f"pos_{k:04d}", synthetic_hairpin(rng)), POSITIVE))
    for k in range(n_neg):
        examples.append((RnaSequence(f"neg_{k:04d}", dinucleotide_shuffle(synthetic_hairpin(rng), rng)),
                         NEGATIVE))
    return LabeledDataset(examples, provenance=f"synthetic n_pos={n_pos} n_neg={n_neg} seed={seed}")
