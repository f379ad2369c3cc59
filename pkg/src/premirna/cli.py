"""Command-line front end: ``premirna {synth,extract,balance,train,eval,predict}``.

Settings come from built-in defaults, then an optional flat JSON config
(``--config``, must carry ``"version": 1``), then command-line flags.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from premirna import balance, model_zoo, nn
from premirna.features import (
    SUBSETS,
    apply_normalizer,
    feature_matrix,
    fit_normalizer,
    read_feature_csv,
    write_feature_csv,
)
from premirna.sequence_io import (
    NEGATIVE,
    POSITIVE,
    LabeledDataset,
    SequenceError,
    load_dataset,
    read_fasta,
    write_fasta,
    write_manifest,
)

log = logging.getLogger("premirna")

CONFIG_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# Run settings that are not part of a model: inputs, outputs, parallelism.
IO_DEFAULTS = {
    "positives": None,
    "negatives": None,
    "input": None,
    "features": None,
    "synthetic": None,
    "out": None,
    "model_file": None,
    "report": None,
    "snapshot": None,
    "target": None,
    "jobs": 1,
}
EXPERIMENT_FIELDS = {f.name: f for f in fields(model_zoo.ExperimentConfig)}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _field_type(f):
    t = str(f.type)
    if "bool" in t:
        return bool
    if "float" in t:
        return float
    if "int" in t:
        return int
    return str


def _add_experiment_flags(p, names):
    for name in names:
        f = EXPERIMENT_FIELDS[name]
        flag = "--" + name.replace("_", "-")
        kind = _field_type(f)
        if kind is bool:
            p.add_argument(flag, dest=name, action=argparse.BooleanOptionalAction, default=None)
        else:
            p.add_argument(flag, dest=name, type=kind, default=None, help=f"default {f.default!r}")


def _common(p):
    p.add_argument("--config", help="flat JSON config file (needs \"version\": 1)")
    p.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    p.add_argument("--jobs", type=int, default=None, help="worker processes for feature extraction")


def _data_flags(p, features=True):
    p.add_argument("--positives", help="FASTA of positive examples")
    p.add_argument("--negatives", help="FASTA of negative examples")
    p.add_argument("--synthetic", metavar="N_POS,N_NEG", help="use a synthetic hairpin dataset")
    if features:
        p.add_argument("--features", help="feature CSV from `extract` (DBN models)")


FEATURE_FLAGS = ["n_samples", "temperature", "n_shuffles", "shuffle_samples"]
TRAIN_FLAGS = [n for n in EXPERIMENT_FIELDS if n != "seed"]


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="premirna", description="pre-miRNA classification pipelines")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic hairpin dataset")
    _common(p)
    p.add_argument("--synthetic", metavar="N_POS,N_NEG", help="class sizes (default 200,200)")
    p.add_argument("--out", help="output prefix: <out>.pos.fa, <out>.neg.fa, <out>.manifest.csv")

    p = sub.add_parser("extract", help="compute the feature catalogue")
    _common(p)
    _data_flags(p, features=False)
    p.add_argument("--input", help="unlabeled FASTA")
    p.add_argument("--out", help="output CSV")
    _add_experiment_flags(p, ["subset", *FEATURE_FLAGS])

    p = sub.add_parser("balance", help="k-means under-sampling of negatives")
    _common(p)
    p.add_argument("--features", help="feature CSV; rows labeled negative are candidates")
    p.add_argument("--target", type=int, help="number of negatives to keep")
    p.add_argument("--negatives", help="optional negative FASTA to filter")
    p.add_argument("--out", help="output file: selected ids, or FASTA if --negatives is given")
    _add_experiment_flags(p, ["k_clusters"])

    p = sub.add_parser("train", help="cross-validate, then fit a model on all data")
    _common(p)
    _data_flags(p)
    p.add_argument("--out", help="model file to write")
    p.add_argument("--report", help="JSON report (default <out>.report.json)")
    p.add_argument("--snapshot", help="config snapshot (default <out>.config.json)")
    p.add_argument("--hyper", action="append", default=[], metavar="KEY=VALUE",
                   help="CNN hyper-parameter override, e.g. window=12 (alias filter=12)")
    _add_experiment_flags(p, TRAIN_FLAGS)

    p = sub.add_parser("eval", help="score a saved model on a labeled dataset")
    _common(p)
    _data_flags(p)
    p.add_argument("--model-file", dest="model_file", help="trained model")
    p.add_argument("--report", help="JSON metrics output (default stdout)")

    p = sub.add_parser("predict", help="score unlabeled sequences")
    _common(p)
    p.add_argument("--model-file", dest="model_file", help="trained model")
    p.add_argument("--input", help="FASTA to score")
    p.add_argument("--features", help="feature CSV to score (DBN models)")
    p.add_argument("--out", help="output CSV (default stdout)")
    return parser


# ------------------------------------------------------------------ config

def default_config() -> dict:
    cfg = {"version": CONFIG_VERSION}
    cfg.update(model_zoo.ExperimentConfig().to_dict())
    cfg.update(IO_DEFAULTS)
    return cfg


def load_config_file(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must be a JSON object")
    if data.get("version") != CONFIG_VERSION:
        raise UsageError(f"config {path}: version must be {CONFIG_VERSION}, got {data.get('version')!r}")
    known = default_config()
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise UsageError(f"config {path}: unknown keys {unknown}")
    for key, value in data.items():
        if isinstance(value, (dict, list)):
            raise UsageError(f"config {path}: key {key!r} must be a scalar (config is flat)")
    return data


def resolve_config(args) -> dict:
    cfg = default_config()
    if getattr(args, "config", None):
        cfg.update(load_config_file(args.config))
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    for item in getattr(args, "hyper", []) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--hyper expects KEY=VALUE, got {item!r}")
        key = model_zoo.HYPER_ALIASES.get(key.strip(), key.strip())
        if key not in model_zoo.CNN_RANGES:
            raise UsageError(f"unknown hyper-parameter {key!r}; known: {sorted(model_zoo.CNN_RANGES)}")
        try:
            cfg[key] = float(value) if key == "dropout" else int(value)
        except ValueError as exc:
            raise UsageError(f"hyper-parameter {key} needs a number, got {value!r}") from exc
    if cfg["jobs"] < 1:
        raise UsageError("--jobs must be >= 1")
    return cfg


def experiment(cfg: dict) -> model_zoo.ExperimentConfig:
    try:
        return model_zoo.ExperimentConfig(**{k: cfg[k] for k in EXPERIMENT_FIELDS})
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


def _parse_pair(text) -> tuple[int, int]:
    try:
        a, b = (int(v) for v in str(text).split(","))
    except ValueError as exc:
        raise UsageError(f"--synthetic expects N_POS,N_NEG, got {text!r}") from exc
    if a < 1 or b < 1:
        raise UsageError("--synthetic counts must be >= 1")
    return a, b


def load_labeled(cfg: dict) -> LabeledDataset:
    if cfg["synthetic"]:
        n_pos, n_neg = _parse_pair(cfg["synthetic"])
        return model_zoo.synth_dataset(n_pos, n_neg, cfg["seed"])
    if cfg["positives"] and cfg["negatives"]:
        return load_dataset(cfg["positives"], cfg["negatives"])
    raise UsageError("give --positives and --negatives, --synthetic N,M, or --features")


def load_feature_table(cfg: dict, names) -> tuple[list, list, np.ndarray]:
    try:
        ids, labels, matrix, columns = read_feature_csv(cfg["features"])
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    missing = [n for n in names if n not in columns]
    if missing:
        raise DataError(f"{cfg['features']}: missing feature columns {missing}")
    cols = [columns.index(n) for n in names]
    return ids, labels, matrix[:, cols]


def _table(cfg, exp) -> model_zoo.ExampleTable:
    if cfg["features"]:
        if exp.kind != "dbn":
            raise UsageError("--features applies to DBN models; CNN models read sequences")
        ids, labels, x = load_feature_table(cfg, SUBSETS[exp.subset])
        if any(lab not in (POSITIVE, NEGATIVE) for lab in labels):
            raise DataError(f"{cfg['features']}: every row needs a positive/negative label")
        return model_zoo.ExampleTable(ids, labels, x)
    dataset = load_labeled(cfg)
    return model_zoo.build_table(exp, dataset, jobs=cfg["jobs"])


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# ------------------------------------------------------------- subcommands

def cmd_synth(cfg) -> int:
    if not cfg["out"]:
        raise UsageError("synth needs --out PREFIX")
    n_pos, n_neg = _parse_pair(cfg["synthetic"] or "200,200")
    ds = model_zoo.synth_dataset(n_pos, n_neg, cfg["seed"])
    prefix = cfg["out"]
    write_fasta([s for s, lab in ds if lab == POSITIVE], f"{prefix}.pos.fa")
    write_fasta([s for s, lab in ds if lab == NEGATIVE], f"{prefix}.neg.fa")
    write_manifest(ds, f"{prefix}.manifest.csv")
    log.info("wrote %d positives and %d negatives under %s", n_pos, n_neg, prefix)
    return EXIT_OK


def cmd_extract(cfg) -> int:
    if not cfg["out"]:
        raise UsageError("extract needs --out CSV")
    if cfg["input"]:
        seqs = read_fasta(cfg["input"])
        dataset = LabeledDataset([(s, None) for s in seqs], provenance=cfg["input"])
    else:
        dataset = load_labeled(cfg)
    exp = experiment(cfg)
    if cfg["subset"] not in SUBSETS:
        raise UsageError(f"unknown subset {cfg['subset']!r}")
    names = SUBSETS[cfg["subset"]]
    matrix = feature_matrix(dataset.sequences, exp.feature_config(), cfg["subset"], cfg["jobs"])
    write_feature_csv(cfg["out"], dataset.ids, dataset.labels, matrix, names)
    _write_json(cfg["out"] + ".config.json", {k: cfg[k] for k in ["version", *FEATURE_FLAGS, "seed", "subset"]})
    log.info("wrote %d x %d features to %s", *matrix.shape, cfg["out"])
    return EXIT_OK


def cmd_balance(cfg) -> int:
    if not cfg["features"] or cfg["target"] is None or not cfg["out"]:
        raise UsageError("balance needs --features CSV, --target N and --out")
    ids, labels, matrix, _ = read_feature_csv(cfg["features"])
    rows = [i for i, lab in enumerate(labels) if lab in (NEGATIVE, None)]
    if not rows:
        raise DataError(f"{cfg['features']}: no negative rows to balance")
    x = matrix[rows]
    x = apply_normalizer(fit_normalizer(x), x)
    seed = model_zoo.derive_seed(cfg["seed"], model_zoo.BALANCE)
    try:
        keep = balance.undersample_negatives(x, [ids[i] for i in rows], cfg["target"], cfg["k_clusters"], seed)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    if cfg["negatives"]:
        chosen = set(keep)
        write_fasta([s for s in read_fasta(cfg["negatives"]) if s.id in chosen], cfg["out"])
    else:
        Path(cfg["out"]).write_text("".join(f"{i}\n" for i in keep))
    log.info("kept %d of %d negatives", len(keep), len(rows))
    return EXIT_OK


def cmd_train(cfg) -> int:
    if not cfg["out"]:
        raise UsageError("train needs --out MODEL")
    exp = experiment(cfg)
    table = _table(cfg, exp)
    result = {"model": exp.model, "n_examples": len(table.ids), "note": model_zoo.REPRODUCIBILITY_NOTE}
    if exp.folds >= 2:
        report = model_zoo.cross_validate(exp, table)
        print(report.table())
        result["cross_validation"] = report.to_dict()
        result["accuracy"] = report.mean["accuracy"]
    model = model_zoo.train_model(exp, table)
    model.save(cfg["out"])
    train_metrics = model_zoo.evaluate(model, table.x, table.y())
    result["final_model"] = {"seed": model.seed, "training_metrics": train_metrics.to_dict(),
                             "final_loss": model.history[-1] if model.history else None}
    result.setdefault("accuracy", train_metrics.accuracy)
    snapshot = dict(cfg)
    snapshot["snapshot"] = None
    _write_json(cfg["snapshot"] or cfg["out"] + ".config.json", snapshot)
    _write_json(cfg["report"] or cfg["out"] + ".report.json", result)
    log.info("model written to %s", cfg["out"])
    return EXIT_OK


def _load_model(cfg) -> model_zoo.TrainedModel:
    if not cfg["model_file"]:
        raise UsageError("--model-file is required")
    try:
        return model_zoo.TrainedModel.load(cfg["model_file"])
    except OSError as exc:
        raise DataError(f"{cfg['model_file']}: cannot read ({exc.strerror or exc})") from exc


def _model_inputs(model, cfg, labeled: bool):
    """(ids, labels, x) for ``model``, replaying its recorded pipeline."""
    exp = model.config
    if cfg["features"]:
        if exp.kind != "dbn":
            raise DataError("model expects one-hot sequence input, not a feature CSV")
        return load_feature_table(cfg, model.feature_names)
    if labeled:
        dataset = load_labeled(cfg)
    else:
        if not cfg["input"]:
            raise UsageError("predict needs --input FASTA or --features CSV")
        dataset = LabeledDataset([(s, None) for s in read_fasta(cfg["input"])], cfg["input"])
    table = model_zoo.build_table(exp, dataset, jobs=cfg["jobs"])
    return table.ids, table.labels, table.x


def cmd_eval(cfg) -> int:
    model = _load_model(cfg)
    ids, labels, x = _model_inputs(model, cfg, labeled=True)
    if any(lab not in (POSITIVE, NEGATIVE) for lab in labels):
        raise DataError("eval needs labeled examples")
    y = np.array([lab == POSITIVE for lab in labels], dtype=np.int64)
    metrics = model_zoo.evaluate(model, x, y).to_dict()
    if cfg["report"]:
        _write_json(cfg["report"], metrics)
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_predict(cfg) -> int:
    model = _load_model(cfg)
    ids, _, x = _model_inputs(model, cfg, labeled=False)
    scores = model.predict_proba(x)
    classes = model.predict(x)
    fh = open(cfg["out"], "w", newline="") if cfg["out"] else sys.stdout
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "score_positive", "label"])
        for seq_id, score, cls in zip(ids, scores, classes):
            writer.writerow([seq_id, f"{score:.6f}", POSITIVE if cls == 1 else NEGATIVE])
    finally:
        if fh is not sys.stdout:
            fh.close()
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "extract": cmd_extract,
    "balance": cmd_balance,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (nn.TrainingDivergence, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except model_zoo.FoldFailure as exc:
        code = EXIT_NUMERIC if isinstance(exc.cause, FloatingPointError) else EXIT_DATA
        print(f"{'numeric failure' if code == EXIT_NUMERIC else 'data error'}: {exc}", file=sys.stderr)
        return code
    except (DataError, SequenceError, nn.ModelFileError, nn.ShapeError, ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
