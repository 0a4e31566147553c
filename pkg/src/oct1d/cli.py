"""Command-line entry point: ``oct1d {train,compare,gradcheck,ablate}``.

Options come from flags, optionally layered over a ``--config`` file of
``key=value`` lines (flags win). Exit codes: 0 success, 2 configuration
error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections import defaultdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import serialize, stats
from .ablation import ablate
from .architectures import ARCHITECTURES, build_model
from .data import load_ucr_tsv, resolve_dataset
from .gradcheck import REL_TOL, run_suite, summarize
from .training import PROFILES, ResultsStore, TrainConfig, multi_run, read_runs, train

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("oct1d")


class ConfigError(Exception):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def _int(v):
    return int(v)


def _bool(v):
    if isinstance(v, bool):
        return v
    return str(v).strip().lower() in ("1", "true", "yes", "on")


MODEL_FIELDS = {
    "model": (str, None),
    "alpha": (float, 0.5),
    "lstm_units": (_int, 8),
    "dropout": (float, 0.8),
}
TRAIN_FIELDS = {
    "epochs": (_int, None),
    "batch_size": (_int, 16),
    "lr": (float, 1e-3),
    "precision": (str, None),
    "profile": (str, "desk"),
}
DATA_FIELDS = {
    "dataset": (str, None),
    "train_file": (str, None),
    "test_file": (str, None),
}
COMMAND_FIELDS = {
    "train": {**DATA_FIELDS, **MODEL_FIELDS, **TRAIN_FIELDS,
              "runs": (_int, 1), "seed": (_int, 0), "out": (str, "results"), "jobs": (_int, 1)},
    "compare": {"results": (str, "results/runs.csv"), "models": (str, None), "metric": (str, "mean"),
                "external": (str, None), "out": (str, "reports"), "alpha_level": (float, 0.05)},
    "gradcheck": {"seed": (_int, 0), "shapes": (_int, 5)},
    "ablate": {**DATA_FIELDS, **MODEL_FIELDS, **TRAIN_FIELDS,
               "seed": (_int, 0), "filters": (_int, 4), "svm_c": (float, 1.0), "svm_epochs": (_int, 200),
               "out": (str, "ablation")},
}


def read_config_file(path) -> dict:
    """Parse ``key=value`` lines; ``#`` starts a comment, dashes map to underscores."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("config", f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oct1d", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "train": "train a model for N seeded runs and append RunRecords",
        "compare": "pairwise Wilcoxon tests, Holm correction and a CD diagram",
        "gradcheck": "finite-difference gradient check of every layer family",
        "ablate": "train once, then linear-SVM and activation ablation outputs",
    }
    for command, fields in COMMAND_FIELDS.items():
        p = sub.add_parser(command, help=helps[command])
        p.add_argument("--config", help="key=value file; flags override it")
        for name in fields:
            p.add_argument("--" + name.replace("_", "-"), dest=name, default=None)
    return parser


def resolve_options(command: str, args: argparse.Namespace) -> dict:
    fields = COMMAND_FIELDS[command]
    raw = {name: default for name, (_, default) in fields.items()}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError("config", f"file {path} does not exist")
        for key, value in read_config_file(path).items():
            if key not in fields:
                raise ConfigError(key, "unknown configuration key")
            raw[key] = value
    for name in fields:
        value = getattr(args, name, None)
        if value is not None:
            raw[name] = value
    opts = {}
    for name, (conv, _) in fields.items():
        value = raw[name]
        if value is None:
            opts[name] = None
            continue
        try:
            opts[name] = conv(value)
        except (TypeError, ValueError):
            raise ConfigError(name, f"invalid value {value!r}") from None
    return opts


def _check_model_opts(opts: dict) -> None:
    if opts["model"] is None:
        raise ConfigError("model", "required")
    if opts["model"] not in ARCHITECTURES:
        raise ConfigError("model", f"unknown model {opts['model']!r}; choose from {', '.join(ARCHITECTURES)}")
    if not 0.0 <= opts["alpha"] <= 1.0:
        raise ConfigError("alpha", "must lie in [0, 1]")
    if opts["lstm_units"] < 1:
        raise ConfigError("lstm_units", "must be >= 1")
    if not 0.0 <= opts["dropout"] < 1.0:
        raise ConfigError("dropout", "must lie in [0, 1)")


def _train_config(opts: dict, seed: int) -> TrainConfig:
    profile = opts["profile"]
    if profile not in PROFILES:
        raise ConfigError("profile", f"must be one of {', '.join(PROFILES)}")
    preset = PROFILES[profile]
    epochs = opts["epochs"] if opts["epochs"] is not None else preset["epochs"]
    precision = opts["precision"] or preset["precision"]
    checks = (("epochs", epochs >= 1), ("batch_size", opts["batch_size"] >= 1), ("lr", opts["lr"] >= 0),
              ("precision", precision in ("float32", "float64")))
    for field, ok in checks:
        if not ok:
            raise ConfigError(field, "invalid value")
    return TrainConfig(epochs=epochs, batch_size=opts["batch_size"], learning_rate=opts["lr"], seed=seed,
                       precision=precision)


def _load_dataset(opts: dict):
    if opts["train_file"] or opts["test_file"]:
        if not (opts["train_file"] and opts["test_file"]):
            raise ConfigError("train_file", "train_file and test_file must be given together")
        for field in ("train_file", "test_file"):
            if not Path(opts[field]).exists():
                raise ConfigError(field, f"file {opts[field]} does not exist")
        return load_ucr_tsv(opts["train_file"], opts["test_file"], name=opts["dataset"])
    if not opts["dataset"]:
        raise ConfigError("dataset", "required (synth:<kind>:<n>:<Q>:<seed> URI or UCR dataset name)")
    try:
        return resolve_dataset(opts["dataset"])
    except FileNotFoundError as exc:
        raise ConfigError("dataset", str(exc)) from None
    except ValueError as exc:
        raise ConfigError("dataset", str(exc)) from None


def _model_kwargs(opts: dict) -> dict:
    return {"alpha": opts["alpha"], "lstm_units": opts["lstm_units"], "dropout": opts["dropout"]}


def cmd_train(opts: dict) -> int:
    _check_model_opts(opts)
    if opts["runs"] < 1:
        raise ConfigError("runs", "must be >= 1")
    if opts["jobs"] < 1:
        raise ConfigError("jobs", "must be >= 1")
    config = _train_config(opts, opts["seed"])
    dataset = _load_dataset(opts)
    store = ResultsStore(opts["out"])
    result = multi_run(opts["model"], dataset, opts["runs"], opts["seed"], config, store, opts["jobs"],
                       _model_kwargs(opts))
    for r in result.records:
        print(f"{r.dataset} {r.model} run={r.run} seed={r.seed} accuracy={r.accuracy:.4f} "
              f"params={r.params} seconds={r.seconds}")
    print(f"{dataset.name} {opts['model']} runs={len(result.records)} mean={result.mean:.4f} max={result.max:.4f}")
    if result.failures:
        for f in result.failures:
            print(f"failed: {f}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def load_scores(results_csv, metric: str, external=None) -> dict:
    """{model: {dataset: mean-or-max accuracy}} from runs.csv plus literature rows."""
    per_cell = defaultdict(list)
    for r in read_runs(results_csv):
        per_cell[(r.model, r.dataset)].append(r.accuracy)
    reduce = np.mean if metric == "mean" else np.max
    scores: dict = defaultdict(dict)
    for (model, dataset), accs in per_cell.items():
        scores[model][dataset] = float(reduce(accs))
    if external:
        with open(external, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = {"model", "dataset", "accuracy"} - set(reader.fieldnames or ())
            if missing:
                raise ValueError(f"{external}: missing columns {sorted(missing)}")
            for row in reader:
                scores[row["model"]][row["dataset"]] = float(row["accuracy"])
    return dict(scores)


def compare(scores: dict, models: Optional[Sequence[str]], out_dir, alpha: float = 0.05,
            title: str = "") -> dict:
    """Run the full comparison and write reports; returns a summary dict."""
    models, datasets, table = stats.accuracy_table(scores, models)
    if len(models) < 2:
        raise ValueError("need at least two models to compare")
    ranks = stats.average_ranks(table)
    reports = stats.pairwise_reports(models, table)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for rep in reports:
        payload = rep.to_dict()
        payload["alpha"] = alpha
        payload["significant"] = rep.p_holm <= alpha
        (out / f"wsrt_{rep.model_a}_vs_{rep.model_b}.json").write_text(json.dumps(payload, indent=2) + "\n")
    svg = stats.cd_diagram_svg(models, ranks.tolist(), reports, alpha, title)
    (out / "cd.svg").write_text(svg)
    summary = {
        "models": models,
        "datasets": datasets,
        "average_ranks": dict(zip(models, ranks.tolist())),
        "cliques": stats.cliques(models, ranks.tolist(), reports, alpha),
        "alpha": alpha,
    }
    (out / "ranks.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def cmd_compare(opts: dict) -> int:
    if opts["metric"] not in ("mean", "max"):
        raise ConfigError("metric", "must be 'mean' or 'max'")
    if not Path(opts["results"]).exists():
        raise ConfigError("results", f"file {opts['results']} does not exist")
    if opts["external"] and not Path(opts["external"]).exists():
        raise ConfigError("external", f"file {opts['external']} does not exist")
    models = [m.strip() for m in opts["models"].split(",") if m.strip()] if opts["models"] else None
    scores = load_scores(opts["results"], opts["metric"], opts["external"])
    try:
        summary = compare(scores, models, opts["out"], opts["alpha_level"], f"{opts['metric']} accuracy")
    except ValueError as exc:
        raise ConfigError("results", str(exc)) from None
    for model in sorted(summary["average_ranks"], key=summary["average_ranks"].get):
        print(f"{model}: average rank {summary['average_ranks'][model]:.3f}")
    print(f"reports written to {opts['out']}")
    return EXIT_OK


def cmd_gradcheck(opts: dict) -> int:
    if opts["shapes"] < 1:
        raise ConfigError("shapes", "must be >= 1")
    summary = summarize(run_suite(opts["seed"], opts["shapes"]))
    ok = True
    for family, (err, passed) in summary.items():
        ok = ok and passed
        print(f"{family:24s} max_rel_err={err:.3e} {'PASS' if passed else 'FAIL'}")
    print(f"gradcheck {'passed' if ok else 'FAILED'} (tolerance {REL_TOL:g})")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_ablate(opts: dict) -> int:
    _check_model_opts(opts)
    if opts["filters"] < 1:
        raise ConfigError("filters", "must be >= 1")
    config = _train_config(opts, opts["seed"])
    dataset = _load_dataset(opts)
    model = build_model(opts["model"], dataset.num_classes, dataset.length, seed=opts["seed"], dtype=config.dtype,
                        **_model_kwargs(opts))
    train(model, dataset, config)
    out_dir = Path(opts["out"]) / dataset.name / opts["model"]
    report = ablate(model, dataset, C=opts["svm_c"], svm_seed=opts["seed"], filters_per_layer=opts["filters"],
                    dump_seed=opts["seed"], out_dir=out_dir, svm_epochs=opts["svm_epochs"])
    serialize.save(out_dir / "model.bin", model.state_dict())
    print(json.dumps(report, indent=2))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "compare": cmd_compare, "gradcheck": cmd_gradcheck, "ablate": cmd_ablate}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        opts = resolve_options(args.command, args)
        return COMMANDS[args.command](opts)
    except ConfigError as exc:
        print(f"oct1d {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - surfaced as runtime failure exit code
        log.debug("runtime failure", exc_info=True)
        print(f"oct1d {args.command}: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
