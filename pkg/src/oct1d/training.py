"""Training loop, accuracy evaluation and the multi-run experiment harness."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import ops
from .architectures import ModelGraph, build_model
from .data import SeriesDataset
from .layers import BatchNorm1D
from .tensor import NonFiniteError, Tape, Tensor

log = logging.getLogger(__name__)

PRECISIONS = {"float64": np.float64, "float32": np.float32}
RUNS_HEADER = ("dataset", "model", "run", "seed", "accuracy", "params", "epochs", "seconds")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"loss became non-finite ({loss}) at epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    learning_rate: float = 1e-3
    lr_factor: float = 0.7071
    lr_patience: int = 50
    lr_min: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-7
    seed: int = 0
    precision: str = "float64"
    recalibrate_bn: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]


PROFILES = {
    "desk": {"epochs": 200, "precision": "float64"},
    "paper": {"epochs": 500, "precision": "float32"},
}


@dataclass
class TrainResult:
    history: list[float]
    best_epoch: int
    epochs_run: int
    final_lr: float


@dataclass
class RunRecord:
    dataset: str
    model: str
    run: int
    seed: int
    accuracy: float
    params: int
    epochs: int
    seconds: float

    def replay_key(self) -> tuple:
        """Every field except wall time."""
        return (self.dataset, self.model, self.run, self.seed, self.accuracy, self.params, self.epochs)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-7):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        scale = self.lr * math.sqrt(1 - b2 ** self.t) / (1 - b1 ** self.t)
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data = p.data - (scale * m / (np.sqrt(v) + self.eps)).astype(p.dtype)


def train(model: ModelGraph, dataset: SeriesDataset, config: TrainConfig) -> TrainResult:
    """Minimize softmax cross-entropy on the training split.

    The parameters kept at the end are those of the epoch with the lowest
    mean training loss; the test split is never consulted.
    """
    rng = np.random.default_rng(config.seed)
    x_all = dataset.train_x.astype(model.dtype)
    y_all = dataset.train_y
    n = len(x_all)
    params = model.parameters()
    opt = Adam(params, config.learning_rate, config.beta1, config.beta2, config.adam_eps)

    history: list[float] = []
    best_loss, best_epoch, best_state = math.inf, 0, model.state_dict()
    plateau_best, wait = math.inf, 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            try:
                with Tape() as tape:
                    logits = model.forward(Tensor(x_all[idx]), training=True, rng=rng)
                    loss = ops.softmax_cross_entropy(logits, y_all[idx])
            except NonFiniteError:
                raise TrainingDiverged(epoch, math.nan) from None
            for p in params:
                p.grad = None
            tape.backward(loss)
            opt.step()
            total += float(loss.data) * len(idx)
        epoch_loss = total / n
        if not math.isfinite(epoch_loss):
            raise TrainingDiverged(epoch, epoch_loss)
        history.append(epoch_loss)
        if epoch_loss < best_loss:
            best_loss, best_epoch, best_state = epoch_loss, epoch, model.state_dict()
        if epoch_loss < plateau_best:
            plateau_best, wait = epoch_loss, 0
        else:
            wait += 1
            if wait >= config.lr_patience:
                opt.lr = max(opt.lr * config.lr_factor, min(config.lr_min, opt.lr))
                wait = 0
    model.load_state_dict(best_state)
    if config.recalibrate_bn:
        recalibrate_batch_norm(model, x_all)
    return TrainResult(history, best_epoch, config.epochs, opt.lr)


def recalibrate_batch_norm(model: ModelGraph, x: np.ndarray, batch_size: int = 256) -> None:
    """Replace BN running statistics with population statistics under the current weights.

    The moving averages lag the weights and, early on, still carry their
    initial values; short runs otherwise evaluate with stale statistics.
    Each BN layer sees the inputs produced by batch-normalized upstream layers.
    """
    layers = [m for m in model.modules() if isinstance(m, BatchNorm1D)]
    if not layers:
        return
    x = np.asarray(x, dtype=model.dtype)
    for bn in layers:
        bn.begin_calibration()
    try:
        for i in range(0, len(x), batch_size):
            model.features(Tensor(x[i:i + batch_size]), training=True)
    finally:
        for bn in layers:
            bn.end_calibration()


def predict_logits(model: ModelGraph, x: np.ndarray, batch_size: int = 128) -> np.ndarray:
    x = np.asarray(x, dtype=model.dtype)
    out = [model.forward(Tensor(x[i:i + batch_size]), training=False).data for i in range(0, len(x), batch_size)]
    return np.concatenate(out, axis=0)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        return 0.0
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate(model: ModelGraph, dataset: SeriesDataset, split: str = "test") -> float:
    x, y = dataset.split(split)
    return accuracy(predict_logits(model, x), y)


@dataclass
class MultiRunResult:
    records: list[RunRecord]
    mean: float
    max: float
    failures: list[str] = field(default_factory=list)

    @property
    def incomplete(self) -> bool:
        return bool(self.failures)


def aggregate(accuracies: Iterable[float]) -> tuple[float, float]:
    acc = list(accuracies)
    if not acc:
        return math.nan, math.nan
    return float(np.mean(acc)), float(np.max(acc))


def single_run(model_name: str, dataset: SeriesDataset, run: int, base_seed: int, config: TrainConfig,
               model_kwargs: Optional[dict] = None) -> RunRecord:
    seed = base_seed + run
    start = time.perf_counter()
    model = build_model(model_name, dataset.num_classes, dataset.length, seed=seed, dtype=config.dtype,
                        **(model_kwargs or {}))
    result = train(model, dataset, replace(config, seed=seed))
    acc = evaluate(model, dataset, "test")
    return RunRecord(dataset.name, model_name, run, seed, acc, model.param_count(), result.epochs_run,
                     round(time.perf_counter() - start, 3))


def _job(args):
    model_name, dataset, run, base_seed, config, model_kwargs = args
    try:
        return single_run(model_name, dataset, run, base_seed, config, model_kwargs)
    except (TrainingDiverged, NonFiniteError) as exc:
        return f"run {run}: {exc}"


def multi_run(
    model_name: str,
    dataset: SeriesDataset,
    n_runs: int = 20,
    base_seed: int = 0,
    config: Optional[TrainConfig] = None,
    store: Optional["ResultsStore"] = None,
    jobs: int = 1,
    model_kwargs: Optional[dict] = None,
) -> MultiRunResult:
    """Train ``n_runs`` independently seeded models; seeds are base_seed + run."""
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    config = config or TrainConfig()
    args = [(model_name, dataset, r, base_seed, config, model_kwargs) for r in range(n_runs)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_job, args))
    else:
        outcomes = [_job(a) for a in args]
    records = [o for o in outcomes if isinstance(o, RunRecord)]
    failures = [o for o in outcomes if isinstance(o, str)]
    for f in failures:
        log.warning("%s on %s failed: %s", model_name, dataset.name, f)
    mean, best = aggregate(r.accuracy for r in records)
    result = MultiRunResult(records, mean, best, failures)
    if store is not None:
        store.append(records)
        store.write_aggregate(dataset.name, model_name, result)
    return result


class ResultsStore:
    """Append-only ``runs.csv`` plus one JSON aggregate per (dataset, model).

    Appending a row whose (dataset, model, run) key already exists is allowed;
    readers keep the last occurrence.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.runs_path = self.root / "runs.csv"

    def append(self, records: Sequence[RunRecord]) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        new = not self.runs_path.exists() or self.runs_path.stat().st_size == 0
        with open(self.runs_path, "a", newline="") as fh:
            writer = csv.writer(fh)
            if new:
                writer.writerow(RUNS_HEADER)
            for r in records:
                writer.writerow([r.dataset, r.model, r.run, r.seed, repr(r.accuracy), r.params, r.epochs, r.seconds])

    def write_aggregate(self, dataset: str, model: str, result: MultiRunResult) -> Path:
        path = self.root / dataset / f"{model}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "dataset": dataset,
            "model": model,
            "n_runs": len(result.records),
            "mean": result.mean,
            "max": result.max,
            "accuracies": [r.accuracy for r in result.records],
            "incomplete": result.incomplete,
            "failures": result.failures,
        }
        path.write_text(json.dumps(payload, indent=2) + "\n")
        return path

    def load(self) -> list[RunRecord]:
        return read_runs(self.runs_path)


def read_runs(path) -> list[RunRecord]:
    records: dict[tuple, RunRecord] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(RUNS_HEADER) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            rec = RunRecord(
                row["dataset"], row["model"], int(row["run"]), int(row["seed"]), float(row["accuracy"]),
                int(row["params"]), int(row["epochs"]), float(row["seconds"]),
            )
            records[(rec.dataset, rec.model, rec.run)] = rec
    return list(records.values())
