"""Feature ablation: GAP-feature extraction, a linear max-margin classifier and
per-layer activation dumps."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .architectures import ModelGraph
from .octconv import OctPair
from .tensor import Tensor


@dataclass
class FeatureSet:
    features: np.ndarray
    labels: np.ndarray
    source: str
    layer: str = "gap"

    @property
    def width(self) -> int:
        return self.features.shape[1]


def extract_features(model: ModelGraph, x: np.ndarray, labels: np.ndarray, batch_size: int = 128) -> FeatureSet:
    """GAP output of the convolutional trunk, in inference mode.

    For LSTM models only the convolutional branch is tapped.
    """
    x = np.asarray(x, dtype=model.dtype)
    chunks = [model.features(Tensor(x[i:i + batch_size]), training=False).data for i in range(0, len(x), batch_size)]
    feats = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, model.trunk.out_channels))
    return FeatureSet(feats.astype(np.float64), np.asarray(labels), model.name)


class LinearSVM:
    """L2-regularized hinge-loss linear classifier, one-vs-rest for K > 2.

    Each binary problem minimizes ``0.5*|w|^2 + C * mean_i hinge(y_i (w.x_i + b))``
    by full-batch subgradient descent with step ``lr / t`` at epoch t.
    Features are standardized with training-set statistics. The seed only
    sets a small random initial ``w``, so the fit is deterministic.
    """

    def __init__(self, C: float = 1.0, epochs: int = 200, lr: float = 1e-2, seed: int = 0,
                 standardize: bool = True):
        self.C, self.epochs, self.lr, self.seed, self.standardize = C, epochs, lr, seed, standardize

    def _prep(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return (x - self.mean_) / self.scale_

    def fit(self, x: np.ndarray, y: np.ndarray) -> "LinearSVM":
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y)
        self.classes_ = np.unique(y)
        if self.classes_.size < 2:
            raise ValueError("linear_svm needs at least two classes in the training set")
        if self.standardize:
            self.mean_ = x.mean(axis=0)
            std = x.std(axis=0)
            self.scale_ = np.where(std > 1e-12, std, 1.0)
        else:
            self.mean_, self.scale_ = np.zeros(x.shape[1]), np.ones(x.shape[1])
        xs = self._prep(x)
        targets = [self.classes_[1]] if self.classes_.size == 2 else list(self.classes_)
        rng = np.random.default_rng(self.seed)
        w0 = rng.normal(0.0, 1e-3, size=(len(targets), x.shape[1]))
        self.coef_ = np.empty_like(w0)
        self.intercept_ = np.zeros(len(targets))
        for k, cls in enumerate(targets):
            s = np.where(y == cls, 1.0, -1.0)
            self.coef_[k], self.intercept_[k] = self._fit_binary(xs, s, w0[k].copy())
        return self

    def _fit_binary(self, x: np.ndarray, s: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, float]:
        b = 0.0
        for t in range(1, self.epochs + 1):
            active = (s * (x @ w + b)) < 1.0
            coeff = np.where(active, s, 0.0)
            gw = w - self.C * (coeff @ x) / len(s)
            gb = -self.C * coeff.mean()
            step = self.lr / t
            w = w - step * gw
            b = b - step * gb
        return w, b

    def decision_function(self, x: np.ndarray) -> np.ndarray:
        return self._prep(x) @ self.coef_.T + self.intercept_

    def predict(self, x: np.ndarray) -> np.ndarray:
        d = self.decision_function(x)
        if self.classes_.size == 2:
            return np.where(d[:, 0] > 0, self.classes_[1], self.classes_[0])
        return self.classes_[np.argmax(d, axis=1)]


def linear_svm(train: FeatureSet, test: FeatureSet, C: float = 1.0, seed: int = 0, epochs: int = 200,
               lr: float = 1e-2) -> float:
    """Test accuracy of a :class:`LinearSVM` fit on ``train``."""
    clf = LinearSVM(C=C, epochs=epochs, lr=lr, seed=seed).fit(train.features, train.labels)
    if len(test.labels) == 0:
        return 0.0
    return float(np.mean(clf.predict(test.features) == test.labels))


def raw_features(x: np.ndarray, labels: np.ndarray) -> FeatureSet:
    x = np.asarray(x, dtype=np.float64)
    return FeatureSet(x.reshape(len(x), -1), np.asarray(labels), "raw", "input")


def probe(model: ModelGraph, series: np.ndarray) -> dict[str, np.ndarray]:
    """Per-layer trunk activations for one series, keyed ``block<k>[.high|.low]``.

    Each value is a (time, channels) array from an inference-mode forward pass.
    """
    x = np.asarray(series, dtype=model.dtype).reshape(1, -1, 1)
    taps: dict = {}
    model.features(Tensor(x), training=False, taps=taps)
    out = {}
    for name, value in taps.items():
        if name == "gap":
            continue
        if isinstance(value, OctPair):
            out[f"{name}.high"] = value.high.data[0]
            if value.low is not None:
                out[f"{name}.low"] = value.low.data[0]
        else:
            out[name] = value.data[0]
    return out


def activation_dump(model: ModelGraph, series: np.ndarray, filters_per_layer: int, seed: int = 0):
    """Sample filters per tapped layer and collect their responses.

    Returns ``(rows, selected, svgs)``: CSV rows ``(layer, filter, position,
    value)``, the chosen filter indices per layer, and one SVG per layer.
    """
    rng = np.random.default_rng(seed)
    series = np.asarray(series, dtype=np.float64).reshape(-1)
    acts = probe(model, series)
    rows, selected, svgs = [], {}, {}
    for layer, act in acts.items():
        width = act.shape[1]
        n = filters_per_layer
        if n > width:
            warnings.warn(f"{layer}: {n} filters requested but layer has {width}; using {width}")
            n = width
        chosen = np.sort(rng.choice(width, size=n, replace=False))
        selected[layer] = chosen.tolist()
        for f in chosen:
            for pos, v in enumerate(act[:, f]):
                rows.append((layer, int(f), pos, float(v)))
        svgs[layer] = _layer_svg(layer, series, act[:, chosen], chosen)
    return rows, selected, svgs


_PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def _polyline(values: np.ndarray, stride: float, x0: float, y0: float, w: float, h: float, color: str) -> str:
    n = len(values)
    lo, hi = float(values.min()), float(values.max())
    span = hi - lo if hi > lo else 1.0
    total = max(n * stride - 1, 1)
    pts = " ".join(
        f"{x0 + (i * stride) / total * w:.2f},{y0 + h - (v - lo) / span * h:.2f}" for i, v in enumerate(values)
    )
    return f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1"/>'


def _layer_svg(layer: str, series: np.ndarray, responses: np.ndarray, filters) -> str:
    width, panel = 600, 80
    n = responses.shape[1]
    height = 30 + panel * (n + 1)
    stride = len(series) / responses.shape[0]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" '
        f'font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="10" y="18">{layer}</text>',
        f'<text x="10" y="{30 + 12}">input</text>',
        _polyline(series, 1.0, 80, 30, width - 90, panel - 10, "black"),
    ]
    for j in range(n):
        y0 = 30 + panel * (j + 1)
        parts.append(f'<text x="10" y="{y0 + 12}">filter {int(filters[j])}</text>')
        parts.append(_polyline(series, 1.0, 80, y0, width - 90, panel - 10, "#cccccc"))
        parts.append(_polyline(responses[:, j], stride, 80, y0, width - 90, panel - 10, _PALETTE[j % len(_PALETTE)]))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_features_csv(path, fs: FeatureSet) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"f{i}" for i in range(fs.width)])
        for label, row in zip(fs.labels, fs.features):
            writer.writerow([int(label)] + [repr(float(v)) for v in row])


def write_ablation(out_dir, model: ModelGraph, train: FeatureSet, test: FeatureSet, report: dict,
                   series: np.ndarray, filters_per_layer: int, seed: int) -> Path:
    """Write features, SVM report, activation table and per-layer SVGs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_features_csv(out / "features_train.csv", train)
    write_features_csv(out / "features_test.csv", test)
    (out / "svm_report.json").write_text(json.dumps(report, indent=2) + "\n")
    rows, selected, svgs = activation_dump(model, series, filters_per_layer, seed)
    with open(out / "activations.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "filter", "position", "value"])
        for layer, f, pos, v in rows:
            writer.writerow([layer, f, pos, repr(v)])
    for k, (layer, svg) in enumerate(svgs.items(), 1):
        (out / f"layer{k}.svg").write_text(svg)
    (out / "layers.json").write_text(json.dumps({f"layer{k}": {"tap": layer, "filters": selected[layer]}
                                                 for k, layer in enumerate(svgs, 1)}, indent=2) + "\n")
    return out


def ablate(model: ModelGraph, dataset, C: float = 1.0, svm_seed: int = 0, filters_per_layer: int = 4,
           dump_seed: int = 0, out_dir=None, svm_epochs: int = 200, svm_lr: float = 1e-2) -> dict:
    """Compare linear separability of trunk features against the raw series."""
    train_fs = extract_features(model, dataset.train_x, dataset.train_y)
    test_fs = extract_features(model, dataset.test_x, dataset.test_y)
    feat_acc = linear_svm(train_fs, test_fs, C, svm_seed, svm_epochs, svm_lr)
    raw_acc = linear_svm(raw_features(dataset.train_x, dataset.train_y),
                         raw_features(dataset.test_x, dataset.test_y), C, svm_seed, svm_epochs, svm_lr)
    report = {
        "dataset": dataset.name,
        "model": model.name,
        "feature_width": train_fs.width,
        "svm_accuracy": feat_acc,
        "raw_svm_accuracy": raw_acc,
        "C": C,
        "epochs": svm_epochs,
        "lr": svm_lr,
        "seed": svm_seed,
    }
    if out_dir is not None:
        write_ablation(out_dir, model, train_fs, test_fs, report, dataset.test_x[0, :, 0], filters_per_layer,
                       dump_seed)
    return report
