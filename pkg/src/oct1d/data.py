"""UCR-format loading, per-series z-normalization and synthetic toy datasets."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

NORM_EPS = 1e-8
SYNTH_KINDS = ("sine", "square", "noise-trend")


class ParseError(ValueError):
    pass


@dataclass
class SeriesDataset:
    """Train/test splits as (N, Q, 1) arrays with contiguous integer labels.

    Positions at or past a series' original length (and interior missing
    values) are padding and hold 0.
    """

    name: str
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    label_map: dict = field(default_factory=dict)
    train_lengths: Optional[np.ndarray] = None
    test_lengths: Optional[np.ndarray] = None

    def __post_init__(self):
        for arr in (self.train_x, self.test_x):
            arr.setflags(write=False)
        if self.train_lengths is None:
            self.train_lengths = np.full(len(self.train_x), self.length, dtype=np.int64)
        if self.test_lengths is None:
            self.test_lengths = np.full(len(self.test_x), self.length, dtype=np.int64)

    @property
    def length(self) -> int:
        return self.train_x.shape[1]

    @property
    def num_classes(self) -> int:
        return int(max(self.train_y.max(), self.test_y.max() if len(self.test_y) else 0)) + 1

    def split(self, which: str) -> tuple[np.ndarray, np.ndarray]:
        if which == "train":
            return self.train_x, self.train_y
        if which == "test":
            return self.test_x, self.test_y
        raise ValueError(f"unknown split {which!r}")


def _parse_token(tok: str, path, lineno: int) -> float:
    t = tok.strip()
    if t == "" or t.lower() in ("nan", "?"):
        return math.nan
    try:
        return float(t)
    except ValueError:
        raise ParseError(f"{path}:{lineno}: non-numeric token {tok!r}") from None


def _read_tsv(path) -> tuple[list[float], list[list[float]]]:
    labels, rows = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split("\t") if "\t" in line else line.split()
            label = _parse_token(fields[0], path, lineno)
            if math.isnan(label):
                raise ParseError(f"{path}:{lineno}: missing class label")
            values = [_parse_token(t, path, lineno) for t in fields[1:]]
            labels.append(label)
            rows.append(values)
    if not rows:
        raise ParseError(f"{path}: empty file")
    return labels, rows


def z_normalize(series: np.ndarray, mask: Optional[np.ndarray] = None, eps: float = NORM_EPS) -> np.ndarray:
    """Per-series z-normalization over valid positions.

    ``series`` is (N, Q) or (Q,); ``mask`` marks valid positions (default
    all). Uses the population standard deviation; series with std below
    ``eps`` map to zeros. Padding positions are set to 0.
    """
    x = np.asarray(series, dtype=np.float64)
    squeeze = x.ndim == 1
    x = np.atleast_2d(x)
    m = np.ones_like(x, dtype=bool) if mask is None else np.atleast_2d(np.asarray(mask, dtype=bool))
    x = np.where(m, x, 0.0)
    count = np.maximum(m.sum(axis=1, keepdims=True), 1)
    mean = x.sum(axis=1, keepdims=True) / count
    centered = np.where(m, x - mean, 0.0)
    std = np.sqrt((centered ** 2).sum(axis=1, keepdims=True) / count)
    out = np.where(std > eps, centered / np.where(std > eps, std, 1.0), 0.0)
    out = np.where(m, out, 0.0)
    return out[0] if squeeze else out


def _to_array(rows: list[list[float]], Q: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = np.full((len(rows), Q), np.nan)
    for i, r in enumerate(rows):
        x[i, :len(r)] = r
    valid = ~np.isnan(x)
    lengths = np.array([np.flatnonzero(v).max() + 1 if v.any() else 0 for v in valid], dtype=np.int64)
    return np.where(valid, x, 0.0), valid, lengths


def load_ucr_tsv(path_train, path_test, name: Optional[str] = None, normalize: bool = True) -> SeriesDataset:
    """Load a UCR-archive TRAIN/TEST pair.

    Labels are remapped to 0..K-1 in ascending order of the original label.
    Missing values (NaN tokens) and absent trailing values become padding.
    """
    tr_labels, tr_rows = _read_tsv(path_train)
    te_labels, te_rows = _read_tsv(path_test)
    Q = max(len(r) for r in tr_rows + te_rows)
    if Q == 0:
        raise ParseError(f"{path_train}: no series values")
    classes = sorted(set(tr_labels))
    label_map = {_label_key(c): i for i, c in enumerate(classes)}
    unknown = sorted(set(te_labels) - set(classes))
    if unknown:
        raise ParseError(f"{path_test}: labels {unknown} do not occur in the training split")
    splits = []
    for labels, rows in ((tr_labels, tr_rows), (te_labels, te_rows)):
        x, valid, lengths = _to_array(rows, Q)
        if normalize:
            x = z_normalize(x, valid)
        y = np.array([label_map[_label_key(v)] for v in labels], dtype=np.int64)
        splits.append((x[:, :, None], y, lengths))
    (trx, tr_y, trl), (tex, te_y, tel) = splits
    return SeriesDataset(
        name or Path(path_train).stem.replace("_TRAIN", ""),
        trx, tr_y, tex, te_y, label_map, trl, tel,
    )


def _label_key(v: float):
    return int(v) if float(v).is_integer() else float(v)


def write_ucr_tsv(path, x: np.ndarray, labels, lengths: Optional[np.ndarray] = None) -> None:
    """Write series in UCR TSV form; values past ``lengths`` are omitted."""
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[:, :, 0]
    with open(path, "w") as fh:
        for i, row in enumerate(x):
            n = len(row) if lengths is None else int(lengths[i])
            fields = [repr(_label_key(labels[i]))] + [repr(float(v)) for v in row[:n]]
            fh.write("\t".join(fields) + "\n")


def _class_templates(kind: str, Q: int, rng: np.random.Generator) -> np.ndarray:
    """One clean series per class, with mild per-sample jitter drawn from rng."""
    t = np.arange(Q) / Q
    if kind == "sine":
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.8, 1.2)
        return np.stack([amp * np.sin(2 * np.pi * f * t + phase) for f in (1, 2, 4)])
    if kind == "square":
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.8, 1.2)
        return np.stack([amp * np.sign(np.sin(2 * np.pi * f * t + phase) + 1e-12) for f in (1, 2, 4)])
    if kind == "noise-trend":
        slope = rng.uniform(1.5, 2.5)
        return np.stack([slope * t, -slope * t, np.zeros(Q)])
    raise ValueError(f"unknown synthetic kind {kind!r}; choose from {', '.join(SYNTH_KINDS)}")


def synth_toy(kind: str, n_per_class: int, Q: int, seed: int, noise: float = 0.3,
              normalize: bool = True) -> SeriesDataset:
    """Three-class toy problem with ``n_per_class`` series per class per split.

    ``sine``/``square`` classes differ in frequency (1, 2, 4 cycles) and
    each series gets a uniformly random phase, so linear models on the raw
    values do poorly. ``noise-trend`` classes are rising, falling and flat.
    Gaussian noise of std ``noise`` is added. Deterministic in ``seed``.
    """
    if n_per_class < 1 or Q < 2:
        raise ValueError("need n_per_class >= 1 and Q >= 2")
    rng = np.random.default_rng(seed)
    splits = []
    for _ in ("train", "test"):
        xs, ys = [], []
        for c in range(3):
            for _ in range(n_per_class):
                xs.append(_class_templates(kind, Q, rng)[c] + noise * rng.standard_normal(Q))
                ys.append(c)
        x = np.array(xs)
        if normalize:
            x = z_normalize(x)
        splits.append((x[:, :, None], np.array(ys, dtype=np.int64)))
    (trx, tr_y), (tex, te_y) = splits
    name = f"synth-{kind}-{n_per_class}-{Q}-{seed}"
    return SeriesDataset(name, trx, tr_y, tex, te_y, {c: c for c in range(3)})


def data_dir() -> Path:
    return Path(os.environ.get("OCT1D_DATA_DIR", "data"))


def resolve_dataset(ref: str, root: Optional[Path] = None) -> SeriesDataset:
    """Load a dataset by ``synth:<kind>:<n>:<Q>:<seed>[:<noise>]`` URI or UCR name.

    A name resolves to ``<root>/<name>/<name>_TRAIN.tsv`` and ``_TEST.tsv``
    with ``root`` defaulting to ``$OCT1D_DATA_DIR`` or ``./data``.
    """
    if ref.startswith("synth:"):
        parts = ref.split(":")
        if len(parts) not in (5, 6):
            raise ValueError(f"bad synthetic URI {ref!r}; expected synth:<kind>:<n>:<Q>:<seed>[:<noise>]")
        _, kind, n, Q, seed, *rest = parts
        noise = float(rest[0]) if rest else 0.3
        ds = synth_toy(kind, int(n), int(Q), int(seed), noise)
        ds.name = ref.replace(":", "-")
        return ds
    root = Path(root) if root is not None else data_dir()
    folder = root / ref
    train, test = folder / f"{ref}_TRAIN.tsv", folder / f"{ref}_TEST.tsv"
    if not train.exists() or not test.exists():
        raise FileNotFoundError(f"dataset {ref!r} not found under {folder}")
    return load_ucr_tsv(train, test, name=ref)
