"""The eight classifier graphs: FCN, ResNet, LSTM-FCN, ALSTM-FCN and Oct variants.

Every model maps a (B, Q, 1) batch to (B, num_classes) logits. Oct variants
replace each convolution with an octave convolution layer: the first one in
the network is an ``initial`` layer, the last a ``final`` layer and the rest
``intermediate``. Batch norm and ReLU act on each frequency branch separately.
"""

from __future__ import annotations

import re
from typing import Optional, Union

import numpy as np

from . import ops
from .layers import LSTM, Attention, BatchNorm1D, Conv1D, Dense, Module
from .octconv import OctConv1D, OctLayerSpec, OctPair
from .tensor import Tensor

ARCHITECTURES = (
    "fcn", "octfcn", "resnet", "octresnet",
    "lstmfcn", "lstm-octfcn", "alstmfcn", "alstm-octfcn",
)
FCN_FILTERS = (128, 256, 128)
FCN_KERNELS = (8, 5, 3)
RESNET_FILTERS = (64, 128, 128)
RESNET_KERNELS = (8, 5, 3)

Feature = Union[Tensor, OctPair]


class ConfigError(ValueError):
    pass


def _pair(x: Feature) -> OctPair:
    return x if isinstance(x, OctPair) else OctPair(x)


def _unpair(x: Feature) -> Feature:
    if isinstance(x, OctPair) and x.low is None:
        return x.high
    return x


def _relu(x: Feature) -> Feature:
    if isinstance(x, OctPair):
        return OctPair(ops.relu(x.high), None if x.low is None else ops.relu(x.low))
    return ops.relu(x)


def _add(a: Feature, b: Feature) -> Feature:
    if isinstance(a, OctPair) or isinstance(b, OctPair):
        a, b = _pair(a), _pair(b)
        low = None if a.low is None else ops.add(a.low, b.low)
        return _unpair(OctPair(ops.add(a.high, b.high), low))
    return ops.add(a, b)


class PairBatchNorm(Module):
    """Independent batch norm on each branch of a pair."""

    def __init__(self, channels: tuple[int, int], dtype):
        super().__init__()
        self.high = self.add_child("high", BatchNorm1D(channels[0], dtype))
        self.low = self.add_child("low", BatchNorm1D(channels[1], dtype)) if channels[1] else None

    def __call__(self, x: Feature, training: bool) -> Feature:
        p = _pair(x)
        low = None if self.low is None else self.low(p.low, training)
        return _unpair(OctPair(self.high(p.high, training), low))


class ConvStage(Module):
    """conv -> batch norm -> optional ReLU."""

    def __init__(self, in_channels: int, filters: int, kernel: int, rng, dtype, activate: bool = True):
        super().__init__()
        self.activate = activate
        self.conv = self.add_child("conv", Conv1D(in_channels, filters, kernel, rng, dtype))
        self.bn = self.add_child("bn", BatchNorm1D(filters, dtype))
        self.out_channels = (filters, 0)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        y = self.bn(self.conv(x), training)
        return ops.relu(y) if self.activate else y


class OctStage(Module):
    """oct conv -> per-branch batch norm -> optional per-branch ReLU."""

    def __init__(self, kind: str, in_channels, spec: OctLayerSpec, rng, dtype, activate: bool = True):
        super().__init__()
        self.activate = activate
        self.oct = self.add_child("oct", OctConv1D(kind, in_channels, spec, rng, dtype))
        self.out_channels = self.oct.out_channels
        self.bn = self.add_child("bn", PairBatchNorm(self.out_channels, dtype))

    def __call__(self, x: Feature, training: bool) -> Feature:
        y = self.bn(_unpair(self.oct(x)), training)
        return _relu(y) if self.activate else y


def _oct_kind(index: int, total: int) -> str:
    if index == 0:
        return "initial"
    return "final" if index == total - 1 else "intermediate"


class FCNStack(Module):
    """Three conv (or oct) blocks; output is the (B, T, 128) map before pooling."""

    def __init__(self, rng, dtype, alpha: Optional[float] = None, in_channels: int = 1):
        super().__init__()
        self.blocks = []
        channels: tuple = (in_channels, 0)
        for i, (f, k) in enumerate(zip(FCN_FILTERS, FCN_KERNELS)):
            if alpha is None:
                stage = ConvStage(channels[0], f, k, rng, dtype)
            else:
                stage = OctStage(_oct_kind(i, 3), channels, OctLayerSpec(f, k, alpha), rng, dtype)
            channels = stage.out_channels
            self.blocks.append(self.add_child(f"block{i + 1}", stage))
        self.out_channels = channels[0]

    def __call__(self, x: Tensor, training: bool, taps: Optional[dict] = None) -> Tensor:
        h: Feature = x
        for i, block in enumerate(self.blocks):
            h = block(h, training)
            if taps is not None:
                taps[f"block{i + 1}"] = h
        return h


class PairProjection(Module):
    """Kernel-1 convolution applied branch by branch (high->high, low->low)."""

    def __init__(self, in_channels: tuple[int, int], out_channels: tuple[int, int], rng, dtype):
        super().__init__()
        self.hh = self.add_child("hh", Conv1D(in_channels[0], out_channels[0], 1, rng, dtype))
        self.ll = self.add_child("ll", Conv1D(in_channels[1], out_channels[1], 1, rng, dtype)) if out_channels[1] else None

    def __call__(self, x: Feature) -> Feature:
        p = _pair(x)
        low = None if self.ll is None else self.ll(p.low)
        return _unpair(OctPair(self.hh(p.high), low))


class ResidualBlock(Module):
    """Three stages with a skip from the block input added before the last ReLU.

    When the block changes the channel layout, the skip goes through a
    kernel-1 projection: a plain convolution for conv blocks; for oct blocks
    an oct layer of matching kind (plain -> pair, pair -> plain) or a
    per-branch convolution (pair -> pair).
    """

    def __init__(self, in_channels: tuple, filters: int, rng, dtype, alpha=None, first=False, last=False):
        super().__init__()
        self.stages = []
        channels = in_channels
        for j, k in enumerate(RESNET_KERNELS):
            activate = j < 2
            if alpha is None:
                stage = ConvStage(channels[0], filters, k, rng, dtype, activate)
            else:
                kind = "initial" if first and j == 0 else "final" if last and j == 2 else "intermediate"
                stage = OctStage(kind, channels, OctLayerSpec(filters, k, alpha), rng, dtype, activate)
            channels = stage.out_channels
            self.stages.append(self.add_child(f"stage{j + 1}", stage))
        self.out_channels = channels

        self.proj = None
        if tuple(in_channels) != tuple(channels):
            if alpha is None:
                self.proj = Conv1D(in_channels[0], filters, 1, rng, dtype)
            elif in_channels[1] == 0 and channels[1] > 0:
                self.proj = OctConv1D("initial", in_channels[0], OctLayerSpec(filters, 1, alpha), rng, dtype)
            elif in_channels[1] > 0 and channels[1] == 0:
                self.proj = OctConv1D("final", in_channels, OctLayerSpec(filters, 1, alpha), rng, dtype)
            else:
                self.proj = PairProjection(in_channels, channels, rng, dtype)
            self.add_child("proj", self.proj)

    def __call__(self, x: Feature, training: bool) -> Feature:
        h = x
        for stage in self.stages:
            h = stage(h, training)
        skip = x if self.proj is None else _unpair(self.proj(x))
        return _relu(_add(h, skip))


class ResNetStack(Module):
    def __init__(self, rng, dtype, alpha: Optional[float] = None, in_channels: int = 1):
        super().__init__()
        self.blocks = []
        channels: tuple = (in_channels, 0)
        n = len(RESNET_FILTERS)
        for i, f in enumerate(RESNET_FILTERS):
            block = ResidualBlock(channels, f, rng, dtype, alpha, first=i == 0, last=i == n - 1)
            channels = block.out_channels
            self.blocks.append(self.add_child(f"block{i + 1}", block))
        self.out_channels = channels[0]

    def __call__(self, x: Tensor, training: bool, taps: Optional[dict] = None) -> Tensor:
        h: Feature = x
        for i, block in enumerate(self.blocks):
            h = block(h, training)
            if taps is not None:
                taps[f"block{i + 1}"] = h
        return h


class ModelGraph(Module):
    """A classifier: convolutional trunk, optional LSTM branch, softmax head.

    ``forward`` returns logits; :meth:`predict_proba` applies the softmax.
    """

    def __init__(
        self,
        name: str,
        num_classes: int,
        input_length: int,
        alpha: Optional[float] = None,
        lstm_units: int = 8,
        dropout: float = 0.8,
        seed: int = 0,
        dtype=np.float64,
    ):
        super().__init__()
        if name not in ARCHITECTURES:
            raise ConfigError(f"unknown model {name!r}; choose from {', '.join(ARCHITECTURES)}")
        if num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if input_length < 2:
            raise ConfigError("input_length must be >= 2")
        self.name, self.num_classes, self.input_length = name, num_classes, input_length
        self.alpha = alpha
        self.dtype = np.dtype(dtype)
        self.dropout_rate = dropout
        rng = np.random.default_rng(seed)

        trunk_alpha = alpha if "oct" in name else None
        if name in ("resnet", "octresnet"):
            self.trunk = self.add_child("resnet", ResNetStack(rng, dtype, trunk_alpha))
        else:
            self.trunk = self.add_child("fcn", FCNStack(rng, dtype, trunk_alpha))
        width = self.trunk.out_channels

        self.lstm = self.attention = None
        if "lstm" in name:
            if lstm_units < 1:
                raise ConfigError("lstm_units must be >= 1")
            self.lstm_units = lstm_units
            # after the dimension shuffle the LSTM sees one step of Q features
            self.lstm = self.add_child("lstm", LSTM(input_length, lstm_units, rng, dtype))
            if name.startswith("alstm"):
                self.attention = self.add_child("attention", Attention(lstm_units, rng, dtype))
            width += lstm_units
        self.head_width = width
        self.head = self.add_child("head", Dense(width, num_classes, rng, dtype))

    def _as_input(self, x) -> Tensor:
        t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if t.dtype != self.dtype:
            t = Tensor(t.data.astype(self.dtype))
        if t.ndim != 3 or t.shape[2] != 1:
            raise ConfigError(f"expected input of shape (B, Q, 1), got {t.shape}")
        return t

    def features(self, x, training: bool = False, taps: Optional[dict] = None) -> Tensor:
        """Global-average-pooled output of the convolutional trunk, (B, 128)."""
        h = self.trunk(self._as_input(x), training, taps)
        g = ops.global_avg_pool(h)
        if taps is not None:
            taps["gap"] = g
        return g

    def forward(self, x, training: bool = False, rng: Optional[np.random.Generator] = None,
                taps: Optional[dict] = None) -> Tensor:
        x = self._as_input(x)
        if self.lstm is not None and x.shape[1] != self.input_length:
            raise ConfigError(f"LSTM models are built for Q={self.input_length}, got {x.shape[1]}")
        feats = self.features(x, training, taps)
        if self.lstm is not None:
            states = self.lstm(ops.dimension_shuffle(x))
            r = ops.take_last(states) if self.attention is None else self.attention(states)
            r = ops.dropout(r, self.dropout_rate, training, rng)
            if taps is not None:
                taps["lstm"] = r
            feats = ops.concat([feats, r], axis=1)
        return self.head(feats)

    __call__ = forward

    def predict_proba(self, x) -> np.ndarray:
        return ops.softmax(self.forward(x, training=False))


def build_model(
    name: str,
    num_classes: int,
    input_length: int,
    alpha: float = 0.5,
    lstm_units: int = 8,
    dropout: float = 0.8,
    seed: int = 0,
    dtype=np.float64,
) -> ModelGraph:
    return ModelGraph(name, num_classes, input_length, alpha, lstm_units, dropout, seed, dtype)


def build_fcn(num_classes: int, input_length: int = 64, **kw) -> ModelGraph:
    return build_model("fcn", num_classes, input_length, **kw)


def build_octfcn(num_classes: int, alpha: float = 0.5, input_length: int = 64, **kw) -> ModelGraph:
    return build_model("octfcn", num_classes, input_length, alpha=alpha, **kw)


def build_resnet(num_classes: int, input_length: int = 64, **kw) -> ModelGraph:
    return build_model("resnet", num_classes, input_length, **kw)


def build_octresnet(num_classes: int, alpha: float = 0.5, input_length: int = 64, **kw) -> ModelGraph:
    return build_model("octresnet", num_classes, input_length, alpha=alpha, **kw)


def build_lstm_fcn(num_classes: int, input_length: int, lstm_units: int = 8, attention: bool = False, **kw) -> ModelGraph:
    return build_model("alstmfcn" if attention else "lstmfcn", num_classes, input_length, lstm_units=lstm_units, **kw)


def build_lstm_octfcn(num_classes: int, input_length: int, lstm_units: int = 8, attention: bool = False,
                      alpha: float = 0.5, **kw) -> ModelGraph:
    name = "alstm-octfcn" if attention else "lstm-octfcn"
    return build_model(name, num_classes, input_length, alpha=alpha, lstm_units=lstm_units, **kw)


def param_count(model: Module) -> int:
    return model.param_count()


_DEGENERATE_RENAMES = (
    (re.compile(r"\.oct\.hh\."), ".conv."),
    (re.compile(r"\.bn\.high\."), ".bn."),
    (re.compile(r"\.proj\.hh\."), ".proj."),
)


def base_name(oct_name: str) -> str:
    """Name of the base-architecture tensor matching a degenerate-oct tensor."""
    for pattern, repl in _DEGENERATE_RENAMES:
        oct_name = pattern.sub(repl, oct_name)
    return oct_name


def copy_into_degenerate(base: ModelGraph, oct_model: ModelGraph) -> None:
    """Copy base weights into an Oct model built with alpha in {0, 1}.

    Such a model has exactly one surviving path per layer, so every tensor
    has a counterpart in the base architecture.
    """
    src = base.state_dict()
    dst = {}
    for name, arr in oct_model.state_dict().items():
        key = base_name(name)
        if key not in src:
            raise KeyError(f"{name} has no counterpart {key} in {base.name}")
        if src[key].shape != arr.shape:
            raise ValueError(f"{name}: shape {arr.shape} != {src[key].shape}")
        dst[name] = src[key]
    oct_model.load_state_dict(dst)
