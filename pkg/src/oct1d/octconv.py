"""1D octave convolution.

A feature map is carried as an :class:`OctPair`: a full-rate high-frequency
tensor and a half-rate low-frequency tensor. Three layer kinds move data
between plain tensors and pairs:

``initial``       plain x  -> pair   (x -> high, pool(x) -> low)
``intermediate``  pair     -> pair   (H->H, L->H, H->L, L->L)
``final``         pair     -> plain  (H->out, L->out)

Cross-rate paths use average pooling (high to low, pool then convolve) and
nearest upsampling (low to high, convolve then upsample). Each path is an
independent same-padded convolution with its own bias.

Channel budgets follow a layer's ``alpha``: the initial layer gives
``round(alpha*f)`` filters to the high branch, intermediate layers give
``round(alpha*f)`` to the low branch, rounding half up. ``alpha`` in
{0, 1} makes the layer a plain convolution on the high path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Union

import numpy as np

from . import ops
from .layers import Conv1D, Module
from .tensor import ShapeError, Tensor

KINDS = ("initial", "intermediate", "final")
PathWeights = Mapping[str, tuple]


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class OctLayerSpec:
    filters: int
    kernel: int
    alpha: float = 0.5

    def __post_init__(self):
        if self.filters < 1 or self.kernel < 1:
            raise ValueError("filters and kernel must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")

    @property
    def plain(self) -> bool:
        return self.alpha in (0.0, 1.0)

    def split(self, kind: str) -> tuple[int, int]:
        """(high, low) output channels for a layer of ``kind``."""
        if kind not in KINDS:
            raise ValueError(f"unknown oct layer kind {kind!r}")
        f = self.filters
        if kind == "final" or self.plain:
            return f, 0
        if kind == "initial":
            high = round_half_up(self.alpha * f)
            low = f - high
        else:
            low = round_half_up(self.alpha * f)
            high = f - low
        if high < 1 or low < 1:
            raise ValueError(
                f"alpha={self.alpha} with {f} filters leaves an empty branch ({kind} layer: high={high}, low={low})"
            )
        return high, low


@dataclass
class OctPair:
    """High/low feature maps; ``low is None`` marks a plain (degenerate) pair."""

    high: Tensor
    low: Optional[Tensor] = None

    def __post_init__(self):
        if self.low is not None:
            T, T_low = self.high.shape[1], self.low.shape[1]
            if T_low != T // 2 or self.low.shape[0] != self.high.shape[0]:
                raise ShapeError(f"OctPair: low shape {self.low.shape} inconsistent with high {self.high.shape}")

    @property
    def plain(self) -> bool:
        return self.low is None

    @property
    def channels(self) -> tuple[int, int]:
        return self.high.shape[2], 0 if self.low is None else self.low.shape[2]


def _conv(x: Tensor, path: tuple) -> Tensor:
    w, b = path
    return ops.conv1d(x, w, b)


def oct_path(p: OctPair, name: str, path: tuple) -> Tensor:
    """Output of one frequency path ``name`` in {hh, lh, hl, ll}.

    Paths ending in ``h`` produce full-rate (len T) output, paths ending in
    ``l`` produce half-rate (len T//2) output.
    """
    T = p.high.shape[1]
    if name == "hh":
        return _conv(p.high, path)
    if name == "hl":
        return _conv(ops.avg_pool1d(p.high), path)
    if p.low is None:
        raise ShapeError(f"path {name} needs a low-frequency input")
    if name == "lh":
        return ops.upsample1d_nearest(_conv(p.low, path), T)
    if name == "ll":
        return _conv(p.low, path)
    raise ValueError(f"unknown oct path {name!r}")


def _merge(p: OctPair, weights: PathWeights, names: tuple) -> Optional[Tensor]:
    out = None
    for name in names:
        if name not in weights or (name[0] == "l" and p.low is None):
            continue
        y = oct_path(p, name, weights[name])
        out = y if out is None else ops.add(out, y)
    return out


def oct_initial(x: Tensor, weights: PathWeights) -> OctPair:
    """Split a plain tensor into a pair.

    ``weights["hh"]`` convolves ``x`` into the high branch; ``weights["hl"]``
    (absent for a plain layer) convolves ``avg_pool(x)`` into the low branch.
    """
    p = OctPair(x)
    low = oct_path(p, "hl", weights["hl"]) if "hl" in weights else None
    return OctPair(oct_path(p, "hh", weights["hh"]), low)


def oct_intermediate(p: OctPair, weights: PathWeights) -> OctPair:
    """Pair to pair: high = H->H + L->H, low = H->L + L->L over the paths given."""
    high = _merge(p, weights, ("hh", "lh"))
    if high is None:
        raise ShapeError("intermediate oct layer has no path into the high branch")
    return OctPair(high, _merge(p, weights, ("hl", "ll")))


def oct_final(p: OctPair, weights: PathWeights) -> Tensor:
    """Merge a pair into one full-rate tensor: conv(high) + upsample(conv(low))."""
    out = _merge(p, weights, ("hh", "lh"))
    if out is None:
        raise ShapeError("final oct layer has no paths")
    return out


def path_channels(kind: str, spec: OctLayerSpec, in_channels) -> dict[str, tuple[int, int]]:
    """Map each active path name to its (in, out) channel counts."""
    ch_in, cl_in = (in_channels, 0) if isinstance(in_channels, int) else in_channels
    if kind == "initial" and cl_in:
        raise ValueError("initial oct layer takes a plain tensor")
    ch_out, cl_out = spec.split(kind)
    paths = {"hh": (ch_in, ch_out)}
    if cl_out:
        paths["hl"] = (ch_in, cl_out)
    if cl_in:
        paths["lh"] = (cl_in, ch_out)
        if cl_out:
            paths["ll"] = (cl_in, cl_out)
    return paths


def oct_param_count(spec: OctLayerSpec, in_channels, kind: str = "initial") -> int:
    """Trainable parameters (kernels plus biases) over all paths of one layer."""
    k = spec.kernel
    return sum(k * cin * cout + cout for cin, cout in path_channels(kind, spec, in_channels).values())


class OctConv1D(Module):
    """One octave convolution layer owning a Conv1D per active path."""

    def __init__(self, kind: str, in_channels, spec: OctLayerSpec, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.kind, self.spec = kind, spec
        self.in_channels = (in_channels, 0) if isinstance(in_channels, int) else tuple(in_channels)
        self.paths = path_channels(kind, spec, in_channels)
        for name in ("hh", "hl", "lh", "ll"):
            if name in self.paths:
                cin, cout = self.paths[name]
                self.add_child(name, Conv1D(cin, cout, spec.kernel, rng, dtype))
        self.out_channels = spec.split(kind)

    def weights(self) -> dict[str, tuple]:
        return {name: (conv.w, conv.b) for name, conv in self._children.items()}

    def __call__(self, x: Union[Tensor, OctPair]) -> Union[OctPair, Tensor]:
        if self.kind == "initial":
            if isinstance(x, OctPair):
                if not x.plain:
                    raise ShapeError("initial oct layer takes a plain tensor")
                x = x.high
            return oct_initial(x, self.weights())
        if isinstance(x, Tensor):
            x = OctPair(x)
        if x.channels != self.in_channels:
            raise ShapeError(f"{self.kind} oct layer expects channels {self.in_channels}, got {x.channels}")
        if self.kind == "intermediate":
            return oct_intermediate(x, self.weights())
        return oct_final(x, self.weights())
