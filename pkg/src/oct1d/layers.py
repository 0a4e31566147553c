"""Parameterized layers built on the primitives in :mod:`oct1d.ops`."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import ops
from .tensor import Tensor


def glorot_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def orthogonal(rng: np.random.Generator, rows: int, cols: int, dtype) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return q[:rows, :cols].astype(dtype)


class Module:
    """Container that owns named parameters, buffers and child modules."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_buffer(self, name: str, data: np.ndarray) -> np.ndarray:
        self._buffers[name] = data
        return data

    def add_child(self, name: str, module: Optional["Module"]):
        if module is not None:
            self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, t in self._params.items():
            yield prefix + name, t
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def param_count(self) -> int:
        return int(sum(t.size for t in self.parameters()))

    def state_dict(self) -> dict[str, np.ndarray]:
        """Copies of every parameter and buffer, keyed by dotted name."""
        state = {name: t.data.copy() for name, t in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)}")
        for name, t in params.items():
            if state[name].shape != t.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {t.shape}")
            t.data = np.array(state[name], dtype=t.dtype)
        for name, buf in buffers.items():
            buf[...] = state[name]


class Conv1D(Module):
    def __init__(self, in_channels: int, filters: int, kernel: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.in_channels, self.filters, self.kernel = in_channels, filters, kernel
        self.w = self.add_param(
            "w", glorot_uniform(rng, (kernel, in_channels, filters), kernel * in_channels, kernel * filters, dtype)
        )
        self.b = self.add_param("b", np.zeros(filters, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv1d(x, self.w, self.b)


class BatchNorm1D(Module):
    def __init__(self, channels: int, dtype=np.float64, momentum: float = 0.99, eps: float = 1e-3):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = self.add_param("gamma", np.ones(channels, dtype=dtype))
        self.beta = self.add_param("beta", np.zeros(channels, dtype=dtype))
        self.running_mean = self.add_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.running_var = self.add_buffer("running_var", np.ones(channels, dtype=dtype))
        self._calibration: Optional[list] = None

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if self._calibration is not None:
            # batch statistics, buffers untouched (momentum 1); moments kept for the population estimate
            xd = x.data.astype(np.float64)
            n = xd.shape[0] * xd.shape[1]
            self._calibration.append((n, xd.mean(axis=(0, 1)), (xd * xd).mean(axis=(0, 1))))
            return ops.batch_norm1d(x, self.gamma, self.beta, self.running_mean, self.running_var, True, 1.0, self.eps)
        return ops.batch_norm1d(
            x, self.gamma, self.beta, self.running_mean, self.running_var, training, self.momentum, self.eps
        )

    def begin_calibration(self) -> None:
        self._calibration = []

    def end_calibration(self) -> None:
        """Set the running buffers to the pooled moments seen since begin_calibration."""
        chunks, self._calibration = self._calibration, None
        if not chunks:
            return
        total = sum(n for n, _, _ in chunks)
        mean = sum(n * m for n, m, _ in chunks) / total
        sq = sum(n * q for n, _, q in chunks) / total
        self.running_mean[...] = mean
        self.running_var[...] = np.maximum(sq - mean * mean, 0.0)


class Dense(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.w = self.add_param("w", glorot_uniform(rng, (in_features, out_features), in_features, out_features, dtype))
        self.b = self.add_param("b", np.zeros(out_features, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.dense(x, self.w, self.b)


class LSTM(Module):
    """LSTM returning the full (B, T, H) state sequence; forget bias starts at 1."""

    def __init__(self, in_features: int, units: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.units = units
        self.w = self.add_param("w", glorot_uniform(rng, (in_features, 4 * units), in_features, 4 * units, dtype))
        self.u = self.add_param("u", orthogonal(rng, units, 4 * units, dtype))
        bias = np.zeros(4 * units, dtype=dtype)
        bias[units:2 * units] = 1.0
        self.b = self.add_param("b", bias)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.lstm(x, self.w, self.u, self.b)


class Attention(Module):
    """Additive attention pooling over a state sequence."""

    def __init__(self, units: int, rng: np.random.Generator, dtype=np.float64, attn_units: Optional[int] = None):
        super().__init__()
        a = attn_units or units
        self.w = self.add_param("w", glorot_uniform(rng, (units, a), units, a, dtype))
        self.b = self.add_param("b", np.zeros(a, dtype=dtype))
        self.v = self.add_param("v", glorot_uniform(rng, (a,), a, 1, dtype))

    def __call__(self, states: Tensor) -> Tensor:
        return ops.attention_context(states, self.w, self.b, self.v)
