"""Central finite-difference checks for every differentiable layer family."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import ops
from .octconv import OctPair, oct_final, oct_initial, oct_intermediate, oct_path
from .tensor import Tape, Tensor

H_STEP = 1e-5
REL_TOL = 1e-4
# denominators below this are treated as absolute error
REL_FLOOR = 1e-6


@dataclass
class GradCheckResult:
    name: str
    shape: str
    max_rel_err: float
    passed: bool


def _flatten_outputs(out) -> list[Tensor]:
    if isinstance(out, Tensor):
        return [out]
    if isinstance(out, OctPair):
        return [out.high] if out.low is None else [out.high, out.low]
    return [t for o in out for t in _flatten_outputs(o)]


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def check_gradients(
    fn: Callable[..., object],
    inputs: Sequence[np.ndarray],
    seed: int = 0,
    h: float = H_STEP,
) -> float:
    """Max elementwise relative error between tape and finite-difference grads.

    ``fn`` maps input Tensors to a Tensor (or OctPair / tuple of them). The
    scalar under test is ``sum(out * R)`` for a fixed random ``R``, so every
    output element contributes a distinct weight.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    probe = _flatten_outputs(fn(*[Tensor(a.copy()) for a in arrays]))
    weights = [rng.standard_normal(t.shape) for t in probe]

    def scalar(values) -> float:
        outs = _flatten_outputs(fn(*[Tensor(v) for v in values]))
        return float(sum(np.sum(o.data * r) for o, r in zip(outs, weights)))

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        outs = _flatten_outputs(fn(*leaves))
        loss = None
        for o, r in zip(outs, weights):
            term = ops.tensor_sum(ops.mul(o, Tensor(r)))
            loss = term if loss is None else ops.add(loss, term)
    tape.backward(loss)

    worst = 0.0
    for idx, arr in enumerate(arrays):
        analytic = leaves[idx].grad if leaves[idx].grad is not None else np.zeros_like(arr)
        numeric = np.zeros_like(arr)
        flat = numeric.reshape(-1)
        for j in range(arr.size):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[idx].reshape(-1)[j] += h
            minus[idx].reshape(-1)[j] -= h
            flat[j] = (scalar(plus) - scalar(minus)) / (2 * h)
        if arr.size:
            worst = max(worst, float(rel_error(analytic, numeric).max()))
    return worst


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


def _family_cases(rng: np.random.Generator, n_shapes: int):
    """Yield (family, shape label, fn, inputs) tuples with random shapes."""
    for _ in range(n_shapes):
        B, T, cin, cout = rng.integers(1, 4), rng.integers(2, 9), rng.integers(1, 4), rng.integers(1, 4)
        K = int(rng.integers(1, 6))
        yield (
            "conv1d", f"B{B} T{T} Cin{cin} Cout{cout} K{K}",
            lambda x, w, b: ops.conv1d(x, w, b),
            [rng.standard_normal((B, T, cin)), rng.standard_normal((K, cin, cout)), rng.standard_normal(cout)],
        )
        yield ("avg_pool1d", f"B{B} T{T} C{cin}", ops.avg_pool1d, [rng.standard_normal((B, T, cin))])
        T2 = int(rng.integers(1, 6))
        for target in (2 * T2, 2 * T2 + 1):
            yield (
                "upsample1d", f"B{B} T{T2}->{target} C{cin}",
                lambda x, target=target: ops.upsample1d_nearest(x, target),
                [rng.standard_normal((B, T2, cin))],
            )
        bn_train_shape = (int(B) + 1, int(T), int(cin))

        def bn(x, g, b, training):
            c = x.shape[2]
            return ops.batch_norm1d(x, g, b, np.zeros(c), np.ones(c), training)

        for training in (True, False):
            yield (
                "batch_norm1d", f"{bn_train_shape} {'train' if training else 'infer'}",
                lambda x, g, b, training=training: bn(x, g, b, training),
                [rng.standard_normal(bn_train_shape) * 2 + 1, rng.standard_normal(cin), rng.standard_normal(cin)],
            )
        yield ("relu", f"B{B} T{T} C{cin}", ops.relu, [_away_from_zero(rng, (B, T, cin))])
        H = int(rng.integers(1, 5))
        yield (
            "lstm", f"B{B} T{T} C{cin} H{H}",
            lambda x, w, u, b: ops.lstm(x, w, u, b),
            [rng.standard_normal((B, T, cin)), rng.standard_normal((cin, 4 * H)) * 0.5,
             rng.standard_normal((H, 4 * H)) * 0.5, rng.standard_normal(4 * H) * 0.5],
        )
        A = int(rng.integers(1, 5))
        yield (
            "attention", f"B{B} T{T} H{H} A{A}",
            lambda s, w, b, v: ops.attention_context(s, w, b, v),
            [rng.standard_normal((B, T, H)), rng.standard_normal((H, A)), rng.standard_normal(A), rng.standard_normal(A)],
        )
        D = int(rng.integers(1, 6))
        yield (
            "dense", f"B{B} D{D} K{cout}",
            lambda x, w, b: ops.dense(x, w, b),
            [rng.standard_normal((B, D)), rng.standard_normal((D, cout)), rng.standard_normal(cout)],
        )
        yield ("global_avg_pool", f"B{B} T{T} C{cin}", ops.global_avg_pool, [rng.standard_normal((B, T, cin))])
        yield ("dimension_shuffle", f"B{B} T{T} C{cin}", ops.dimension_shuffle, [rng.standard_normal((B, T, cin))])
        mask_seed = int(rng.integers(1 << 30))
        yield (
            "dropout", f"B{B} D{D}",
            lambda x, mask_seed=mask_seed: ops.dropout(x, 0.5, True, np.random.default_rng(mask_seed)),
            [rng.standard_normal((B, D))],
        )
        yield (
            "concat", f"B{B} D{D}+{cin}",
            lambda a, b: ops.concat([a, b]),
            [rng.standard_normal((B, D)), rng.standard_normal((B, int(cin)))],
        )
        n_cls = int(rng.integers(2, 5))
        labels = rng.integers(0, n_cls, size=B)
        yield (
            "softmax_cross_entropy", f"B{B} K{n_cls}",
            lambda z, labels=labels: ops.softmax_cross_entropy(z, labels),
            [rng.standard_normal((B, n_cls))],
        )
        yield from _oct_cases(rng)


def _oct_cases(rng: np.random.Generator):
    B = int(rng.integers(1, 3))
    T = int(rng.integers(2, 10))
    K = int(rng.integers(1, 5))
    cin, ch, cl = (int(v) for v in rng.integers(1, 4, size=3))
    oh, ol = (int(v) for v in rng.integers(1, 4, size=2))

    def w(ci, co):
        return [rng.standard_normal((K, ci, co)), rng.standard_normal(co)]

    yield (
        "oct_initial", f"B{B} T{T} C{cin} K{K}",
        lambda x, w1, b1, w2, b2: oct_initial(x, {"hh": (w1, b1), "hl": (w2, b2)}),
        [rng.standard_normal((B, T, cin))] + w(cin, oh) + w(cin, ol),
    )
    high, low = rng.standard_normal((B, T, ch)), rng.standard_normal((B, T // 2, cl))
    for path, (ci, co) in {"hh": (ch, oh), "lh": (cl, oh), "hl": (ch, ol), "ll": (cl, ol)}.items():
        yield (
            f"oct_path_{path}", f"B{B} T{T} K{K} {ci}->{co}",
            lambda hi, lo, wk, bk, path=path: oct_path(OctPair(hi, lo), path, (wk, bk)),
            [high, low] + w(ci, co),
        )
    yield (
        "oct_intermediate", f"B{B} T{T} K{K}",
        lambda hi, lo, a, b, c, d, e, f, g, h: oct_intermediate(
            OctPair(hi, lo), {"hh": (a, b), "lh": (c, d), "hl": (e, f), "ll": (g, h)}
        ),
        [high, low] + w(ch, oh) + w(cl, oh) + w(ch, ol) + w(cl, ol),
    )
    yield (
        "oct_final", f"B{B} T{T} K{K}",
        lambda hi, lo, a, b, c, d: oct_final(OctPair(hi, lo), {"hh": (a, b), "lh": (c, d)}),
        [high, low] + w(ch, oh) + w(cl, oh),
    )


def run_suite(seed: int = 0, n_shapes: int = 5) -> list[GradCheckResult]:
    """Check every layer family on ``n_shapes`` random shapes each."""
    rng = np.random.default_rng(seed)
    results = []
    for i, (family, label, fn, inputs) in enumerate(_family_cases(rng, n_shapes)):
        err = check_gradients(fn, inputs, seed=seed + i)
        results.append(GradCheckResult(family, label, err, err < REL_TOL))
    return results


def summarize(results: Sequence[GradCheckResult]) -> dict[str, tuple[float, bool]]:
    """Per-family (max relative error, all passed)."""
    out: dict[str, tuple[float, bool]] = {}
    for r in results:
        err, ok = out.get(r.name, (0.0, True))
        out[r.name] = (max(err, r.max_rel_err), ok and r.passed)
    return out
