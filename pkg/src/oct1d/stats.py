"""Wilcoxon signed-rank tests, Holm correction, average ranks and CD diagrams."""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

EXACT_MAX_N = 25
ALPHA = 0.05


@dataclass
class ComparisonReport:
    model_a: str
    model_b: str
    n_total: int
    n_used: int
    zeros: int
    w_plus: float
    w_minus: float
    statistic: float
    p_value: float
    method: str
    better: str
    degenerate: bool = False
    p_holm: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


def _exact_lower_tail(doubled_ranks: Sequence[int], w2: int) -> tuple[int, int]:
    """Count sign assignments with doubled W+ <= w2, by subset-sum DP."""
    total = sum(doubled_ranks)
    counts = [0] * (total + 1)
    counts[0] = 1
    reach = 0
    for r in doubled_ranks:
        reach += r
        for s in range(reach, r - 1, -1):
            counts[s] += counts[s - r]
    return sum(counts[: w2 + 1]), 2 ** len(doubled_ranks)


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float], model_a: str = "a", model_b: str = "b",
                         exact_max_n: int = EXACT_MAX_N) -> ComparisonReport:
    """Two-sided Wilcoxon signed-rank test of paired per-dataset scores.

    Zero differences are dropped and tied |d| share average ranks. For up to
    ``exact_max_n`` non-zero pairs the p-value is exact (all 2^n sign flips);
    above that a normal approximation with tie and continuity corrections
    is used. ``better`` names the model with the larger rank sum.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 1:
        raise ValueError("wilcoxon_signed_rank needs two aligned non-empty vectors")
    d = a - b
    nz = d[d != 0]
    n, zeros = nz.size, int(a.size - nz.size)
    if n == 0:
        return ComparisonReport(model_a, model_b, a.size, 0, zeros, 0.0, 0.0, 0.0, 1.0, "degenerate", "tie", True)
    ranks = rankdata(np.abs(nz))
    w_plus = float(ranks[nz > 0].sum())
    w_minus = float(ranks[nz < 0].sum())
    w = min(w_plus, w_minus)
    if n <= exact_max_n:
        doubled = [int(round(2 * r)) for r in ranks]
        count, space = _exact_lower_tail(doubled, int(round(2 * w)))
        p = min(1.0, 2 * count / space)
        method = "exact"
    else:
        mean = n * (n + 1) / 4
        _, tie_counts = np.unique(np.abs(nz), return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24 - float(np.sum(tie_counts ** 3 - tie_counts)) / 48
        z = max(abs(w - mean) - 0.5, 0.0) / math.sqrt(var) if var > 0 else 0.0
        p = min(1.0, math.erfc(z / math.sqrt(2)))
        method = "normal"
    better = model_a if w_plus > w_minus else model_b if w_minus > w_plus else "tie"
    return ComparisonReport(model_a, model_b, a.size, n, zeros, w_plus, w_minus, w, p, method, better)


def holm_correct(p_values: Sequence[float]) -> list[float]:
    """Holm step-down adjusted p-values, returned in input order."""
    p = np.asarray(p_values, dtype=np.float64)
    if p.ndim != 1 or p.size < 1:
        raise ValueError("holm_correct needs at least one p-value")
    if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    adjusted = np.empty(m)
    running = 0.0
    for i, idx in enumerate(order):
        running = max(running, min(1.0, (m - i) * p[idx]))
        adjusted[idx] = running
    return adjusted.tolist()


def accuracy_table(scores: Mapping[str, Mapping[str, float]], models: Optional[Sequence[str]] = None,
                   datasets: Optional[Sequence[str]] = None) -> tuple[list[str], list[str], np.ndarray]:
    """Turn {model: {dataset: acc}} into a dense (models x datasets) array.

    Raises ``ValueError`` naming every missing (model, dataset) cell.
    """
    models = list(models) if models is not None else sorted(scores)
    if datasets is None:
        datasets = sorted({ds for m in models for ds in scores.get(m, {})})
    missing = [(m, ds) for m in models for ds in datasets if ds not in scores.get(m, {})]
    if missing:
        cells = ", ".join(f"({m}, {ds})" for m, ds in missing)
        raise ValueError(f"accuracy table has missing cells: {cells}")
    table = np.array([[scores[m][ds] for ds in datasets] for m in models], dtype=np.float64)
    return models, list(datasets), table


def rank_table(table: np.ndarray) -> np.ndarray:
    """Per-dataset ranks (1 = highest accuracy, ties averaged), models x datasets."""
    table = np.asarray(table, dtype=np.float64)
    if np.isnan(table).any():
        raise ValueError("rank table has missing cells")
    return np.column_stack([rankdata(-table[:, j]) for j in range(table.shape[1])])


def average_ranks(table: np.ndarray) -> np.ndarray:
    return rank_table(table).mean(axis=1)


def pairwise_reports(models: Sequence[str], table: np.ndarray) -> list[ComparisonReport]:
    """All-pairs WSRT with Holm-adjusted p-values filled in."""
    reports = [
        wilcoxon_signed_rank(table[i], table[j], models[i], models[j])
        for i, j in itertools.combinations(range(len(models)), 2)
    ]
    if reports:
        for rep, adj in zip(reports, holm_correct([r.p_value for r in reports])):
            rep.p_holm = adj
    return reports


def cliques(models: Sequence[str], ranks: Sequence[float], reports: Sequence[ComparisonReport],
            alpha: float = ALPHA) -> list[list[str]]:
    """Maximal runs of rank-adjacent models with no significant pair among them."""
    order = sorted(range(len(models)), key=lambda i: (ranks[i], models[i]))
    names = [models[i] for i in order]
    significant = set()
    for r in reports:
        p = r.p_holm if r.p_holm is not None else r.p_value
        if p <= alpha:
            significant.add(frozenset((r.model_a, r.model_b)))
    spans = []
    for i in range(len(names)):
        j = i
        while j + 1 < len(names) and all(
            frozenset((names[k], names[j + 1])) not in significant for k in range(i, j + 1)
        ):
            j += 1
        if j > i and not any(s <= i and j <= e for s, e in spans):
            spans.append((i, j))
    return [names[s:e + 1] for s, e in spans]


def cd_diagram_svg(models: Sequence[str], ranks: Sequence[float], reports: Sequence[ComparisonReport],
                   alpha: float = ALPHA, title: str = "") -> str:
    """Render a critical-difference diagram as a standalone SVG string.

    Models sit at their average rank on a horizontal axis (rank 1 on the
    left); thick bars join each clique of mutually non-significant models.
    """
    k = len(models)
    width, margin = 640, 60
    lo, hi = 1, max(k, 1)
    axis_y = 60
    scale = (width - 2 * margin) / max(hi - lo, 1)

    def x_of(r: float) -> float:
        return margin + (r - lo) * scale

    order = sorted(range(k), key=lambda i: (ranks[i], models[i]))
    groups = cliques(models, ranks, reports, alpha)
    n_left = (k + 1) // 2
    label_rows = max(n_left, k - n_left)
    bar_top = axis_y + 20
    labels_top = bar_top + 12 * len(groups) + 20
    height = labels_top + 22 * label_rows + 20

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    if title:
        out.append(f'<text x="{width / 2:.2f}" y="20" text-anchor="middle">{_esc(title)}</text>')
    out.append(f'<line x1="{x_of(lo):.2f}" y1="{axis_y}" x2="{x_of(hi):.2f}" y2="{axis_y}" stroke="black"/>')
    for r in range(lo, hi + 1):
        x = x_of(r)
        out.append(f'<line x1="{x:.2f}" y1="{axis_y - 5}" x2="{x:.2f}" y2="{axis_y}" stroke="black"/>')
        out.append(f'<text x="{x:.2f}" y="{axis_y - 9}" text-anchor="middle">{r}</text>')
    for g, members in enumerate(groups):
        rs = [ranks[models.index(m)] for m in members]
        y = bar_top + 12 * g
        out.append(
            f'<line x1="{x_of(min(rs)) - 4:.2f}" y1="{y}" x2="{x_of(max(rs)) + 4:.2f}" y2="{y}" '
            f'stroke="black" stroke-width="4"/>'
        )
    for pos, i in enumerate(order):
        x = x_of(ranks[i])
        left = pos < n_left
        row = pos if left else k - 1 - pos
        y = labels_top + 22 * row
        x_text = margin - 10 if left else width - margin + 10
        anchor = "end" if left else "start"
        out.append(
            f'<polyline points="{x:.2f},{axis_y} {x:.2f},{y} {x_text:.2f},{y}" fill="none" stroke="black"/>'
        )
        out.append(
            f'<text x="{x_text + (-4 if left else 4):.2f}" y="{y + 4}" text-anchor="{anchor}">'
            f'{_esc(models[i])} ({ranks[i]:.3f})</text>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
