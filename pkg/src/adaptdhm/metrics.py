"""AUC, session-grouped GAUC, and clustering agreement scores."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import comb
from scipy.stats import rankdata

from .errors import ShapeError, UndefinedMetricError


def auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied scores get half credit. O(n log n)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ShapeError(f"scores {s.shape} vs labels {y.shape}")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    ranks = rankdata(s)  # average ranks for ties
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def gauc(scores, labels, sessions) -> tuple[float, int, int]:
    """Impression-weighted mean of per-session AUCs.

    Sessions whose AUC is undefined (one class only) are dropped from both
    the numerator and the denominator. Returns (gauc, used, skipped).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    g = np.asarray(sessions)
    if not (s.shape == y.shape == g.shape):
        raise ShapeError("scores, labels and sessions must have equal length")
    if s.size == 0:
        raise UndefinedMetricError("GAUC of an empty record set")
    order = np.argsort(g, kind="stable")
    g_sorted = g[order]
    starts = np.flatnonzero(np.r_[True, g_sorted[1:] != g_sorted[:-1]])
    bounds = np.r_[starts, g.size]
    num = den = 0.0
    used = skipped = 0
    for a, b in zip(bounds[:-1], bounds[1:]):
        idx = order[a:b]
        pos = int((y[idx] == 1).sum())
        if pos == 0 or pos == b - a:
            skipped += 1
            continue
        num += (b - a) * auc(s[idx], y[idx])
        den += b - a
        used += 1
    if used == 0:
        raise UndefinedMetricError("every session is single-class; GAUC undefined")
    return num / den, used, skipped


def _contingency(assigned, planted) -> np.ndarray:
    a = np.asarray(assigned)
    p = np.asarray(planted)
    if a.shape != p.shape or a.ndim != 1:
        raise ShapeError(f"assigned {a.shape} vs planted {p.shape}")
    if a.size == 0:
        raise ShapeError("need at least one point")
    _, ai = np.unique(a, return_inverse=True)
    _, pi = np.unique(p, return_inverse=True)
    table = np.zeros((ai.max() + 1, pi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, pi), 1)
    return table


def cluster_purity(assigned, planted) -> float:
    table = _contingency(assigned, planted)
    return float(table.max(axis=1).sum() / table.sum())


def adjusted_rand(assigned, planted) -> float:
    table = _contingency(assigned, planted)
    n = table.sum()
    sum_cells = comb(table, 2).sum()
    sum_a = comb(table.sum(axis=1), 2).sum()
    sum_b = comb(table.sum(axis=0), 2).sum()
    total = comb(n, 2)
    expected = sum_a * sum_b / total if total else 0.0
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        # both partitions trivial (all one cluster or all singletons)
        return 1.0
    return float((sum_cells - expected) / (max_index - expected))


@dataclass
class MetricReport:
    auc: float
    gauc: float | None
    sessions_used: int
    sessions_skipped: int
    domain_auc: dict[str, float | None] = field(default_factory=dict)
    domain_impressions: dict[str, int] = field(default_factory=dict)
    purity: float | None = None
    ari: float | None = None
    logloss: float | None = None

    def to_json(self) -> dict:
        return asdict(self)


def evaluate(scores, labels, sessions, domains, assigned=None, planted=None, logloss=None) -> MetricReport:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    try:
        g, used, skipped = gauc(s, y, sessions)
    except UndefinedMetricError:
        g, used, skipped = None, 0, len(np.unique(sessions))
    dom_auc, dom_n = {}, {}
    d = np.asarray(domains)
    for m in np.unique(d):
        idx = d == m
        try:
            dom_auc[str(int(m))] = auc(s[idx], y[idx])
        except UndefinedMetricError:
            dom_auc[str(int(m))] = None
        dom_n[str(int(m))] = int(idx.sum())
    report = MetricReport(auc(s, y), g, used, skipped, dom_auc, dom_n, logloss=logloss)
    if assigned is not None and planted is not None:
        report.purity = cluster_purity(assigned, planted)
        report.ari = adjusted_rand(assigned, planted)
    return report
