"""Pearson (PLCC) and Spearman (SRCC) correlation between score vectors.

Undefined correlations (constant inputs) raise instead of returning 0 so a
degenerate predictor can never look average on a leaderboard.
"""

from __future__ import annotations

import numpy as np

from .errors import InsufficientDataError, UndefinedCorrelationError

__all__ = ["plcc", "srcc", "ranks", "correlation_report"]


def _validated_pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1:
        raise UndefinedCorrelationError("correlation inputs must be 1-D")
    if x.size != y.size:
        raise UndefinedCorrelationError(
            f"length mismatch: {x.size} predictions vs {y.size} targets")
    if x.size < 2:
        raise InsufficientDataError("correlation needs at least 2 pairs")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise UndefinedCorrelationError("correlation inputs must be finite")
    return x, y


def plcc(x, y) -> float:
    """Pearson linear correlation coefficient."""
    x, y = _validated_pair(x, y)
    dx = x - x.mean()
    dy = y - y.mean()
    sx2 = float((dx * dx).sum())
    sy2 = float((dy * dy).sum())
    if sx2 == 0.0 or sy2 == 0.0:
        raise UndefinedCorrelationError("correlation of a constant vector is undefined")
    # single square root keeps exact cases (perfect +/-1 on small integers) exact
    return float((dx * dy).sum() / np.sqrt(sx2 * sy2))


def ranks(x) -> np.ndarray:
    """Ranks 1..n; tied values receive the mean of their rank positions."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise UndefinedCorrelationError("ranks expects a 1-D vector")
    n = x.size
    order = np.argsort(x, kind="stable")
    out = np.empty(n, dtype=np.float64)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and x[order[j + 1]] == x[order[i]]:
            j += 1
        avg = (i + j) / 2.0 + 1.0
        out[order[i:j + 1]] = avg
        i = j + 1
    return out


def srcc(x, y) -> float:
    """Spearman rank-order correlation: Pearson on average ranks."""
    x, y = _validated_pair(x, y)
    return plcc(ranks(x), ranks(y))


def correlation_report(predictions: dict[str, list], targets: dict[str, list]) -> dict:
    """Per-metric {plcc, srcc, n} for matching prediction/target channels."""
    report = {}
    for name in targets:
        p, t = predictions[name], targets[name]
        report[name] = {"plcc": plcc(p, t), "srcc": srcc(p, t), "n": len(t)}
    return report
