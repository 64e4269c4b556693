"""Per-spot regression metrics."""
from __future__ import annotations

import warnings

import numpy as np


class UndefinedCorrelationWarning(RuntimeWarning):
    pass


def _pair(g, ghat) -> tuple[np.ndarray, np.ndarray]:
    g = np.asarray(g, dtype=np.float64)
    ghat = np.asarray(ghat, dtype=np.float64)
    if g.shape != ghat.shape:
        raise ValueError(f"length mismatch: {g.shape} vs {ghat.shape}")
    return g, ghat


def pcc_checked(g, ghat) -> tuple[float, bool]:
    """Pearson correlation and whether it is defined (neither vector constant)."""
    g, ghat = _pair(g, ghat)
    if g.size < 2:
        raise ValueError("pcc needs at least two entries")
    a = g - g.mean()
    b = ghat - ghat.mean()
    sa = np.sqrt(np.dot(a, a))
    sb = np.sqrt(np.dot(b, b))
    if sa == 0.0 or sb == 0.0:
        return 0.0, False
    r = float(np.dot(a, b) / (sa * sb))
    return min(1.0, max(-1.0, r)), True


def pcc(g, ghat) -> float:
    """Pearson correlation between two vectors; 0 (with a warning) when either is constant."""
    r, ok = pcc_checked(g, ghat)
    if not ok:
        warnings.warn("pcc undefined for a constant vector; returning 0", UndefinedCorrelationWarning, stacklevel=2)
    return r


def rmse(g, ghat) -> float:
    g, ghat = _pair(g, ghat)
    return float(np.sqrt(np.mean((g - ghat) ** 2)))


def spot_pccs(truth: np.ndarray, pred: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise PCC across genes for ``[spots, k]`` matrices; returns (values, defined mask)."""
    truth, pred = _pair(truth, pred)
    a = truth - truth.mean(axis=1, keepdims=True)
    b = pred - pred.mean(axis=1, keepdims=True)
    sa = np.sqrt((a * a).sum(axis=1))
    sb = np.sqrt((b * b).sum(axis=1))
    ok = (sa > 0) & (sb > 0)
    denom = np.where(ok, sa * sb, 1.0)
    r = np.where(ok, (a * b).sum(axis=1) / denom, 0.0)
    return np.clip(r, -1.0, 1.0), ok


def mean_spot_pcc(truth: np.ndarray, pred: np.ndarray) -> float:
    r, ok = spot_pccs(truth, pred)
    return float(r[ok].mean()) if ok.any() else 0.0


def spot_rmses(truth: np.ndarray, pred: np.ndarray) -> np.ndarray:
    truth, pred = _pair(truth, pred)
    return np.sqrt(((truth - pred) ** 2).mean(axis=1))


def gene_pccs(truth: np.ndarray, pred: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column-wise PCC across spots (secondary per-gene report)."""
    return spot_pccs(np.asarray(truth).T, np.asarray(pred).T)
