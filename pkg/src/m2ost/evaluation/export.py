"""Spatial map export: first principal component or a single gene, as PGM raster plus CSV."""
from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np

from ..data.dataset import StDataset


def first_principal_component(x: np.ndarray, tol: float = 1e-9, max_iter: int = 100_000) -> tuple[np.ndarray, np.ndarray]:
    """(scores, direction) of the leading principal component by power iteration.

    The iteration starts from the first centred data row, so the result is deterministic.
    """
    xc = np.asarray(x, dtype=np.float64)
    xc = xc - xc.mean(axis=0)
    cov = xc.T @ xc
    v = xc[0].copy()
    if not np.any(v):
        v = np.ones(xc.shape[1])
    v /= np.linalg.norm(v)
    for _ in range(max_iter):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            break
        w /= norm
        if np.linalg.norm(w - v) < tol:
            v = w
            break
        v = w
    return xc @ v, v


def _grid_positions(centers: np.ndarray) -> tuple[np.ndarray, np.ndarray, int, int]:
    rows = np.unique(centers[:, 0])
    cols = np.unique(centers[:, 1])
    return np.searchsorted(rows, centers[:, 0]), np.searchsorted(cols, centers[:, 1]), len(rows), len(cols)


def to_pgm(values: np.ndarray, centers: np.ndarray) -> bytes:
    """Binary P5 graymap with one pixel per spot, values scaled linearly to 1..255 (0 = no spot)."""
    r, c, h, w = _grid_positions(centers)
    img = np.zeros((h, w), dtype=np.uint8)
    lo, hi = float(values.min()), float(values.max())
    span = hi - lo if hi > lo else 1.0
    img[r, c] = np.round(1 + 254 * (values - lo) / span).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def export_maps(dataset: StDataset, predictions: np.ndarray, mode: str, out_prefix,
                slide: str | None = None) -> tuple[Path, Path]:
    """Write ``<prefix>.pgm`` and ``<prefix>.csv`` (spot_id,x,y,value) for one slide."""
    slide = slide or dataset.slides()[0]
    idx = np.asarray([i for i, s in enumerate(dataset.slide_ids) if s == slide])
    if len(idx) == 0:
        raise ValueError(f"no spots for slide {slide!r}")
    pred = np.asarray(predictions, dtype=np.float64)
    if pred.shape[0] == len(dataset):
        pred = pred[idx]
    if pred.shape[0] != len(idx):
        raise ValueError(f"{pred.shape[0]} predictions for {len(idx)} spots of slide {slide!r}")
    if mode == "pca1":
        values, _ = first_principal_component(pred)
    else:
        if mode not in dataset.gene_names:
            raise ValueError(f"unknown gene {mode!r}; available: {', '.join(dataset.gene_names)}")
        values = pred[:, dataset.gene_names.index(mode)]
    centers = dataset.centers[idx]
    prefix = Path(out_prefix)
    pgm = prefix.with_suffix(".pgm")
    pgm.write_bytes(to_pgm(values, centers))
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["spot_id", "x", "y", "value"])
    for j, i in enumerate(idx):
        wr.writerow([dataset.spot_ids[i], repr(float(centers[j, 1])), repr(float(centers[j, 0])),
                     repr(float(values[j]))])
    csv_path = prefix.with_suffix(".csv")
    csv_path.write_text(buf.getvalue(), encoding="utf-8")
    return pgm, csv_path
