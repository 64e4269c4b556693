"""Spot-level expression preprocessing and variable-gene selection."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

SCALE_FACTOR = 1_000_000


@dataclass
class SpotExpression:
    values: np.ndarray
    gene_names: list[str]
    raw_counts: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if len(self.values) != len(self.gene_names):
            raise ValueError(f"{len(self.values)} values for {len(self.gene_names)} gene names")
        if not np.isfinite(self.values).all():
            raise ValueError("expression values must be finite")

    def __len__(self) -> int:
        return len(self.values)


def normalize_expression(counts) -> np.ndarray:
    """log(1 + 1e6 * c / sum(c)) per spot; an all-zero spot maps to zeros.

    Accepts a single spot ``[k]`` or a matrix ``[spots, k]`` (rows normalized independently).
    """
    c = np.asarray(counts, dtype=np.float64)
    if np.any(c < 0):
        raise ValueError("counts must be non-negative")
    total = c.sum(axis=-1, keepdims=True)
    empty = total == 0
    if np.any(empty):
        log.warning("%d spot(s) with zero total counts; normalized to zeros", int(empty.sum()))
    safe = np.where(empty, 1.0, total)
    return np.log1p(SCALE_FACTOR * c / safe)


def select_variable_genes(count_matrix, k: int, gene_names: Sequence[str] | None = None) -> np.ndarray:
    """Indices of the ``k`` genes with the largest variance of normalized expression across spots.

    Ties are broken by gene name (lexicographic), so the result does not depend on spot order.
    """
    counts = np.asarray(count_matrix, dtype=np.float64)
    n_genes = counts.shape[1]
    if k > n_genes:
        raise ValueError(f"cannot select {k} genes out of {n_genes}")
    names = list(gene_names) if gene_names is not None else [f"{i:09d}" for i in range(n_genes)]
    variance = normalize_expression(counts).var(axis=0)
    order = sorted(range(n_genes), key=lambda i: (-variance[i], names[i]))
    return np.asarray(order[:k], dtype=np.int64)


def read_gene_list(path) -> list[str]:
    """One gene name per line; blank lines and ``#`` comments are ignored."""
    names = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            names.append(line)
    return names


def restrict_genes(gene_names: Sequence[str], wanted: Sequence[str]) -> np.ndarray:
    index = {g: i for i, g in enumerate(gene_names)}
    missing = [g for g in wanted if g not in index]
    if missing:
        raise ValueError(f"genes not in dataset: {missing[:10]}")
    return np.asarray([index[g] for g in wanted], dtype=np.int64)
