"""In-memory spot dataset and slide-level split assignment."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..diffcore.rng import generator
from ..embedding import MultiScaleSample
from .expression import SpotExpression

SPLITS = ("train", "val", "test")
# deciles of the slide ring: 6 train, 1 val, 3 test
_DECILE_SPLITS = ("train",) * 6 + ("val",) + ("test",) * 3


def split_for_slide(slide_id: str, seed: int) -> str:
    """Split of a slide; depends only on (slide id, seed).

    Slide ids ending in an integer are mapped onto a seeded permutation of ten
    slots, so any ten consecutive ids split exactly 6/1/3.
    """
    digits = ""
    for ch in reversed(slide_id):
        if not ch.isdigit():
            break
        digits = ch + digits
    perm = generator(seed, "split-perm").permutation(10)
    if digits:
        slot = perm[int(digits) % 10]
    else:
        slot = int(generator(seed, "split", slide_id).integers(10))
    return _DECILE_SPLITS[slot]


@dataclass
class StDataset:
    """Spots of one or more slides, stored as stacked arrays.

    ``images`` is ``[N, M, 3, H, W]`` uint8 RGB; ``values`` the normalized
    targets ``[N, k]``; ``counts`` the optional raw counts.
    """

    images: np.ndarray
    values: np.ndarray
    gene_names: list[str]
    spot_ids: list[str]
    slide_ids: list[str]
    centers: np.ndarray
    level_present: np.ndarray | None = None
    counts: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)
    split_seed: int = 0

    def __post_init__(self):
        n = len(self.spot_ids)
        self.values = np.asarray(self.values, dtype=np.float32)
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 2)
        if self.images.dtype != np.uint8 or self.images.ndim != 5 or self.images.shape[2] != 3:
            raise ValueError(f"images must be uint8 [N, M, 3, H, W], got {self.images.dtype} {self.images.shape}")
        if self.images.shape[0] != n or self.values.shape != (n, len(self.gene_names)):
            raise ValueError("inconsistent sample counts")
        if len(self.slide_ids) != n or self.centers.shape != (n, 2):
            raise ValueError("slide ids / centres do not match sample count")
        if self.level_present is None:
            self.level_present = np.ones(self.images.shape[:2], dtype=bool)
        if self.counts is not None:
            self.counts = np.asarray(self.counts, dtype=np.uint32)
        if self.counts is not None and self.counts.shape != self.values.shape:
            raise ValueError("counts shape differs from values shape")

    def __len__(self) -> int:
        return len(self.spot_ids)

    @property
    def num_levels(self) -> int:
        return self.images.shape[1]

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    @property
    def num_genes(self) -> int:
        return len(self.gene_names)

    def split_of(self, slide_id: str) -> str:
        return split_for_slide(slide_id, self.split_seed)

    def split_indices(self, split: str) -> np.ndarray:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return np.asarray([i for i, s in enumerate(self.slide_ids) if self.split_of(s) == split], dtype=np.int64)

    def slides(self) -> list[str]:
        return sorted(set(self.slide_ids))

    def sample(self, i: int) -> MultiScaleSample:
        target = SpotExpression(self.values[i], list(self.gene_names),
                                None if self.counts is None else self.counts[i])
        return MultiScaleSample(images=[im.astype(np.float64) / 255.0 for im in self.images[i]],
                                target=target, level_present=[bool(x) for x in self.level_present[i]],
                                spot_id=self.spot_ids[i], spot_center=tuple(float(x) for x in self.centers[i]))

    def subset(self, idx) -> "StDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return StDataset(images=self.images[idx], values=self.values[idx], gene_names=list(self.gene_names),
                         spot_ids=[self.spot_ids[i] for i in idx], slide_ids=[self.slide_ids[i] for i in idx],
                         centers=self.centers[idx], level_present=self.level_present[idx],
                         counts=None if self.counts is None else self.counts[idx],
                         metadata=_subset_metadata(self.metadata, idx, len(self)), split_seed=self.split_seed)

    def select_genes(self, idx) -> "StDataset":
        idx = np.asarray(idx, dtype=np.int64)
        out = self.subset(np.arange(len(self)))
        out.values = self.values[:, idx]
        out.gene_names = [self.gene_names[i] for i in idx]
        out.counts = None if self.counts is None else self.counts[:, idx]
        return out


def _subset_metadata(meta: dict, idx: np.ndarray, n: int) -> dict:
    out = dict(meta)
    feats = meta.get("features")
    if feats is not None and len(feats) == n:
        out["features"] = [feats[i] for i in idx]
    return out
