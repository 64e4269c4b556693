"""Procedural multi-scale slides with known gene-expression generators.

Each slide is a level-0 canvas tiled with one spot per ``tile = 2^(M-1) * H``
pixels, so the level-(M-1) crop of a spot is exactly its own tile. Inside a
tile, concentric regions carry five latent feature blocks (3 values each,
one per RGB channel):

* ``spot_texture``: amplitude of a one-pixel checkerboard over the central
  H x H spot. A 2x2 box filter cancels it exactly, so only level 0 sees it.
* ``spot_color``: mean colour offset of the spot. Visible at every level.
* ``ring_texture``: amplitude of a checkerboard of 2x2 cells over the
  central 2H x 2H window outside the spot. Level 1 sees it as a one-pixel
  checkerboard, which the next 2x2 box filter cancels, so only level 1 sees it.
* ``ring``: colour offset of the same window. Visible from level 1 up.
* ``context``: colour offset of the rest of the tile. Visible at level 2.

Band-limited noise and random blobs are added everywhere as nuisance.
Gene ``g`` is a fixed random linear function of the features plus Gaussian
noise. Group (a) = spot texture + spot colour, (b) = ring texture + ring
colour, (c) = context; the group weights set each group's share of the
signal variance and ``texture_share`` splits (a) and (b) between texture
and colour.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from ..diffcore.rng import generator
from ..evaluation.metrics import mean_spot_pcc
from .dataset import StDataset
from .pyramid import build_pyramid, extract_pyramid_patches

BLOCKS = ("spot_texture", "spot_color", "ring_texture", "ring", "context")
BLOCK_DIM = 3
SPOT_DIAMETER_UM = 100.0
LEVEL0_FIELD_UM = 110.0


@dataclass(frozen=True)
class SynthConfig:
    n_slides: int = 20
    spots_per_slide: int = 100
    image_size: int = 32
    num_levels: int = 3
    num_genes: int = 50
    noise: float = 0.1
    group_weights: tuple[float, float, float] = (0.7, 0.2, 0.1)
    texture_share: float = 0.85
    color_amplitude: float = 0.06
    texture_amplitude: float = 0.06
    nuisance_amplitude: float = 0.02
    blobs_per_spot: float = 1.5
    split_seed: int = 0

    def block_weights(self) -> dict[str, float]:
        a, b, c = self.group_weights
        return {"spot_texture": a * self.texture_share, "spot_color": a * (1.0 - self.texture_share),
                "ring_texture": b * self.texture_share, "ring": b * (1.0 - self.texture_share), "context": c}


def visible_blocks(level: int) -> list[str]:
    """Feature blocks recoverable from the level-``level`` crop."""
    return {0: ["spot_texture", "spot_color"],
            1: ["spot_color", "ring_texture", "ring"]}.get(level, ["spot_color", "ring", "context"])


def feature_columns(blocks) -> list[int]:
    cols = []
    for b in blocks:
        i = BLOCKS.index(b)
        cols.extend(range(i * BLOCK_DIM, (i + 1) * BLOCK_DIM))
    return cols


def gene_weight_matrix(cfg: SynthConfig, seed: int) -> np.ndarray:
    """``[k, 15]`` map from features to clean expression; each group's variance share is its weight."""
    rng = generator(seed, "gene-weights")
    raw = rng.standard_normal((cfg.num_genes, len(BLOCKS) * BLOCK_DIM))
    weights = cfg.block_weights()
    scale = np.concatenate([np.full(BLOCK_DIM, math.sqrt(weights[b] / BLOCK_DIM)) for b in BLOCKS])
    return raw * scale


def _render_slide(cfg: SynthConfig, feats: np.ndarray, grid: int, rng: np.random.Generator) -> np.ndarray:
    h = cfg.image_size
    tile = h * 2 ** (cfg.num_levels - 1)
    side = grid * tile
    canvas = np.full((3, side, side), 0.5)

    # band-limited nuisance: coarse noise upsampled smoothly
    coarse = rng.standard_normal((3, side // 16 + 1, side // 16 + 1))
    smooth = ndimage.zoom(coarse, (1, 16, 16), order=1)[:, :side, :side]
    canvas += cfg.nuisance_amplitude * smooth

    rr, cc = np.mgrid[0:side, 0:side]
    checker = np.where((rr + cc) % 2 == 0, 1.0, -1.0)
    checker2 = np.where((rr // 2 + cc // 2) % 2 == 0, 1.0, -1.0)
    annulus = np.ones((tile, tile))
    annulus[(tile - h) // 2:(tile + h) // 2, (tile - h) // 2:(tile + h) // 2] = 0.0
    ring_lo, ring_hi = (tile - 2 * h) // 2, (tile + 2 * h) // 2
    spot_lo, spot_hi = (tile - h) // 2, (tile + h) // 2
    for s, (gr, gc) in enumerate(itertools.product(range(grid), range(grid))):
        if s >= len(feats):
            break
        f = feats[s].reshape(len(BLOCKS), BLOCK_DIM)
        r0, c0 = gr * tile, gc * tile
        t = canvas[:, r0:r0 + tile, c0:c0 + tile]
        t += cfg.color_amplitude * f[4][:, None, None]
        sub = t[:, ring_lo:ring_hi, ring_lo:ring_hi]
        sub += cfg.color_amplitude * (f[3] - f[4])[:, None, None]
        ring_chk = checker2[r0 + ring_lo:r0 + ring_hi, c0 + ring_lo:c0 + ring_hi] * annulus[ring_lo:ring_hi, ring_lo:ring_hi]
        sub += cfg.texture_amplitude * f[2][:, None, None] * ring_chk[None]
        spot = t[:, spot_lo:spot_hi, spot_lo:spot_hi]
        spot += cfg.color_amplitude * (f[1] - f[3])[:, None, None]
        chk = checker[r0 + spot_lo:r0 + spot_hi, c0 + spot_lo:c0 + spot_hi]
        spot += cfg.texture_amplitude * f[0][:, None, None] * chk[None]

    n_blobs = int(round(cfg.blobs_per_spot * grid * grid))
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0, side, size=2)
        sigma = rng.uniform(0.05, 0.2) * tile
        colour = rng.normal(0.0, 0.03, size=3)
        rad = int(3 * sigma)
        y0, y1 = max(int(cy) - rad, 0), min(int(cy) + rad + 1, side)
        x0, x1 = max(int(cx) - rad, 0), min(int(cx) + rad + 1, side)
        yy, xx = np.mgrid[y0:y1, x0:x1]
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        canvas[:, y0:y1, x0:x1] += colour[:, None, None] * bump[None]
    return np.clip(canvas, 0.0, 1.0)


def oracle_pcc_ceilings(features: np.ndarray, values: np.ndarray, num_levels: int) -> dict[str, float]:
    """Mean per-spot PCC of the least-squares fit on the features visible to each level subset."""
    out = {}
    levels = range(num_levels)
    for r in range(1, num_levels + 1):
        for subset in itertools.combinations(levels, r):
            blocks = sorted({b for lv in subset for b in visible_blocks(lv)}, key=BLOCKS.index)
            x = features[:, feature_columns(blocks)]
            x1 = np.hstack([x, np.ones((len(x), 1))])
            coef, *_ = np.linalg.lstsq(x1, values, rcond=None)
            out[",".join(map(str, subset))] = float(mean_spot_pcc(values, x1 @ coef))
    return out


def synth_generate(cfg: SynthConfig = SynthConfig(), seed: int = 0) -> StDataset:
    """Deterministic synthetic dataset for ``seed``.

    The metadata carries the latent features, the exact feature-to-gene map
    and the oracle PCC ceilings per level subset.
    """
    if cfg.num_levels < 1 or cfg.image_size % 2 ** cfg.num_levels:
        raise ValueError("image size must be divisible by 2^num_levels")
    n_feat = len(BLOCKS) * BLOCK_DIM
    weights = gene_weight_matrix(cfg, seed)
    grid = math.ceil(math.sqrt(cfg.spots_per_slide))
    tile = cfg.image_size * 2 ** (cfg.num_levels - 1)
    n = cfg.n_slides * cfg.spots_per_slide

    images = np.empty((n, cfg.num_levels, 3, cfg.image_size, cfg.image_size), dtype=np.uint8)
    features = np.empty((n, n_feat))
    centers = np.empty((n, 2))
    spot_ids, slide_ids = [], []
    i = 0
    for s in range(cfg.n_slides):
        rng = generator(seed, "slide", s)
        feats = np.clip(rng.standard_normal((cfg.spots_per_slide, n_feat)), -2.5, 2.5)
        canvas = _render_slide(cfg, feats, grid, rng)
        pyramid = build_pyramid(canvas, cfg.num_levels)
        slide = f"synth-slide{s:03d}"
        for j in range(cfg.spots_per_slide):
            gr, gc = divmod(j, grid)
            center = (gr * tile + tile / 2, gc * tile + tile / 2)
            crops = extract_pyramid_patches(pyramid, center, cfg.image_size)
            images[i] = np.round(np.stack(crops) * 255.0).astype(np.uint8)
            features[i] = feats[j]
            centers[i] = center
            spot_ids.append(f"{slide}:{gr:02d}x{gc:02d}")
            slide_ids.append(slide)
            i += 1

    clean = features @ weights.T
    noise = generator(seed, "expression-noise").standard_normal(clean.shape)
    values = clean + cfg.noise * noise
    um_per_px = LEVEL0_FIELD_UM / cfg.image_size
    metadata = {
        "generator": "m2ost.synth",
        "seed": seed,
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()},
        "spot_diameter_um": SPOT_DIAMETER_UM,
        "spot_spacing_um": tile * um_per_px,
        "level_count": cfg.num_levels,
        "feature_blocks": list(BLOCKS),
        "visible_blocks": {str(lv): visible_blocks(lv) for lv in range(cfg.num_levels)},
        "gene_weights": weights.tolist(),
        "features": features.tolist(),
        "oracle_pcc": oracle_pcc_ceilings(features, values, cfg.num_levels),
    }
    genes = [f"GENE{g:04d}" for g in range(cfg.num_genes)]
    return StDataset(images=images, values=values, gene_names=genes, spot_ids=spot_ids, slide_ids=slide_ids,
                     centers=centers, metadata=metadata, split_seed=cfg.split_seed)


def oracle_predictions(ds: StDataset) -> np.ndarray:
    """The exact noise-free linear target for every spot of a synthetic dataset."""
    try:
        f = np.asarray(ds.metadata["features"], dtype=np.float64)
        w = np.asarray(ds.metadata["gene_weights"], dtype=np.float64)
    except KeyError:
        raise ValueError("dataset carries no generator oracle (not synthetic?)") from None
    return f @ w.T
