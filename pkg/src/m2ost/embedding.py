"""Deformable patch embedding: multi-granular tokens per pyramid level, cls tokens, positions.

Level ``l`` is tokenized at patch sizes p, p/2, ..., p/2^l. Patch size p/2^r
only covers the central (H/2^r) x (W/2^r) window, so every granularity yields
exactly L = HW/p^2 tokens and level ``l`` has (l+1)*L tokens. Tokens are
ordered coarse to fine, row-major within each granularity. One projection
exists per patch size and is shared by every level that uses it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .config import ConfigError, ModelConfig

PIXEL_MEAN = 0.5
PIXEL_STD = 0.5


@dataclass
class MultiScaleSample:
    images: list[np.ndarray]
    target: "object | None" = None
    level_present: list[bool] = field(default_factory=list)
    spot_id: str = ""
    spot_center: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not self.level_present:
            self.level_present = [True] * len(self.images)
        shapes = {img.shape for img in self.images}
        if len(shapes) != 1:
            raise ValueError(f"level images differ in shape: {sorted(shapes)}")
        (shape,) = shapes
        if len(shape) != 3 or shape[0] != 3:
            raise ValueError(f"images must be 3 x H x W, got {shape}")


def standardize(images: np.ndarray) -> np.ndarray:
    """Map pixels in [0, 1] (or uint8) to the model's input range."""
    x = np.asarray(images)
    if x.dtype == np.uint8:
        x = x.astype(dc.get_dtype()) / 255.0
    return ((x - PIXEL_MEAN) / PIXEL_STD).astype(dc.get_dtype(), copy=False)


def granularities(level: int, cfg: ModelConfig, size: tuple[int, int] | None = None) -> list[tuple[int, tuple[int, int, int, int]]]:
    """(patch size, (top, left, height, width)) for each token group of ``level``."""
    h, w = size or (cfg.image_size, cfg.image_size)
    p = cfg.patch_size
    if h % p or w % p:
        raise ConfigError(f"patch size {p} does not divide image {h}x{w}")
    if not cfg.use_dpe:
        return [(p, (0, 0, h, w))]
    plan = []
    for r in range(level + 1):
        scale = 2 ** r
        if p % scale:
            raise ConfigError(f"patch size {p} not divisible by {scale}")
        rh, rw = h // scale, w // scale
        if rh * scale != h or rw * scale != w or (h - rh) % 2 or (w - rw) % 2:
            raise ConfigError(f"central {rh}x{rw} region of a {h}x{w} image is not pixel aligned")
        ps = p // scale
        if rh % ps or rw % ps:
            raise ConfigError(f"central region {rh}x{rw} not tiled by patch {ps}")
        plan.append((ps, ((h - rh) // 2, (w - rw) // 2, rh, rw)))
    return plan


def sequence_length(level: int, cfg: ModelConfig) -> int:
    """Token count of ``level`` before the cls token."""
    return len(granularities(level, cfg)) * cfg.tokens_per_unit


def embedder_name(level: int, patch: int, cfg: ModelConfig) -> str:
    if cfg.use_dpe:
        return f"shared.embed.p{patch}"
    return f"level{level}.embed"


def patchify(images: np.ndarray, patch: int, region: tuple[int, int, int, int]) -> np.ndarray:
    """``[B, 3, H, W]`` -> ``[B, n, 3*patch*patch]`` over ``region``, row-major patch order."""
    top, left, rh, rw = region
    x = images[:, :, top:top + rh, left:left + rw]
    b, c = x.shape[:2]
    nh, nw = rh // patch, rw // patch
    x = x.reshape(b, c, nh, patch, nw, patch).transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(b, nh * nw, c * patch * patch))


def dpe_embed(images: np.ndarray, params: dc.ParamStore, cfg: ModelConfig) -> list[dc.DiffArray]:
    """Embed standardized images ``[B, M, 3, H, W]`` into one ``[B, T_l, C]`` sequence per enabled level."""
    if images.ndim == 4:
        images = images[None]
    if images.shape[1] != cfg.num_levels:
        raise ConfigError(f"expected {cfg.num_levels} level images, got {images.shape[1]}")
    size = images.shape[-2:]
    out = []
    for level in cfg.levels:
        parts = []
        for patch, region in granularities(level, cfg, size):
            tokens = patchify(images[:, level], patch, region)
            name = embedder_name(level, patch, cfg)
            parts.append(dc.linear(dc.DiffArray(tokens), params[name + ".weight"], params[name + ".bias"]))
        out.append(parts[0] if len(parts) == 1 else dc.concat(parts, axis=1))
    return out


def add_cls_and_positions(tokens: list[dc.DiffArray], params: dc.ParamStore, cfg: ModelConfig) -> list[dc.DiffArray]:
    out = []
    for level, seq in zip(cfg.levels, tokens):
        cls = params[f"level{level}.cls"]
        pos = params[f"level{level}.pos"]
        b, t, c = seq.shape
        if pos.shape != (t + 1, c):
            raise ConfigError(f"level {level}: positional table {pos.shape} does not fit {t}+1 tokens x {c}")
        cls_b = dc.broadcast_to(dc.reshape(cls, (1, 1, c)), (b, 1, c))
        out.append(dc.add(dc.concat([cls_b, seq], axis=1), pos))
    return out


def embedding_param_shapes(cfg: ModelConfig) -> dict[str, tuple[tuple[int, ...], str]]:
    specs: dict[str, tuple[tuple[int, ...], str]] = {}
    c = cfg.channels
    for level in cfg.levels:
        for patch, _ in granularities(level, cfg):
            name = embedder_name(level, patch, cfg)
            specs[name + ".weight"] = ((3 * patch * patch, c), "trunc")
            specs[name + ".bias"] = ((c,), "zero")
        specs[f"level{level}.cls"] = ((c,), "normal")
        specs[f"level{level}.pos"] = ((sequence_length(level, cfg) + 1, c), "normal")
    return specs
