"""Spot-centred crops from an image pyramid (level l has 2^-l the side of level 0)."""
from __future__ import annotations

import numpy as np

BACKGROUND = 1.0


def downsample2(image: np.ndarray) -> np.ndarray:
    """2x2 box-filter downsampling of a ``3 x H x W`` image (H, W even)."""
    c, h, w = image.shape
    if h % 2 or w % 2:
        raise ValueError(f"cannot halve a {h}x{w} image")
    return image.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


def build_pyramid(level0: np.ndarray, num_levels: int) -> list[np.ndarray]:
    levels = [np.asarray(level0, dtype=np.float64)]
    for _ in range(num_levels - 1):
        levels.append(downsample2(levels[-1]))
    return levels


def crop_centered(image: np.ndarray, center_rc: tuple[float, float], size: int,
                  fill: float = BACKGROUND) -> np.ndarray:
    """``size x size`` crop whose centre is ``center_rc`` (pixel units); outside pixels are ``fill``."""
    c, h, w = image.shape
    top = int(round(center_rc[0] - size / 2))
    left = int(round(center_rc[1] - size / 2))
    out = np.full((c, size, size), fill, dtype=image.dtype)
    r0, r1 = max(top, 0), min(top + size, h)
    c0, c1 = max(left, 0), min(left + size, w)
    if r0 < r1 and c0 < c1:
        out[:, r0 - top:r1 - top, c0 - left:c1 - left] = image[:, r0:r1, c0:c1]
    return out


def extract_pyramid_patches(pyramid: list[np.ndarray], spot_center_px: tuple[float, float],
                            patch_size: int = 224) -> list[np.ndarray]:
    """One crop per level, centred on the spot; level l is cut at ``center / 2**l``."""
    _, h, w = pyramid[0].shape
    r, c = spot_center_px
    if not (0 <= r < h and 0 <= c < w):
        raise ValueError(f"spot centre {spot_center_px} outside level-0 image of {h}x{w}")
    return [crop_centered(img, (r / 2 ** lv, c / 2 ** lv), patch_size) for lv, img in enumerate(pyramid)]

