"""The ``M2OD`` dataset container.

Layout (little-endian)::

    b"M2OD" | u32 version | u32 n_meta | n_meta bytes of UTF-8 JSON
    gene table: per gene  u16 n | n bytes UTF-8
    per sample: u16 n | spot id | u16 n | slide id | f64 row | f64 col
                u8 level-present bitmask | M*3*H*W u8 RGB
                [k * u32 raw counts, when has_counts] | k * f32 values

Sample count, level count, H, W, k and has_counts live in the JSON block.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .dataset import StDataset

MAGIC = b"M2OD"
VERSION = 1


class DatasetFormatError(ValueError):
    pass


def _str16(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError(f"identifier too long: {s[:40]}...")
    return struct.pack("<H", len(raw)) + raw


def dataset_to_bytes(ds: StDataset) -> bytes:
    n, m, _, h, w = ds.images.shape
    header = {
        "num_samples": n,
        "num_levels": m,
        "height": h,
        "width": w,
        "num_genes": ds.num_genes,
        "has_counts": ds.counts is not None,
        "split_seed": ds.split_seed,
        "metadata": ds.metadata,
    }
    meta = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta]
    parts.extend(_str16(g) for g in ds.gene_names)
    values = ds.values.astype("<f4")
    counts = None if ds.counts is None else ds.counts.astype("<u4")
    for i in range(n):
        parts.append(_str16(ds.spot_ids[i]))
        parts.append(_str16(ds.slide_ids[i]))
        parts.append(struct.pack("<dd", *ds.centers[i]))
        bits = sum(1 << lv for lv in range(m) if ds.level_present[i, lv])
        parts.append(struct.pack("<B", bits))
        parts.append(np.ascontiguousarray(ds.images[i]).tobytes())
        if counts is not None:
            parts.append(counts[i].tobytes())
        parts.append(values[i].tobytes())
    return b"".join(parts)


def dataset_from_bytes(blob: bytes) -> StDataset:
    view = memoryview(blob)
    pos = 0

    def take(k: int) -> memoryview:
        nonlocal pos
        if pos + k > len(view):
            raise DatasetFormatError(f"truncated dataset: needed {k} bytes at offset {pos}")
        chunk = view[pos:pos + k]
        pos += k
        return chunk

    def str16() -> str:
        (k,) = struct.unpack("<H", take(2))
        return bytes(take(k)).decode("utf-8")

    if bytes(take(4)) != MAGIC:
        raise DatasetFormatError("not an M2OD dataset (bad magic)")
    version, meta_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise DatasetFormatError(f"unsupported M2OD version {version}")
    try:
        header = json.loads(bytes(take(meta_len)).decode("utf-8"))
        n, m, h, w, k = (int(header[key]) for key in ("num_samples", "num_levels", "height", "width", "num_genes"))
        has_counts = bool(header["has_counts"])
    except (KeyError, ValueError) as exc:
        raise DatasetFormatError(f"corrupt metadata block: {exc}") from None
    genes = [str16() for _ in range(k)]
    images = np.empty((n, m, 3, h, w), dtype=np.uint8)
    values = np.empty((n, k), dtype=np.float32)
    counts = np.empty((n, k), dtype=np.uint32) if has_counts else None
    present = np.zeros((n, m), dtype=bool)
    centers = np.empty((n, 2), dtype=np.float64)
    spot_ids, slide_ids = [], []
    img_bytes = m * 3 * h * w
    for i in range(n):
        spot_ids.append(str16())
        slide_ids.append(str16())
        centers[i] = struct.unpack("<dd", take(16))
        (bits,) = struct.unpack("<B", take(1))
        present[i] = [(bits >> lv) & 1 for lv in range(m)]
        images[i] = np.frombuffer(take(img_bytes), dtype=np.uint8).reshape(m, 3, h, w)
        if counts is not None:
            counts[i] = np.frombuffer(take(4 * k), dtype="<u4")
        values[i] = np.frombuffer(take(4 * k), dtype="<f4")
    if pos != len(view):
        raise DatasetFormatError(f"{len(view) - pos} trailing bytes after the last record")
    return StDataset(images=images, values=values, gene_names=genes, spot_ids=spot_ids, slide_ids=slide_ids,
                     centers=centers, level_present=present, counts=counts,
                     metadata=header.get("metadata", {}), split_seed=int(header.get("split_seed", 0)))


def write_dataset(ds: StDataset, path) -> int:
    blob = dataset_to_bytes(ds)
    Path(path).write_bytes(blob)
    return len(blob)


def read_dataset(path) -> StDataset:
    return dataset_from_bytes(Path(path).read_bytes())
