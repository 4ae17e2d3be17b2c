"""Per-class mode color and mode LBP texture mined from a labeled dataset."""
from __future__ import annotations

import hashlib
import json
import os
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import EmptyDatasetError, SchemaVersionError, TruncatedFileError, ValidationError

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class LbpConfig:
    neighbors: int = 8
    radius: int = 1
    compare: str = "ge"

    def __post_init__(self):
        if (self.neighbors, self.radius, self.compare) != (8, 1, "ge"):
            raise ValidationError("only the 8-neighbor, radius-1, >= comparison LBP is supported")


DEFAULT_LBP = LbpConfig()

# (row offset, col offset) clockwise from top-left; the first entry is the MSB.
NEIGHBOR_OFFSETS = ((-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1))


def lbp_code(patch) -> int:
    patch = np.asarray(patch)
    if patch.shape != (3, 3):
        raise ValidationError(f"LBP patch must be 3x3, got {patch.shape}")
    if not np.all(np.isfinite(patch)):
        raise ValidationError("LBP patch must be finite")
    center = patch[1, 1]
    code = 0
    for dr, dc in NEIGHBOR_OFFSETS:
        code = (code << 1) | int(patch[1 + dr, 1 + dc] >= center)
    return code


def lbp_map(gray) -> np.ndarray:
    """Raw 8-bit LBP codes for every interior pixel; output is (H-2) x (W-2)."""
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.shape[0] < 3 or gray.shape[1] < 3:
        raise ValidationError(f"LBP needs a 2-D image of at least 3x3, got {gray.shape}")
    if gray.dtype.kind == "u":
        gray = gray.astype(np.int64)
    h, w = gray.shape
    center = gray[1 : h - 1, 1 : w - 1]
    codes = np.zeros(center.shape, dtype=np.uint8)
    for bit, (dr, dc) in zip(range(7, -1, -1), NEIGHBOR_OFFSETS):
        neighbor = gray[1 + dr : h - 1 + dr, 1 + dc : w - 1 + dc]
        codes |= (neighbor >= center).astype(np.uint8) << bit
    return codes


def rgb_to_gray(image) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValidationError(f"expected an H x W x 3 RGB image, got {image.shape}")
    if image.dtype != np.uint8:
        if not np.issubdtype(image.dtype, np.integer) or image.min() < 0 or image.max() > 255:
            raise ValidationError("expected 8-bit RGB channels")
    rgb = image.astype(np.int64)
    # integer luma with round-half-up: round(0.299R + 0.587G + 0.114B)
    luma = (299 * rgb[..., 0] + 587 * rgb[..., 1] + 114 * rgb[..., 2] + 500) // 1000
    return np.clip(luma, 0, 255).astype(np.uint8)


def pack_rgb(pixels: np.ndarray) -> np.ndarray:
    p = pixels.astype(np.int64)
    return (p[..., 0] << 16) | (p[..., 1] << 8) | p[..., 2]


def unpack_rgb(packed: int) -> tuple[int, int, int]:
    return (packed >> 16) & 0xFF, (packed >> 8) & 0xFF, packed & 0xFF


def rgb_to_hex(rgb) -> str:
    r, g, b = (int(c) for c in rgb)
    return f"#{r:02X}{g:02X}{b:02X}"


def _mode_of_counts(counts: dict[int, int]) -> tuple[int, int] | None:
    """(value, count) with the highest count; ties go to the smallest value."""
    if not counts:
        return None
    best = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return best


def _check_aligned(image, mask):
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.shape[:2] != mask.shape:
        raise ValidationError(f"image {image.shape[:2]} and mask {mask.shape} are not aligned")
    return image, mask


def _color_counts(image, mask, class_id) -> Counter:
    values, counts = np.unique(pack_rgb(image[mask == class_id]), return_counts=True)
    return Counter(dict(zip(values.tolist(), counts.tolist())))


def _texture_counts(codes, mask, class_id) -> np.ndarray:
    inner = mask[1:-1, 1:-1]
    return np.bincount(codes[inner == class_id].ravel(), minlength=256).astype(np.int64)


def class_color_mode(images, masks, class_id: int) -> tuple[int, int, int] | None:
    """Most frequent exact RGB triple among pixels of ``class_id``; ``None`` when absent."""
    total = Counter()
    for image, mask in zip(images, masks):
        image, mask = _check_aligned(image, mask)
        total.update(_color_counts(image, mask, class_id))
    best = _mode_of_counts(total)
    return None if best is None else unpack_rgb(best[0])


def class_texture_mode(images, masks, class_id: int) -> int | None:
    hist = np.zeros(256, dtype=np.int64)
    for image, mask in zip(images, masks):
        image, mask = _check_aligned(image, mask)
        hist += _texture_counts(lbp_map(rgb_to_gray(image)), mask, class_id)
    if hist.sum() == 0:
        return None
    return int(np.argmax(hist))  # argmax returns the first (smallest) code on ties


@dataclass(frozen=True)
class FactorRow:
    class_id: int
    color_rgb: tuple[int, int, int] | None
    texture_code: int | None
    color_support: int
    texture_support: int

    @property
    def color_hex(self) -> str | None:
        return None if self.color_rgb is None else rgb_to_hex(self.color_rgb)

    @property
    def absent(self) -> bool:
        return self.color_support == 0


@dataclass(frozen=True)
class VisualFactorTable:
    dataset_id: str
    rows: tuple[FactorRow, ...]
    lbp: LbpConfig = DEFAULT_LBP
    scan_hash: str = ""
    extra: tuple[tuple[str, str], ...] = ()

    def get(self, class_id: int) -> FactorRow | None:
        for row in self.rows:
            if row.class_id == class_id:
                return row
        return None

    def to_dict(self) -> dict:
        doc = {
            "schema": SCHEMA_VERSION,
            "dataset_id": self.dataset_id,
            "lbp": asdict(self.lbp),
            "scan_hash": self.scan_hash,
            "classes": [
                {
                    "class_id": r.class_id,
                    "color_hex": r.color_hex,
                    "color_rgb": None if r.color_rgb is None else list(r.color_rgb),
                    "texture_code": r.texture_code,
                    "color_support": r.color_support,
                    "texture_support": r.texture_support,
                    "absent": r.absent,
                }
                for r in self.rows
            ],
        }
        doc.update(dict(self.extra))
        return doc

    def save(self, path) -> None:
        tmp = Path(str(path) + ".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        os.replace(tmp, path)

    @classmethod
    def from_dict(cls, doc: dict) -> "VisualFactorTable":
        if doc.get("schema") != SCHEMA_VERSION:
            raise SchemaVersionError(f"factor table schema {doc.get('schema')!r}, expected {SCHEMA_VERSION}")
        try:
            rows = tuple(
                FactorRow(
                    int(c["class_id"]),
                    None if c["color_rgb"] is None else tuple(int(v) for v in c["color_rgb"]),
                    None if c["texture_code"] is None else int(c["texture_code"]),
                    int(c["color_support"]),
                    int(c["texture_support"]),
                )
                for c in doc["classes"]
            )
            known = {"schema", "dataset_id", "lbp", "scan_hash", "classes"}
            extra = tuple(sorted((k, v) for k, v in doc.items() if k not in known))
            return cls(doc["dataset_id"], rows, LbpConfig(**doc["lbp"]), doc.get("scan_hash", ""), extra)
        except (KeyError, TypeError) as exc:
            raise TruncatedFileError(f"malformed factor table: {exc}") from exc

    @classmethod
    def load(cls, path) -> "VisualFactorTable":
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise TruncatedFileError(f"{path}: unreadable factor table ({exc})") from exc
        return cls.from_dict(doc)


def scan_dataset_factors(dataset: Iterable, catalog, lbp_config: LbpConfig = DEFAULT_LBP, dataset_id: str = "dataset") -> VisualFactorTable:
    """Stream per-class color and LBP histograms over ``(image, mask)`` pairs, then take modes.

    Histograms merge by addition, so the table does not depend on iteration order.
    """
    n = catalog.num_classes
    valid = set(range(n)) | {catalog.ignore_index}
    colors = [Counter() for _ in range(n)]
    textures = np.zeros((n, 256), dtype=np.int64)
    seen = 0
    for sample in dataset:
        image, mask = (sample.image, sample.mask) if hasattr(sample, "image") else sample
        image, mask = _check_aligned(image, mask)
        offenders = sorted(set(np.unique(mask).tolist()) - valid)
        if offenders:
            where = getattr(sample, "id", f"#{seen}")
            raise ValidationError(f"sample {where}: unknown label values {offenders}")
        codes = lbp_map(rgb_to_gray(image))
        for class_id in np.unique(mask).tolist():
            if class_id == catalog.ignore_index:
                continue
            colors[class_id].update(_color_counts(image, mask, class_id))
            textures[class_id] += _texture_counts(codes, mask, class_id)
        seen += 1
    if seen == 0:
        raise EmptyDatasetError("cannot scan factors of an empty dataset")

    rows = []
    for class_id in range(n):
        color = _mode_of_counts(colors[class_id])
        tex_support = int(textures[class_id].sum())
        rows.append(
            FactorRow(
                class_id,
                None if color is None else unpack_rgb(color[0]),
                int(np.argmax(textures[class_id])) if tex_support else None,
                sum(colors[class_id].values()),
                tex_support,
            )
        )
    blob = json.dumps(
        {"dataset_id": dataset_id, "lbp": asdict(lbp_config), "catalog": catalog.to_dict()},
        sort_keys=True,
    )
    scan_hash = hashlib.sha256(blob.encode()).hexdigest()
    return VisualFactorTable(dataset_id, tuple(rows), lbp_config, scan_hash)
