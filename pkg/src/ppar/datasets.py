"""Folder-layout segmentation datasets and a seeded synthetic two-domain generator.

Layout: ``root/images/<stem>.png`` (RGB) and ``root/masks/<stem>.png``
(8-bit single-channel index PNG).
"""
from __future__ import annotations

import colorsys
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import EmptyDatasetError, ValidationError
from .text_prototypes import ClassCatalog

TOY_CLASSES = ("background", "blob", "stripe band", "disk", "frame")
BACKGROUND, BLOB, BAND, DISK, FRAME = range(5)


def toy_catalog(ignore_index: int = 255) -> ClassCatalog:
    return ClassCatalog.from_names(TOY_CLASSES, ignore_index)


@dataclass(frozen=True)
class SegSample:
    image: np.ndarray  # H x W x 3 uint8
    mask: np.ndarray  # H x W uint8/int labels
    id: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3 or self.image.shape[:2] != self.mask.shape:
            raise ValidationError(f"sample {self.id}: image {self.image.shape} and mask {self.mask.shape} disagree")


def _check_mask(mask: np.ndarray, catalog: ClassCatalog, where: str) -> None:
    values = np.unique(mask)
    bad = [int(v) for v in values if v != catalog.ignore_index and not 0 <= v < catalog.num_classes]
    if bad:
        raise ValidationError(f"{where}: label value(s) {bad} outside catalog (0..{catalog.num_classes - 1}) and ignore {catalog.ignore_index}")


class FolderDataset(Sequence):
    """Lazily loaded, lexicographically ordered folder dataset."""

    def __init__(self, root, catalog: ClassCatalog):
        self.root = Path(root)
        self.catalog = catalog
        img_dir, mask_dir = self.root / "images", self.root / "masks"
        for d in (img_dir, mask_dir):
            if not d.is_dir():
                raise ValidationError(f"missing directory: {d}")
        images = {p.stem: p for p in img_dir.iterdir() if p.suffix.lower() == ".png"}
        masks = {p.stem: p for p in mask_dir.iterdir() if p.suffix.lower() == ".png"}
        for stem in sorted(images.keys() ^ masks.keys()):
            side = "mask" if stem in images else "image"
            raise ValidationError(f"stem {stem!r} has no matching {side} under {self.root}")
        self.stems = sorted(images)
        if not self.stems:
            raise EmptyDatasetError(f"no samples under {self.root}")
        self._images, self._masks = images, masks
        self._checked: set[str] = set()

    def __len__(self):
        return len(self.stems)

    def __getitem__(self, idx) -> SegSample:
        if isinstance(idx, slice):
            return [self[i] for i in range(*idx.indices(len(self)))]
        stem = self.stems[idx]
        image = np.asarray(Image.open(self._images[stem]).convert("RGB"))
        with Image.open(self._masks[stem]) as m:
            if m.mode not in ("L", "P"):
                raise ValidationError(f"{self._masks[stem]}: mask must be a single-channel index PNG, got mode {m.mode}")
            mask = np.asarray(m).copy()
        if stem not in self._checked:
            _check_mask(mask, self.catalog, str(self._masks[stem]))
            self._checked.add(stem)
        return SegSample(image, mask, stem)


def load_folder_dataset(root, catalog: ClassCatalog) -> FolderDataset:
    return FolderDataset(root, catalog)


def stack_dataset(dataset) -> tuple[np.ndarray, np.ndarray, list[str]]:
    samples = list(dataset)
    if not samples:
        raise EmptyDatasetError("dataset is empty")
    images = np.stack([s.image for s in samples])
    masks = np.stack([s.mask for s in samples]).astype(np.int64)
    return images, masks, [s.id for s in samples]


# ---------------------------------------------------------------------------
# synthetic domains

# canonical class colors; domains apply hue/brightness offsets on top
BASE_PALETTE = ((110, 120, 90), (200, 70, 60), (230, 200, 60), (60, 110, 200), (140, 90, 160))


@dataclass(frozen=True)
class Geometry:
    frame_width: float = 0.08
    band_height: float = 0.2
    disk_radius: float = 0.14
    blob_axes: tuple[float, float] = (0.19, 0.11)
    blob_wobble: float = 0.15


@dataclass(frozen=True)
class ToyDomainSpec:
    domain_id: str
    seed: int = 0
    hue_shift: tuple[float, ...] = (0.0,) * 5  # degrees, per class
    brightness_shift: tuple[float, ...] = (0.0,) * 5  # multiplicative offset, per class
    texture_frequency: float = 1.0
    texture_amplitude: float = 0.25
    noise_level: float = 6.0  # std of additive Gaussian noise, 8-bit units
    geometry: Geometry = field(default_factory=Geometry)

    def __post_init__(self):
        if len(self.hue_shift) != 5 or len(self.brightness_shift) != 5:
            raise ValidationError("hue_shift and brightness_shift need one entry per toy class")
        if any(not -1.0 < b < 1.0 for b in self.brightness_shift):
            raise ValidationError("brightness offsets must lie in (-1, 1)")
        if not self.texture_frequency > 0 or not 0 <= self.texture_amplitude < 1:
            raise ValidationError("texture frequency must be positive and amplitude in [0, 1)")
        if self.noise_level < 0:
            raise ValidationError("noise level must be non-negative")
        g = self.geometry
        if not (0 < g.frame_width < 0.25 and 0 < g.band_height < 0.4 and 0 < g.disk_radius < 0.25):
            raise ValidationError("geometry fractions out of range")
        if not (0 < g.blob_axes[1] <= g.blob_axes[0] < 0.25 and 0 <= g.blob_wobble < 0.5):
            raise ValidationError("blob geometry out of range")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ToyDomainSpec":
        d = dict(d)
        geo = d.pop("geometry", {})
        if "blob_axes" in geo:
            geo = dict(geo, blob_axes=tuple(geo["blob_axes"]))
        for key in ("hue_shift", "brightness_shift"):
            if key in d:
                d[key] = tuple(d[key])
        try:
            return cls(geometry=Geometry(**geo), **d)
        except TypeError as exc:
            raise ValidationError(f"bad toy domain spec: {exc}") from exc


def source_domain(seed: int = 0) -> ToyDomainSpec:
    return ToyDomainSpec("toy-source", seed=seed)


def target_domain(seed: int = 1) -> ToyDomainSpec:
    return ToyDomainSpec(
        "toy-target",
        seed=seed,
        # hue offsets exceed the training jitter range so augmentation alone cannot cover the gap
        hue_shift=(80.0, -65.0, 90.0, -70.0, 60.0),
        brightness_shift=(-0.3, 0.2, -0.35, 0.25, -0.25),
        texture_frequency=1.5,
        texture_amplitude=0.3,
        noise_level=14.0,
    )


def _pixel_dims(size: int, g: Geometry) -> dict:
    return {
        "frame": max(1, round(g.frame_width * size)),
        "band": max(1, round(g.band_height * size)),
        "disk": g.disk_radius * size,
        "blob_a": g.blob_axes[0] * size,
        "blob_b": g.blob_axes[1] * size,
    }


def region_area_targets(size: int, geometry: Geometry = Geometry()) -> np.ndarray:
    """Nominal per-class area fractions implied by the geometry (overlaps ignored)."""
    d = _pixel_dims(size, geometry)
    s2 = float(size * size)
    inner = size - 2 * d["frame"]
    frame = 1.0 - inner * inner / s2
    band = d["band"] * inner / s2
    disk = math.pi * d["disk"] ** 2 / s2
    blob = math.pi * d["blob_a"] * d["blob_b"] * (1 + geometry.blob_wobble**2 / 2) / s2
    return np.array([1.0 - frame - band - disk - blob, blob, band, disk, frame])


def toy_mask(size: int, seed: int, index: int, geometry: Geometry = Geometry()) -> np.ndarray:
    """Layered geometric scene; depends only on (size, seed, index, geometry)."""
    rng = np.random.default_rng([seed, index, 0])
    d = _pixel_dims(size, geometry)
    f, inner = d["frame"], size - 2 * d["frame"]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    mask = np.full((size, size), BACKGROUND, dtype=np.uint8)

    vertical = bool(rng.integers(2))
    start = f + int(rng.integers(0, inner - d["band"] + 1))
    coord = xx if vertical else yy
    band = (coord >= start) & (coord < start + d["band"])

    r_disk = d["disk"]
    a, b = d["blob_a"], d["blob_b"]
    theta = rng.uniform(0, math.pi)
    phase = rng.uniform(0, 2 * math.pi)

    def place(radius, avoid):
        # least-overlap candidate; exact non-overlap is not always feasible
        lo, hi = f + radius, size - f - radius
        best, best_cost = None, math.inf
        for _ in range(64):
            c = rng.uniform(lo, hi, size=2)
            cost = sum(max(0.0, radius + pr - np.hypot(*(c - p))) for p, pr in avoid)
            along = c[1] if vertical else c[0]
            cost += max(0.0, min(along + radius - start, start + d["band"] - (along - radius)))
            if cost < best_cost:
                best, best_cost = c, cost
            if cost == 0.0:
                break
        return best

    disk_c = place(r_disk, [])
    blob_c = place(a * (1 + geometry.blob_wobble), [(disk_c, r_disk)])

    dy, dx = yy - blob_c[0], xx - blob_c[1]
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    ang = np.arctan2(v / b, u / a)
    rad = np.hypot(u / a, v / b)
    blob = rad <= 1.0 + geometry.blob_wobble * np.sin(3 * ang + phase)
    disk = np.hypot(yy - disk_c[0], xx - disk_c[1]) <= r_disk

    mask[band] = BAND
    mask[blob] = BLOB
    mask[disk] = DISK
    border = (yy < f) | (yy >= size - f) | (xx < f) | (xx >= size - f)
    mask[border] = FRAME
    return mask


def _domain_palette(spec: ToyDomainSpec) -> np.ndarray:
    out = []
    for (r, g, b), dh, db in zip(BASE_PALETTE, spec.hue_shift, spec.brightness_shift):
        h, s, v = colorsys.rgb_to_hsv(r / 255, g / 255, b / 255)
        r2, g2, b2 = colorsys.hsv_to_rgb((h + dh / 360.0) % 1.0, s, min(1.0, v * (1 + db)))
        out.append((r2 * 255, g2 * 255, b2 * 255))
    return np.array(out)


def _textures(size: int, freq: float) -> np.ndarray:
    """One zero-mean pattern in [-1, 1] per class."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    w = 2 * math.pi * freq / 16.0
    c = (size - 1) / 2
    return np.stack(
        [
            np.sin(w * 0.25 * (xx + yy)),  # background: slow gradient
            np.sign(np.sin(w * xx) * np.sin(w * yy)),  # blob: spots
            np.sign(np.sin(w * 1.5 * (xx - yy))),  # band: diagonal stripes
            np.sin(w * 1.2 * np.hypot(yy - c, xx - c)),  # disk: rings
            np.sign(np.sin(w * 2.0 * yy)),  # frame: fine horizontal hatching
        ]
    )


def render_toy_image(mask: np.ndarray, spec: ToyDomainSpec, index: int) -> np.ndarray:
    size = mask.shape[0]
    style = int.from_bytes(hashlib.sha256(spec.domain_id.encode()).digest()[:4], "little")
    rng = np.random.default_rng([spec.seed, index, 1, style])
    palette = _domain_palette(spec)
    tex = _textures(size, spec.texture_frequency)
    per_pixel_color = palette[mask]
    per_pixel_tex = np.take_along_axis(tex, mask[None].astype(np.int64), axis=0)[0]
    image = per_pixel_color * (1.0 + spec.texture_amplitude * per_pixel_tex)[..., None]
    image = image + rng.normal(0.0, spec.noise_level, size=image.shape)
    return np.clip(np.rint(image), 0, 255).astype(np.uint8)


def generate_toy_domain(spec: ToyDomainSpec, count: int, size: int, root) -> Path:
    """Write ``count`` scenes under ``root`` in folder layout plus catalog/domain JSON."""
    if count < 1:
        raise ValidationError("count must be >= 1")
    if size < 32:
        raise ValidationError("size must be >= 32")
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for i in range(count):
        mask = toy_mask(size, spec.seed, i, spec.geometry)
        image = render_toy_image(mask, spec, i)
        stem = f"{i:05d}"
        Image.fromarray(image).save(root / "images" / f"{stem}.png")
        Image.fromarray(mask).save(root / "masks" / f"{stem}.png")
    toy_catalog().save(root / "catalog.json")
    (root / "domain.json").write_text(json.dumps({"count": count, "size": size, "spec": spec.to_dict()}, indent=2) + "\n")
    return root


def toy_samples(spec: ToyDomainSpec, count: int, size: int) -> list[SegSample]:
    """In-memory equivalent of :func:`generate_toy_domain`."""
    out = []
    for i in range(count):
        mask = toy_mask(size, spec.seed, i, spec.geometry)
        out.append(SegSample(render_toy_image(mask, spec, i), mask, f"{i:05d}"))
    return out
