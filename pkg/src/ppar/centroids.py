"""Masked per-class feature centroids and the EMA naive-prototype bank."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ValidationError

STAGES = ("S1", "S2", "S3", "S4")


@dataclass(frozen=True)
class FeatureTap:
    stage: str
    map: torch.Tensor  # C x H x W, or B x C x H x W for a batch
    stride: int

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValidationError(f"unknown stage {self.stage!r}")
        if self.map.dim() not in (3, 4) or self.map.shape[-1] < 1 or self.map.shape[-2] < 1:
            raise ValidationError(f"tap map must be [B,]C x H x W with H, W >= 1, got {tuple(self.map.shape)}")


@dataclass(frozen=True)
class CentroidReport:
    stage: str
    centroids: torch.Tensor  # N x C; rows of absent classes are zero
    counts: torch.Tensor  # N, int64

    @property
    def present(self) -> torch.Tensor:
        return self.counts > 0

    def vector(self, class_id: int) -> torch.Tensor | None:
        return self.centroids[class_id] if self.counts[class_id] > 0 else None


def downsample_labels(mask: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Nearest-neighbor resample of ``[B,] H x W`` integer labels.

    Output position ``i`` reads input row ``floor((i + 0.5) * H / H_f)``.
    """
    h_f, w_f = size
    if h_f < 1 or w_f < 1:
        raise ValidationError(f"target size must be positive, got {size}")
    h, w = mask.shape[-2:]
    if (h, w) == (h_f, w_f):
        return mask
    rows = ((torch.arange(h_f, dtype=torch.float64) + 0.5) * h / h_f).floor().long().clamp_(max=h - 1)
    cols = ((torch.arange(w_f, dtype=torch.float64) + 0.5) * w / w_f).floor().long().clamp_(max=w - 1)
    return mask[..., rows, :][..., cols]


def class_centroid(tap: FeatureTap, mask_f: torch.Tensor, class_id: int):
    """Mean feature column over positions labeled ``class_id``; ``(None, 0)`` if there are none."""
    fmap = tap.map
    if fmap.dim() != 3 or mask_f.shape != fmap.shape[1:]:
        raise ValidationError(f"mask {tuple(mask_f.shape)} does not match tap {tuple(fmap.shape)}")
    sel = mask_f == class_id
    count = int(sel.sum())
    if count == 0:
        return None, 0
    return fmap[:, sel].mean(dim=1), count


def batch_centroids(fmaps: torch.Tensor, masks: torch.Tensor, num_classes: int, stage: str = "S4") -> CentroidReport:
    """Pool all positions of the batch per class, then divide once (pixel-weighted).

    ``fmaps`` is B x C x H_f x W_f; ``masks`` is B x H_f x W_f (already at feature
    resolution). Labels outside 0..N-1, including the ignore index, contribute nothing.
    """
    if fmaps.dim() != 4 or masks.dim() != 3 or fmaps.shape[0] != masks.shape[0] or fmaps.shape[2:] != masks.shape[1:]:
        raise ValidationError(f"feature maps {tuple(fmaps.shape)} and masks {tuple(masks.shape)} do not match")
    if fmaps.shape[0] == 0:
        raise ValidationError("batch is empty")
    b, c, h, w = fmaps.shape
    feats = fmaps.permute(0, 2, 3, 1).reshape(-1, c)
    labels = masks.reshape(-1).long()
    valid = (labels >= 0) & (labels < num_classes)
    onehot = torch.zeros(labels.numel(), num_classes, dtype=fmaps.dtype, device=fmaps.device)
    onehot[valid, labels[valid]] = 1.0
    counts = onehot.sum(dim=0)
    sums = onehot.t() @ feats
    centroids = sums / counts.clamp(min=1.0).unsqueeze(1)
    return CentroidReport(stage, centroids, counts.round().long())


@dataclass(frozen=True)
class EmaPrototypeBank:
    vectors: torch.Tensor  # N x C
    initialized: torch.Tensor  # N, bool
    momentum: float = 0.99
    updates: int = 0

    @classmethod
    def empty(cls, num_classes: int, dim: int, momentum: float = 0.99, dtype=torch.float32) -> "EmaPrototypeBank":
        _check_momentum(momentum)
        return cls(torch.zeros(num_classes, dim, dtype=dtype), torch.zeros(num_classes, dtype=torch.bool), momentum)


def _check_momentum(lam):
    if not 0.0 < lam < 1.0:
        raise ValidationError(f"EMA momentum must lie in (0, 1), got {lam}")


def ema_update(bank: EmaPrototypeBank, report: CentroidReport, momentum: float | None = None) -> EmaPrototypeBank:
    """Return a new bank; absent classes are untouched, first sightings are copied verbatim."""
    lam = bank.momentum if momentum is None else momentum
    _check_momentum(lam)
    if report.centroids.shape != bank.vectors.shape:
        raise ValidationError("report and bank dimensionality differ")
    cent = report.centroids.detach().to(bank.vectors.dtype)
    present = report.present
    blended = lam * bank.vectors + (1.0 - lam) * cent
    fresh = present & ~bank.initialized
    new = torch.where(fresh.unsqueeze(1), cent, bank.vectors)
    new = torch.where((present & bank.initialized).unsqueeze(1), blended, new)
    return EmaPrototypeBank(new, bank.initialized | present, lam, bank.updates + 1)
