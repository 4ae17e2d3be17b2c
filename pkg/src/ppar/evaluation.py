"""Confusion matrices, mIoU, the cross-domain protocol and report/figure emission."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ValidationError


def new_confusion(num_classes: int) -> np.ndarray:
    return np.zeros((num_classes, num_classes), dtype=np.int64)


def accumulate_confusion(preds, labels, cm: np.ndarray, ignore_index: int = 255) -> np.ndarray:
    """Return ``cm`` plus counts of (truth, prediction) pairs; rows are ground truth."""
    preds = np.asarray(preds).astype(np.int64).ravel()
    labels = np.asarray(labels).astype(np.int64).ravel()
    if preds.shape != labels.shape:
        raise ValidationError(f"prediction/label size mismatch: {preds.size} vs {labels.size}")
    n = cm.shape[0]
    keep = labels != ignore_index
    preds, labels = preds[keep], labels[keep]
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise ValidationError(f"label values {sorted(set(labels[(labels < 0) | (labels >= n)].tolist()))} out of range")
    if preds.size and (preds.min() < 0 or preds.max() >= n):
        raise ValidationError("prediction values out of range")
    return cm + np.bincount(labels * n + preds, minlength=n * n).reshape(n, n)


def miou(cm: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN where undefined) and their mean over defined classes."""
    cm = np.asarray(cm, dtype=np.float64)
    inter = np.diag(cm)
    union = cm.sum(axis=1) + cm.sum(axis=0) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), np.nan)
    defined = ~np.isnan(iou)
    mean = float(iou[defined].mean()) if defined.any() else float("nan")
    return iou, mean


@torch.no_grad()
def predict(model, images_u8: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Full-image argmax predictions for N x H x W x 3 uint8 images."""
    from .training import normalize_input, to_input

    model.eval()
    out = []
    for start in range(0, len(images_u8), batch_size):
        x = normalize_input(to_input(torch.as_tensor(np.asarray(images_u8[start : start + batch_size]))))
        logits, _ = model(x)
        if logits.shape[-2:] != x.shape[-2:]:
            logits = F.interpolate(logits, size=x.shape[-2:], mode="bilinear", align_corners=False)
        out.append(logits.argmax(dim=1).numpy())
    return np.concatenate(out)


def evaluate_model(model, images: np.ndarray, masks: np.ndarray, num_classes: int, ignore_index: int = 255, batch_size: int = 16):
    """(confusion matrix, per-class IoU, mIoU) over a whole dataset."""
    if len(images) != len(masks):
        raise ValidationError("images and masks differ in count")
    cm = new_confusion(num_classes)
    for start in range(0, len(images), batch_size):
        preds = predict(model, images[start : start + batch_size], batch_size)
        cm = accumulate_confusion(preds, masks[start : start + batch_size], cm, ignore_index)
    iou, mean = miou(cm)
    return cm, iou, mean


@dataclass
class DomainResult:
    domain: str
    miou: float
    iou: np.ndarray
    confusion: np.ndarray

    def to_dict(self) -> dict:
        return {
            "domain": self.domain,
            "miou": _num(self.miou),
            "per_class": [
                {"class_id": i, "iou": _num(v), "defined": bool(not np.isnan(v))} for i, v in enumerate(self.iou)
            ],
        }


@dataclass
class CrossDomainReport:
    train_domain: str
    targets: list[DomainResult]
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def avg_miou(self) -> float:
        return float(np.mean([t.miou for t in self.targets]))

    def to_dict(self) -> dict:
        doc = {
            "train_domain": self.train_domain,
            "targets": [t.to_dict() for t in self.targets],
            "avg_miou": _num(self.avg_miou),
            "config_hash": self.config_hash,
        }
        doc.update(self.extra)
        return doc


def _num(v: float):
    return None if v is None or np.isnan(v) else float(v)


def cross_domain_eval(model, domains: Mapping[str, tuple[np.ndarray, np.ndarray]], num_classes: int, train_domain: str = "source", ignore_index: int = 255, config_hash: str = "") -> CrossDomainReport:
    if not domains:
        raise ValidationError("need at least one target domain")
    results = []
    for name in domains:
        images, masks = domains[name]
        cm, iou, mean = evaluate_model(model, images, masks, num_classes, ignore_index)
        results.append(DomainResult(name, mean, iou, cm))
    return CrossDomainReport(train_domain, results, config_hash)


def row_normalize(cm: np.ndarray) -> np.ndarray:
    cm = np.asarray(cm, dtype=np.float64)
    rows = cm.sum(axis=1, keepdims=True)
    return np.divide(cm, rows, out=np.zeros_like(cm), where=rows > 0)


def emit_figures(report: CrossDomainReport, outdir, class_names=None) -> list[Path]:
    """Row-normalized confusion heatmap per target plus the JSON report.

    File names carry the first 12 hex digits of the report's config hash.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    outdir = Path(outdir)
    try:
        outdir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {outdir}: {exc}") from exc
    tag = (report.config_hash or "nohash")[:12]
    paths = []
    for target in report.targets:
        norm = row_normalize(target.confusion)
        n = norm.shape[0]
        names = class_names or [str(i) for i in range(n)]
        fig, ax = plt.subplots(figsize=(1.2 + 0.7 * n, 1.0 + 0.6 * n))
        im = ax.imshow(norm, vmin=0.0, vmax=1.0, cmap="Blues")
        ax.set_xticks(range(n), names, rotation=45, ha="right")
        ax.set_yticks(range(n), names)
        ax.set_xlabel("prediction")
        ax.set_ylabel("ground truth")
        ax.set_title(f"{report.train_domain} -> {target.domain}  mIoU {target.miou:.3f}")
        for i in range(n):
            for j in range(n):
                ax.text(j, i, f"{norm[i, j]:.2f}", ha="center", va="center", fontsize=7, color="white" if norm[i, j] > 0.5 else "black")
        fig.colorbar(im, ax=ax, fraction=0.046)
        fig.tight_layout()
        path = outdir / f"confusion_{target.domain}_{tag}.png"
        try:
            fig.savefig(path, dpi=100, metadata={"Software": None})
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc}") from exc
        finally:
            plt.close(fig)
        paths.append(path)
    path = outdir / f"report_{tag}.json"
    tmp = Path(str(path) + ".tmp")
    try:
        tmp.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    paths.append(path)
    return paths
