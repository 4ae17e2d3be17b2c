"""Pixel importance from text-prototype similarity entropy, and the reweighted CE loss."""
from __future__ import annotations

import math
import warnings
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import EmptyBatchWarning, ValidationError

MIN_WEIGHT = math.exp(-1.0)


def normalize_positions(features: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """L2-normalize the channel vector at every position of ``[B,] D x H x W``."""
    return F.normalize(features, dim=-3, eps=eps)


def class_similarity(features: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
    """Softmax over classes of prototype/feature dot products.

    ``features`` is ``[B,] D x H x W`` (already projected and normalized),
    ``prototypes`` is N x D. Returns ``[B,] N x H x W``.
    """
    if features.shape[-3] != prototypes.shape[-1]:
        raise ValidationError(f"feature dim {features.shape[-3]} != prototype dim {prototypes.shape[-1]}")
    logits = torch.einsum("...dhw,nd->...nhw", features, prototypes.to(features))
    return torch.softmax(logits, dim=-3)


def pixel_uncertainty(sim: torch.Tensor) -> torch.Tensor:
    """Entropy of the class column at each position; 0 log 0 counts as 0."""
    return -torch.special.xlogy(sim, sim).sum(dim=-3)


def reweight_map(uncertainty: torch.Tensor, scope: str = "batch") -> torch.Tensor:
    """exp(-(U - U_min) / (U_max - U_min)); constant U maps to all ones.

    ``scope="batch"`` takes min/max over every position in the tensor;
    ``scope="image"`` treats the leading dim as images and normalizes each alone.
    """
    u = uncertainty
    if scope == "batch":
        lo, hi = u.min(), u.max()
    elif scope == "image":
        if u.dim() < 3:
            raise ValidationError("per-image scope needs a B x H x W uncertainty tensor")
        flat = u.reshape(u.shape[0], -1)
        lo = flat.min(dim=1).values.view(-1, *([1] * (u.dim() - 1)))
        hi = flat.max(dim=1).values.view(-1, *([1] * (u.dim() - 1)))
    else:
        raise ValidationError(f"unknown min/max scope {scope!r}")
    span = hi - lo
    degenerate = span <= 0
    norm = torch.where(degenerate, torch.zeros_like(u), (u - lo) / torch.where(degenerate, torch.ones_like(span), span))
    return torch.exp(-norm)


def upsample_weights(weights: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Nearest-neighbor resize, same index rule as label downsampling."""
    h, w = weights.shape[-2:]
    rows = ((torch.arange(size[0], dtype=torch.float64) + 0.5) * h / size[0]).floor().long().clamp_(max=h - 1)
    cols = ((torch.arange(size[1], dtype=torch.float64) + 0.5) * w / size[1]).floor().long().clamp_(max=w - 1)
    return weights[..., rows, :][..., cols]


def check_labels(labels: torch.Tensor, num_classes: int, ignore_index: int) -> None:
    bad = (labels != ignore_index) & ((labels < 0) | (labels >= num_classes))
    if bool(bad.any()):
        offenders = sorted(set(labels[bad].unique().tolist()))
        raise ValidationError(f"labels outside catalog and ignore index: {offenders}")


def reweighted_cross_entropy(
    logits: torch.Tensor,
    labels: torch.Tensor,
    weights: torch.Tensor,
    ignore_index: int = 255,
) -> torch.Tensor:
    """Pixel-weighted CE averaged over non-ignored positions; weights never carry gradient.

    ``logits`` is [B,] N x H x W, ``labels`` and ``weights`` are [B,] H x W.
    """
    if logits.dim() == 3:
        logits, labels, weights = logits.unsqueeze(0), labels.unsqueeze(0), weights.unsqueeze(0)
    if labels.shape != logits.shape[:1] + logits.shape[2:] or weights.shape != labels.shape:
        raise ValidationError(
            f"shape mismatch: logits {tuple(logits.shape)}, labels {tuple(labels.shape)}, weights {tuple(weights.shape)}"
        )
    check_labels(labels, logits.shape[1], ignore_index)
    valid = labels != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        warnings.warn("every position is ignored; reweighted CE is 0", EmptyBatchWarning, stacklevel=2)
        return logits.sum() * 0.0
    per_pixel = F.cross_entropy(logits, labels.long(), ignore_index=ignore_index, reduction="none")
    return (weights.detach().to(per_pixel) * per_pixel).sum() / n_valid


def weight_map_to_png_array(weights) -> np.ndarray:
    """Map weights in [e^-1, 1] linearly onto 0..255 for debug dumps."""
    w = np.asarray(weights.detach().cpu() if isinstance(weights, torch.Tensor) else weights, dtype=np.float64)
    scaled = (w - MIN_WEIGHT) / (1.0 - MIN_WEIGHT) * 255.0
    return np.clip(np.rint(scaled), 0, 255).astype(np.uint8)


def dump_weight_maps(weights: torch.Tensor, outdir, step: int) -> list:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, w in enumerate(weights.reshape(-1, *weights.shape[-2:])):
        path = outdir / f"weights_{step:06d}_{i}.png"
        Image.fromarray(weight_map_to_png_array(w)).save(path)
        paths.append(path)
    return paths

