"""KL alignment of class centroids to prototypes: SPA/MPA baselines and progressive alignment."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import torch
from torch import nn

from .centroids import STAGES, CentroidReport, EmaPrototypeBank
from .errors import EmptyPrototypeWarning, ValidationError
from .text_prototypes import OTP, VTP, PrototypeSet


@dataclass(frozen=True)
class AlignmentConfig:
    tau: float = 0.1
    eps: float = 1e-8
    shallow_stage: str = "S1"
    deep_stage: str = "S4"
    enabled_factors: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not self.tau > 0:
            raise ValidationError(f"tau must be positive, got {self.tau}")
        if not 0 < self.eps <= 1e-4:
            raise ValidationError(f"eps must lie in (0, 1e-4], got {self.eps}")
        if self.shallow_stage not in STAGES or self.deep_stage not in STAGES:
            raise ValidationError("unknown stage in alignment config")


class ProjectionHead(nn.Module):
    """One trainable affine map per aligned stage, from stage channels to the prototype dim."""

    def __init__(self, stage_channels: Mapping[str, int], dim: int):
        super().__init__()
        self.dim = dim
        self.maps = nn.ModuleDict({s: nn.Linear(c, dim) for s, c in stage_channels.items()})

    def __getitem__(self, stage: str) -> nn.Linear:
        return self.maps[stage]

    def __contains__(self, stage: str) -> bool:
        return stage in self.maps

    def project_map(self, stage: str, fmap: torch.Tensor) -> torch.Tensor:
        """Apply the stage map at every position of a B x C x H x W tensor."""
        lin = self.maps[stage]
        return torch.einsum("bchw,dc->bdhw", fmap, lin.weight) + lin.bias.view(1, -1, 1, 1)


def to_distribution(vector: torch.Tensor, tau: float) -> torch.Tensor:
    """Softmax over the last dim at temperature ``tau``."""
    if not tau > 0:
        raise ValidationError(f"tau must be positive, got {tau}")
    if not torch.isfinite(vector).all():
        raise ValidationError("cannot convert a non-finite vector to a distribution")
    return torch.softmax(vector / tau, dim=-1)


def kl_simplex(p: torch.Tensor, q: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """sum_i p_i log((p_i + eps) / (q_i + eps)) over the last dim."""
    if p.shape[-1] != q.shape[-1]:
        raise ValidationError(f"distribution lengths differ: {p.shape[-1]} vs {q.shape[-1]}")
    return (p * (torch.log(p + eps) - torch.log(q + eps))).sum(dim=-1)


def _prototype_matrix(prototypes, like: torch.Tensor):
    """(N x D constant tensor, N bool mask of usable rows)."""
    if isinstance(prototypes, PrototypeSet):
        mat = prototypes.as_tensor(dtype=like.dtype, device=like.device)
        return mat, torch.ones(mat.shape[0], dtype=torch.bool, device=like.device)
    if isinstance(prototypes, EmaPrototypeBank):
        return prototypes.vectors.to(like), prototypes.initialized.to(like.device)
    if isinstance(prototypes, torch.Tensor):
        return prototypes.detach().to(like), torch.ones(prototypes.shape[0], dtype=torch.bool, device=like.device)
    raise ValidationError(f"unsupported prototype source {type(prototypes).__name__}")


def _align(report: CentroidReport, projection: Callable, prototypes, cfg: AlignmentConfig) -> torch.Tensor:
    protos, usable = _prototype_matrix(prototypes, report.centroids)
    if protos.shape[0] != report.centroids.shape[0]:
        raise ValidationError(f"{protos.shape[0]} prototypes for {report.centroids.shape[0]} classes")
    present = report.present & usable
    if not bool(present.any()):
        return report.centroids.new_zeros(())
    projected = projection(report.centroids[present])
    if projected.shape[-1] != protos.shape[-1]:
        raise ValidationError(f"projected dim {projected.shape[-1]} != prototype dim {protos.shape[-1]}")
    p = to_distribution(projected, cfg.tau)
    q = to_distribution(protos[present], cfg.tau)
    return kl_simplex(p, q, cfg.eps).sum()


def shallow_alignment_loss(report: CentroidReport, projection: Callable, vtp: PrototypeSet, cfg: AlignmentConfig) -> torch.Tensor:
    if report.stage != cfg.shallow_stage:
        raise ValidationError(f"shallow alignment expects stage {cfg.shallow_stage}, got {report.stage}")
    if isinstance(vtp, PrototypeSet) and vtp.kind != VTP:
        raise ValidationError("shallow alignment needs VTP prototypes")
    return _align(report, projection, vtp, cfg)


def deep_alignment_loss(report: CentroidReport, projection: Callable, otp: PrototypeSet, cfg: AlignmentConfig) -> torch.Tensor:
    if report.stage != cfg.deep_stage:
        raise ValidationError(f"deep alignment expects stage {cfg.deep_stage}, got {report.stage}")
    if isinstance(otp, PrototypeSet) and otp.kind != OTP:
        raise ValidationError("deep alignment needs OTP prototypes")
    return _align(report, projection, otp, cfg)


def progressive_alignment_loss(
    shallow: CentroidReport,
    deep: CentroidReport,
    projections: ProjectionHead,
    otp: PrototypeSet,
    vtp: PrototypeSet,
    cfg: AlignmentConfig,
) -> torch.Tensor:
    l_as = shallow_alignment_loss(shallow, projections[shallow.stage], vtp, cfg)
    l_ad = deep_alignment_loss(deep, projections[deep.stage], otp, cfg)
    return l_as + l_ad


def _warn_if_unusable(reports: Sequence[CentroidReport], prototypes):
    if isinstance(prototypes, EmaPrototypeBank):
        present = torch.zeros_like(prototypes.initialized)
        for r in reports:
            present |= r.present.to(present.device)
        if not bool((present & prototypes.initialized).any()):
            warnings.warn("naive prototype bank has no entry for any class in the batch", EmptyPrototypeWarning, stacklevel=3)
            return True
    return False


def spa_loss(report: CentroidReport, prototypes, projection: Callable, cfg: AlignmentConfig) -> torch.Tensor:
    """Single-layer alignment at the deep stage against NP, OTP or VTP prototypes."""
    if report.stage != cfg.deep_stage:
        raise ValidationError(f"SPA aligns the deep stage {cfg.deep_stage}, got {report.stage}")
    if _warn_if_unusable([report], prototypes):
        return report.centroids.new_zeros(())
    return _align(report, projection, prototypes, cfg)


def mpa_loss(
    reports: Sequence[CentroidReport],
    prototypes,
    projections: Mapping[str, Callable] | ProjectionHead,
    cfg: AlignmentConfig,
) -> torch.Tensor:
    """Uniform multi-layer alignment: every stage against the same prototype set."""
    if len(reports) == 0:
        raise ValidationError("MPA needs at least one stage report")
    if _warn_if_unusable(reports, prototypes):
        return reports[0].centroids.new_zeros(())
    total = reports[0].centroids.new_zeros(())
    for report in reports:
        total = total + _align(report, projections[report.stage], prototypes, cfg)
    return total
