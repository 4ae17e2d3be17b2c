"""Desk-scale training: tappable backbone, photometric jitter, the combined objective and SGD loop."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .alignment import (
    AlignmentConfig,
    ProjectionHead,
    deep_alignment_loss,
    mpa_loss,
    shallow_alignment_loss,
    spa_loss,
)
from .centroids import STAGES, CentroidReport, EmaPrototypeBank, batch_centroids, downsample_labels, ema_update
from .errors import ArtifactError, NonFiniteLossError, SchemaVersionError, ValidationError
from .reweighting import (
    class_similarity,
    normalize_positions,
    pixel_uncertainty,
    reweight_map,
    reweighted_cross_entropy,
    upsample_weights,
)
from .text_prototypes import FACTOR_COLOR, FACTOR_TEXTURE, OTP, VTP, PrototypeSet

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = 1
BASELINES = ("none", "spa", "mpa")
PROTO_SOURCES = ("np", "otp", "vtp")


# ---------------------------------------------------------------------------
# backbone


@dataclass(frozen=True)
class BackboneContract:
    strides: tuple[int, int, int, int] = (4, 8, 16, 16)
    widths: tuple[int, int, int, int] = (16, 32, 48, 64)
    head_width: int = 48
    max_params: int = 2_000_000

    def stage_channels(self) -> dict[str, int]:
        return dict(zip(STAGES, self.widths))


def _conv_bn(cin, cout, stride=1, dilation=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=dilation, dilation=dilation, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class ToyBackbone(nn.Module):
    """Four-stage conv encoder plus a small dilated-conv head.

    ``forward`` returns ``(logits at input size, {stage: tap})``; taps are taken
    before the classifier.
    """

    def __init__(self, num_classes: int, contract: BackboneContract = BackboneContract()):
        super().__init__()
        s, w = contract.strides, contract.widths
        if s[0] != 4:
            raise ValidationError(f"S1 must have stride 4, got {s[0]}")
        for prev, cur in zip(s, s[1:]):
            if cur not in (prev, 2 * prev):
                raise ValidationError(f"stage strides must stay or double, got {s}")
        if any(c < 1 for c in w):
            raise ValidationError(f"stage widths must be positive, got {w}")
        self.contract = contract
        self.num_classes = num_classes
        self.stem = nn.Sequential(_conv_bn(3, w[0] // 2 or 1, stride=2), _conv_bn(w[0] // 2 or 1, w[0], stride=2))
        stages, cin, dilation = [], w[0], 1
        stages.append(_conv_bn(w[0], w[0]))
        for prev, cur, cout in zip(s, s[1:], w[1:]):
            if cur == 2 * prev:
                stages.append(nn.Sequential(_conv_bn(cin, cout, stride=2), _conv_bn(cout, cout)))
            else:
                dilation *= 2
                stages.append(nn.Sequential(_conv_bn(cin, cout, dilation=dilation), _conv_bn(cout, cout, dilation=dilation)))
            cin = cout
        self.stages = nn.ModuleList(stages)
        hw = contract.head_width
        self.aspp = nn.ModuleList(
            [nn.Sequential(nn.Conv2d(w[3], hw, 1, bias=False), nn.BatchNorm2d(hw), nn.ReLU(inplace=True))]
            + [_conv_bn(w[3], hw, dilation=d) for d in (2, 4)]
        )
        self.aspp_out = nn.Sequential(nn.Conv2d(3 * hw, hw, 1, bias=False), nn.BatchNorm2d(hw), nn.ReLU(inplace=True))
        self.low = nn.Sequential(nn.Conv2d(w[0], hw // 2, 1, bias=False), nn.BatchNorm2d(hw // 2), nn.ReLU(inplace=True))
        self.classifier = nn.Sequential(_conv_bn(hw + hw // 2, hw), nn.Conv2d(hw, num_classes, 1))
        self._verify()

    def _verify(self):
        n_params = sum(p.numel() for p in self.parameters())
        if n_params > self.contract.max_params:
            raise ValidationError(f"backbone has {n_params} parameters, limit {self.contract.max_params}")
        was_training = self.training
        self.eval()
        with torch.no_grad():
            size = 16 * max(self.contract.strides)
            _, taps = self(torch.zeros(1, 3, size, size))
        self.train(was_training)
        for (stage, tap), stride, width in zip(taps.items(), self.contract.strides, self.contract.widths):
            expect = (1, width, size // stride, size // stride)
            if tuple(tap.shape) != expect:
                raise ValidationError(f"{stage} tap {tuple(tap.shape)} violates contract {expect}")

    def forward(self, x):
        h, w = x.shape[-2:]
        taps = {}
        feat = self.stem(x)
        for stage, block in zip(STAGES, self.stages):
            feat = block(feat)
            taps[stage] = feat
        deep = torch.cat([b(taps["S4"]) for b in self.aspp], dim=1)
        deep = self.aspp_out(deep)
        low = taps["S1"]
        deep = F.interpolate(deep, size=low.shape[-2:], mode="bilinear", align_corners=False)
        logits = self.classifier(torch.cat([deep, self.low(low)], dim=1))
        logits = F.interpolate(logits, size=(h, w), mode="bilinear", align_corners=False)
        return logits, taps


class SegModel(nn.Module):
    """Backbone plus per-stage projections into the prototype embedding space."""

    def __init__(self, num_classes: int, dim: int, contract: BackboneContract = BackboneContract()):
        super().__init__()
        self.backbone = ToyBackbone(num_classes, contract)
        self.proj = ProjectionHead(contract.stage_channels(), dim)

    def forward(self, x):
        return self.backbone(x)


def build_toy_backbone(num_classes: int, dim: int = 512, contract: BackboneContract = BackboneContract()) -> SegModel:
    return SegModel(num_classes, dim, contract)


# ---------------------------------------------------------------------------
# config


@dataclass(frozen=True)
class AugmentConfig:
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.15  # fraction of a full hue turn

    def __post_init__(self):
        if min(self.brightness, self.contrast, self.saturation) < 0 or not 0 <= self.hue <= 0.5:
            raise ValidationError("augmentation ranges out of bounds")


@dataclass(frozen=True)
class TrainConfig:
    alpha_pa: float = 0.001
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0025
    poly_power: float = 0.9
    batch_size: int = 4
    crop_size: int = 64
    max_iters: int = 2000
    seed: int = 0
    ppa_lt: bool = True
    ppa_c: bool = True
    pr: bool = True
    baseline: str = "none"
    proto_source: str = "otp"
    mpa_stages: tuple[str, ...] = ("S1", "S4")
    shallow_stages: tuple[str, ...] = ("S1",)
    ema_momentum: float = 0.99
    tau: float = 0.1
    eps: float = 1e-8
    minmax_scope: str = "batch"
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    checkpoint_interval: int = 0
    log_interval: int = 100

    def __post_init__(self):
        if self.alpha_pa < 0:
            raise ValidationError("alpha_pa must be >= 0")
        if self.baseline not in BASELINES:
            raise ValidationError(f"baseline must be one of {BASELINES}")
        if self.proto_source not in PROTO_SOURCES:
            raise ValidationError(f"proto_source must be one of {PROTO_SOURCES}")
        if self.baseline != "none" and (self.ppa_lt or self.ppa_c or self.pr):
            raise ValidationError("baseline mode excludes the PPAR toggles (PPA-LT, PPA-C, PR)")
        if self.batch_size < 1 or self.max_iters < 1 or self.crop_size < 16:
            raise ValidationError("batch_size, max_iters and crop_size must be positive (crop >= 16)")
        if not 0 < self.ema_momentum < 1:
            raise ValidationError("ema_momentum must lie in (0, 1)")
        if self.minmax_scope not in ("batch", "image"):
            raise ValidationError("minmax_scope must be 'batch' or 'image'")
        if not self.shallow_stages or any(s not in ("S1", "S2", "S3") for s in self.shallow_stages):
            raise ValidationError("shallow stages must be drawn from S1..S3")
        if any(s not in STAGES for s in self.mpa_stages):
            raise ValidationError("unknown MPA stage")
        AlignmentConfig(self.tau, self.eps)

    @property
    def ppa(self) -> bool:
        return self.ppa_lt or self.ppa_c

    @property
    def enabled_factors(self) -> tuple[str, ...]:
        out = []
        if self.ppa_c:
            out.append(FACTOR_COLOR)
        if self.ppa_lt:
            out.append(FACTOR_TEXTURE)
        return tuple(sorted(out))

    def alignment(self, shallow_stage: str | None = None) -> AlignmentConfig:
        return AlignmentConfig(self.tau, self.eps, shallow_stage or self.shallow_stages[0], "S4", self.enabled_factors)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        aug = d.pop("augment", {})
        for key in ("mpa_stages", "shallow_stages"):
            if key in d:
                d[key] = tuple(d[key])
        try:
            return cls(augment=None if aug is None else AugmentConfig(**aug), **d)
        except TypeError as exc:
            raise ValidationError(f"bad training config: {exc}") from exc

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


# ablation rows as toggle settings
ABLATION_ROWS = {
    "baseline": dict(ppa_lt=False, ppa_c=False, pr=False),
    "ppa-lt": dict(ppa_lt=True, ppa_c=False, pr=False),
    "ppa-c": dict(ppa_lt=False, ppa_c=True, pr=False),
    "pr": dict(ppa_lt=False, ppa_c=False, pr=True),
    "ppa-lt+ppa-c": dict(ppa_lt=True, ppa_c=True, pr=False),
    "ppa-lt+pr": dict(ppa_lt=True, ppa_c=False, pr=True),
    "ppa-c+pr": dict(ppa_lt=False, ppa_c=True, pr=True),
    "all": dict(ppa_lt=True, ppa_c=True, pr=True),
}


def ablation_config(base: TrainConfig, row: str) -> TrainConfig:
    return replace(base, baseline="none", **ABLATION_ROWS[row])


def baseline_config(base: TrainConfig, form: str, source: str) -> TrainConfig:
    """Baseline forms: SPA/MPA with naive, OTP or VTP prototypes."""
    return replace(base, ppa_lt=False, ppa_c=False, pr=False, baseline=form, proto_source=source)


# ---------------------------------------------------------------------------
# augmentation


_YIQ = torch.tensor([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]], dtype=torch.float32)
_YIQ_INV = torch.linalg.inv(_YIQ)


class PhotometricAugmentor:
    """Brightness/contrast/saturation/hue jitter on images only, seeded by (seed, step, sample)."""

    def __init__(self, cfg: AugmentConfig, seed: int):
        self.cfg = cfg
        self.seed = seed

    def factors(self, step: int, sample: int) -> tuple[float, float, float, float]:
        rng = np.random.default_rng([self.seed, step, sample, 0xA06])
        c = self.cfg
        return (
            float(rng.uniform(1 - c.brightness, 1 + c.brightness)),
            float(rng.uniform(1 - c.contrast, 1 + c.contrast)),
            float(rng.uniform(1 - c.saturation, 1 + c.saturation)),
            float(rng.uniform(-c.hue, c.hue)),
        )

    def __call__(self, images: torch.Tensor, step: int, sample_ids: Sequence[int]) -> torch.Tensor:
        """``images`` is B x 3 x H x W in [0, 1]."""
        out = []
        for img, sid in zip(images, sample_ids):
            b, c, s, h = self.factors(step, int(sid))
            img = img * b
            mean = (img * _YIQ[0].view(3, 1, 1)).sum(0).mean()
            img = (img - mean) * c + mean
            gray = (img * _YIQ[0].view(3, 1, 1)).sum(0, keepdim=True)
            img = (img - gray) * s + gray
            yiq = torch.einsum("ij,jhw->ihw", _YIQ, img)
            ang = 2 * math.pi * h
            cos, sin = math.cos(ang), math.sin(ang)
            i, q = yiq[1] * cos - yiq[2] * sin, yiq[1] * sin + yiq[2] * cos
            img = torch.einsum("ij,jhw->ihw", _YIQ_INV, torch.stack([yiq[0], i, q]))
            out.append(img.clamp(0.0, 1.0))
        return torch.stack(out)


def to_input(images_u8: torch.Tensor) -> torch.Tensor:
    """B x H x W x 3 uint8 -> B x 3 x H x W float in [0, 1]."""
    return images_u8.permute(0, 3, 1, 2).float() / 255.0


def normalize_input(x: torch.Tensor) -> torch.Tensor:
    return (x - 0.5) / 0.25


# ---------------------------------------------------------------------------
# objective


@dataclass(frozen=True)
class PrototypeBundle:
    otp: PrototypeSet
    vtp: PrototypeSet | None = None
    vtp_texture: PrototypeSet | None = None  # second shallow stage (texture only)

    def __post_init__(self):
        if self.otp.kind != OTP:
            raise ValidationError("bundle.otp must be an OTP set")
        for v in (self.vtp, self.vtp_texture):
            if v is not None and v.kind != VTP:
                raise ValidationError("bundle VTP entries must be VTP sets")


@dataclass
class TrainState:
    iteration: int = 0
    bank: EmaPrototypeBank | None = None


@dataclass(frozen=True)
class StepReport:
    iteration: int
    L_rs: float
    L_pa: float
    L_all: float
    lr: float
    grad_norm: float
    L_as: float = 0.0
    L_ad: float = 0.0


def compute_losses(
    model: SegModel,
    images: torch.Tensor,
    masks: torch.Tensor,
    prototypes: PrototypeBundle,
    cfg: TrainConfig,
    ignore_index: int = 255,
    bank: EmaPrototypeBank | None = None,
) -> dict:
    """Forward pass and every loss term of the configured mode. Returns tensors."""
    logits, taps = model(images)
    bad = [name for name, t in [("logits", logits), *taps.items()] if not bool(torch.isfinite(t).all())]
    if bad:
        raise NonFiniteLossError(f"non-finite activations in {', '.join(bad)}")
    num_classes = logits.shape[1]
    masks = masks.long()
    out = {"logits": logits}
    zero = logits.new_zeros(())

    if cfg.pr:
        with torch.no_grad():
            deep = normalize_positions(model.proj.project_map("S4", taps["S4"]))
            sim = class_similarity(deep, prototypes.otp.as_tensor(dtype=deep.dtype))
            weights = reweight_map(pixel_uncertainty(sim), cfg.minmax_scope)
            weights = upsample_weights(weights, masks.shape[-2:])
        out["weights"] = weights
        l_rs = reweighted_cross_entropy(logits, masks, weights, ignore_index)
    else:
        l_rs = F.cross_entropy(logits, masks, ignore_index=ignore_index)

    def report(stage):
        tap = taps[stage]
        return batch_centroids(tap, downsample_labels(masks, tap.shape[-2:]), num_classes, stage)

    l_as = l_ad = l_pa = zero
    if cfg.ppa:
        if prototypes.vtp is None:
            raise ValidationError("PPA needs VTP prototypes")
        got = tuple(prototypes.vtp.meta.get("enabled_factors", ()))
        if tuple(sorted(got)) != cfg.enabled_factors:
            raise ValidationError(f"VTP built with factors {got}, config enables {cfg.enabled_factors}")
        for k, stage in enumerate(cfg.shallow_stages):
            vtp = prototypes.vtp if k == 0 else prototypes.vtp_texture
            if vtp is None:
                raise ValidationError("additional shallow stages need texture-only VTP prototypes")
            acfg = cfg.alignment(stage)
            l_as = l_as + shallow_alignment_loss(report(stage), model.proj[stage], vtp, acfg)
        l_ad = deep_alignment_loss(report("S4"), model.proj["S4"], prototypes.otp, cfg.alignment())
        l_pa = l_as + l_ad
    elif cfg.baseline != "none":
        acfg = cfg.alignment()
        if cfg.proto_source == "np":
            source = bank
        elif cfg.proto_source == "otp":
            source = prototypes.otp
        else:
            if prototypes.vtp is None:
                raise ValidationError("VTP prototype source selected but no VTP set given")
            source = prototypes.vtp
        deep_report = report("S4")
        if source is None:
            source = EmaPrototypeBank.empty(num_classes, model.proj.dim, cfg.ema_momentum, logits.dtype)
        if cfg.baseline == "spa":
            l_pa = spa_loss(deep_report, source, model.proj["S4"], acfg)
        else:
            reports = [deep_report if s == "S4" else report(s) for s in cfg.mpa_stages]
            l_pa = mpa_loss(reports, source, model.proj, acfg)
        out["deep_report"] = deep_report

    out.update(L_rs=l_rs, L_as=l_as, L_ad=l_ad, L_pa=l_pa, L_all=l_rs + cfg.alpha_pa * l_pa)
    return out


def poly_lr(cfg: TrainConfig, iteration: int) -> float:
    return cfg.lr * (1.0 - min(iteration, cfg.max_iters) / cfg.max_iters) ** cfg.poly_power


def make_optimizer(model: nn.Module, cfg: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def _abort(state: TrainState, batch_ids, comps: dict, diagnostics_dir, reason: str):
    diag = {"iteration": state.iteration, "batch_ids": [int(i) for i in batch_ids], "reason": reason, **comps}
    dump = None
    if diagnostics_dir is not None:
        dump = Path(diagnostics_dir) / f"nonfinite_{state.iteration:06d}.json"
        dump.parent.mkdir(parents=True, exist_ok=True)
        dump.write_text(json.dumps(diag, indent=2, allow_nan=True))
    raise NonFiniteLossError(f"iteration {state.iteration}: {reason}", diag, dump)


def train_step(
    model: SegModel,
    optimizer: torch.optim.Optimizer,
    images: torch.Tensor,
    masks: torch.Tensor,
    prototypes: PrototypeBundle,
    cfg: TrainConfig,
    state: TrainState,
    ignore_index: int = 255,
    batch_ids: Sequence[int] = (),
    diagnostics_dir=None,
) -> StepReport:
    """One optimizer step on a prepared (augmented, normalized) batch."""
    model.train()
    lr = poly_lr(cfg, state.iteration)
    for group in optimizer.param_groups:
        group["lr"] = lr
    keys = ("L_rs", "L_as", "L_ad", "L_pa", "L_all")
    try:
        losses = compute_losses(model, images, masks, prototypes, cfg, ignore_index, state.bank)
    except NonFiniteLossError as exc:
        _abort(state, batch_ids, {k: float("nan") for k in keys}, diagnostics_dir, str(exc))
    comps = {k: float(losses[k].detach()) for k in keys}
    if not all(math.isfinite(v) for v in comps.values()):
        _abort(state, batch_ids, comps, diagnostics_dir, f"non-finite loss: {comps}")
    optimizer.zero_grad(set_to_none=True)
    losses["L_all"].backward()
    grads = [p.grad.detach().pow(2).sum() for p in model.parameters() if p.grad is not None]
    grad_norm = float(torch.stack(grads).sum().sqrt()) if grads else 0.0
    optimizer.step()
    if cfg.baseline != "none" and cfg.proto_source == "np":
        rep = losses["deep_report"]
        with torch.no_grad():
            projected = model.proj["S4"](rep.centroids.detach())
        bank = state.bank or EmaPrototypeBank.empty(rep.counts.shape[0], model.proj.dim, cfg.ema_momentum, projected.dtype)
        state.bank = ema_update(bank, CentroidReport("S4", projected, rep.counts))
    state.iteration += 1
    return StepReport(state.iteration, comps["L_rs"], comps["L_pa"], comps["L_all"], lr, grad_norm, comps["L_as"], comps["L_ad"])


# ---------------------------------------------------------------------------
# fit loop


class BatchSampler:
    """Deterministic batches: sample ids, crop offsets and jitter depend only on (seed, step)."""

    def __init__(self, images: torch.Tensor, masks: torch.Tensor, cfg: TrainConfig):
        self.images, self.masks, self.cfg = images, masks, cfg
        self.augment = PhotometricAugmentor(cfg.augment, cfg.seed) if cfg.augment is not None else None

    def __call__(self, step: int):
        n, h, w = self.masks.shape
        rng = np.random.default_rng([self.cfg.seed, step, 0xB47C])
        ids = rng.choice(n, size=min(self.cfg.batch_size, n), replace=False)
        crop = min(self.cfg.crop_size, h, w)
        ys = rng.integers(0, h - crop + 1, size=len(ids))
        xs = rng.integers(0, w - crop + 1, size=len(ids))
        imgs = torch.stack([self.images[i, y : y + crop, x : x + crop] for i, y, x in zip(ids, ys, xs)])
        msks = torch.stack([self.masks[i, y : y + crop, x : x + crop] for i, y, x in zip(ids, ys, xs)])
        x = to_input(imgs)
        if self.augment is not None:
            x = self.augment(x, step, ids)
        return normalize_input(x), msks, ids.tolist()


@dataclass
class FitResult:
    model: SegModel
    metrics: list[StepReport]
    state: TrainState
    checkpoints: list[Path] = field(default_factory=list)


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))


def _check_dataset_against_catalog(masks: torch.Tensor, num_classes: int, ignore_index: int) -> None:
    values = set(torch.unique(masks).tolist())
    bad = sorted(v for v in values if v != ignore_index and not 0 <= v < num_classes)
    if bad:
        raise ValidationError(f"dataset labels {bad} are not in the catalog (0..{num_classes - 1}, ignore {ignore_index})")


def metrics_row(r: StepReport) -> dict:
    return {"iter": r.iteration, "L_rs": r.L_rs, "L_pa": r.L_pa, "L_all": r.L_all, "lr": r.lr, "grad_norm": r.grad_norm}


def fit(
    images: np.ndarray,
    masks: np.ndarray,
    prototypes: PrototypeBundle,
    cfg: TrainConfig,
    num_classes: int,
    ignore_index: int = 255,
    outdir=None,
    resume=None,
    catalog_hash: str = "",
    config_hash: str = "",
    contract: BackboneContract = BackboneContract(),
) -> FitResult:
    """Train from scratch (or resume) for ``cfg.max_iters`` iterations.

    ``images`` is N x H x W x 3 uint8, ``masks`` N x H x W. With ``outdir`` the
    per-iteration metrics go to ``metrics.jsonl`` and checkpoints to ``ckpt_*.pt``.
    """
    if len(images) == 0:
        raise ValidationError("cannot fit on an empty dataset")
    imgs_t = torch.as_tensor(np.asarray(images))
    masks_t = torch.as_tensor(np.asarray(masks)).long()
    _check_dataset_against_catalog(masks_t, num_classes, ignore_index)

    seed_everything(cfg.seed)
    model = build_toy_backbone(num_classes, prototypes.otp.dim, contract)
    optimizer = make_optimizer(model, cfg)
    state = TrainState()
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if catalog_hash and ckpt.get("catalog_hash") and ckpt["catalog_hash"] != catalog_hash:
            raise ArtifactError(f"{resume}: checkpoint was trained on a different catalog")
        model.load_state_dict(ckpt["model"])
        optimizer.load_state_dict(ckpt["optimizer"])
        state.iteration = int(ckpt["iteration"])
        if ckpt.get("bank") is not None:
            b = ckpt["bank"]
            state.bank = EmaPrototypeBank(b["vectors"], b["initialized"], b["momentum"], b["updates"])

    sampler = BatchSampler(imgs_t, masks_t, cfg)
    metrics: list[StepReport] = []
    checkpoints: list[Path] = []
    log_fh = None
    if outdir is not None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        log_fh = open(outdir / "metrics.jsonl", "a" if resume is not None else "w")
    try:
        while state.iteration < cfg.max_iters:
            x, y, ids = sampler(state.iteration)
            rep = train_step(model, optimizer, x, y, prototypes, cfg, state, ignore_index, ids, outdir)
            metrics.append(rep)
            if log_fh is not None:
                log_fh.write(json.dumps(metrics_row(rep)) + "\n")
            if cfg.log_interval and rep.iteration % cfg.log_interval == 0:
                log.info("iter %d  L_all %.4f  L_rs %.4f  L_pa %.4f  lr %.5f", rep.iteration, rep.L_all, rep.L_rs, rep.L_pa, rep.lr)
            if outdir is not None and cfg.checkpoint_interval and rep.iteration % cfg.checkpoint_interval == 0:
                checkpoints.append(
                    save_checkpoint(outdir / f"ckpt_{rep.iteration:06d}.pt", model, optimizer, state, cfg, catalog_hash, config_hash, contract)
                )
    finally:
        if log_fh is not None:
            log_fh.close()
    if outdir is not None:
        checkpoints.append(save_checkpoint(outdir / "final.pt", model, optimizer, state, cfg, catalog_hash, config_hash, contract))
    model.eval()
    return FitResult(model, metrics, state, checkpoints)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model, optimizer, state: TrainState, cfg: TrainConfig, catalog_hash="", config_hash="", contract=BackboneContract()) -> Path:
    path = Path(path)
    bank = None
    if state.bank is not None:
        bank = {"vectors": state.bank.vectors, "initialized": state.bank.initialized, "momentum": state.bank.momentum, "updates": state.bank.updates}
    payload = {
        "schema": CHECKPOINT_SCHEMA,
        "config_hash": config_hash or cfg.digest(),
        "catalog_hash": catalog_hash,
        "iteration": state.iteration,
        "train_config": cfg.to_dict(),
        "contract": asdict(contract),
        "num_classes": model.backbone.num_classes,
        "dim": model.proj.dim,
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict(),
        "bank": bank,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> dict:
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise ArtifactError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(ckpt, dict):
        raise ArtifactError(f"{path}: not a checkpoint")
    if ckpt.get("schema") != CHECKPOINT_SCHEMA:
        raise SchemaVersionError(f"{path}: checkpoint schema {ckpt.get('schema')!r}, expected {CHECKPOINT_SCHEMA}")
    for key in ("model", "iteration", "num_classes", "dim", "contract"):
        if key not in ckpt:
            raise ArtifactError(f"{path}: checkpoint missing {key!r}")
    return ckpt


def model_from_checkpoint(ckpt: dict) -> SegModel:
    c = ckpt["contract"]
    contract = BackboneContract(tuple(c["strides"]), tuple(c["widths"]), c["head_width"], c["max_params"])
    model = build_toy_backbone(ckpt["num_classes"], ckpt["dim"], contract)
    try:
        model.load_state_dict(ckpt["model"])
    except (RuntimeError, KeyError) as exc:
        raise ArtifactError(f"checkpoint weights do not fit the model: {exc}") from exc
    return model.eval()
