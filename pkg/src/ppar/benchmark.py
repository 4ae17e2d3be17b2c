"""Synthetic two-domain benchmark: ablation sweeps at toy scale."""
from __future__ import annotations

import time
from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np

from .datasets import source_domain, stack_dataset, target_domain, toy_catalog, toy_samples
from .evaluation import evaluate_model
from .text_prototypes import FACTOR_TEXTURE, TrigramStubProvider, build_otp, build_vtp
from .training import PrototypeBundle, TrainConfig, fit
from .visual_factors import scan_dataset_factors


@dataclass(frozen=True)
class BenchmarkSpec:
    n_train: int = 200
    n_target: int = 100
    size: int = 64
    source_seed: int = 0
    target_seed: int = 1
    dim: int = 512


class Benchmark:
    def __init__(self, spec: BenchmarkSpec = BenchmarkSpec()):
        self.spec = spec
        self.catalog = toy_catalog()
        source = toy_samples(source_domain(spec.source_seed), spec.n_train, spec.size)
        target = toy_samples(target_domain(spec.target_seed), spec.n_target, spec.size)
        self.source_images, self.source_masks, _ = stack_dataset(source)
        self.target_images, self.target_masks, _ = stack_dataset(target)
        self.factors = scan_dataset_factors(source, self.catalog, dataset_id="toy-source")
        self.provider = TrigramStubProvider(spec.dim)

    @cached_property
    def otp(self):
        return build_otp(self.catalog, self.provider)

    def bundle(self, cfg: TrainConfig) -> PrototypeBundle:
        vtp = build_vtp(self.catalog, self.factors, cfg.enabled_factors, self.provider)
        tex = build_vtp(self.catalog, self.factors, [FACTOR_TEXTURE], self.provider) if len(cfg.shallow_stages) > 1 else None
        return PrototypeBundle(self.otp, vtp, tex)

    def run(self, cfg: TrainConfig) -> dict:
        t0 = time.perf_counter()
        result = fit(self.source_images, self.source_masks, self.bundle(cfg), cfg, self.catalog.num_classes, self.catalog.ignore_index)
        seconds = time.perf_counter() - t0
        _, tgt_iou, tgt_miou = evaluate_model(result.model, self.target_images, self.target_masks, self.catalog.num_classes)
        _, _, src_miou = evaluate_model(result.model, self.source_images, self.source_masks, self.catalog.num_classes)
        losses = np.array([m.L_all for m in result.metrics])
        return {
            "target_miou": tgt_miou,
            "source_miou": src_miou,
            "target_iou": tgt_iou.tolist(),
            "seconds": seconds,
            "first100_median": float(np.median(losses[:100])),
            "last100_median": float(np.median(losses[-100:])),
        }

    def sweep(self, settings: dict[str, TrainConfig], seeds=(0, 1, 2)) -> dict[str, list[dict]]:
        return {name: [self.run(replace(cfg, seed=s)) for s in seeds] for name, cfg in settings.items()}
