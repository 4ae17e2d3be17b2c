import copy
import json

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from ppar.alignment import kl_simplex, to_distribution
from ppar.centroids import batch_centroids, downsample_labels
from ppar.datasets import source_domain, stack_dataset, toy_catalog, toy_samples
from ppar.errors import ArtifactError, NonFiniteLossError, SchemaVersionError, ValidationError
from ppar.reweighting import class_similarity, normalize_positions, pixel_uncertainty, reweight_map, upsample_weights
from ppar.text_prototypes import FACTOR_TEXTURE, TrigramStubProvider, build_otp, build_vtp
from ppar.training import (
    ABLATION_ROWS,
    BackboneContract,
    BatchSampler,
    PhotometricAugmentor,
    AugmentConfig,
    PrototypeBundle,
    TrainConfig,
    TrainState,
    ablation_config,
    baseline_config,
    build_toy_backbone,
    fit,
    load_checkpoint,
    make_optimizer,
    model_from_checkpoint,
    poly_lr,
    train_step,
)
from ppar.visual_factors import scan_dataset_factors

DIM = 16


@pytest.fixture(scope="module")
def data():
    samples = toy_samples(source_domain(), 12, 32)
    images, masks, _ = stack_dataset(samples)
    return images, masks, samples


@pytest.fixture(scope="module")
def bundle(data):
    cat, prov = toy_catalog(), TrigramStubProvider(dim=DIM)
    factors = scan_dataset_factors(data[2], cat)
    return PrototypeBundle(
        build_otp(cat, prov),
        build_vtp(cat, factors, ["color", "texture"], prov),
        build_vtp(cat, factors, [FACTOR_TEXTURE], prov),
    )


def small_cfg(**kw):
    base = dict(max_iters=10, crop_size=32, log_interval=0)
    base.update(kw)
    return TrainConfig(**base)


def batch(data, cfg, step=0):
    return BatchSampler(torch.as_tensor(data[0]), torch.as_tensor(data[1]).long(), cfg)(step)


class TestBackbone:
    def test_contract_shapes(self):
        model = build_toy_backbone(5, DIM)
        logits, taps = model(torch.randn(2, 3, 64, 48))
        assert logits.shape == (2, 5, 64, 48)
        for (stage, tap), stride, width in zip(taps.items(), (4, 8, 16, 16), (16, 32, 48, 64)):
            assert tap.shape == (2, width, 64 // stride, 48 // stride), stage

    def test_param_budget(self):
        model = build_toy_backbone(5, DIM)
        assert sum(p.numel() for p in model.backbone.parameters()) <= BackboneContract().max_params
        with pytest.raises(ValidationError):
            build_toy_backbone(5, DIM, BackboneContract(max_params=1000))

    def test_bad_strides(self):
        with pytest.raises(ValidationError):
            build_toy_backbone(5, DIM, BackboneContract(strides=(4, 16, 16, 16)))

    def test_zero_image_finite(self):
        model = build_toy_backbone(5, DIM).eval()
        logits, taps = model(torch.zeros(1, 3, 32, 32))
        assert torch.isfinite(logits).all() and all(torch.isfinite(t).all() for t in taps.values())


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.alpha_pa, cfg.lr, cfg.batch_size) == (0.001, 0.01, 4)
        assert cfg.enabled_factors == ("color", "texture")

    def test_baseline_excludes_toggles(self):
        with pytest.raises(ValidationError):
            TrainConfig(baseline="spa")

    def test_roundtrip(self):
        cfg = baseline_config(TrainConfig(), "mpa", "vtp")
        assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    def test_ablation_rows(self):
        assert len(ABLATION_ROWS) == 8
        cfg = ablation_config(TrainConfig(), "ppa-c+pr")
        assert (cfg.ppa_lt, cfg.ppa_c, cfg.pr) == (False, True, True)

    def test_poly(self):
        cfg = TrainConfig(max_iters=100)
        assert poly_lr(cfg, 0) == 0.01
        assert poly_lr(cfg, 50) == pytest.approx(0.01 * 0.5**0.9)
        assert poly_lr(cfg, 100) == 0.0


class TestAugment:
    def test_masks_untouched_and_deterministic(self, data):
        cfg = small_cfg()
        masks = torch.as_tensor(data[1]).long()
        x1, y1, ids = batch(data, cfg, 3)
        x2, y2, _ = batch(data, cfg, 3)
        assert torch.equal(x1, x2) and torch.equal(y1, y2)
        for m, i in zip(y1, ids):
            assert torch.equal(m, masks[i])  # full-size crop

    def test_changes_only_images(self, data):
        plain = batch(data, small_cfg(augment=None), 0)
        jittered = batch(data, small_cfg(), 0)
        assert torch.equal(plain[1], jittered[1]) and not torch.equal(plain[0], jittered[0])

    def test_identity_jitter(self):
        aug = PhotometricAugmentor(AugmentConfig(0, 0, 0, 0), 0)
        img = torch.rand(1, 3, 8, 8)
        assert torch.allclose(aug(img, 0, [0]), img, atol=1e-5)


def recomposed_objective(model, x, y, bundle, alpha):
    # every term from the module-level primitives, no compute_losses
    logits, taps = model(x)
    deep = normalize_positions(model.proj.project_map("S4", taps["S4"])).detach()
    w = reweight_map(pixel_uncertainty(class_similarity(deep, bundle.otp.as_tensor(dtype=deep.dtype))))
    w = upsample_weights(w, y.shape[-2:])
    valid = y != 255
    ce = F.cross_entropy(logits, y, ignore_index=255, reduction="none")
    l_rs = (w * ce)[valid].sum() / valid.sum()

    def align(stage, protos):
        tap = taps[stage]
        rep = batch_centroids(tap, downsample_labels(y, tap.shape[-2:]), 5, stage)
        z = model.proj[stage](rep.centroids[rep.present])
        p, q = to_distribution(z, 0.1), to_distribution(protos.as_tensor(dtype=z.dtype)[rep.present], 0.1)
        return kl_simplex(p, q, 1e-8).sum()

    l_as, l_ad = align("S1", bundle.vtp), align("S4", bundle.otp)
    return l_rs, l_as, l_ad, l_rs + alpha * (l_as + l_ad)


class TestObjective:
    def test_composition(self, data, bundle):
        cfg = small_cfg()
        torch.manual_seed(0)
        model = build_toy_backbone(5, DIM).double()
        x, y, ids = batch(data, cfg)
        x = x.double()
        l_rs, l_as, l_ad, l_all = (float(t.detach()) for t in recomposed_objective(copy.deepcopy(model), x, y, bundle, 0.001))
        rep = train_step(model, make_optimizer(model, cfg), x, y, bundle, cfg, TrainState(), batch_ids=ids)
        assert rep.L_rs == pytest.approx(l_rs, abs=1e-9)
        assert rep.L_as == pytest.approx(l_as, abs=1e-9) and rep.L_ad == pytest.approx(l_ad, abs=1e-9)
        assert abs(rep.L_all - (rep.L_rs + 0.001 * (rep.L_as + rep.L_ad))) <= 1e-9
        assert rep.L_all == pytest.approx(l_all, abs=1e-9)

    def test_alpha_zero(self, data, bundle):
        cfg = small_cfg(alpha_pa=0.0)
        torch.manual_seed(0)
        model = build_toy_backbone(5, DIM)
        x, y, _ = batch(data, cfg)
        rep = train_step(model, make_optimizer(model, cfg), x, y, bundle, cfg, TrainState())
        assert rep.L_all == rep.L_rs and rep.L_pa > 0

    def test_toggles_off_is_plain_ce_step(self, data, bundle):
        cfg = small_cfg(ppa_lt=False, ppa_c=False, pr=False)
        torch.manual_seed(0)
        model = build_toy_backbone(5, DIM)
        ref = copy.deepcopy(model)
        x, y, _ = batch(data, cfg)
        train_step(model, make_optimizer(model, cfg), x, y, bundle, cfg, TrainState())
        ref.train()
        opt = torch.optim.SGD(ref.parameters(), lr=0.01, momentum=0.9, weight_decay=0.0025)
        opt.zero_grad()
        F.cross_entropy(ref(x)[0], y, ignore_index=255).backward()
        opt.step()
        for a, b in zip(model.state_dict().values(), ref.state_dict().values()):
            assert torch.equal(a, b)

    def test_vtp_factor_mismatch(self, data, bundle):
        cfg = small_cfg(ppa_c=False)  # texture only, bundle has color+texture
        model = build_toy_backbone(5, DIM)
        x, y, _ = batch(data, cfg)
        with pytest.raises(ValidationError, match="factors"):
            train_step(model, make_optimizer(model, cfg), x, y, bundle, cfg, TrainState())

    def test_two_shallow_stages(self, data, bundle):
        cfg = small_cfg(shallow_stages=("S1", "S2"))
        model = build_toy_backbone(5, DIM)
        x, y, _ = batch(data, cfg)
        rep = train_step(model, make_optimizer(model, cfg), x, y, bundle, cfg, TrainState())
        assert rep.L_as > 0

    @pytest.mark.parametrize("form,source", [(f, s) for f in ("spa", "mpa") for s in ("np", "otp", "vtp")])
    def test_baselines_run(self, data, bundle, form, source):
        cfg = baseline_config(small_cfg(max_iters=3), form, source)
        result = fit(data[0], data[1], bundle, cfg, 5)
        assert len(result.metrics) == 3 and all(np.isfinite(m.L_all) for m in result.metrics)
        if source == "np":
            assert result.state.bank is not None and result.state.bank.initialized.any()
            assert result.metrics[0].L_pa == 0.0  # bank empty before the first update
        else:
            assert result.metrics[0].L_pa > 0

    def test_nonfinite_aborts(self, data, bundle, tmp_path):
        cfg = small_cfg()
        model = build_toy_backbone(5, DIM)
        with torch.no_grad():
            model.backbone.classifier[-1].bias.fill_(float("nan"))
        x, y, ids = batch(data, cfg)
        with pytest.raises(NonFiniteLossError) as info:
            train_step(model, make_optimizer(model, cfg), x, y, bundle, cfg, TrainState(iteration=4), batch_ids=ids, diagnostics_dir=tmp_path)
        dump = json.loads(info.value.dump_path.read_text())
        assert dump["iteration"] == 4 and dump["batch_ids"] == [int(i) for i in ids]

    def test_prototypes_frozen(self, data, bundle):
        before = [p.vectors.tobytes() for p in (bundle.otp, bundle.vtp)]
        fit(data[0], data[1], bundle, small_cfg(max_iters=5), 5)
        assert [p.vectors.tobytes() for p in (bundle.otp, bundle.vtp)] == before


class TestFit:
    def test_metrics_file(self, data, bundle, tmp_path):
        fit(data[0], data[1], bundle, small_cfg(), 5, outdir=tmp_path)
        rows = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
        assert len(rows) == 10
        assert [r["iter"] for r in rows] == list(range(1, 11))
        assert set(rows[0]) == {"iter", "L_rs", "L_pa", "L_all", "lr", "grad_norm"}

    def test_deterministic(self, data, bundle, tmp_path):
        fit(data[0], data[1], bundle, small_cfg(), 5, outdir=tmp_path / "a")
        fit(data[0], data[1], bundle, small_cfg(), 5, outdir=tmp_path / "b")
        assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()

    def test_resume_matches_uninterrupted(self, data, bundle, tmp_path):
        cfg = small_cfg(checkpoint_interval=5)
        full = fit(data[0], data[1], bundle, cfg, 5, outdir=tmp_path / "full")
        resumed = fit(data[0], data[1], bundle, cfg, 5, outdir=tmp_path / "full", resume=tmp_path / "full" / "ckpt_000005.pt")
        assert [m.iteration for m in resumed.metrics] == list(range(6, 11))
        assert [m.L_all for m in resumed.metrics] == [m.L_all for m in full.metrics[5:]]

    def test_unknown_label(self, data, bundle):
        masks = data[1].copy()
        masks[0, 0, 0] = 7
        with pytest.raises(ValidationError, match="7"):
            fit(data[0], masks, bundle, small_cfg(), 5)

    def test_checkpoint_roundtrip(self, data, bundle, tmp_path):
        result = fit(data[0], data[1], bundle, small_cfg(max_iters=2), 5, outdir=tmp_path)
        model = model_from_checkpoint(load_checkpoint(tmp_path / "final.pt"))
        x = torch.randn(1, 3, 32, 32)
        assert torch.equal(model(x)[0], result.model(x)[0])

    def test_corrupt_checkpoint(self, tmp_path):
        (tmp_path / "bad.pt").write_bytes(b"not a checkpoint")
        with pytest.raises(ArtifactError):
            load_checkpoint(tmp_path / "bad.pt")
        torch.save({"schema": 99}, tmp_path / "old.pt")
        with pytest.raises(SchemaVersionError):
            load_checkpoint(tmp_path / "old.pt")
