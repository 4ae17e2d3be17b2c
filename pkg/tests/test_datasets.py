import hashlib
from dataclasses import replace

import numpy as np
import pytest
from PIL import Image

from ppar.datasets import (
    TOY_CLASSES,
    FolderDataset,
    Geometry,
    ToyDomainSpec,
    generate_toy_domain,
    load_folder_dataset,
    region_area_targets,
    source_domain,
    stack_dataset,
    target_domain,
    toy_catalog,
    toy_mask,
    toy_samples,
)
from ppar.errors import EmptyDatasetError, ValidationError


def _write(root, stem, mask, image=None):
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    image = np.zeros((*mask.shape, 3), np.uint8) if image is None else image
    Image.fromarray(image).save(root / "images" / f"{stem}.png")
    Image.fromarray(mask.astype(np.uint8)).save(root / "masks" / f"{stem}.png")


def _tree(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*")) if p.is_file()}


class TestFolderDataset:
    def test_sorted_and_loaded(self, tmp_path):
        for stem in ("b", "a", "c"):
            _write(tmp_path, stem, np.full((4, 4), 1))
        ds = load_folder_dataset(tmp_path, toy_catalog())
        assert ds.stems == ["a", "b", "c"] and len(ds) == 3
        s = ds[0]
        assert s.id == "a" and s.image.shape == (4, 4, 3) and (s.mask == 1).all()

    def test_missing_dir(self, tmp_path):
        (tmp_path / "images").mkdir()
        with pytest.raises(ValidationError, match="masks"):
            FolderDataset(tmp_path, toy_catalog())

    def test_unpaired_stem(self, tmp_path):
        _write(tmp_path, "a", np.zeros((4, 4)))
        Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(tmp_path / "images" / "orphan.png")
        with pytest.raises(ValidationError, match="orphan"):
            FolderDataset(tmp_path, toy_catalog())

    def test_empty(self, tmp_path):
        (tmp_path / "images").mkdir()
        (tmp_path / "masks").mkdir()
        with pytest.raises(EmptyDatasetError):
            FolderDataset(tmp_path, toy_catalog())

    def test_out_of_range_label_reported_on_access(self, tmp_path):
        mask = np.zeros((4, 4))
        mask[0, 0] = 9
        _write(tmp_path, "ok", np.zeros((4, 4)))
        _write(tmp_path, "zz", mask)
        ds = FolderDataset(tmp_path, toy_catalog())
        assert ds[0].id == "ok"
        with pytest.raises(ValidationError, match=r"zz\.png.*\[9\]"):
            ds[1]

    def test_ignore_label_allowed(self, tmp_path):
        mask = np.full((4, 4), 255)
        _write(tmp_path, "a", mask)
        assert (FolderDataset(tmp_path, toy_catalog())[0].mask == 255).all()

    def test_rgb_mask_rejected(self, tmp_path):
        _write(tmp_path, "a", np.zeros((4, 4)))
        Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(tmp_path / "masks" / "a.png")
        with pytest.raises(ValidationError, match="single-channel"):
            FolderDataset(tmp_path, toy_catalog())[0]

    def test_stack(self, tmp_path):
        for stem in ("a", "b"):
            _write(tmp_path, stem, np.zeros((4, 4)))
        images, masks, ids = stack_dataset(FolderDataset(tmp_path, toy_catalog()))
        assert images.shape == (2, 4, 4, 3) and masks.shape == (2, 4, 4) and ids == ["a", "b"]


class TestToyGenerator:
    def test_catalog(self):
        assert list(toy_catalog().names) == list(TOY_CLASSES)

    def test_disk_roundtrip_matches_memory(self, tmp_path):
        spec = source_domain()
        generate_toy_domain(spec, 4, 32, tmp_path)
        ds = FolderDataset(tmp_path, toy_catalog())
        mem = toy_samples(spec, 4, 32)
        for a, b in zip(ds, mem):
            assert np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask)

    def test_deterministic_bytes(self, tmp_path):
        generate_toy_domain(target_domain(), 3, 32, tmp_path / "a")
        generate_toy_domain(target_domain(), 3, 32, tmp_path / "b")
        assert _tree(tmp_path / "a") == _tree(tmp_path / "b")

    def test_style_never_touches_geometry(self):
        a = toy_samples(source_domain(seed=3), 5, 48)
        b = toy_samples(replace(target_domain(), seed=3), 5, 48)
        for x, y in zip(a, b):
            assert np.array_equal(x.mask, y.mask)
            assert not np.array_equal(x.image, y.image)

    def test_seed_changes_geometry(self):
        assert not np.array_equal(toy_mask(48, 0, 0), toy_mask(48, 1, 0))

    def test_area_targets(self):
        masks = np.stack([toy_mask(64, 0, i) for i in range(200)])
        freq = np.bincount(masks.ravel(), minlength=5) / masks.size
        targets = region_area_targets(64)
        assert targets.sum() == pytest.approx(1.0)
        np.testing.assert_allclose(freq, targets, rtol=0.2)

    def test_every_class_appears(self):
        for i in range(20):
            assert set(np.unique(toy_mask(64, 0, i))) == set(range(5))

    def test_spec_validation(self):
        with pytest.raises(ValidationError):
            ToyDomainSpec("x", hue_shift=(0.0,) * 4)
        with pytest.raises(ValidationError):
            ToyDomainSpec("x", noise_level=-1.0)
        with pytest.raises(ValidationError):
            ToyDomainSpec("x", geometry=Geometry(disk_radius=0.4))

    def test_spec_roundtrip(self):
        spec = target_domain()
        assert ToyDomainSpec.from_dict(spec.to_dict()) == spec

    def test_bad_count(self, tmp_path):
        with pytest.raises(ValidationError):
            generate_toy_domain(source_domain(), 0, 32, tmp_path)
