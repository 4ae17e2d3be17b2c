import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ppar.datasets import source_domain, stack_dataset, toy_catalog, toy_samples
from ppar.errors import ValidationError
from ppar.evaluation import (
    accumulate_confusion,
    cross_domain_eval,
    emit_figures,
    evaluate_model,
    miou,
    new_confusion,
    row_normalize,
)
from ppar.text_prototypes import TrigramStubProvider, build_otp
from ppar.training import PrototypeBundle, TrainConfig, build_toy_backbone, fit


def loop_miou(preds, labels, n, ignore=255):
    ious = []
    for k in range(n):
        tp = fp = fn = 0
        for p, t in zip(preds.ravel(), labels.ravel()):
            if t == ignore:
                continue
            tp += p == k and t == k
            fp += p == k and t != k
            fn += p != k and t == k
        if tp + fp + fn:
            ious.append(tp / (tp + fp + fn))
    return sum(ious) / len(ious)


class TestConfusion:
    def test_two_class_example(self):
        cm = np.array([[3, 1], [1, 3]])
        iou, mean = miou(cm)
        np.testing.assert_allclose(iou, [0.6, 0.6])
        assert mean == pytest.approx(0.6)

    def test_rows_are_truth(self):
        cm = accumulate_confusion(np.array([1]), np.array([0]), new_confusion(2))
        assert cm.tolist() == [[0, 1], [0, 0]]

    def test_undefined_class_excluded(self):
        iou, mean = miou(np.array([[2, 0, 0], [0, 2, 0], [0, 0, 0]]))
        assert np.isnan(iou[2]) and mean == 1.0

    def test_ignore(self):
        cm = accumulate_confusion(np.array([0, 1, 1]), np.array([0, 255, 1]), new_confusion(2))
        assert cm.sum() == 2

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            preds = rng.integers(0, 4, size=(3, 6, 6))
            labels = rng.integers(0, 4, size=(3, 6, 6))
            labels[rng.random(labels.shape) < 0.1] = 255
            _, mean = miou(accumulate_confusion(preds, labels, new_confusion(4)))
            assert mean == pytest.approx(loop_miou(preds, labels, 4), rel=1e-12)

    def test_additive(self):
        rng = np.random.default_rng(1)
        p1, l1, p2, l2 = (rng.integers(0, 3, size=(4, 4)) for _ in range(4))
        split = accumulate_confusion(p2, l2, accumulate_confusion(p1, l1, new_confusion(3)))
        joint = accumulate_confusion(np.stack([p1, p2]), np.stack([l1, l2]), new_confusion(3))
        assert np.array_equal(split, joint)

    @settings(max_examples=30, deadline=None)
    @given(st.permutations(range(4)), st.integers(0, 2**16))
    def test_permutation_equivariance(self, perm, seed):
        rng = np.random.default_rng(seed)
        preds, labels = rng.integers(0, 4, size=50), rng.integers(0, 4, size=50)
        perm = np.array(perm)
        iou_a, mean_a = miou(accumulate_confusion(preds, labels, new_confusion(4)))
        iou_b, mean_b = miou(accumulate_confusion(perm[preds], perm[labels], new_confusion(4)))
        np.testing.assert_allclose(iou_b[perm], iou_a)
        assert mean_a == pytest.approx(mean_b)

    def test_out_of_range(self):
        with pytest.raises(ValidationError, match="7"):
            accumulate_confusion(np.array([0]), np.array([7]), new_confusion(3))
        with pytest.raises(ValidationError):
            accumulate_confusion(np.array([5]), np.array([0]), new_confusion(3))

    def test_size_mismatch(self):
        with pytest.raises(ValidationError):
            accumulate_confusion(np.zeros(3), np.zeros(4), new_confusion(2))

    def test_row_normalize(self):
        out = row_normalize(np.array([[1, 3], [0, 0]]))
        assert out.tolist() == [[0.25, 0.75], [0.0, 0.0]]


@pytest.fixture(scope="module")
def small_data():
    images, masks, _ = stack_dataset(toy_samples(source_domain(), 10, 32))
    return images, masks


class TestModelEval:
    def test_untrained_near_random_baseline(self, small_data):
        images, masks = small_data
        torch.manual_seed(0)
        _, _, mean = evaluate_model(build_toy_backbone(5, dim=16), images, masks, 5)
        f = np.bincount(masks.ravel(), minlength=5) / masks.size
        n = 5
        # uniform guesser: TP = f/n, FP = (1 - f)/n, FN = f(1 - 1/n)
        uniform = float(np.mean((f / n) / (1 / n + f - f / n)))
        # constant guesser of class k: IoU f_k on k, 0 elsewhere
        constant = float(f.max() / n)
        assert mean <= max(uniform, constant) + 0.1

    @pytest.mark.slow
    def test_overfit_small_set(self, small_data):
        images, masks = small_data
        cfg = TrainConfig(max_iters=1000, ppa_lt=False, ppa_c=False, pr=False, crop_size=32, augment=None, log_interval=0)
        otp = build_otp(toy_catalog(), TrigramStubProvider(dim=16))
        result = fit(images, masks, PrototypeBundle(otp), cfg, 5, 255)
        _, _, mean = evaluate_model(result.model, images, masks, 5)
        assert mean >= 0.95

    def test_cross_domain_matches_individual(self, small_data):
        images, masks = small_data
        torch.manual_seed(1)
        model = build_toy_backbone(5, dim=16)
        report = cross_domain_eval(model, {"a": (images[:5], masks[:5]), "b": (images[5:], masks[5:])}, 5, config_hash="ab" * 32)
        for name, sl in (("a", slice(0, 5)), ("b", slice(5, 10))):
            res = next(t for t in report.targets if t.domain == name)
            cm, _, mean = evaluate_model(model, images[sl], masks[sl], 5)
            assert np.array_equal(res.confusion, cm) and res.miou == mean
        assert report.avg_miou == pytest.approx(np.mean([t.miou for t in report.targets]))

    def test_no_domains(self):
        with pytest.raises(ValidationError):
            cross_domain_eval(None, {}, 5)


class TestReport:
    def _report(self, small_data):
        images, masks = small_data
        torch.manual_seed(2)
        return cross_domain_eval(build_toy_backbone(5, dim=16), {"tgt": (images, masks)}, 5, config_hash="0123456789abcdef" * 4)

    def test_schema(self, small_data):
        doc = self._report(small_data).to_dict()
        assert set(doc) >= {"train_domain", "targets", "avg_miou", "config_hash"}
        assert set(doc["targets"][0]) == {"domain", "miou", "per_class"}
        assert set(doc["targets"][0]["per_class"][0]) == {"class_id", "iou", "defined"}

    def test_figures_byte_identical(self, small_data, tmp_path):
        report = self._report(small_data)
        a = emit_figures(report, tmp_path / "a", ["bg", "blob", "band", "disk", "frame"])
        b = emit_figures(report, tmp_path / "b", ["bg", "blob", "band", "disk", "frame"])
        assert [p.name for p in a] == ["confusion_tgt_0123456789ab.png", "report_0123456789ab.json"]
        for x, y in zip(a, b):
            assert x.read_bytes() == y.read_bytes()
        assert json.loads(a[1].read_text())["config_hash"] == "0123456789abcdef" * 4

    def test_unwritable(self, small_data, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError, match="file"):
            emit_figures(self._report(small_data), blocker / "sub")
