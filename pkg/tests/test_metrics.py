import itertools
from fractions import Fraction

import numpy as np
import pytest

from taft.episodes import SplitConfig, sample_episode
from taft.errors import DimensionError, EvaluationError
from taft.metrics import (IoUCounts, accumulate, binary_iou, class_iou, evaluate, miou, multi_scale_predict,
                          multi_scale_probabilities, scaled_size, support_transform)
from taft.segnet import ModelConfig, SegNet, predict_mask, save_checkpoint
from taft.core import apply_transform
from taft.autodiff import Tensor


def brute_force(pairs):
    """Pure-Python recount: (per-class mIoU, binary IoU) as exact fractions."""
    per_class = {}
    fg_i = fg_u = bg_i = bg_u = 0
    for pred, gt, cls in pairs:
        i = u = bi = bu = 0
        for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
            i += p and g
            u += p or g
            bi += (not p) and (not g)
            bu += (not p) or (not g)
        ci, cu = per_class.get(cls, (0, 0))
        per_class[cls] = (ci + i, cu + u)
        fg_i, fg_u, bg_i, bg_u = fg_i + i, fg_u + u, bg_i + bi, bg_u + bu
    m = sum(Fraction(i, u) for i, u in per_class.values()) / len(per_class)
    return m, (Fraction(fg_i, fg_u) + Fraction(bg_i, bg_u)) / 2, per_class


def random_pairs(rng, n):
    pairs = []
    for k in range(n):
        ep = sample_episode(SplitConfig(k % 4), "test", 1, 1, int(rng.integers(2**62)), canvas=32)
        gt = ep.query_masks[0]
        pred = (rng.random(gt.shape) < rng.uniform(0.05, 0.6)).astype(np.uint8) | (gt & (rng.random(gt.shape) < 0.7))
        pairs.append((pred, gt, ep.class_id))
    return pairs


class TestCounting:
    def test_identical_masks(self):
        mask = np.zeros((4, 4), np.uint8)
        mask[1:3, 1:3] = 1
        c = accumulate(IoUCounts(), mask, mask, 0)
        assert class_iou(c, 0) == 1.0

    def test_disjoint_masks(self):
        a = np.array([[1, 0], [0, 0]])
        b = np.array([[0, 0], [0, 1]])
        assert accumulate(IoUCounts(), a, b, 3).per_class[3][0] == 0

    def test_row_vs_column(self):
        c = accumulate(IoUCounts(), np.array([[1, 1], [0, 0]]), np.array([[1, 0], [1, 0]]), 0)
        assert c.per_class[0] == [1, 3] and class_iou(c, 0) == pytest.approx(1 / 3)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            accumulate(IoUCounts(), np.zeros((2, 2)), np.zeros((2, 3)), 0)

    def test_miou_examples(self):
        c = IoUCounts({0: [3, 3], 1: [1, 3]})
        assert miou(c, [0, 1]) == pytest.approx(2 / 3)
        assert miou(c, [1]) == pytest.approx(1 / 3)
        assert miou(IoUCounts({0: [5, 5], 1: [2, 2]}), [0, 1]) == 1.0

    def test_zero_union_class(self):
        with pytest.raises(EvaluationError):
            miou(IoUCounts({0: [0, 0]}), [0])
        with pytest.raises(EvaluationError):
            miou(IoUCounts(), [])

    def test_binary_examples(self):
        gt = np.zeros((2, 2), np.uint8)
        gt[0] = 1
        assert binary_iou(accumulate(IoUCounts(), gt, gt, 0)) == 1.0
        assert binary_iou(accumulate(IoUCounts(), np.ones((2, 2)), gt, 0)) == pytest.approx(0.25)
        with pytest.raises(EvaluationError):
            binary_iou(accumulate(IoUCounts(), np.ones((2, 2)), np.ones((2, 2)), 0))

    def test_binary_symmetric_under_role_swap(self, rng):
        a, b = IoUCounts(), IoUCounts()
        for pred, gt, cls in random_pairs(rng, 10):
            accumulate(a, pred, gt, cls)
            accumulate(b, 1 - pred, 1 - gt, cls)
        assert binary_iou(a) == binary_iou(b)

    def test_brute_force_oracle_100_pairs(self, rng):
        pairs = random_pairs(rng, 100)
        counts = IoUCounts()
        for pred, gt, cls in pairs:
            accumulate(counts, pred, gt, cls)
        m, b, per_class = brute_force(pairs)
        assert {k: tuple(v) for k, v in counts.per_class.items()} == per_class
        classes = sorted(per_class)
        assert sum(Fraction(*counts.per_class[c]) for c in classes) / len(classes) == m
        assert (Fraction(counts.fg_i, counts.fg_u) + Fraction(counts.bg_i, counts.bg_u)) / 2 == b
        assert miou(counts, classes) == pytest.approx(float(m), abs=1e-15)
        assert binary_iou(counts) == pytest.approx(float(b), abs=1e-15)
        assert 0 <= miou(counts, classes) <= 1 and 0 <= binary_iou(counts) <= 1

    def test_pooled_and_per_image_orders_differ(self):
        # class 0: one tiny perfect image and one large poor image; class 1: one medium image
        small = np.zeros((8, 8), np.uint8)
        small[0, 0] = 1
        big_gt = np.zeros((8, 8), np.uint8)
        big_gt[:4] = 1
        big_pred = np.zeros((8, 8), np.uint8)
        big_pred[:1] = 1
        mid_gt = np.zeros((8, 8), np.uint8)
        mid_gt[:2, :2] = 1
        mid_pred = np.zeros((8, 8), np.uint8)
        mid_pred[:2, :4] = 1
        pairs = [(small, small, 0), (big_pred, big_gt, 0), (mid_pred, mid_gt, 1)]
        counts = IoUCounts()
        for p, g, c in pairs:
            accumulate(counts, p, g, c)
        pooled = (Fraction(1 + 8, 1 + 32) + Fraction(4, 8)) / 2
        per_image = ((Fraction(1) + Fraction(8, 32)) / 2 + Fraction(4, 8)) / 2
        assert pooled != per_image
        assert miou(counts, [0, 1]) == pytest.approx(float(pooled), abs=1e-15)
        fg = Fraction(1 + 8 + 4, 1 + 32 + 8)
        bg = Fraction(63 + 32 + 56, 63 + 56 + 60)
        assert binary_iou(counts) == pytest.approx(float((fg + bg) / 2), abs=1e-15)
        # binary IoU is not the mean of the per-class values either
        assert float((fg + bg) / 2) != pytest.approx(float(pooled))

    def test_merge_associative_and_order_free(self, rng):
        pairs = random_pairs(rng, 12)
        parts = []
        for chunk in (pairs[:3], pairs[3:8], pairs[8:]):
            c = IoUCounts()
            for p, g, k in chunk:
                accumulate(c, p, g, k)
            parts.append(c)
        a, b, c = parts
        assert a.merge(b).merge(c) == a.merge(b.merge(c)) == c.merge(a).merge(b)
        shuffled = IoUCounts()
        for i in rng.permutation(len(pairs)):
            accumulate(shuffled, *pairs[i])
        assert shuffled == a.merge(b).merge(c)


@pytest.fixture(scope="module")
def setup():
    model = SegNet(ModelConfig.tiny(), seed=0)
    ep = sample_episode(SplitConfig(0), "test", 1, 3, 8)
    return model, ep, support_transform(model, ep)


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("eval") / "m.taft"
    save_checkpoint(path, SegNet(ModelConfig.tiny(), seed=0), 0, {})
    return path


class TestMultiScale:
    def test_scaled_size(self):
        assert scaled_size(64, 0.7) == 48 and scaled_size(64, 1.3) == 80 and scaled_size(64, 1.0) == 64
        assert scaled_size(16, 0.1) == 16

    def test_single_scale_matches_plain_forward(self, setup):
        model, ep, P = setup
        feats = model.encode(Tensor(ep.query_images))
        plain = predict_mask(model.head(apply_transform(P, feats.high_level), feats.low_level))
        np.testing.assert_array_equal(multi_scale_predict(model, P, ep.query_images, [1.0]), plain)

    def test_duplicate_scales(self, setup):
        model, ep, P = setup
        np.testing.assert_array_equal(multi_scale_predict(model, P, ep.query_images, [1.0, 1.0]),
                                      multi_scale_predict(model, P, ep.query_images, [1.0]))

    def test_order_invariance(self, setup):
        model, ep, P = setup
        ref = multi_scale_probabilities(model, P, ep.query_images, [0.7, 1.0, 1.3])
        for perm in itertools.permutations([0.7, 1.0, 1.3]):
            np.testing.assert_array_equal(multi_scale_probabilities(model, P, ep.query_images, list(perm)), ref)
        np.testing.assert_allclose(ref.sum(axis=1), 1.0, rtol=1e-5)

    def test_empty_scales(self, setup):
        model, ep, P = setup
        with pytest.raises(ValueError):
            multi_scale_predict(model, P, ep.query_images, [])


class TestEvaluate:
    def test_report_shape_and_determinism(self, ckpt):
        a = evaluate(ckpt, 1, 1, 2, scales=[1.0], canvas=32)
        b = evaluate(ckpt, 1, 1, 2, scales=[1.0], canvas=32)
        assert [c["id"] for c in a["per_class"]] == [3, 4, 5]
        assert a["episodes"] == 6 and a["config"]["queries"] == 5 and a["config"]["split"] == 1
        a.pop("wall_ms"), b.pop("wall_ms")
        assert a == b
        assert 0 <= a["miou"] <= 1 and 0 <= a["binary_iou"] <= 1

    def test_workers_match_single_process(self, ckpt):
        a = evaluate(ckpt, 0, 1, 2, scales=[1.0, 0.5], canvas=32)
        b = evaluate(ckpt, 0, 1, 2, scales=[1.0, 0.5], canvas=32, workers=3)
        a.pop("wall_ms"), b.pop("wall_ms")
        assert a == b

    def test_zero_episodes(self, ckpt):
        with pytest.raises(EvaluationError):
            evaluate(ckpt, 0, 1, 0)

    def test_dump_masks(self, ckpt, tmp_path):
        evaluate(ckpt, 2, 1, 1, scales=[1.0], canvas=32, dump_masks=tmp_path)
        assert len(list(tmp_path.glob("*_pred.pgm"))) == 3 * 5
        assert len(list(tmp_path.glob("*_gt.pgm"))) == 3 * 5
