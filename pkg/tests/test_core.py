import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taft import autodiff as ad
from taft.autodiff import Parameter, Tensor
from taft.core import (MatrixPair, Prototype, ReferenceSet, aggregate_shot_prototypes, apply_transform,
                       assemble_matrices, auxiliary_loss, build_task_transform, compute_class_prototype,
                       compute_transform, downsample_soft_label, reference_prediction, segmentation_loss,
                       SoftLabel)
from taft.episodes import SplitConfig, sample_episode
from taft.errors import DegeneratePrototypeError, DegenerateSupportError, DimensionError, InversionError


def proto(v, tag="fg"):
    return Prototype(Tensor(np.asarray(v, dtype=float)), tag)


def refs_from(fg, bg):
    return ReferenceSet(Parameter(np.asarray(fg, float), "references"), Parameter(np.asarray(bg, float), "references"))


def random_pair(rng, d):
    c = rng.standard_normal((d, 2))
    r = rng.standard_normal((d, 2))
    return MatrixPair(Tensor(c / np.linalg.norm(c, axis=0)), Tensor(r / np.linalg.norm(r, axis=0)))


class TestSoftLabel:
    def test_constant_mask(self):
        lab = downsample_soft_label(np.ones((4, 4)), 2)
        np.testing.assert_array_equal(lab.fg, np.ones((2, 2)))
        np.testing.assert_array_equal(lab.bg, np.zeros((2, 2)))

    def test_corner_block(self):
        mask = np.zeros((4, 4))
        mask[:2, :2] = 1
        np.testing.assert_array_equal(downsample_soft_label(mask, 2).fg, [[1, 0], [0, 0]])

    def test_diagonal_window(self):
        lab = downsample_soft_label(np.array([[1, 0], [0, 1]]), 2)
        assert lab.fg.tolist() == [[0.5]] and lab.bg.tolist() == [[0.5]]

    def test_non_divisible(self):
        with pytest.raises(DimensionError):
            downsample_soft_label(np.ones((5, 4)), 2)

    @pytest.mark.parametrize("seed", range(10))
    def test_partition_on_generated_episodes(self, seed):
        ep = sample_episode(SplitConfig(seed % 4), "train", 2, 3, seed)
        for masks in (ep.support_masks, ep.query_masks):
            lab = downsample_soft_label(masks, 16)
            np.testing.assert_allclose(lab.fg + lab.bg, 1.0, atol=1e-6)
            assert (lab.fg.sum(axis=(-2, -1)) > 0).all() and (lab.bg.sum(axis=(-2, -1)) > 0).all()


class TestPrototype:
    def test_constant_feature(self, rng):
        feat = Tensor(np.full((3, 2, 2), 1.5))
        out = compute_class_prototype(feat, rng.uniform(0.1, 1, (2, 2)))
        np.testing.assert_allclose(out.vector.data, 1.5, rtol=1e-6)

    def test_weighted_mean_example(self, f64):
        out = compute_class_prototype(Tensor([[[2.0, 4.0], [6.0, 8.0]]]), np.array([[1, 0.5], [0, 0.5]]))
        assert out.vector.data.tolist() == [4.0]

    def test_uniform_weights_give_plain_mean(self, f64, rng):
        x = rng.standard_normal((5, 3, 3))
        out = compute_class_prototype(Tensor(x), np.full((3, 3), 0.3))
        np.testing.assert_allclose(out.vector.data, x.mean(axis=(1, 2)))

    def test_zero_weights(self):
        with pytest.raises(DegenerateSupportError):
            compute_class_prototype(Tensor(np.ones((2, 2, 2))), np.zeros((2, 2)))

    def test_grid_mismatch(self):
        with pytest.raises(DimensionError):
            compute_class_prototype(Tensor(np.ones((2, 2, 2))), np.ones((3, 3)))

    def test_single_shot_unchanged(self):
        p = proto([1.0, 2.0])
        np.testing.assert_array_equal(aggregate_shot_prototypes([p]).vector.data, [1.0, 2.0])

    def test_opposite_shots_cancel(self):
        out = aggregate_shot_prototypes([proto([1.0, -2.0]), proto([-1.0, 2.0])])
        np.testing.assert_array_equal(out.vector.data, [0.0, 0.0])
        with pytest.raises(DegeneratePrototypeError):
            assemble_matrices(out, proto([1.0, 0.0], "bg"), refs_from([1, 0], [0, 1]))

    def test_two_shot_mean(self):
        out = aggregate_shot_prototypes([proto([1.0, 0.0]), proto([0.0, 1.0])])
        np.testing.assert_array_equal(out.vector.data, [0.5, 0.5])

    def test_empty_list(self):
        with pytest.raises(ValueError):
            aggregate_shot_prototypes([])


class TestAssemble:
    def test_normalization_example(self):
        pair = assemble_matrices(proto([3.0, 0.0]), proto([0.0, 4.0], "bg"), refs_from([1, 0], [0, 1]))
        np.testing.assert_allclose(pair.C.data, np.eye(2))
        np.testing.assert_allclose(pair.R.data, np.eye(2))

    def test_unit_inputs_copied(self, f64, rng):
        vs = [v / np.linalg.norm(v) for v in rng.standard_normal((4, 5))]
        pair = assemble_matrices(proto(vs[0]), proto(vs[1], "bg"), refs_from(vs[2], vs[3]))
        np.testing.assert_allclose(pair.C.data, np.stack(vs[:2], axis=1), atol=1e-15)
        np.testing.assert_allclose(pair.R.data, np.stack(vs[2:], axis=1), atol=1e-15)

    def test_tiny_reference_norm(self):
        with pytest.raises(DegeneratePrototypeError):
            assemble_matrices(proto([1.0, 0.0]), proto([0.0, 1.0], "bg"), refs_from([1e-10, 0], [0, 1]))


class TestTransform:
    def test_swap_example(self, f64):
        P = compute_transform(MatrixPair(Tensor(np.eye(2)), Tensor([[0.0, 1.0], [1.0, 0.0]])), ridge=0)
        np.testing.assert_allclose(P.data, [[0, 1], [1, 0]])

    def test_fixed_point(self, f64, rng):
        pair = random_pair(rng, 6)
        P = compute_transform(MatrixPair(pair.C, pair.C), ridge=0)
        np.testing.assert_allclose(P.data @ pair.C.data, pair.C.data, atol=1e-12)

    def test_orthonormal_example(self, f64):
        e = np.eye(3)
        P = compute_transform(MatrixPair(Tensor(e[:, :2]), Tensor(e[:, 1:])), ridge=0)
        np.testing.assert_allclose(P.data, [[0, 0, 0], [1, 0, 0], [0, 1, 0]], atol=1e-15)

    @pytest.mark.parametrize("d", [4, 16, 64])
    @pytest.mark.parametrize("seed", range(20))
    def test_alignment(self, f64, d, seed):
        pair = random_pair(np.random.default_rng(seed), d)
        P = compute_transform(pair, ridge=0).data
        assert np.abs(P @ pair.C.data - pair.R.data).max() < 1e-5

    @pytest.mark.parametrize("seed", range(20))
    def test_rank_at_most_two(self, f64, seed):
        pair = random_pair(np.random.default_rng(seed), 16)
        sv = np.linalg.svd(compute_transform(pair).data, compute_uv=False)
        assert np.count_nonzero(sv > 1e-8 * sv[0]) <= 2

    @pytest.mark.parametrize("seed", range(5))
    def test_least_squares_optimality(self, f64, seed):
        rng = np.random.default_rng(seed)
        # R outside span(C) so the optimum has nonzero residual
        pair = random_pair(rng, 8)
        P = compute_transform(pair, ridge=0).data
        C, R = pair.C.data, pair.R.data
        base = np.linalg.norm(P @ C - R)
        for _ in range(100):
            dP = rng.standard_normal(P.shape)
            dP *= 1e-3 / np.linalg.norm(dP)
            assert np.linalg.norm((P + dP) @ C - R) >= base - 1e-15

    def test_matches_pseudo_inverse_oracle(self, f64, rng):
        pair = random_pair(rng, 10)
        expect = pair.R.data @ np.linalg.pinv(pair.C.data)
        np.testing.assert_allclose(compute_transform(pair, ridge=0).data, expect, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3), st.integers(0, 3))
    def test_scale_invariance(self, seed, lam, which):
        rng = np.random.default_rng(seed)
        vs = [rng.standard_normal(6) for _ in range(4)]
        scaled = list(vs)
        scaled[which] = vs[which] * lam
        with ad.precision(64):
            a = compute_transform(assemble_matrices(proto(vs[0]), proto(vs[1], "bg"), refs_from(*vs[2:])))
            b = compute_transform(assemble_matrices(proto(scaled[0]), proto(scaled[1], "bg"),
                                                    refs_from(*scaled[2:])))
        np.testing.assert_allclose(a.data, b.data, atol=1e-12)

    def test_parallel_prototypes_need_ridge(self, f64):
        c = np.array([1.0, 2.0, 3.0])
        pair = assemble_matrices(proto(c), proto(2 * c, "bg"), refs_from([1, 0, 0], [0, 1, 0]))
        with pytest.raises(InversionError):
            compute_transform(pair, ridge=0)
        P = compute_transform(pair, ridge=1e-6)
        assert np.isfinite(P.data).all()

    def test_gradient_through_inverse(self, f64, rng):
        c = Tensor(rng.standard_normal((5, 2)), requires_grad=True)
        r = Tensor(rng.standard_normal((5, 2)), requires_grad=True)
        g = rng.standard_normal((5, 5))
        err = ad.finite_diff_check(lambda: (compute_transform(MatrixPair(c, r), ridge=1e-3) * g).sum(), [c, r])
        assert err < 1e-4


class TestApply:
    def test_identity(self, rng):
        feat = Tensor(rng.standard_normal((4, 3, 3)))
        np.testing.assert_allclose(apply_transform(Tensor(np.eye(4)), feat).data, feat.data, atol=1e-6)

    def test_prototype_maps_to_scaled_reference(self, f64, rng):
        c_fg, c_bg = rng.standard_normal(6), rng.standard_normal(6)
        refs = refs_from(rng.standard_normal(6), rng.standard_normal(6))
        pair = assemble_matrices(proto(c_fg), proto(c_bg, "bg"), refs)
        P = compute_transform(pair, ridge=0)
        out = apply_transform(P, Tensor(c_fg.reshape(6, 1, 1))).data.ravel()
        r_hat = refs.r_fg.data / np.linalg.norm(refs.r_fg.data)
        np.testing.assert_allclose(out, np.linalg.norm(c_fg) * r_hat, atol=1e-10)

    def test_zero_pixel(self, rng):
        out = apply_transform(Tensor(rng.standard_normal((3, 3))), Tensor(np.zeros((3, 2, 2))))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_output_in_reference_span(self, f64, rng):
        pair = random_pair(rng, 8)
        h_a = apply_transform(compute_transform(pair), Tensor(rng.standard_normal((8, 4, 4)))).data
        pix = h_a.reshape(8, -1)
        R = pair.R.data
        resid = pix - R @ np.linalg.lstsq(R, pix, rcond=None)[0]
        assert np.abs(resid).max() < 1e-4

    def test_matches_per_pixel_product(self, f64, rng):
        P = rng.standard_normal((5, 5))
        feat = rng.standard_normal((5, 3, 4))
        out = apply_transform(Tensor(P), Tensor(feat)).data
        np.testing.assert_allclose(out, np.einsum("de,ehw->dhw", P, feat), atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            apply_transform(Tensor(np.eye(3)), Tensor(np.zeros((4, 2, 2))))


class TestReferencePrediction:
    def test_equal_references(self, rng):
        refs = refs_from([1.0, 2.0], [1.0, 2.0])
        out = reference_prediction(Tensor(rng.standard_normal((2, 3, 3))), refs)
        np.testing.assert_allclose(out.data, 0.5)

    def test_softmax_of_two_zero(self, f64):
        out = reference_prediction(Tensor(np.array([2.0, 0.0]).reshape(2, 1, 1)), refs_from([1, 0], [0, 1]))
        assert out.data[0, 0, 0] == pytest.approx(0.8808, abs=5e-5)

    def test_orthogonal_pixel(self):
        refs = refs_from([1.0, 0.0, 0.0], [0.0, 1.0, 0.0])
        out = reference_prediction(Tensor(np.array([0.0, 0.0, 3.0]).reshape(3, 1, 1)), refs)
        np.testing.assert_allclose(out.data, 0.5)

    def test_uses_unnormalized_references(self, f64):
        out = reference_prediction(Tensor(np.array([1.0, 0.0]).reshape(2, 1, 1)), refs_from([3, 0], [0, 1]))
        assert out.data[0, 0, 0] == pytest.approx(1 / (1 + np.exp(-3.0)))


class TestLosses:
    def test_aux_zero_at_labels(self, rng):
        lab = downsample_soft_label((rng.random((2, 32, 32)) > 0.5).astype(float), 16)
        assert float(auxiliary_loss(Tensor(lab.stacked()), lab).data) == pytest.approx(0.0, abs=1e-7)

    def test_aux_single_pixel(self):
        lab = SoftLabel(np.ones((1, 1)), np.zeros((1, 1)))
        assert float(auxiliary_loss(Tensor(np.full((2, 1, 1), 0.5)), lab).data) == pytest.approx(0.25)

    def test_aux_half_everywhere(self, rng):
        mask = (rng.random((32, 32)) > 0.5).astype(float)
        lab = SoftLabel(mask, 1 - mask)
        assert float(auxiliary_loss(Tensor(np.full((2, 32, 32), 0.5)), lab).data) == pytest.approx(0.25)

    def test_aux_sums_over_queries(self, rng):
        lab = downsample_soft_label((rng.random((3, 32, 32)) > 0.5).astype(float), 16)
        pred = rng.random((3, 2, 2, 2))
        total = float(auxiliary_loss(Tensor(pred), lab).data)
        parts = sum(float(auxiliary_loss(Tensor(pred[n]), SoftLabel(lab.fg[n], lab.bg[n])).data) for n in range(3))
        assert total == pytest.approx(parts, rel=1e-6)

    def test_ce_margin_twenty(self, f64):
        mask = np.array([[1, 0], [0, 1]])
        logits = np.stack([np.where(mask, 20.0, 0.0), np.where(mask, 0.0, 20.0)])
        assert float(segmentation_loss(Tensor(logits), mask).data) < 1e-8

    def test_ce_uniform_logits(self, rng):
        mask = (rng.random((4, 4)) > 0.5).astype(int)
        assert float(segmentation_loss(Tensor(np.zeros((2, 4, 4))), mask).data) == pytest.approx(np.log(2), rel=1e-6)

    def test_ce_tiling_invariance(self, f64, rng):
        mask = (rng.random((4, 4)) > 0.5).astype(int)
        logits = rng.standard_normal((2, 4, 4))
        a = float(segmentation_loss(Tensor(logits), mask).data)
        b = float(segmentation_loss(Tensor(np.tile(logits, (1, 2, 2))), np.tile(mask, (2, 2))).data)
        assert a == pytest.approx(b, rel=1e-12)

    def test_ce_direct_formula(self, f64, rng):
        mask = (rng.random((3, 5)) > 0.5).astype(int)
        logits = rng.standard_normal((2, 3, 5))
        p_fg = 1 / (1 + np.exp(logits[1] - logits[0]))
        expect = -np.mean(np.where(mask > 0, np.log(p_fg), np.log(1 - p_fg)))
        assert float(segmentation_loss(Tensor(logits), mask).data) == pytest.approx(expect, rel=1e-12)


class TestBuildTaskTransform:
    def test_alignment_on_generated_support(self, f64, rng):
        ep = sample_episode(SplitConfig(1), "train", 3, 1, 42)
        feat = Tensor(np.abs(rng.standard_normal((3, 8, 4, 4))))
        refs = ReferenceSet.random(8, rng)
        task = build_task_transform(feat, ep.support_masks, refs, 16, ridge=0)
        np.testing.assert_allclose(task.P.data @ task.pair.C.data, task.pair.R.data, atol=1e-5)

    def test_prototypes_are_shot_means(self, f64, rng):
        ep = sample_episode(SplitConfig(0), "train", 2, 1, 7)
        feat = rng.standard_normal((2, 4, 4, 4))
        task = build_task_transform(Tensor(feat), ep.support_masks, ReferenceSet.random(4, rng), 16)
        lab = downsample_soft_label(ep.support_masks, 16)
        expect = np.mean([(feat[n] * lab.fg[n]).sum(axis=(1, 2)) / lab.fg[n].sum() for n in range(2)], axis=0)
        np.testing.assert_allclose(task.c_fg.vector.data, expect, atol=1e-12)

    def test_detached_transform(self, rng):
        ep = sample_episode(SplitConfig(0), "train", 1, 1, 3)
        feat = Tensor(rng.standard_normal((1, 4, 4, 4)), requires_grad=True)
        task = build_task_transform(feat, ep.support_masks, ReferenceSet.random(4, rng), 16,
                                    differentiate_through_P=False)
        assert not task.P.requires_grad
