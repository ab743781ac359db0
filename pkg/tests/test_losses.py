"""Loss functions against hand-computed values and finite differences."""

import math

import numpy as np
import pytest
import torch

from spnav.geometry import DegenerateRotationError, Rot6D, rot6d_to_matrix, rotvec_to_matrix
from spnav.models.losses import (
    PoseBatchLoss,
    bce_loss,
    classification_loss,
    consistency_loss,
    dice_loss,
    pose_loss,
    rot6d_to_matrix_t,
    seg_labeled_loss,
    total_seg_loss,
)

CLIP = 1e-7


def hand_bce(probs: np.ndarray, target: np.ndarray) -> float:
    p = np.clip(probs, CLIP, 1 - CLIP)
    return float(np.mean(-(target * np.log(p) + (1 - target) * np.log(1 - p))))


def hand_dice(probs: np.ndarray, target: np.ndarray, eps: float = 1.0) -> float:
    inter = float((probs * target).sum())
    return 1.0 - (2 * inter + eps) / (float(probs.sum()) + float(target.sum()) + eps)


def hand_consistency(masks: list[np.ndarray]) -> float:
    n = len(masks)
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            total += float(np.mean((masks[i] - masks[j]) ** 2))
    return 2.0 * total / (n * (n - 1))


class TestLabeledSegLoss:
    def test_perfect_prediction_near_zero(self):
        rng = np.random.default_rng(0)
        gt = (rng.uniform(0, 1, (16, 16)) > 0.5).astype(np.float64)
        pred = np.clip(gt, CLIP, 1 - CLIP)
        loss = seg_labeled_loss(torch.tensor(pred), torch.tensor(gt))
        assert float(loss) < 1e-5

    def test_constant_half_bce_is_ln2(self):
        gt = np.zeros((8, 8))
        gt[:4] = 1.0
        pred = np.full((8, 8), 0.5)
        assert float(bce_loss(torch.tensor(pred), torch.tensor(gt))) == pytest.approx(
            math.log(2), abs=1e-6
        )
        total = seg_labeled_loss(torch.tensor(pred), torch.tensor(gt))
        expected = (hand_dice(pred, gt) + hand_bce(pred, gt)) / 2
        assert float(total) == pytest.approx(expected, abs=1e-6)

    def test_disjoint_full_confidence_dice(self):
        pred = np.zeros((4, 4))
        pred[:, :2] = 1.0
        gt = np.zeros((4, 4))
        gt[:, 2:] = 1.0
        pred_c = np.clip(pred, CLIP, 1 - CLIP)
        d = float(dice_loss(torch.tensor(pred_c), torch.tensor(gt)))
        assert d == pytest.approx(1.0 - 1.0 / (8 + 8 + 1), abs=1e-5)
        assert d > 0.9

    def test_matches_hand_oracle_on_random(self):
        rng = np.random.default_rng(3)
        pred = rng.uniform(0.01, 0.99, (12, 12))
        gt = (rng.uniform(0, 1, (12, 12)) > 0.4).astype(np.float64)
        got = float(seg_labeled_loss(torch.tensor(pred), torch.tensor(gt)))
        assert got == pytest.approx((hand_dice(pred, gt) + hand_bce(pred, gt)) / 2, abs=1e-9)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            seg_labeled_loss(torch.zeros(4, 4), torch.zeros(4, 5))

    def test_batch_is_mean_of_samples(self):
        rng = np.random.default_rng(4)
        pred = rng.uniform(0.01, 0.99, (3, 1, 8, 8))
        gt = (rng.uniform(0, 1, (3, 1, 8, 8)) > 0.5).astype(np.float64)
        per = [hand_dice(pred[k, 0], gt[k, 0]) for k in range(3)]
        got = float(dice_loss(torch.tensor(pred), torch.tensor(gt)))
        assert got == pytest.approx(float(np.mean(per)), abs=1e-9)


class TestConsistencyLoss:
    def test_identical_masks_zero(self):
        m = torch.rand(4, 8, 8, dtype=torch.float64)
        masks = torch.stack([m[0], m[0].clone(), m[0].clone()])
        assert float(consistency_loss(masks)) == 0.0

    def test_single_pixel_difference(self):
        a = torch.zeros(8, 8, dtype=torch.float64)
        b = torch.zeros(8, 8, dtype=torch.float64)
        b[3, 5] = 1.0
        assert float(consistency_loss([a, b])) == pytest.approx(1.0 / 64, abs=1e-12)

    @pytest.mark.parametrize(
        "consts,expected",
        [((0.0, 1.0), 1.0), ((0.0, 1.0, 2.0), 2.0), ((0.0, 1.0, 2.0, 3.0), 10.0 / 3.0)],
    )
    def test_pair_count_normalization(self, consts, expected):
        # constant masks make every pairwise MSE a known square
        masks = [torch.full((5, 5), c, dtype=torch.float64) for c in consts]
        assert float(consistency_loss(masks)) == pytest.approx(expected, abs=1e-12)

    def test_three_masks_hand_enumeration(self):
        rng = np.random.default_rng(5)
        ms = [rng.uniform(0, 1, (6, 6)) for _ in range(3)]
        got = float(consistency_loss([torch.tensor(m) for m in ms]))
        assert got == pytest.approx(hand_consistency(ms), abs=1e-12)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(6)
        ms = [torch.tensor(rng.uniform(0, 1, (7, 7))) for _ in range(4)]
        base = float(consistency_loss(ms))
        for perm in ((1, 0, 3, 2), (3, 2, 1, 0), (2, 0, 3, 1)):
            assert float(consistency_loss([ms[i] for i in perm])) == pytest.approx(base, abs=1e-12)

    def test_rejects_fewer_than_two(self):
        with pytest.raises(ValueError):
            consistency_loss([torch.zeros(4, 4)])

    def test_nonnegative(self):
        rng = np.random.default_rng(7)
        ms = [torch.tensor(rng.uniform(0, 1, (5, 5))) for _ in range(3)]
        assert float(consistency_loss(ms)) >= 0.0


class TestTotalSegLoss:
    def test_arithmetic(self):
        out = total_seg_loss(torch.tensor(0.2), torch.tensor(0.4), torch.tensor(0.1), alpha=0.5)
        assert float(out) == pytest.approx(0.5, abs=1e-9)

    def test_all_zero(self):
        z = torch.tensor(0.0)
        assert float(total_seg_loss(z, z, z)) == 0.0

    def test_default_alpha_is_half(self):
        one = torch.tensor(1.0)
        zero = torch.tensor(0.0)
        assert float(total_seg_loss(zero, one, zero)) == pytest.approx(0.5)


def rot6d_params_of(rotmat: np.ndarray) -> np.ndarray:
    return np.concatenate([rotmat[:, 0], rotmat[:, 1]])


class TestPoseLoss:
    def test_perfect_prediction(self):
        r = rotvec_to_matrix(np.array([0.3, -0.2, 0.5]))
        t = np.array([1.0, 2.0, 3.0])
        pred = torch.tensor(np.concatenate([t, rot6d_params_of(r)])[None])
        out = pose_loss(pred, torch.tensor(t[None]), torch.tensor(r[None]))
        assert float(out.l_total) < 1e-9

    def test_translation_norm(self):
        r = np.eye(3)
        pred = torch.tensor(np.concatenate([[1.0, 2.0, 2.0], rot6d_params_of(r)])[None])
        out = pose_loss(pred, torch.zeros(1, 3, dtype=torch.float64), torch.tensor(r[None]))
        assert float(out.l_translation) == pytest.approx(3.0, abs=1e-9)
        assert float(out.l_rotation) == pytest.approx(0.0, abs=1e-9)

    def test_rotation_frobenius_quarter_turn(self):
        pred_r = np.eye(3)
        gt_r = rotvec_to_matrix(np.array([np.pi / 2, 0.0, 0.0]))
        pred = torch.tensor(np.concatenate([np.zeros(3), rot6d_params_of(pred_r)])[None])
        out = pose_loss(pred, torch.zeros(1, 3, dtype=torch.float64), torch.tensor(gt_r[None]))
        assert float(out.l_rotation) == pytest.approx(2.0, abs=1e-9)

    def test_lambda_linearity(self):
        rng = np.random.default_rng(8)
        r = rotvec_to_matrix(rng.normal(size=3))
        pred = torch.tensor(np.concatenate([rng.normal(size=3), rot6d_params_of(np.eye(3))])[None])
        gt_t = torch.tensor(rng.normal(size=(1, 3)))
        a = pose_loss(pred, gt_t, torch.tensor(r[None]), lam=1.0)
        b = pose_loss(pred, gt_t, torch.tensor(r[None]), lam=2.0)
        contrib_a = float(a.l_total - a.l_rotation)
        contrib_b = float(b.l_total - b.l_rotation)
        assert contrib_b == pytest.approx(2 * contrib_a, rel=1e-12)

    def test_total_invariant(self):
        rng = np.random.default_rng(9)
        r = rotvec_to_matrix(rng.normal(size=3))
        pred = torch.tensor(np.concatenate([rng.normal(size=3), rot6d_params_of(r)])[None])
        out = pose_loss(pred, torch.tensor(rng.normal(size=(1, 3))), torch.tensor(r[None]), lam=0.7)
        assert torch.equal(out.l_total, out.l_rotation + 0.7 * out.l_translation)
        assert isinstance(out, PoseBatchLoss)

    def test_batch_mean(self):
        r = np.eye(3)
        pred = torch.tensor(
            np.stack(
                [
                    np.concatenate([[3.0, 0.0, 0.0], rot6d_params_of(r)]),
                    np.concatenate([[0.0, 0.0, 0.0], rot6d_params_of(r)]),
                ]
            )
        )
        gt_t = torch.zeros(2, 3, dtype=torch.float64)
        gt_r = torch.tensor(np.stack([r, r]))
        out = pose_loss(pred, gt_t, gt_r)
        assert float(out.l_translation) == pytest.approx(1.5, abs=1e-12)

    def test_scale_invariance_of_rotation_params(self):
        rng = np.random.default_rng(10)
        r = rotvec_to_matrix(rng.normal(size=3))
        base = np.concatenate([rng.normal(size=3), rot6d_params_of(rotvec_to_matrix(rng.normal(size=3)))])
        scaled = base.copy()
        scaled[3:] *= 3.0
        gt_t = torch.tensor(rng.normal(size=(1, 3)))
        a = pose_loss(torch.tensor(base[None]), gt_t, torch.tensor(r[None]))
        b = pose_loss(torch.tensor(scaled[None]), gt_t, torch.tensor(r[None]))
        assert float(a.l_total) == pytest.approx(float(b.l_total), abs=1e-9)


class TestRot6dTorch:
    def test_matches_numpy_conversion(self):
        rng = np.random.default_rng(11)
        params = rng.normal(size=(1000, 6))
        got = rot6d_to_matrix_t(torch.tensor(params)).numpy()
        for k in range(0, 1000, 37):
            ref = rot6d_to_matrix(Rot6D(a1=params[k, :3], a2=params[k, 3:]))
            assert np.allclose(got[k], ref, atol=1e-9)
        eye = np.einsum("nij,nkj->nik", got, got)
        assert np.allclose(eye, np.eye(3)[None], atol=1e-9)
        assert np.allclose(np.linalg.det(got), 1.0, atol=1e-9)

    def test_degenerate_raises(self):
        with pytest.raises(DegenerateRotationError):
            rot6d_to_matrix_t(torch.tensor([[0.0, 0.0, 0.0, 1.0, 0.0, 0.0]]))
        with pytest.raises(DegenerateRotationError):
            rot6d_to_matrix_t(torch.tensor([[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]]))

    def test_bad_shape(self):
        with pytest.raises(ValueError):
            rot6d_to_matrix_t(torch.zeros(2, 5))


class TestGradients:
    """Analytic gradients versus central finite differences."""

    def test_dice_gradient(self):
        probs = torch.rand(8, 8, dtype=torch.float64, requires_grad=True) * 0.9 + 0.05
        gt = (torch.rand(8, 8, dtype=torch.float64) > 0.5).double()
        assert torch.autograd.gradcheck(
            lambda p: dice_loss(p, gt), (probs,), eps=1e-6, atol=1e-6, rtol=1e-4
        )

    def test_bce_gradient(self):
        probs = torch.rand(8, 8, dtype=torch.float64, requires_grad=True) * 0.9 + 0.05
        gt = (torch.rand(8, 8, dtype=torch.float64) > 0.5).double()
        assert torch.autograd.gradcheck(
            lambda p: bce_loss(p, gt), (probs,), eps=1e-6, atol=1e-6, rtol=1e-4
        )

    def test_consistency_gradient(self):
        masks = torch.rand(3, 8, 8, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(
            consistency_loss, (masks,), eps=1e-6, atol=1e-6, rtol=1e-4
        )

    def test_classification_gradient(self):
        probs = torch.rand(8, dtype=torch.float64, requires_grad=True) * 0.9 + 0.05
        gt = (torch.rand(8, dtype=torch.float64) > 0.5).double()
        assert torch.autograd.gradcheck(
            lambda p: classification_loss(p, gt), (probs,), eps=1e-6, atol=1e-6, rtol=1e-4
        )

    def test_pose_gradient(self):
        rng = np.random.default_rng(12)
        gt_r = torch.tensor(rotvec_to_matrix(rng.normal(size=3))[None])
        gt_t = torch.tensor(rng.normal(size=(1, 3)))
        pred = torch.tensor(rng.normal(size=(1, 9)), requires_grad=True)
        assert torch.autograd.gradcheck(
            lambda p: pose_loss(p, gt_t, gt_r).l_total, (pred,), eps=1e-6, atol=1e-6, rtol=1e-4
        )
