"""Training losses for segmentation and pose regression.

Segmentation losses take probabilities in [0, 1]; the binary
cross-entropy clips them away from {0, 1} instead of silently
producing infinities. The combined labeled loss is the Dice/BCE mean,
the unlabeled loss is the mean squared difference averaged over all
unordered pairs of pose-paired predictions, and the total weighs the
unlabeled term by alpha.

Pose loss compares predicted translation to the target in mm and the
Gram-Schmidt-orthonormalized predicted rotation to the target matrix by
elementwise L2 distance; the total is rotation + lambda * translation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import torch

from ..geometry import DegenerateRotationError

DICE_EPS = 1.0
PROB_CLIP = 1e-7
DEGENERATE_TOL = 1e-8


def _batched(t: torch.Tensor) -> torch.Tensor:
    return t.unsqueeze(0) if t.dim() <= 2 else t


def _check_shapes(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {tuple(pred.shape)} != target {tuple(target.shape)}")


def dice_loss(probs: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """1 - (2|P.T| + eps) / (|P| + |T| + eps), per sample, then mean."""
    _check_shapes(probs, target)
    p = _batched(probs).flatten(1)
    t = _batched(target).flatten(1)
    inter = (p * t).sum(dim=1)
    score = (2.0 * inter + eps) / (p.sum(dim=1) + t.sum(dim=1) + eps)
    return (1.0 - score).mean()


def bce_loss(probs: torch.Tensor, target: torch.Tensor, clip: float = PROB_CLIP) -> torch.Tensor:
    """Pixelwise binary cross-entropy on clipped probabilities."""
    _check_shapes(probs, target)
    p = probs.clamp(clip, 1.0 - clip)
    return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p)).mean()


def seg_labeled_loss(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return (dice_loss(probs, target) + bce_loss(probs, target)) / 2.0


def consistency_loss(masks: Union[torch.Tensor, Sequence[torch.Tensor]]) -> torch.Tensor:
    """Mean squared difference averaged over all unordered prediction pairs.

    With n members there are n(n-1)/2 pairs, so this equals
    2/(n(n-1)) * sum over i<j of the per-pair MSE.
    """
    if not isinstance(masks, torch.Tensor):
        masks = torch.stack(list(masks), dim=0)
    n = masks.shape[0]
    if n < 2:
        raise ValueError(f"consistency needs at least 2 pose-paired masks, got {n}")
    total = masks.new_zeros(())
    for i in range(n):
        for j in range(i + 1, n):
            total = total + ((masks[i] - masks[j]) ** 2).mean()
    return total / (n * (n - 1) / 2)


def classification_loss(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return bce_loss(probs, target)


def total_seg_loss(
    labeled: torch.Tensor,
    unlabeled: torch.Tensor,
    classification: torch.Tensor,
    alpha: float = 0.5,
) -> torch.Tensor:
    return labeled + alpha * unlabeled + classification


def rot6d_to_matrix_t(params: torch.Tensor) -> torch.Tensor:
    """Gram-Schmidt map from (..., 6) parameters to (..., 3, 3) matrices.

    Differentiable counterpart of the numpy conversion; the two columns
    a1, a2 must be nonzero and non-parallel.
    """
    if params.shape[-1] != 6:
        raise ValueError(f"expected (..., 6) parameters, got {tuple(params.shape)}")
    a1, a2 = params[..., :3], params[..., 3:]
    n1 = torch.linalg.vector_norm(a1, dim=-1, keepdim=True)
    if bool((n1 < DEGENERATE_TOL).any()):
        raise DegenerateRotationError("first column has near-zero norm")
    b1 = a1 / n1
    u2 = a2 - (b1 * a2).sum(dim=-1, keepdim=True) * b1
    n2 = torch.linalg.vector_norm(u2, dim=-1, keepdim=True)
    if bool((n2 < DEGENERATE_TOL).any()):
        raise DegenerateRotationError("columns are near-parallel")
    b2 = u2 / n2
    b3 = torch.linalg.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], dim=-1)


@dataclass
class PoseBatchLoss:
    """Loss components of one batch; l_total = l_rotation + lam * l_translation."""

    l_translation: torch.Tensor
    l_rotation: torch.Tensor
    lam: float
    l_total: torch.Tensor


def pose_loss(
    pred: torch.Tensor,
    gt_t: torch.Tensor,
    gt_rot: torch.Tensor,
    lam: float = 1.0,
) -> PoseBatchLoss:
    """Batch pose loss from raw 9-parameter predictions (t, then 6D rotation)."""
    if pred.shape[-1] != 9:
        raise ValueError(f"expected (..., 9) predictions, got {tuple(pred.shape)}")
    pred_t, pred_r6 = pred[..., :3], pred[..., 3:]
    if pred_t.shape != gt_t.shape:
        raise ValueError(f"translation shapes differ: {tuple(pred_t.shape)} vs {tuple(gt_t.shape)}")
    pred_rot = rot6d_to_matrix_t(pred_r6)
    if pred_rot.shape != gt_rot.shape:
        raise ValueError(f"rotation shapes differ: {tuple(pred_rot.shape)} vs {tuple(gt_rot.shape)}")
    l_trans = torch.linalg.vector_norm(pred_t - gt_t, dim=-1).mean()
    l_rot = torch.linalg.matrix_norm(pred_rot - gt_rot, ord="fro", dim=(-2, -1)).mean()
    total = l_rot + lam * l_trans
    return PoseBatchLoss(l_translation=l_trans, l_rotation=l_rot, lam=lam, l_total=total)
