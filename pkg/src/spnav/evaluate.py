"""Held-out evaluation: mask agreement and pose error tables.

Two segmentation readouts:

* mIoU against reference masks on the labeled test split, and
* pairwise mIoU across volumes, where the same pose is rendered in
  several volumes and the predicted masks are compared with each
  other. High agreement means the model segments anatomy rather than
  volume-specific texture.

Pose evaluation produces one row per evaluated slice (translation
error in mm plus three rotation readings) and a summary of
median/mean/min/max for translation and for the plane-normal angle.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .data import LabeledSample, SliceDataset
from .geometry import Pose6D, geodesic_angle_deg, matrix_to_rotvec, normal_angle_deg
from .models import PoseNet, SegNet
from .models.losses import rot6d_to_matrix_t
from .preprocess import EmptyMaskError, center_crop_square, replicate_channels, resize_image, resize_mask
from .train_pose import prepare_pose_input
from .train_seg import FLOAT_FMT

EVAL_BATCH = 16


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """IoU of two binary masks; two empty masks agree perfectly."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum()) / union


@torch.no_grad()
def _predict_masks(segnet: SegNet, images: Sequence[np.ndarray], input_px: int, threshold: float) -> list[np.ndarray]:
    batch = np.stack([replicate_channels(resize_image(img, input_px)) for img in images])
    masks = []
    for lo in range(0, len(batch), EVAL_BATCH):
        probs = segnet.predict_mask_probs(torch.from_numpy(batch[lo : lo + EVAL_BATCH]))
        masks.extend((probs[:, 0].numpy() > threshold).astype(np.uint8))
    return masks


def evaluate_labeled_miou(
    segnet: SegNet,
    samples: Sequence[LabeledSample],
    input_px: int,
    threshold: float = 0.5,
) -> float:
    """Mean IoU of predicted vs reference masks over labeled samples."""
    if not samples:
        raise ValueError("evaluation set is empty")
    images = [center_crop_square(s.image) for s in samples]
    refs = [resize_mask(center_crop_square(s.mask), input_px) for s in samples]
    preds = _predict_masks(segnet, images, input_px, threshold)
    return float(np.mean([mask_iou(p, r) for p, r in zip(preds, refs)]))


def evaluate_pairwise_miou(
    segnet: SegNet,
    slice_root: Path,
    volume_ids: Sequence[str],
    input_px: int,
    threshold: float = 0.5,
    pose_indices: Optional[Sequence[int]] = None,
) -> float:
    """Cross-volume agreement of predicted masks at shared poses."""
    if len(volume_ids) < 2:
        raise ValueError("pairwise agreement needs at least two volumes")
    datasets = [SliceDataset(Path(slice_root), vid) for vid in volume_ids]
    n = min(len(ds) for ds in datasets)
    indices = list(range(n)) if pose_indices is None else list(pose_indices)
    if not indices:
        raise ValueError("evaluation set is empty")
    per_volume = [
        _predict_masks(segnet, [ds.image(k) for k in indices], input_px, threshold) for ds in datasets
    ]
    scores = []
    for j in range(len(indices)):
        for a in range(len(datasets)):
            for b in range(a + 1, len(datasets)):
                scores.append(mask_iou(per_volume[a][j], per_volume[b][j]))
    return float(np.mean(scores))


@dataclass
class PoseEvalRow:
    volume_id: str
    index: int
    trans_err_mm: float
    rot_deg: float  # plane-normal angle, unfolded [0, 180]
    rot_folded_deg: float  # orientation-free angle [0, 90]
    rot_geodesic_deg: float


@torch.no_grad()
def predict_poses(model: PoseNet, inputs: torch.Tensor, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Batched raw predictions -> translations (N, 3) and rotations (N, 3, 3)."""
    model.eval()
    ts, rs = [], []
    for lo in range(0, len(inputs), batch_size):
        out = model(inputs[lo : lo + batch_size])
        ts.append(out[:, :3].numpy())
        rs.append(rot6d_to_matrix_t(out[:, 3:]).numpy())
    return np.concatenate(ts), np.concatenate(rs)


def evaluate_pose_errors(
    model: PoseNet,
    slice_root: Path,
    volume_ids: Sequence[str],
    input_px: int,
    dilation_px: int,
    masks: str,
    segnet: Optional[SegNet] = None,
    seg_input_px: Optional[int] = None,
    threshold: float = 0.5,
    pose_indices: Optional[Sequence[int]] = None,
) -> tuple[list[PoseEvalRow], list[dict]]:
    """Per-slice pose errors on the given volumes; returns (rows, skipped)."""
    prepared, poses, keys, skipped = [], [], [], []
    for vid in volume_ids:
        ds = SliceDataset(Path(slice_root), vid)
        indices = range(len(ds)) if pose_indices is None else pose_indices
        for k in indices:
            try:
                inp = prepare_pose_input(
                    ds.image(k), input_px, masks, dilation_px,
                    segnet=segnet, seg_input_px=seg_input_px, threshold=threshold,
                )
            except EmptyMaskError:
                skipped.append({"volume_id": vid, "index": int(k)})
                continue
            prepared.append(inp)
            poses.append(ds.pose(k))
            keys.append((vid, int(k)))
    if not prepared:
        raise ValueError("evaluation set is empty")
    t_pred, r_pred = predict_poses(model, torch.from_numpy(np.stack(prepared).astype(np.float32)))

    rows = []
    for i, (vid, k) in enumerate(keys):
        gt = poses[i]
        pred = Pose6D(t_pred[i], matrix_to_rotvec(r_pred[i]))
        rows.append(
            PoseEvalRow(
                volume_id=vid,
                index=k,
                trans_err_mm=float(np.linalg.norm(pred.t - gt.t)),
                rot_deg=normal_angle_deg(pred, gt, fold=False),
                rot_folded_deg=normal_angle_deg(pred, gt, fold=True),
                rot_geodesic_deg=geodesic_angle_deg(pred, gt),
            )
        )
    return rows, skipped


def pose_error_summary(rows: Sequence[PoseEvalRow], n_skipped: int = 0) -> dict:
    """Median/mean/min/max of translation and plane-normal rotation errors."""
    if not rows:
        raise ValueError("evaluation set is empty")
    trans = np.array([r.trans_err_mm for r in rows])
    rot = np.array([r.rot_deg for r in rows])
    summary = {
        "trans_median_mm": float(np.median(trans)),
        "trans_mean_mm": float(np.mean(trans)),
        "trans_min_mm": float(np.min(trans)),
        "trans_max_mm": float(np.max(trans)),
        "rot_median_deg": float(np.median(rot)),
        "rot_mean_deg": float(np.mean(rot)),
        "rot_min_deg": float(np.min(rot)),
        "rot_max_deg": float(np.max(rot)),
        "rot_folded_median_deg": float(np.median([r.rot_folded_deg for r in rows])),
        "rot_geodesic_median_deg": float(np.median([r.rot_geodesic_deg for r in rows])),
        "n_slices": len(rows),
        "n_skipped": n_skipped,
    }
    return summary


def write_pose_rows_csv(path: Path, rows: Sequence[PoseEvalRow]) -> None:
    header = ["volume_id", "index", "trans_err_mm", "rot_deg", "rot_folded_deg", "rot_geodesic_deg"]
    lines = [",".join(header)]
    for r in rows:
        d = asdict(r)
        cells = [d["volume_id"], str(d["index"])]
        cells += [FLOAT_FMT % d[k] for k in header[2:]]
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def write_json(path: Path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
