"""Plane pose regression on (optionally masked) slices.

Inputs come from the fold's training volumes. In the masked arm every
slice is multiplied by its dilated predicted brain mask before being
resized to the regressor's input size; slices where the segmentation
finds nothing are dropped (they carry no brain to localize). A seeded
20% sample of the pool is held out as the validation split.

The target is the slice's rigid pose: translation in mm plus the
rotation matrix, supervised through the 6D rotation parameterization.
Training batches can carry multiplicative photometric jitter (gain and
speckle); both are label-preserving and keep masked-out pixels at zero.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .data import FoldDef, SliceDataset
from .geometry import rotvec_to_matrix
from .models import PoseNet, SegNet, pose_loss
from .preprocess import (
    EmptyMaskError,
    mask_and_prepare,
    prepare_unmasked,
    replicate_channels,
    resize_image,
    resize_mask,
)
from .profiles import Profile, config_hash
from .train_seg import (
    TrainingDiverged,
    _save_checkpoint,
    append_consumption,
    load_seg_model,
    write_metrics_csv,
)

MASK_MODES = ("pred", "none")


def predict_slice_mask(
    segnet: SegNet, image: np.ndarray, seg_input_px: int, threshold: float = 0.5
) -> np.ndarray:
    """Binary brain mask for one grayscale slice, at the slice's resolution."""
    x = torch.from_numpy(replicate_channels(resize_image(image, seg_input_px))).unsqueeze(0)
    probs = segnet.predict_mask_probs(x)[0, 0].numpy()
    mask = (probs > threshold).astype(np.uint8)
    if mask.shape != image.shape:
        mask = resize_mask(mask, image.shape[0])
    return mask


def prepare_pose_input(
    image: np.ndarray,
    out_px: int,
    masks: str,
    dilation_px: int,
    segnet: Optional[SegNet] = None,
    seg_input_px: Optional[int] = None,
    threshold: float = 0.5,
) -> np.ndarray:
    """One regressor input (C, out_px, out_px); raises EmptyMaskError in the
    masked mode when the segmentation predicts no brain."""
    if masks not in MASK_MODES:
        raise ValueError(f"masks must be one of {MASK_MODES}")
    if masks == "none":
        return replicate_channels(prepare_unmasked(image, out_px))
    if segnet is None or seg_input_px is None:
        raise ValueError("masked mode needs a segmentation model and its input size")
    mask = predict_slice_mask(segnet, image, seg_input_px, threshold)
    return replicate_channels(mask_and_prepare(image, mask, dilation_px, out_px))


def load_pose_model(path: Path) -> tuple[PoseNet, dict]:
    """Rebuild a pose regressor from a checkpoint, in eval mode."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    model = PoseNet(width=payload["width"], in_channels=payload["in_channels"])
    model.load_state_dict(payload["model"])
    model.eval()
    return model, payload


class PoseTrainer:
    def __init__(
        self,
        profile: Profile,
        fold: FoldDef,
        slice_root: Path,
        work_dir: Path,
        seed: int = 0,
        masks: str = "pred",
        seg_checkpoint: Optional[Path] = None,
    ):
        if masks not in MASK_MODES:
            raise ValueError(f"masks must be one of {MASK_MODES}")
        if masks == "pred" and seg_checkpoint is None:
            raise ValueError("the masked arm needs a segmentation checkpoint")
        torch.set_num_threads(1)
        torch.manual_seed(seed)
        self.profile = profile
        self.fold = fold
        self.masks = masks
        self.work_dir = Path(work_dir)
        self.work_dir.mkdir(parents=True, exist_ok=True)
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self._hash = config_hash(profile)
        self.model = PoseNet(width=profile.pose.width, in_channels=profile.pose.in_channels)

        segnet = None
        seg_input_px = threshold = None
        if masks == "pred":
            segnet, seg_payload = load_seg_model(seg_checkpoint)
            seg_input_px = seg_payload["input_px"]
            threshold = seg_payload.get("threshold", 0.5)

        inputs, trans, rots, skipped = [], [], [], []
        pp = profile.pose
        for vid in fold.train:
            ds = SliceDataset(Path(slice_root), vid)
            for k in range(len(ds)):
                try:
                    inp = prepare_pose_input(
                        ds.image(k), pp.input_px, masks, pp.dilation_px,
                        segnet=segnet, seg_input_px=seg_input_px,
                        threshold=threshold if threshold is not None else 0.5,
                    )
                except EmptyMaskError:
                    skipped.append({"volume_id": vid, "index": k})
                    continue
                pose = ds.pose(k)
                inputs.append(inp)
                trans.append(pose.t)
                rots.append(rotvec_to_matrix(pose.r))
        if not inputs:
            raise ValueError("no usable slices: every input was skipped")
        self.inputs = torch.from_numpy(np.stack(inputs).astype(np.float32))
        self.trans = torch.from_numpy(np.stack(trans).astype(np.float32))
        self.rots = torch.from_numpy(np.stack(rots).astype(np.float32))
        self.skipped = skipped

        n = len(self.inputs)
        n_val = int(round(pp.val_frac * n))
        perm = self.rng.permutation(n)
        self.val_idx = np.sort(perm[:n_val])
        self.train_idx = np.sort(perm[n_val:])
        if len(self.train_idx) == 0:
            raise ValueError("validation split swallowed every sample")

    # ------------------------------------------------------------- training

    @property
    def _ckpt_path(self) -> Path:
        return self.work_dir / f"pose_{self.masks}.pt"

    def train(self, stop_after_epoch: Optional[int] = None) -> list[dict]:
        pp = self.profile.pose
        optimizer = torch.optim.Adam(self.model.parameters(), lr=pp.lr)
        history: list[dict] = []
        start_epoch = 0

        if self._ckpt_path.exists():
            payload = torch.load(self._ckpt_path, map_location="cpu", weights_only=False)
            if payload["config_hash"] != self._hash:
                raise RuntimeError("checkpoint was written under a different configuration")
            if payload["masks"] != self.masks:
                raise RuntimeError("checkpoint belongs to the other masking arm")
            self.model.load_state_dict(payload["model"])
            optimizer.load_state_dict(payload["optimizer"])
            torch.set_rng_state(payload["torch_rng"])
            self.rng.bit_generator.state = payload["numpy_rng"]
            history = list(payload["history"])
            start_epoch = payload["epoch"]
            if start_epoch >= pp.epochs:
                return history

        for epoch in range(start_epoch + 1, pp.epochs + 1):
            lr = optimizer.param_groups[0]["lr"]
            self.model.train()
            perm = self.rng.permutation(len(self.train_idx))
            order = self.train_idx[perm]
            sums = {"total": 0.0, "trans": 0.0, "rot": 0.0}
            seen = 0
            for lo in range(0, len(order), pp.batch_size):
                idx = order[lo : lo + pp.batch_size]
                pred = self.model(self._augment(self.inputs[idx]))
                loss = pose_loss(pred, self.trans[idx], self.rots[idx], lam=pp.lambda_trans)
                if not torch.isfinite(loss.l_total):
                    self._dump_divergence(epoch, lo // pp.batch_size, loss)
                optimizer.zero_grad()
                loss.l_total.backward()
                optimizer.step()
                sums["total"] += float(loss.l_total.detach()) * len(idx)
                sums["trans"] += float(loss.l_translation.detach()) * len(idx)
                sums["rot"] += float(loss.l_rotation.detach()) * len(idx)
                seen += len(idx)

            row = {"epoch": epoch, "lr": lr}
            row.update({f"train_{k}": v / seen for k, v in sums.items()})
            val = self._validate()
            row.update({f"val_{k}": val[k] for k in ("total", "trans", "rot")})
            history.append(row)
            self._checkpoint(epoch, optimizer, history)
            if stop_after_epoch is not None and epoch >= stop_after_epoch:
                break

        if history and history[-1]["epoch"] >= pp.epochs:
            append_consumption(
                self.work_dir,
                {
                    "stage": f"pose_{self.masks}",
                    "fold": self.fold.fold,
                    "role": "train",
                    "volume_ids": list(self.fold.train),
                },
            )
        return history

    def _augment(self, x: torch.Tensor) -> torch.Tensor:
        """Per-sample gain and per-pixel speckle jitter, shared across the
        replicated channels. Multiplicative, so masked-out pixels stay 0."""
        pp = self.profile.pose
        if pp.aug_gain <= 0.0 and pp.aug_noise <= 0.0:
            return x
        n, _, h, w = x.shape
        gain = self.rng.uniform(1.0 - pp.aug_gain, 1.0 + pp.aug_gain, size=(n, 1, 1, 1))
        speckle = 1.0 + pp.aug_noise * self.rng.standard_normal(size=(n, 1, h, w))
        return x * torch.from_numpy((gain * speckle).astype(np.float32))

    def _dump_divergence(self, epoch: int, step: int, loss) -> None:
        snap = {
            "stage": f"pose_{self.masks}",
            "epoch": epoch,
            "step": step,
            "trans": str(float(loss.l_translation.detach())),
            "rot": str(float(loss.l_rotation.detach())),
            "total": str(float(loss.l_total.detach())),
        }
        path = self.work_dir / f"pose_{self.masks}_diverged.json"
        path.write_text(json.dumps(snap, sort_keys=True, indent=2) + "\n")
        raise TrainingDiverged(f"non-finite loss at epoch {epoch}; snapshot in {path}")

    @torch.no_grad()
    def _validate(self) -> dict:
        if len(self.val_idx) == 0:
            return {"total": 0.0, "trans": 0.0, "rot": 0.0}
        self.model.eval()
        pp = self.profile.pose
        sums = {"total": 0.0, "trans": 0.0, "rot": 0.0}
        for lo in range(0, len(self.val_idx), pp.batch_size):
            idx = self.val_idx[lo : lo + pp.batch_size]
            loss = pose_loss(self.model(self.inputs[idx]), self.trans[idx], self.rots[idx], lam=pp.lambda_trans)
            sums["total"] += float(loss.l_total) * len(idx)
            sums["trans"] += float(loss.l_translation) * len(idx)
            sums["rot"] += float(loss.l_rotation) * len(idx)
        return {k: v / len(self.val_idx) for k, v in sums.items()}

    def _checkpoint(self, epoch: int, optimizer, history: list[dict]) -> None:
        pp = self.profile.pose
        payload = {
            "format_version": 1,
            "masks": self.masks,
            "epoch": epoch,
            "config_hash": self._hash,
            "width": pp.width,
            "in_channels": pp.in_channels,
            "input_px": pp.input_px,
            "dilation_px": pp.dilation_px,
            "lambda_trans": pp.lambda_trans,
            "skipped": self.skipped,
            "model": self.model.state_dict(),
            "optimizer": optimizer.state_dict(),
            "torch_rng": torch.get_rng_state(),
            "numpy_rng": self.rng.bit_generator.state,
            "history": history,
        }
        meta = {
            "format_version": 1,
            "masks": self.masks,
            "epoch": epoch,
            "config_hash": self._hash,
            "width": pp.width,
            "input_px": pp.input_px,
            "n_skipped": len(self.skipped),
        }
        _save_checkpoint(self._ckpt_path, payload, meta)
        header = ["epoch", "lr", "train_total", "train_trans", "train_rot", "val_total", "val_trans", "val_rot"]
        write_metrics_csv(self.work_dir / f"pose_{self.masks}_metrics.csv", header, history)
