"""Three-stage segmentation training.

Stage ``s`` fits the encoder-decoder on the labeled corpus alone.
Stage ``ss`` continues from it and adds a consistency term: groups of
pose-paired slices (the same pose rendered in each training volume)
must produce the same predicted mask. Stage ``ssclass`` continues
again with the classification head active. One optimization step
processes one labeled batch plus, in the later stages, one pose group,
and minimizes

    labeled + alpha * consistency + classification.

Every epoch overwrites a stage checkpoint (with both RNG streams, so a
resumed run replays the exact remaining schedule) and rewrites the
stage metrics CSV with fixed float formatting.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .data import (
    AugmentConfig,
    FoldDef,
    LabeledSample,
    SliceDataset,
    augment_pair,
    load_labeled_corpus,
)
from .models import SegNet, consistency_loss, classification_loss, seg_labeled_loss, total_seg_loss
from .preprocess import center_crop_square, replicate_channels, resize_image, resize_mask
from .profiles import Profile, SegStage, config_hash

STAGE_ORDER = ("s", "ss", "ssclass")
FLOAT_FMT = "%.8f"


class TrainingDiverged(RuntimeError):
    """Raised when a loss turns non-finite; a diagnostic snapshot is on disk."""


def append_consumption(work_dir: Path, record: dict) -> None:
    """Append one data-consumption record to the shared audit log."""
    path = Path(work_dir) / "consumption.jsonl"
    with path.open("a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_consumption(work_dir: Path) -> list[dict]:
    path = Path(work_dir) / "consumption.jsonl"
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def write_metrics_csv(path: Path, header: Sequence[str], rows: Sequence[dict]) -> None:
    """Rewrite a metrics table with stable formatting (ints as ints, floats fixed)."""
    lines = [",".join(header)]
    for row in rows:
        cells = []
        for key in header:
            v = row[key]
            cells.append(str(v) if isinstance(v, int) else FLOAT_FMT % float(v))
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def _save_checkpoint(path: Path, payload: dict, meta: dict) -> None:
    tmp = path.with_suffix(".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")


def load_seg_model(path: Path) -> tuple[SegNet, dict]:
    """Rebuild a segmentation model from a stage checkpoint, in eval mode."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    model = SegNet(widths=tuple(payload["widths"]), in_channels=payload["in_channels"])
    model.load_state_dict(payload["model"])
    model.eval()
    return model, payload


@dataclass
class _LabeledSet:
    images: np.ndarray  # (N, px, px) float32 in [0, 1]
    masks: np.ndarray  # (N, px, px) uint8 0/1
    classes: np.ndarray  # (N,) float32 0/1


class SegTrainer:
    """Drives the staged schedule for one fold over one labeled corpus.

    ``slice_root`` and ``fold`` may be omitted when only stage ``s``
    will run (the purely supervised stage needs no volume slices).
    """

    def __init__(
        self,
        profile: Profile,
        corpus_dir: Path,
        work_dir: Path,
        fold: Optional[FoldDef] = None,
        slice_root: Optional[Path] = None,
        seed: int = 0,
        augment: Optional[AugmentConfig] = None,
    ):
        torch.set_num_threads(1)
        torch.manual_seed(seed)
        self.profile = profile
        self.fold = fold
        self.work_dir = Path(work_dir)
        self.work_dir.mkdir(parents=True, exist_ok=True)
        self.seed = seed
        self.augment = AugmentConfig() if augment is None else augment
        self.rng = np.random.default_rng(seed)
        self._hash = config_hash(profile)
        self.model = SegNet(widths=profile.seg.widths, in_channels=profile.seg.in_channels)

        samples = load_labeled_corpus(Path(corpus_dir))
        self._labeled = {name: self._pack(samples, name) for name in ("train", "val")}
        if self._labeled["train"] is None:
            raise ValueError("labeled corpus has no training split")

        self._train_slices: dict[str, np.ndarray] = {}
        self._train_nonempty: dict[str, np.ndarray] = {}
        self._val_group: Optional[torch.Tensor] = None
        if fold is not None and slice_root is not None:
            self._load_slices(Path(slice_root))

    # ---------------------------------------------------------------- data

    def _pack(self, samples: Sequence[LabeledSample], split: str) -> Optional[_LabeledSet]:
        px = self.profile.seg.input_px
        chosen = [s for s in samples if s.split == split]
        if not chosen:
            return None
        images, masks, classes = [], [], []
        for s in chosen:
            images.append(resize_image(center_crop_square(s.image), px))
            masks.append(resize_mask(center_crop_square(s.mask), px))
            classes.append(1.0 if s.class_label == "brain" else 0.0)
        return _LabeledSet(
            images=np.stack(images),
            masks=np.stack(masks),
            classes=np.asarray(classes, dtype=np.float32),
        )

    def _load_slices(self, slice_root: Path) -> None:
        px = self.profile.seg.input_px
        for vid in self.fold.train:
            ds = SliceDataset(slice_root, vid)
            imgs, flags = [], []
            for k in range(len(ds)):
                imgs.append((resize_image(ds.image(k), px) * 255).round().astype(np.uint8))
                flags.append(ds.gt_mask(k).any())
            self._train_slices[vid] = np.stack(imgs)
            self._train_nonempty[vid] = np.asarray(flags)
        if len(self.fold.val) >= 2:
            n_poses = None
            stacks = []
            for vid in self.fold.val:
                ds = SliceDataset(slice_root, vid)
                n_poses = min(32, len(ds)) if n_poses is None else min(n_poses, len(ds))
                stacks.append(ds)
            group = np.stack(
                [
                    np.stack([self._to_input(resize_image(ds.image(k), px)) for ds in stacks])
                    for k in range(n_poses)
                ]
            )  # (poses, vols, C, px, px)
            self._val_group = torch.from_numpy(group)

    @staticmethod
    def _to_input(img: np.ndarray) -> np.ndarray:
        return replicate_channels(img)

    def _labeled_batch(self, split: str, idx: np.ndarray, train_mode: bool):
        data = self._labeled[split]
        imgs, masks = [], []
        for i in idx:
            img, mask = data.images[i], data.masks[i]
            if train_mode:
                img, mask = augment_pair(img, mask, self.rng, self.augment)
            imgs.append(self._to_input(img))
            masks.append(mask)
        x = torch.from_numpy(np.stack(imgs))
        y = torch.from_numpy(np.stack(masks).astype(np.float32)).unsqueeze(1)
        c = torch.from_numpy(data.classes[idx])
        return x, y, c

    def _group_batch(self, k: int):
        imgs = [self._train_slices[vid][k].astype(np.float32) / 255.0 for vid in self.fold.train]
        flags = [bool(self._train_nonempty[vid][k]) for vid in self.fold.train]
        x = torch.from_numpy(np.stack([self._to_input(im) for im in imgs]))
        return x, flags

    # ------------------------------------------------------------- training

    def _stage(self, key: str) -> SegStage:
        for st in self.profile.seg.stages:
            if st.key == key:
                return st
        raise ValueError(f"profile has no stage {key!r}")

    def _ckpt_path(self, key: str) -> Path:
        return self.work_dir / f"seg_{key}.pt"

    def _init_weights_for(self, key: str) -> None:
        if key == "s":
            return  # fresh initialization from the constructor
        prev = STAGE_ORDER[STAGE_ORDER.index(key) - 1]
        prev_path = self._ckpt_path(prev)
        if not prev_path.exists():
            raise RuntimeError(f"stage {key!r} continues from {prev!r}, but {prev_path} is missing")
        payload = torch.load(prev_path, map_location="cpu", weights_only=False)
        prev_stage = self._stage(prev)
        if payload["epoch"] < prev_stage.epochs:
            raise RuntimeError(
                f"stage {prev!r} stopped at epoch {payload['epoch']}/{prev_stage.epochs}; finish it first"
            )
        self.model.load_state_dict(payload["model"])

    def train_stage(self, key: str, stop_after_epoch: Optional[int] = None) -> list[dict]:
        stage = self._stage(key)
        uses_groups = key in ("ss", "ssclass")
        if uses_groups and not self._train_slices:
            raise ValueError(f"stage {key!r} needs a fold and a slice dataset")
        if key == "ssclass" and stage.step_size is not None:
            raise ValueError("the classification stage runs at a fixed learning rate")

        optimizer = torch.optim.Adam(self.model.parameters(), lr=stage.lr)
        scheduler = (
            torch.optim.lr_scheduler.StepLR(optimizer, step_size=stage.step_size, gamma=stage.gamma)
            if stage.step_size is not None
            else None
        )
        history: list[dict] = []
        start_epoch = 0

        ckpt_path = self._ckpt_path(key)
        if ckpt_path.exists():
            payload = torch.load(ckpt_path, map_location="cpu", weights_only=False)
            if payload["config_hash"] != self._hash:
                raise RuntimeError("checkpoint was written under a different configuration")
            self.model.load_state_dict(payload["model"])
            optimizer.load_state_dict(payload["optimizer"])
            if scheduler is not None and payload["scheduler"] is not None:
                scheduler.load_state_dict(payload["scheduler"])
            torch.set_rng_state(payload["torch_rng"])
            self.rng.bit_generator.state = payload["numpy_rng"]
            history = list(payload["history"])
            start_epoch = payload["epoch"]
            if start_epoch >= stage.epochs:
                return history
        else:
            self._init_weights_for(key)

        data = self._labeled["train"]
        n_train = len(data.images)
        bs = self.profile.seg.batch_size
        n_slices = min(len(v) for v in self._train_slices.values()) if uses_groups else 0

        for epoch in range(start_epoch + 1, stage.epochs + 1):
            lr = optimizer.param_groups[0]["lr"]
            if key == "ssclass" and abs(lr - stage.lr) > 1e-12:
                raise RuntimeError(f"classification-stage lr drifted to {lr}")
            self.model.train()
            sums = {"labeled": 0.0, "unlabeled": 0.0, "classification": 0.0, "total": 0.0}
            perm = self.rng.permutation(n_train)
            n_steps = 0
            for lo in range(0, n_train, bs):
                x, y, c = self._labeled_batch("train", perm[lo : lo + bs], train_mode=True)
                mask_logits, class_logits = self.model(x)
                labeled = seg_labeled_loss(torch.sigmoid(mask_logits), y)

                unlabeled = torch.zeros(())
                class_probs, class_targets = [], []
                if key == "ssclass":
                    class_probs.append(torch.sigmoid(class_logits))
                    class_targets.append(c)
                if uses_groups:
                    k = int(self.rng.integers(n_slices))
                    gx, flags = self._group_batch(k)
                    g_mask_logits, g_class_logits = self.model(gx)
                    unlabeled = consistency_loss(torch.sigmoid(g_mask_logits))
                    if key == "ssclass" and any(flags):
                        keep = [i for i, f in enumerate(flags) if f]
                        class_probs.append(torch.sigmoid(g_class_logits[keep]))
                        class_targets.append(torch.ones(len(keep)))

                if class_probs:
                    classification = classification_loss(
                        torch.cat(class_probs), torch.cat(class_targets)
                    )
                else:
                    classification = torch.zeros(())
                total = total_seg_loss(labeled, unlabeled, classification, self.profile.seg.alpha)
                if not torch.isfinite(total):
                    self._dump_divergence(key, epoch, n_steps, labeled, unlabeled, classification, total)
                optimizer.zero_grad()
                total.backward()
                optimizer.step()
                for name, val in (
                    ("labeled", labeled),
                    ("unlabeled", unlabeled),
                    ("classification", classification),
                    ("total", total),
                ):
                    sums[name] += float(val.detach())
                n_steps += 1
            if scheduler is not None:
                scheduler.step()

            row = {"epoch": epoch, "lr": lr}
            row.update({k2: v / n_steps for k2, v in sums.items()})
            row["val_labeled"] = self._val_labeled_loss()
            row["val_unlabeled"] = self._val_group_loss()
            history.append(row)

            self._checkpoint(key, epoch, optimizer, scheduler, history)
            if stop_after_epoch is not None and epoch >= stop_after_epoch:
                break

        if history and history[-1]["epoch"] >= stage.epochs:
            self._record_consumption(key, uses_groups)
        return history

    def _dump_divergence(self, key, epoch, step, labeled, unlabeled, classification, total):
        snap = {
            "stage": key,
            "epoch": epoch,
            "step": step,
            "labeled": str(float(labeled.detach())),
            "unlabeled": str(float(unlabeled.detach())),
            "classification": str(float(classification.detach())),
            "total": str(float(total.detach())),
        }
        path = self.work_dir / f"seg_{key}_diverged.json"
        path.write_text(json.dumps(snap, sort_keys=True, indent=2) + "\n")
        raise TrainingDiverged(f"non-finite loss at stage {key} epoch {epoch}; snapshot in {path}")

    @torch.no_grad()
    def _val_labeled_loss(self) -> float:
        data = self._labeled["val"]
        if data is None:
            return 0.0
        self.model.eval()
        bs = self.profile.seg.batch_size
        total, n = 0.0, 0
        for lo in range(0, len(data.images), bs):
            idx = np.arange(lo, min(lo + bs, len(data.images)))
            x, y, _ = self._labeled_batch("val", idx, train_mode=False)
            mask_logits, _ = self.model(x)
            total += float(seg_labeled_loss(torch.sigmoid(mask_logits), y)) * len(idx)
            n += len(idx)
        return total / n

    @torch.no_grad()
    def _val_group_loss(self) -> float:
        if self._val_group is None:
            return 0.0
        self.model.eval()
        n_poses, n_vols = self._val_group.shape[:2]
        flat = self._val_group.reshape(n_poses * n_vols, *self._val_group.shape[2:])
        probs = []
        for lo in range(0, len(flat), 16):
            logits, _ = self.model(flat[lo : lo + 16])
            probs.append(torch.sigmoid(logits))
        grouped = torch.cat(probs).reshape(n_poses, n_vols, *probs[0].shape[1:])
        return float(torch.stack([consistency_loss(grouped[i]) for i in range(n_poses)]).mean())

    def _checkpoint(self, key, epoch, optimizer, scheduler, history) -> None:
        seg = self.profile.seg
        payload = {
            "format_version": 1,
            "stage": key,
            "epoch": epoch,
            "config_hash": self._hash,
            "widths": list(seg.widths),
            "in_channels": seg.in_channels,
            "input_px": seg.input_px,
            "threshold": seg.threshold,
            "model": self.model.state_dict(),
            "optimizer": optimizer.state_dict(),
            "scheduler": None if scheduler is None else scheduler.state_dict(),
            "torch_rng": torch.get_rng_state(),
            "numpy_rng": self.rng.bit_generator.state,
            "history": history,
        }
        meta = {
            "format_version": 1,
            "stage": key,
            "epoch": epoch,
            "config_hash": self._hash,
            "widths": list(seg.widths),
            "input_px": seg.input_px,
        }
        _save_checkpoint(self._ckpt_path(key), payload, meta)
        header = ["epoch", "lr", "labeled", "unlabeled", "classification", "total", "val_labeled", "val_unlabeled"]
        write_metrics_csv(self.work_dir / f"seg_{key}_metrics.csv", header, history)

    def _record_consumption(self, key: str, uses_groups: bool) -> None:
        if self.fold is None:
            return
        records = [{"stage": f"seg_{key}", "fold": self.fold.fold, "role": "labeled", "volume_ids": []}]
        if uses_groups:
            records.append(
                {"stage": f"seg_{key}", "fold": self.fold.fold, "role": "train", "volume_ids": list(self.fold.train)}
            )
            if self._val_group is not None:
                records.append(
                    {"stage": f"seg_{key}", "fold": self.fold.fold, "role": "val", "volume_ids": list(self.fold.val)}
                )
        for rec in records:
            append_consumption(self.work_dir, rec)
