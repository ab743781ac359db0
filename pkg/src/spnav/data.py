"""Datasets on disk and their bookkeeping.

Three dataset shapes live here:

* the labeled image corpus (images/, masks/, labels.csv) with its
  stratified train/val/test split,
* sliced volume datasets, where one shared pose list is rendered in
  every volume of a family so slices with the same index are
  pose-paired across volumes,
* leave-one-out fold definitions over volume ids, plus an audit that
  checks no held-out volume leaked into training or validation.

Masks are stored as 0/255 PNG and handled in memory as 0/1 uint8.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import cv2
import numpy as np
from PIL import Image

from .geometry import Pose6D
from .volume import PoseBounds, Volume, extract_slice, sample_pose

DEFAULT_SPLIT_WEIGHTS = (205, 53, 97)
SPLIT_NAMES = ("train", "val", "test")


@dataclass
class LabeledSample:
    """One corpus image: grayscale image, binary mask, class label."""

    name: str
    image: np.ndarray  # float32 HxW in [0, 1]
    mask: np.ndarray  # uint8 HxW in {0, 1}
    class_label: str  # "brain" | "not_brain"
    split: Optional[str] = None

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise ValueError(f"image {self.image.shape} and mask {self.mask.shape} differ")
        if self.class_label not in ("brain", "not_brain"):
            raise ValueError(f"unknown class label {self.class_label!r}")


def save_image_png(path: Path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image, dtype=np.float32), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="L").save(path)


def load_image_png(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"), dtype=np.float32)
    return arr / 255.0


def save_mask_png(path: Path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path)


def load_mask_png(path: Path) -> np.ndarray:
    return (np.asarray(Image.open(path).convert("L")) > 127).astype(np.uint8)


def save_labeled_corpus(samples: Sequence[LabeledSample], out_dir: Path) -> None:
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    rows = []
    for s in samples:
        fname = f"{s.name}.png"
        save_image_png(out_dir / "images" / fname, s.image)
        save_mask_png(out_dir / "masks" / fname, s.mask)
        rows.append((fname, s.class_label, s.split or ""))
    with open(out_dir / "labels.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("filename", "class", "split"))
        w.writerows(rows)


def load_labeled_corpus(corpus_dir: Path) -> list[LabeledSample]:
    corpus_dir = Path(corpus_dir)
    samples = []
    with open(corpus_dir / "labels.csv", newline="") as f:
        for row in csv.DictReader(f):
            fname = row["filename"]
            samples.append(
                LabeledSample(
                    name=Path(fname).stem,
                    image=load_image_png(corpus_dir / "images" / fname),
                    mask=load_mask_png(corpus_dir / "masks" / fname),
                    class_label=row["class"],
                    split=row["split"] or None,
                )
            )
    return samples


def _largest_remainder(total: int, weights: Sequence[float]) -> list[int]:
    quotas = [total * w / sum(weights) for w in weights]
    counts = [math.floor(q) for q in quotas]
    for i in sorted(range(len(weights)), key=lambda i: quotas[i] - counts[i], reverse=True):
        if sum(counts) == total:
            break
        counts[i] += 1
    return counts


def split_labeled(
    samples: Sequence[LabeledSample],
    seed: int = 0,
    weights: Sequence[int] = DEFAULT_SPLIT_WEIGHTS,
) -> list[LabeledSample]:
    """Assign train/val/test splits, stratified by class.

    Split sizes follow the weights by largest remainder on the total
    count; the same rule allocates within each class, then single moves
    repair any column drift so the totals are met exactly.
    """
    if len(samples) < 10:
        raise ValueError(f"corpus too small to split: {len(samples)}")
    classes = sorted({s.class_label for s in samples})
    if len(classes) < 2:
        raise ValueError("corpus must contain both classes")

    targets = _largest_remainder(len(samples), weights)
    rng = np.random.default_rng(seed)
    alloc = {}  # class -> per-split counts
    for c in classes:
        n_c = sum(1 for s in samples if s.class_label == c)
        alloc[c] = _largest_remainder(n_c, weights)
    # repair column sums toward the global targets
    def col(j):
        return sum(alloc[c][j] for c in classes)

    for _ in range(len(samples)):
        over = [j for j in range(3) if col(j) > targets[j]]
        under = [j for j in range(3) if col(j) < targets[j]]
        if not over:
            break
        j_over, j_under = over[0], under[0]
        donor = max(classes, key=lambda c: alloc[c][j_over])
        alloc[donor][j_over] -= 1
        alloc[donor][j_under] += 1

    out = []
    for c in classes:
        members = [s for s in samples if s.class_label == c]
        order = rng.permutation(len(members))
        counts = alloc[c]
        bounds = np.cumsum([0] + counts)
        for j, name in enumerate(SPLIT_NAMES):
            for k in order[bounds[j] : bounds[j + 1]]:
                out.append(replace(members[k], split=name))
    assert len(out) == len(samples)
    return out


@dataclass(frozen=True)
class FoldDef:
    """One leave-one-out fold over volume ids."""

    fold: int
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]


def make_folds(volume_ids: Sequence[str], n_train: int = 3, n_val: int = 2) -> list[FoldDef]:
    """Hold out each volume once; split the rest by cyclic rotation."""
    ids = list(volume_ids)
    if len(ids) != n_train + n_val + 1:
        raise ValueError(f"{len(ids)} volumes cannot split into {n_train}+{n_val}+1")
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate volume ids")
    folds = []
    for i in range(len(ids)):
        rest = [ids[(i + k) % len(ids)] for k in range(1, len(ids))]
        folds.append(
            FoldDef(fold=i, train=tuple(rest[:n_train]), val=tuple(rest[n_train:]), test=(ids[i],))
        )
    return folds


def save_folds(folds: Sequence[FoldDef], path: Path) -> None:
    payload = {
        "n_folds": len(folds),
        "folds": [
            {"fold": f.fold, "train": list(f.train), "val": list(f.val), "test": list(f.test)}
            for f in folds
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_folds(path: Path) -> list[FoldDef]:
    payload = json.loads(Path(path).read_text())
    return [
        FoldDef(fold=f["fold"], train=tuple(f["train"]), val=tuple(f["val"]), test=tuple(f["test"]))
        for f in payload["folds"]
    ]


def audit_fold_hygiene(
    folds: Sequence[FoldDef],
    consumption: Sequence[dict] = (),
) -> list[str]:
    """Return a list of hygiene violations (empty means clean).

    Structural checks cover every fold: the three roles must be
    disjoint, cover the same id set in each fold, and the held-out ids
    must partition that set across folds. Consumption records, when
    given, are dicts like ``{"fold": 0, "role": "train", "volume_ids":
    [...]}`` written by the trainers; each consumed id must be allowed
    for its role in its fold.
    """
    problems = []
    universe = None
    held_out = []
    for f in folds:
        roles = {"train": set(f.train), "val": set(f.val), "test": set(f.test)}
        for a in roles:
            for b in roles:
                if a < b and roles[a] & roles[b]:
                    problems.append(f"fold {f.fold}: {a} and {b} share {sorted(roles[a] & roles[b])}")
        ids = roles["train"] | roles["val"] | roles["test"]
        if universe is None:
            universe = ids
        elif ids != universe:
            problems.append(f"fold {f.fold}: id set differs from fold {folds[0].fold}")
        held_out.extend(f.test)
    if universe is not None and sorted(held_out) != sorted(universe):
        problems.append("held-out ids do not partition the volume set")

    by_fold = {f.fold: f for f in folds}
    for rec in consumption:
        f = by_fold.get(rec["fold"])
        if f is None:
            problems.append(f"consumption names unknown fold {rec['fold']}")
            continue
        allowed_by_role = {"train": set(f.train), "val": set(f.val), "test": set(f.test)}
        if rec["role"] not in allowed_by_role:
            # roles outside the fold vocabulary (e.g. the labeled corpus)
            # are fine as long as they touch no fold volume
            if rec.get("volume_ids"):
                problems.append(
                    f"fold {rec['fold']} {rec['stage']}/{rec['role']} consumed volume ids"
                )
            continue
        bad = set(rec.get("volume_ids", ())) - allowed_by_role[rec["role"]]
        if bad:
            problems.append(
                f"fold {rec['fold']} {rec['stage']}/{rec['role']} consumed disallowed ids {sorted(bad)}"
            )
    return problems


@dataclass(frozen=True)
class AugmentConfig:
    """Gates for training-time augmentation. All off means identity."""

    flip: bool = True
    max_rotate_deg: float = 15.0
    elastic_alpha: float = 20.0
    elastic_sigma: float = 4.0
    brightness: float = 0.2
    contrast: float = 0.2
    noise_sigma: float = 0.05

    @staticmethod
    def none() -> "AugmentConfig":
        return AugmentConfig(False, 0.0, 0.0, 4.0, 0.0, 0.0, 0.0)


def augment_pair(
    image: np.ndarray,
    mask: Optional[np.ndarray],
    rng: np.random.Generator,
    cfg: AugmentConfig,
) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Photometric jitter on the image, geometric ops in lockstep with the mask."""
    img = np.asarray(image, dtype=np.float32)
    msk = None if mask is None else np.asarray(mask, dtype=np.uint8)
    h, w = img.shape

    if cfg.flip and rng.uniform() < 0.5:
        img = img[:, ::-1].copy()
        if msk is not None:
            msk = msk[:, ::-1].copy()

    if cfg.max_rotate_deg > 0:
        deg = rng.uniform(-cfg.max_rotate_deg, cfg.max_rotate_deg)
        m = cv2.getRotationMatrix2D((w / 2 - 0.5, h / 2 - 0.5), deg, 1.0)
        img = cv2.warpAffine(img, m, (w, h), flags=cv2.INTER_LINEAR, borderValue=0.0)
        if msk is not None:
            msk = cv2.warpAffine(msk, m, (w, h), flags=cv2.INTER_NEAREST, borderValue=0)

    if cfg.elastic_alpha > 0:
        alpha = rng.uniform(0, cfg.elastic_alpha)
        dx = cv2.GaussianBlur(rng.uniform(-1, 1, (h, w)).astype(np.float32), (0, 0), cfg.elastic_sigma) * alpha
        dy = cv2.GaussianBlur(rng.uniform(-1, 1, (h, w)).astype(np.float32), (0, 0), cfg.elastic_sigma) * alpha
        xx, yy = np.meshgrid(np.arange(w, dtype=np.float32), np.arange(h, dtype=np.float32))
        map_x, map_y = xx + dx, yy + dy
        img = cv2.remap(img, map_x, map_y, cv2.INTER_LINEAR, borderValue=0.0)
        if msk is not None:
            msk = cv2.remap(msk, map_x, map_y, cv2.INTER_NEAREST, borderValue=0)

    if cfg.brightness > 0:
        img = img + rng.uniform(-cfg.brightness, cfg.brightness)
    if cfg.contrast > 0:
        img = (img - 0.5) * (1.0 + rng.uniform(-cfg.contrast, cfg.contrast)) + 0.5
    if cfg.noise_sigma > 0:
        img = img + rng.normal(0, cfg.noise_sigma, img.shape).astype(np.float32)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return img, msk


def save_slice_dataset(
    volumes: Sequence[Volume],
    per_volume: int,
    seed: int,
    out_dir: Path,
    image_px: int,
    pixel_spacing_mm: float,
    bounds: PoseBounds = PoseBounds(),
) -> None:
    """Render one shared pose list in every volume.

    Slice ``k`` of any two volumes shows the same world plane, which is
    what pairwise consistency training and evaluation rely on.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    poses = [sample_pose(rng, bounds) for _ in range(per_volume)]
    with open(out_dir / "poses.jsonl", "w") as f:
        for k, p in enumerate(poses):
            f.write(json.dumps({"index": k, **p.to_dict()}) + "\n")
    meta = {
        "volume_ids": [v.volume_id for v in volumes],
        "per_volume": per_volume,
        "seed": seed,
        "image_px": image_px,
        "pixel_spacing_mm": pixel_spacing_mm,
        "max_offset_mm": bounds.max_offset_mm,
        "max_angle_rad": bounds.max_angle_rad,
    }
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    for v in volumes:
        vdir = out_dir / v.volume_id
        vdir.mkdir(exist_ok=True)
        for k, p in enumerate(poses):
            s = extract_slice(v, p, (image_px, image_px), pixel_spacing_mm)
            save_image_png(vdir / f"slice_{k:06d}.png", s.image)
            save_mask_png(vdir / f"mask_{k:06d}.png", s.gt_mask)


def load_slice_poses(slice_dir: Path) -> list[Pose6D]:
    poses = []
    with open(Path(slice_dir) / "poses.jsonl") as f:
        for line in f:
            d = json.loads(line)
            poses.append(Pose6D.from_dict(d))
    return poses


@dataclass
class SliceDataset:
    """Lazy reader over one volume's rendered slices."""

    slice_dir: Path
    volume_id: str
    poses: list[Pose6D] = field(default_factory=list)

    def __post_init__(self):
        self.slice_dir = Path(self.slice_dir)
        if not self.poses:
            self.poses = load_slice_poses(self.slice_dir)
        vdir = self.slice_dir / self.volume_id
        if not vdir.is_dir():
            raise FileNotFoundError(f"no slices for volume {self.volume_id!r} under {self.slice_dir}")

    def __len__(self) -> int:
        return len(self.poses)

    def image(self, k: int) -> np.ndarray:
        return load_image_png(self.slice_dir / self.volume_id / f"slice_{k:06d}.png")

    def gt_mask(self, k: int) -> np.ndarray:
        return load_mask_png(self.slice_dir / self.volume_id / f"mask_{k:06d}.png")

    def pose(self, k: int) -> Pose6D:
        return self.poses[k]
