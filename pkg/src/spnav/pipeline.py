"""Streamed frames to proximity-to-target readings.

A stream is one recorded sweep: square grayscale frames on a fixed
clock, optionally paired with the reference pose of every frame (known
for synthetic sweeps, unknown on a real machine). Each frame is
classified, masked, and regressed to a plane pose, and the pose is
reduced to two numbers against the target plane: distance between the
plane origins and the folded angle between their normals.

A frame the models cannot handle (not a brain, empty mask, a failing
forward pass) yields a reading-free record instead of aborting the
sweep. The trace writer emits a fixed-format CSV, a JSONL record log,
an events echo, and the rendered trace figure, and writes them
byte-identically for identical inputs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch

from .geometry import PlaneAnnotation, Pose6D, matrix_to_rotvec, proximity, rotvec_to_matrix
from .models.losses import rot6d_to_matrix_t
from .preprocess import letterbox_square, replicate_channels, resize_image
from .report import plot_trace
from .train_pose import prepare_pose_input
from .train_seg import FLOAT_FMT
from .volume import Volume, extract_slice

DEFAULT_HZ = 10.0

Target = Union[PlaneAnnotation, Pose6D]


def frame_times(duration_s: float, hz: float = DEFAULT_HZ) -> np.ndarray:
    """Sampling clock: frames at k/hz for k = 0 .. floor(duration*hz)."""
    if duration_s < 0 or hz <= 0:
        raise ValueError("duration must be >= 0 and rate positive")
    n = math.floor(duration_s * hz) + 1
    return np.arange(n, dtype=np.float64) / hz


def interpolate_pose(start: Pose6D, target: Pose6D, frac: float) -> Pose6D:
    """Rigid interpolation: linear in translation, geodesic in rotation."""
    t = (1.0 - frac) * start.t + frac * target.t
    r_start = start.rotation_matrix()
    r_rel = matrix_to_rotvec(target.rotation_matrix() @ r_start.T)
    r = rotvec_to_matrix(frac * r_rel) @ r_start
    return Pose6D(t, matrix_to_rotvec(r))


@dataclass
class Stream:
    """One recorded sweep of frames on a fixed clock."""

    images: np.ndarray  # (N, H, W) uint8
    timestamps_s: np.ndarray  # (N,) seconds
    pixel_spacing_mm: float
    volume_id: str
    poses: Optional[list[Pose6D]] = None  # reference pose per frame, if known

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        self.timestamps_s = np.asarray(self.timestamps_s, dtype=np.float64)
        if len(self.images) != len(self.timestamps_s):
            raise ValueError("one timestamp per frame required")
        if self.poses is not None and len(self.poses) != len(self.images):
            raise ValueError("one pose per frame required when poses are given")

    def __len__(self) -> int:
        return len(self.images)

    def frame(self, k: int) -> np.ndarray:
        return self.images[k].astype(np.float32) / 255.0


def extract_frames(
    volume: Volume,
    start: Pose6D,
    target: Pose6D,
    duration_s: float,
    hz: float = DEFAULT_HZ,
    image_px: int = 128,
    pixel_spacing_mm: float = 1.0,
) -> Stream:
    """Render a straight approach from ``start`` to ``target`` as a stream.

    The pose moves linearly over the duration, so the last frame sits on
    the target exactly whenever duration*hz is integral.
    """
    times = frame_times(duration_s, hz)
    poses = []
    images = np.empty((len(times), image_px, image_px), dtype=np.uint8)
    for k, t in enumerate(times):
        frac = float(t) / duration_s if duration_s > 0 else 0.0
        pose = interpolate_pose(start, target, frac)
        s = extract_slice(volume, pose, (image_px, image_px), pixel_spacing_mm)
        images[k] = (np.clip(s.image, 0.0, 1.0) * 255.0).round().astype(np.uint8)
        poses.append(pose)
    return Stream(
        images=images,
        timestamps_s=times,
        pixel_spacing_mm=pixel_spacing_mm,
        volume_id=volume.volume_id,
        poses=poses,
    )


def save_stream(stream: Stream, path: Path) -> None:
    meta = {
        "pixel_spacing_mm": stream.pixel_spacing_mm,
        "volume_id": stream.volume_id,
        "has_poses": stream.poses is not None,
    }
    arrays = {
        "images": stream.images,
        "timestamps_s": stream.timestamps_s,
        "meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
    }
    if stream.poses is not None:
        arrays["pose_t"] = np.stack([p.t for p in stream.poses])
        arrays["pose_r"] = np.stack([p.r for p in stream.poses])
    np.savez_compressed(Path(path), **arrays)


def load_stream(path: Path) -> Stream:
    with np.load(Path(path)) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        poses = None
        if meta["has_poses"]:
            poses = [Pose6D(t, r) for t, r in zip(z["pose_t"], z["pose_r"])]
        return Stream(
            images=z["images"],
            timestamps_s=z["timestamps_s"],
            pixel_spacing_mm=meta["pixel_spacing_mm"],
            volume_id=meta["volume_id"],
            poses=poses,
        )


def load_frame_dir(path: Path, hz: float = DEFAULT_HZ, pixel_spacing_mm: float = 1.0) -> Stream:
    """Stream from a directory of PNG frames, clocked in filename order."""
    from .data import load_image_png

    files = sorted(Path(path).glob("*.png"))
    if not files:
        raise ValueError(f"no PNG frames under {path}")
    images = np.stack(
        [(load_image_png(f) * 255.0).round().astype(np.uint8) for f in files]
    )
    return Stream(
        images=images,
        timestamps_s=np.arange(len(files)) / hz,
        pixel_spacing_mm=pixel_spacing_mm,
        volume_id=Path(path).name,
    )


def oracle_proximities(stream: Stream, target: Target) -> list[tuple[float, float]]:
    """Per-frame (distance, angle) from the stream's reference poses."""
    if stream.poses is None:
        raise ValueError("stream carries no reference poses")
    return [proximity(p, target) for p in stream.poses]


@dataclass
class FrameRecord:
    index: int
    timestamp_s: float
    brain_prob: float
    is_brain: bool
    has_pose: bool
    trans_mm: Optional[float] = None
    rot_deg: Optional[float] = None
    pose: Optional[Pose6D] = None
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "timestamp_s": self.timestamp_s,
            "brain_prob": self.brain_prob,
            "is_brain": self.is_brain,
            "has_pose": self.has_pose,
            "trans_mm": self.trans_mm,
            "rot_deg": self.rot_deg,
            "pose": None if self.pose is None else self.pose.to_dict(),
            "note": self.note,
        }


@torch.no_grad()
def run_pipeline(
    stream: Stream,
    segnet,
    posenet,
    target: Target,
    seg_input_px: int,
    pose_input_px: int,
    dilation_px: int,
    masks: str = "pred",
    threshold: float = 0.5,
) -> list[FrameRecord]:
    """Classify, mask, and regress every frame; never read the stream's poses."""
    records = []
    for k in range(len(stream)):
        square = letterbox_square(stream.frame(k))
        cls_in = torch.from_numpy(replicate_channels(resize_image(square, seg_input_px))).unsqueeze(0)
        prob = float(segnet.predict_brain_prob(cls_in)[0])
        rec = FrameRecord(
            index=k,
            timestamp_s=float(stream.timestamps_s[k]),
            brain_prob=prob,
            is_brain=prob >= threshold,
            has_pose=False,
        )
        if not rec.is_brain:
            rec.note = "not brain"
            records.append(rec)
            continue
        try:
            inp = prepare_pose_input(
                square, pose_input_px, masks, dilation_px,
                segnet=segnet, seg_input_px=seg_input_px, threshold=threshold,
            )
            out = posenet(torch.from_numpy(inp).unsqueeze(0))
            t = out[0, :3].numpy()
            r = rot6d_to_matrix_t(out[0, 3:]).numpy()
            rec.pose = Pose6D(t, matrix_to_rotvec(r))
            rec.trans_mm, rec.rot_deg = proximity(rec.pose, target)
            rec.has_pose = True
        except Exception as err:  # one bad frame must not end the sweep
            rec.note = f"pose failed: {type(err).__name__}: {err}"
        records.append(rec)
    return records


def emit_trace(records: Sequence[FrameRecord], out_dir: Path, events: Sequence[dict] = ()) -> None:
    """Write trace.csv, records.jsonl, events.json, and trace.png."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    lines = ["timestamp,brain_prob,trans_mm,rot_deg"]
    for rec in records:
        trans = "" if rec.trans_mm is None else FLOAT_FMT % rec.trans_mm
        rot = "" if rec.rot_deg is None else FLOAT_FMT % rec.rot_deg
        lines.append(f"{FLOAT_FMT % rec.timestamp_s},{FLOAT_FMT % rec.brain_prob},{trans},{rot}")
    (out_dir / "trace.csv").write_text("\n".join(lines) + "\n")

    with open(out_dir / "records.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")

    (out_dir / "events.json").write_text(
        json.dumps({"events": list(events)}, sort_keys=True, indent=2) + "\n"
    )

    nan = float("nan")
    plot_trace(
        [r.timestamp_s for r in records],
        [r.brain_prob for r in records],
        [nan if r.trans_mm is None else r.trans_mm for r in records],
        [nan if r.rot_deg is None else r.rot_deg for r in records],
        out_dir / "trace.png",
        events=events,
    )
