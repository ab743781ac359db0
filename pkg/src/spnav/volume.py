"""3D volume container, oblique slicing, and bounded random pose sampling.

The volume frame is centered on the grid: world (0,0,0) mm sits at voxel
index ((nx-1)/2, (ny-1)/2, (nz-1)/2) and axes follow the voxel axes.
Sampling outside the grid reads 0, matching the black background of an
ultrasound fan; interpolation zero-pads so the field stays continuous
across the boundary.

On disk a volume is a raw little-endian float32 file (x-fastest order)
plus a JSON sidecar carrying dims, spacing, ids, and the optional
analytic brain region / standard-plane annotation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import PlaneAnnotation, Pose6D, compose_poses, matrix_to_rotvec, rotvec_to_matrix


@dataclass(frozen=True)
class BrainRegion:
    """Analytic brain indicator: a rotated ellipsoid in the volume frame."""

    center_mm: np.ndarray
    semi_axes_mm: np.ndarray
    rotvec: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center_mm", np.asarray(self.center_mm, dtype=np.float64))
        object.__setattr__(self, "semi_axes_mm", np.asarray(self.semi_axes_mm, dtype=np.float64))
        object.__setattr__(self, "rotvec", np.asarray(self.rotvec, dtype=np.float64))

    def contains(self, points_mm: np.ndarray) -> np.ndarray:
        """Indicator over an (..., 3) array of world points."""
        pts = np.asarray(points_mm, dtype=np.float64)
        r = rotvec_to_matrix(self.rotvec)
        local = (pts - self.center_mm) @ r  # R^T (p - c), row-vector form
        q = np.square(local / self.semi_axes_mm).sum(axis=-1)
        return q <= 1.0

    def to_dict(self) -> dict:
        return {
            "center_mm": self.center_mm.tolist(),
            "semi_axes_mm": self.semi_axes_mm.tolist(),
            "rotvec": self.rotvec.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BrainRegion":
        return cls(np.asarray(d["center_mm"]), np.asarray(d["semi_axes_mm"]), np.asarray(d["rotvec"]))


@dataclass
class Volume:
    """Isotropic scalar grid with metadata, indexed voxels[x, y, z]."""

    voxels: np.ndarray
    spacing_mm: float
    volume_id: str
    brain_region: Optional[BrainRegion] = None
    annotation: Optional[PlaneAnnotation] = None

    def __post_init__(self):
        if self.voxels.ndim != 3:
            raise ValueError(f"voxels must be 3D, got shape {self.voxels.shape}")
        if self.spacing_mm <= 0:
            raise ValueError(f"spacing must be positive, got {self.spacing_mm}")
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.float32)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape

    @property
    def center_index(self) -> np.ndarray:
        return (np.asarray(self.dims, dtype=np.float64) - 1.0) / 2.0

    @property
    def extent_mm(self) -> np.ndarray:
        """Full physical size along each axis."""
        return (np.asarray(self.dims, dtype=np.float64) - 1.0) * self.spacing_mm

    def world_to_index(self, points_mm: np.ndarray) -> np.ndarray:
        return np.asarray(points_mm, dtype=np.float64) / self.spacing_mm + self.center_index

    def save(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        raw_path = out_dir / f"{self.volume_id}.raw"
        # x-fastest on disk: iterate z, then y, then x
        self.voxels.transpose(2, 1, 0).astype("<f4").tofile(raw_path)
        meta = {
            "dims": list(self.dims),
            "spacing_mm": self.spacing_mm,
            "volume_id": self.volume_id,
            "brain_region": self.brain_region.to_dict() if self.brain_region else None,
            "annotation": self.annotation.to_dict() if self.annotation else None,
        }
        (out_dir / f"{self.volume_id}.json").write_text(json.dumps(meta, indent=2))
        return raw_path

    @classmethod
    def load(cls, json_path) -> "Volume":
        json_path = Path(json_path)
        meta = json.loads(json_path.read_text())
        nx, ny, nz = meta["dims"]
        raw = np.fromfile(json_path.with_suffix(".raw"), dtype="<f4")
        if raw.size != nx * ny * nz:
            raise ValueError(f"raw file size {raw.size} does not match dims {meta['dims']}")
        voxels = raw.reshape(nz, ny, nx).transpose(2, 1, 0)
        return cls(
            voxels=voxels,
            spacing_mm=float(meta["spacing_mm"]),
            volume_id=meta["volume_id"],
            brain_region=BrainRegion.from_dict(meta["brain_region"]) if meta.get("brain_region") else None,
            annotation=PlaneAnnotation.from_dict(meta["annotation"]) if meta.get("annotation") else None,
        )


def load_volume_dir(volumes_dir) -> dict[str, Volume]:
    """Load every volume sidecar in a directory, keyed by volume id."""
    volumes = {}
    for path in sorted(Path(volumes_dir).glob("*.json")):
        v = Volume.load(path)
        volumes[v.volume_id] = v
    return volumes


def trilinear_sample_many(volume: Volume, points_mm: np.ndarray) -> np.ndarray:
    """Trilinear interpolation at (..., 3) world points, zero-padded."""
    pts = np.asarray(points_mm, dtype=np.float64)
    shape = pts.shape[:-1]
    g = volume.world_to_index(pts).reshape(-1, 3)
    nx, ny, nz = volume.dims
    g0 = np.floor(g).astype(np.int64)
    f = g - g0

    values = np.zeros(g.shape[0], dtype=np.float64)
    vox = volume.voxels
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                ix, iy, iz = g0[:, 0] + dx, g0[:, 1] + dy, g0[:, 2] + dz
                inside = (
                    (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny) & (iz >= 0) & (iz < nz)
                )
                w = (
                    (f[:, 0] if dx else 1.0 - f[:, 0])
                    * (f[:, 1] if dy else 1.0 - f[:, 1])
                    * (f[:, 2] if dz else 1.0 - f[:, 2])
                )
                if np.any(inside):
                    values[inside] += w[inside] * vox[ix[inside], iy[inside], iz[inside]]
    return values.reshape(shape)


def trilinear_sample(volume: Volume, p_mm) -> float:
    """Interpolated value at one world point; 0 outside the grid."""
    return float(trilinear_sample_many(volume, np.asarray(p_mm, dtype=np.float64).reshape(1, 3))[0])


@dataclass
class SliceSample:
    """A 2D section extracted from a volume at a known pose."""

    image: np.ndarray
    pose: Pose6D
    volume_id: str
    pixel_spacing_mm: float
    gt_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.gt_mask is not None and self.gt_mask.shape != self.image.shape:
            raise ValueError(
                f"mask shape {self.gt_mask.shape} does not match image {self.image.shape}"
            )


def slice_grid_mm(pose: Pose6D, out_px: tuple[int, int], pixel_spacing_mm: float) -> np.ndarray:
    """World coordinates (H, W, 3) of each pixel center of a slice plane.

    Pixel (i, j) maps to the in-plane point (x, y) = ((j - (W-1)/2) s,
    (i - (H-1)/2) s) and then to R (x, y, 0) + t.
    """
    h, w = out_px
    if h <= 0 or w <= 0:
        raise ValueError(f"output size must be positive, got {out_px}")
    if pixel_spacing_mm <= 0:
        raise ValueError(f"pixel spacing must be positive, got {pixel_spacing_mm}")
    ys = (np.arange(h, dtype=np.float64) - (h - 1) / 2.0) * pixel_spacing_mm
    xs = (np.arange(w, dtype=np.float64) - (w - 1) / 2.0) * pixel_spacing_mm
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    plane = np.stack([xx, yy, np.zeros_like(xx)], axis=-1)
    r = pose.rotation_matrix()
    return plane @ r.T + pose.t


def extract_slice(
    volume: Volume,
    pose: Pose6D,
    out_px: tuple[int, int],
    pixel_spacing_mm: Optional[float] = None,
) -> SliceSample:
    """Sample an oblique slice; defaults to the volume's own spacing.

    When the volume carries an analytic brain region, the ground-truth
    mask is that region's indicator evaluated at the same 3D points.
    """
    spacing = volume.spacing_mm if pixel_spacing_mm is None else pixel_spacing_mm
    pts = slice_grid_mm(pose, out_px, spacing)
    image = trilinear_sample_many(volume, pts).astype(np.float32)
    mask = None
    if volume.brain_region is not None:
        mask = volume.brain_region.contains(pts).astype(np.uint8)
    return SliceSample(
        image=image,
        pose=pose,
        volume_id=volume.volume_id,
        pixel_spacing_mm=spacing,
        gt_mask=mask,
    )


@dataclass(frozen=True)
class PoseBounds:
    """Sampling range for random plane poses around the volume center."""

    max_offset_mm: float = 20.0
    max_angle_rad: float = np.pi / 4

    def __post_init__(self):
        if self.max_offset_mm < 0 or self.max_angle_rad < 0:
            raise ValueError("bounds must be non-negative")


def sample_pose(rng: np.random.Generator, bounds: PoseBounds) -> Pose6D:
    """Uniform offset in the centered box, uniform axis, uniform angle."""
    t = rng.uniform(-bounds.max_offset_mm, bounds.max_offset_mm, size=3) if bounds.max_offset_mm > 0 else np.zeros(3)
    angle = rng.uniform(0.0, bounds.max_angle_rad) if bounds.max_angle_rad > 0 else 0.0
    axis = rng.normal(size=3)
    n = np.linalg.norm(axis)
    while n < 1e-12:
        axis = rng.normal(size=3)
        n = np.linalg.norm(axis)
    return Pose6D(t, axis / n * angle)


def transform_volume(volume: Volume, pose: Pose6D) -> Volume:
    """Resample the volume through a rigid map: V'(p) = V(R p + t).

    Slicing V' at pose q then equals slicing V at the composition of
    (R, t) with q, which is the property the tests lean on.
    """
    r = pose.rotation_matrix()
    nx, ny, nz = volume.dims
    idx = np.stack(
        np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"), axis=-1
    ).astype(np.float64)
    world = (idx - volume.center_index) * volume.spacing_mm
    moved = world @ r.T + pose.t  # R p + t at each grid point
    vox = trilinear_sample_many(volume, moved).astype(np.float32)
    return Volume(
        voxels=vox,
        spacing_mm=volume.spacing_mm,
        volume_id=f"{volume.volume_id}_moved",
        brain_region=None,
        annotation=None,
    )


def register_brain_frame(volume: Volume) -> Volume:
    """Resample so the brain sits centered and axis-aligned in the grid.

    The usual multi-subject preprocessing step: after it the anatomy
    lines up across subjects, while everything else (clutter, the zero
    padding past the acquisition boundary) lands wherever that subject's
    placement happened to put it. The annotation is re-expressed in the
    registered frame.
    """
    region = volume.brain_region
    if region is None:
        raise ValueError("registration needs a brain region")
    placement = Pose6D(region.center_mm, region.rotvec)
    moved = transform_volume(volume, placement)
    r_inv = placement.rotation_matrix().T
    inverse = Pose6D(-(r_inv @ placement.t), matrix_to_rotvec(r_inv))
    annotation = None
    if volume.annotation is not None:
        annotation = PlaneAnnotation(
            volume_id=volume.volume_id,
            pose=compose_poses(inverse, volume.annotation.pose),
            label=volume.annotation.label,
        )
    return Volume(
        voxels=moved.voxels,
        spacing_mm=volume.spacing_mm,
        volume_id=volume.volume_id,
        brain_region=BrainRegion(
            center_mm=np.zeros(3),
            semi_axes_mm=np.asarray(region.semi_axes_mm, dtype=np.float64),
            rotvec=np.zeros(3),
        ),
        annotation=annotation,
    )
