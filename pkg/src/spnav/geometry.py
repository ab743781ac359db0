"""Pose and rotation math for plane navigation.

Conventions used throughout the project:

- A plane pose is a translation ``t`` in millimeters plus a rotation
  vector ``r`` (axis-angle, radians), both expressed in the
  volume-centered frame.
- The imaging plane is the local z=0 plane of the pose; its normal is
  the rotated +z axis and its origin is ``t``.
- Rotation vectors are canonicalized to ``||r|| <= pi`` on ingest.
  Ties at exactly pi pick the lexicographically larger of the two
  equivalent vectors.
- Planes are unoriented: a plane flipped by 180 degrees images the same
  anatomy, so angular proximity is folded into [0, 90] degrees.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ORTHO_TOL = 1e-6
DEGENERATE_TOL = 1e-8


class GeometryError(ValueError):
    """Invalid geometric input."""


class DegenerateRotationError(GeometryError):
    """Six-parameter rotation input that cannot be orthonormalized."""


def _as_vec3(x, name: str) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    if v.shape != (3,):
        raise GeometryError(f"{name} must be a 3-vector, got shape {np.asarray(x).shape}")
    if not np.all(np.isfinite(v)):
        raise GeometryError(f"{name} has non-finite components: {v}")
    return v


def canonical_rotvec(r) -> np.ndarray:
    """Reduce a rotation vector to the canonical range ``||r|| <= pi``."""
    r = _as_vec3(r, "rotation vector")
    angle = float(np.linalg.norm(r))
    if angle < 1e-300:
        return np.zeros(3)
    axis = r / angle
    angle = math.fmod(angle, 2.0 * math.pi)
    if angle > math.pi:
        angle -= 2.0 * math.pi  # negative: flips the axis below
    r = axis * angle
    if abs(abs(angle) - math.pi) < 1e-12:
        # r and -r encode the same rotation; pick the lexicographically larger one
        neg = -r
        if tuple(neg) > tuple(r):
            r = neg
    return r


@dataclass(frozen=True)
class Pose6D:
    """Plane pose: translation (mm) and canonical rotation vector (rad)."""

    t: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "t", _as_vec3(self.t, "translation"))
        object.__setattr__(self, "r", canonical_rotvec(self.r))

    @classmethod
    def identity(cls) -> "Pose6D":
        return cls(np.zeros(3), np.zeros(3))

    def rotation_matrix(self) -> np.ndarray:
        return rotvec_to_matrix(self.r)

    def to_dict(self) -> dict:
        return {"t_mm": self.t.tolist(), "rotvec_rad": self.r.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose6D":
        return cls(np.asarray(d["t_mm"]), np.asarray(d["rotvec_rad"]))


@dataclass(frozen=True)
class Rot6D:
    """Raw six-parameter rotation: two 3-vectors prior to orthonormalization."""

    a1: np.ndarray
    a2: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "a1", _as_vec3(self.a1, "a1"))
        object.__setattr__(self, "a2", _as_vec3(self.a2, "a2"))

    @classmethod
    def from_params(cls, params) -> "Rot6D":
        p = np.asarray(params, dtype=np.float64).reshape(-1)
        if p.shape != (6,):
            raise GeometryError(f"expected 6 parameters, got shape {p.shape}")
        return cls(p[:3], p[3:])

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Rot6D":
        m = validate_rotation_matrix(m)
        return cls(m[:, 0].copy(), m[:, 1].copy())


@dataclass(frozen=True)
class PlaneAnnotation:
    """Canonical target standard-plane pose for one volume."""

    volume_id: str
    pose: Pose6D
    label: str = "TV"

    def to_dict(self) -> dict:
        return {
            "volume_id": self.volume_id,
            "label": self.label,
            "t_mm": self.pose.t.tolist(),
            "rotvec_rad": self.pose.r.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlaneAnnotation":
        return cls(
            volume_id=d["volume_id"],
            pose=Pose6D(np.asarray(d["t_mm"]), np.asarray(d["rotvec_rad"])),
            label=d.get("label", "TV"),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "PlaneAnnotation":
        return cls.from_dict(json.loads(Path(path).read_text()))


def validate_rotation_matrix(m, tol: float = ORTHO_TOL) -> np.ndarray:
    """Check orthonormality and det=+1; returns the matrix as float64."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise GeometryError(f"rotation matrix must be 3x3, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise GeometryError("rotation matrix has non-finite entries")
    err = np.abs(m.T @ m - np.eye(3)).max()
    if err > tol:
        raise GeometryError(f"matrix is not orthonormal (max |R^T R - I| = {err:.3g})")
    det = float(np.linalg.det(m))
    if abs(det - 1.0) > tol:
        raise GeometryError(f"matrix determinant is {det:.6f}, not +1")
    return m


def rot6d_to_matrix(g: Rot6D) -> np.ndarray:
    """Orthonormalize two 3-vectors into a rotation matrix (Gram-Schmidt).

    Columns are b1 = a1/||a1||, b2 = the unit residual of a2 against b1,
    and b3 = b1 x b2. Invariant under positive rescaling of a1 and a2.
    """
    a1, a2 = g.a1, g.a2
    n1 = np.linalg.norm(a1)
    if n1 < DEGENERATE_TOL:
        raise DegenerateRotationError(f"a1 is (near-)zero: |a1| = {n1:.3g}")
    b1 = a1 / n1
    residual = a2 - np.dot(b1, a2) * b1
    n2 = np.linalg.norm(residual)
    if n2 < DEGENERATE_TOL * max(1.0, np.linalg.norm(a2)):
        raise DegenerateRotationError("a2 is (near-)parallel to a1")
    b2 = residual / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=1)


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def rotvec_to_matrix(r) -> np.ndarray:
    """Rotation vector to matrix via the exponential map (Rodrigues)."""
    r = _as_vec3(r, "rotation vector")
    angle = float(np.linalg.norm(r))
    if angle < 1e-8:
        k = _skew(r)
        return np.eye(3) + k + 0.5 * (k @ k)
    axis = r / angle
    k = _skew(axis)
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def matrix_to_rotvec(m) -> np.ndarray:
    """Matrix to canonical rotation vector (angle in [0, pi])."""
    m = validate_rotation_matrix(m)
    w = 0.5 * np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
    s = float(np.linalg.norm(w))  # sin(angle)
    c = float(np.clip((np.trace(m) - 1.0) / 2.0, -1.0, 1.0))  # cos(angle)
    angle = math.atan2(s, c)
    if angle < 1e-7:
        return w  # w = axis*sin(angle) ~ axis*angle to O(angle^3)
    if angle < math.pi - 1e-4:
        return (angle / s) * w
    # Near pi the skew part vanishes; recover the axis from (R + I)/2 = a a^T + O(pi - angle)
    b = (m + np.eye(3)) / 2.0
    axis = np.sqrt(np.clip(np.diag(b), 0.0, None))
    k = int(np.argmax(axis))
    signs = np.sign(b[k, :])
    signs[signs == 0.0] = 1.0
    axis = axis * signs * (1.0 if signs[k] >= 0 else -1.0)
    norm = np.linalg.norm(axis)
    if norm == 0.0:
        raise GeometryError("cannot recover rotation axis")
    axis = axis / norm
    if s > 1e-12 and np.dot(axis, w) < 0:
        axis = -axis
    return canonical_rotvec(axis * angle)


def plane_normal(pose: Pose6D) -> np.ndarray:
    """Unit normal of the pose's imaging plane (the rotated +z axis)."""
    n = pose.rotation_matrix()[:, 2]
    return n / np.linalg.norm(n)


def normal_angle_deg(a: Pose6D, b: Pose6D, fold: bool = True) -> float:
    """Angle between the two plane normals, in degrees.

    Folded (default) the angle lands in [0, 90]: min(alpha, 180 - alpha),
    since an ultrasound plane flipped by 180 degrees shows the same
    anatomy. Unfolded it is the raw arccos in [0, 180].
    """
    na, nb = plane_normal(a), plane_normal(b)
    d = float(np.clip(np.dot(na, nb), -1.0, 1.0))
    if fold:
        d = abs(d)
    return math.degrees(math.acos(d))


def geodesic_angle_deg(a: Pose6D, b: Pose6D) -> float:
    """Full rotation distance between the two poses, in degrees."""
    ra, rb = a.rotation_matrix(), b.rotation_matrix()
    c = np.clip((np.trace(ra.T @ rb) - 1.0) / 2.0, -1.0, 1.0)
    return math.degrees(math.acos(float(c)))


def proximity(pred: Pose6D, sp) -> tuple[float, float]:
    """Proximity of a predicted plane to a target standard plane.

    Returns ``(trans_mm, rot_deg)``: the euclidean distance between the
    plane origins and the folded angle between the plane normals.
    In-plane rotation does not move the normal, so it never contributes.
    """
    sp_pose = sp.pose if isinstance(sp, PlaneAnnotation) else sp
    trans = float(np.linalg.norm(pred.t - sp_pose.t))
    return trans, normal_angle_deg(pred, sp_pose, fold=True)


def compose_poses(outer: Pose6D, inner: Pose6D) -> Pose6D:
    """Rigid composition: apply ``inner`` first, then ``outer``."""
    ro = outer.rotation_matrix()
    r = ro @ inner.rotation_matrix()
    t = ro @ inner.t + outer.t
    return Pose6D(t, matrix_to_rotvec(r))
