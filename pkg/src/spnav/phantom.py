"""Procedural phantom volumes standing in for clinical ultrasound data.

A phantom family shares one canonical anatomy: a bright-rimmed brain
ellipsoid containing dark ventricle-like structures whose centroids
define the canonical target plane, an off-plane posterior blob that
breaks mirror symmetry, and several brain-like distractor blobs outside
the skull. Each member is rendered with its own rigid placement of the
brain inside the acquisition grid and then resampled into a shared
brain-centered frame, the way multi-subject studies register every scan
to an atlas before pairing them. Anatomy therefore lines up across
members while everything outside the skull is deliberately unreliable:
distractors are re-placed at random per member (many with skull-like
rims and dark cores, so they imitate the brain), the background level
varies per member like a gain setting, and the zero padding beyond the
acquisition boundary lands member-specifically. A model that leans on
background layout learns cues that do not transfer across members.

The same machinery renders the labeled corpus, drawing near-target-plane
brain images and brain-free images from a separate set of single-subject
phantoms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import LabeledSample
from .geometry import PlaneAnnotation, Pose6D, compose_poses, matrix_to_rotvec, rotvec_to_matrix
from .volume import BrainRegion, PoseBounds, Volume, extract_slice, register_brain_frame, sample_pose


@dataclass(frozen=True)
class PhantomSpec:
    """Knobs for one phantom family."""

    seed: int = 0
    dims: tuple[int, int, int] = (112, 112, 112)
    spacing_mm: float = 1.0
    brain_semi_axes_mm: tuple[float, float, float] = (34.0, 27.0, 22.0)
    # dark coplanar structures that define the target plane
    n_structures: int = 3
    structure_size_mm: tuple[float, float] = (2.5, 11.0)
    structure_contrast: tuple[float, float] = (0.10, 0.18)
    speckle_sigma: float = 0.12
    # rigid placement of the brain inside each member's acquisition grid;
    # registration undoes it, so only its footprint on the background remains.
    # The translation is capped at render time so the skull clears the edge.
    jitter_trans_mm: float = 10.0
    jitter_rot_rad: float = 0.35
    # brain-like blobs outside the skull, re-jittered per subject
    n_distractors: int = 5
    distractor_semi_mm: tuple[float, float] = (7.0, 13.0)
    distractor_jitter_mm: float = 8.0
    volume_id_prefix: str = "phantom"

    def __post_init__(self):
        half_extent = (min(self.dims) - 1) * self.spacing_mm / 2.0
        if max(self.brain_semi_axes_mm) + 6.0 > half_extent:
            raise ValueError(
                f"brain semi-axes {self.brain_semi_axes_mm} do not fit inside the "
                f"volume half-extent {half_extent:.1f} mm"
            )
        if self.n_structures < 3:
            raise ValueError("need at least three internal structures to pin the target plane")
        if self.speckle_sigma < 0:
            raise ValueError("speckle sigma must be non-negative")


@dataclass(frozen=True)
class _Ellipsoid:
    center: np.ndarray
    semi: np.ndarray
    rot: np.ndarray  # 3x3
    value: float


def _ellipsoid_rho(points: np.ndarray, e: _Ellipsoid) -> np.ndarray:
    local = (points - e.center) @ e.rot
    return np.sqrt(np.square(local / e.semi).sum(axis=-1))


@dataclass
class _CanonicalAnatomy:
    """Family-level layout drawn once from the family seed."""

    tilt: np.ndarray  # rotvec of the whole brain relative to the grid
    structures: list[tuple[np.ndarray, np.ndarray, float, float]]  # center, semi, spin_deg, value
    posterior_center: np.ndarray
    posterior_semi: np.ndarray


def _draw_canonical(spec: PhantomSpec, rng: np.random.Generator) -> _CanonicalAnatomy:
    tilt = rng.normal(size=3)
    tilt = tilt / np.linalg.norm(tilt) * rng.uniform(0.04, 0.09)

    lo, hi = spec.structure_size_mm
    c_lo, c_hi = spec.structure_contrast
    structures = []
    # two ventricle-like slabs flanking the midline; the left one is thicker,
    # which breaks the y-mirror symmetry
    for side, thick in ((+1.0, 1.15), (-1.0, 0.85)):
        center = np.array([-2.0 + rng.uniform(-1, 1), side * 8.0 + rng.uniform(-0.8, 0.8), 0.0])
        semi = np.array([hi, 0.30 * hi * thick, 0.26 * hi])
        structures.append((center, semi, side * rng.uniform(4, 10), rng.uniform(c_lo, c_hi)))
    # small round cavum-like structure anterior on the midline
    center = np.array([9.0 + rng.uniform(-1, 1), rng.uniform(-0.5, 0.5), 0.0])
    structures.append((center, np.full(3, lo + 0.6), 0.0, rng.uniform(c_lo, c_hi)))
    # extras stay on the canonical plane so its definition survives
    for k in range(spec.n_structures - 3):
        ang = rng.uniform(0, 2 * math.pi)
        rad = rng.uniform(10, 16)
        center = np.array([rad * math.cos(ang), rad * math.sin(ang), 0.0])
        structures.append((center, np.full(3, rng.uniform(lo, 0.4 * hi)), 0.0, rng.uniform(c_lo, c_hi)))
    structures = structures[: max(spec.n_structures, 3)]

    posterior_center = np.array([-14.0, 0.0, -9.0]) + rng.uniform(-1, 1, size=3)
    posterior_semi = np.array([9.0, 7.0, 5.0])
    return _CanonicalAnatomy(tilt, structures, posterior_center, posterior_semi)


def _world_grid(dims, spacing) -> np.ndarray:
    center = (np.asarray(dims, dtype=np.float64) - 1.0) / 2.0
    axes = [
        ((np.arange(n, dtype=np.float32) - c) * spacing).astype(np.float32)
        for n, c in zip(dims, center)
    ]
    xx, yy, zz = np.meshgrid(*axes, indexing="ij")
    return np.stack([xx, yy, zz], axis=-1)


def _spin_matrix(deg: float) -> np.ndarray:
    return rotvec_to_matrix(np.array([0.0, 0.0, math.radians(deg)]))


def _render_member(
    spec: PhantomSpec,
    canon: _CanonicalAnatomy,
    member_rng: np.random.Generator,
    volume_id: str,
    debug: Optional[dict] = None,
) -> Volume:
    # rigid brain placement and small shape jitter
    half_extent = (min(spec.dims) - 1) * spec.spacing_mm / 2.0
    skull_reach = 1.06 * max(spec.brain_semi_axes_mm) * 1.005
    trans_cap = min(
        spec.jitter_trans_mm,
        max(half_extent - skull_reach - 2.0, 0.0) / math.sqrt(3.0),
    )
    jit_r = member_rng.normal(size=3)
    jit_r = jit_r / np.linalg.norm(jit_r) * member_rng.uniform(0, spec.jitter_rot_rad)
    jit_t = member_rng.uniform(-trans_cap, trans_cap, size=3)
    r_brain = rotvec_to_matrix(jit_r) @ rotvec_to_matrix(canon.tilt)
    semi = np.asarray(spec.brain_semi_axes_mm) * member_rng.uniform(0.995, 1.005, size=3)

    pts = _world_grid(spec.dims, spec.spacing_mm)
    # background level plays the role of a per-acquisition gain setting
    img = np.full(spec.dims, member_rng.uniform(0.24, 0.40), dtype=np.float32)

    brain = _Ellipsoid(jit_t, semi, r_brain, 0.62)
    rho = _ellipsoid_rho(pts, brain)
    img[rho < 0.94] = 0.62
    img[(rho >= 0.94) & (rho <= 1.06)] = 0.88  # skull-like bright rim

    # midline echo inside the brain
    local = (pts - jit_t) @ r_brain
    falx = (np.abs(local[..., 1]) < 0.7) & (rho < 0.90)
    img[falx] = 0.85

    # dark coplanar structures (jittered in-plane only, so they stay coplanar)
    centroids = []
    for center, s_semi, spin_deg, value in canon.structures:
        c = center + np.concatenate([member_rng.uniform(-0.6, 0.6, size=2), [0.0]])
        s = s_semi * member_rng.uniform(0.96, 1.04)
        e = _Ellipsoid(r_brain @ c + jit_t, s, r_brain @ _spin_matrix(spin_deg), value)
        img[_ellipsoid_rho(pts, e) <= 1.0] = value
        centroids.append(c)

    post = _Ellipsoid(
        r_brain @ canon.posterior_center + jit_t,
        canon.posterior_semi * member_rng.uniform(0.95, 1.05),
        r_brain,
        0.40,
    )
    img[_ellipsoid_rho(pts, post) <= 1.0] = 0.40

    # distractors: brain imitations outside the skull, placed at random per
    # member so their layout never transfers across members
    for _ in range(spec.n_distractors):
        direction = member_rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        base_dist = max(semi) * 1.35
        pos = direction * base_dist + member_rng.uniform(
            -spec.distractor_jitter_mm, spec.distractor_jitter_mm, size=3
        )
        d_semi = member_rng.uniform(*spec.distractor_semi_mm, size=3) * np.array([1.0, 0.8, 0.7])
        # keep it clear of the skull and inside the volume
        u = (pos - jit_t) @ r_brain
        rho_pos = np.sqrt(np.square(u / semi).sum())
        min_rho = 1.0 + (np.max(d_semi) + 3.0) / np.min(semi)
        if rho_pos < min_rho:
            pos = jit_t + (pos - jit_t) * (min_rho / max(rho_pos, 1e-6))
        pos = np.clip(pos, -(half_extent - np.max(d_semi) - 2.0), half_extent - np.max(d_semi) - 2.0)
        spin = member_rng.normal(size=3)
        spin = spin / np.linalg.norm(spin) * member_rng.uniform(0, math.pi)
        d = _Ellipsoid(pos, d_semi, rotvec_to_matrix(spin), member_rng.uniform(0.55, 0.85))
        rho_d = _ellipsoid_rho(pts, d)
        img[rho_d <= 1.0] = d.value
        if member_rng.uniform() < 0.6:
            img[(rho_d >= 0.94) & (rho_d <= 1.06)] = 0.88  # skull-like rim
        if member_rng.uniform() < 0.5:
            img[rho_d <= 0.45] = member_rng.uniform(0.12, 0.22)

    # multiplicative speckle, unique per member, mildly correlated
    if spec.speckle_sigma > 0:
        noise = member_rng.standard_normal(spec.dims).astype(np.float32)
        noise = gaussian_filter(noise, sigma=0.8)
        noise /= max(float(noise.std()), 1e-8)
        img = img * (1.0 + spec.speckle_sigma * noise)
    gain = member_rng.uniform(0.96, 1.04)
    img = np.clip(img * gain + member_rng.uniform(-0.02, 0.02), 0.0, 1.0).astype(np.float32)

    region = BrainRegion(center_mm=jit_t, semi_axes_mm=semi, rotvec=matrix_to_rotvec(r_brain))
    p_bar = np.mean(np.asarray(centroids), axis=0)
    ann_pose = Pose6D(r_brain @ p_bar + jit_t, matrix_to_rotvec(r_brain))
    if debug is not None:
        debug["structure_centroids_world"] = [r_brain @ c + jit_t for c in centroids]
    annotation = PlaneAnnotation(volume_id=volume_id, pose=ann_pose, label="TV")
    return Volume(
        voxels=img,
        spacing_mm=spec.spacing_mm,
        volume_id=volume_id,
        brain_region=region,
        annotation=annotation,
    )


def generate_phantom_family(spec: PhantomSpec, n: int) -> list[Volume]:
    """Generate ``n`` registered members of one phantom family."""
    if n < 2:
        raise ValueError(f"a family needs at least 2 members, got {n}")
    seq = np.random.SeedSequence(spec.seed)
    family_rng = np.random.default_rng(seq.spawn(1)[0])
    canon = _draw_canonical(spec, family_rng)
    member_seqs = np.random.SeedSequence(spec.seed + 1).spawn(n)
    return [
        register_brain_frame(
            _render_member(spec, canon, np.random.default_rng(member_seqs[i]), f"{spec.volume_id_prefix}{i:02d}")
        )
        for i in range(n)
    ]


def generate_single_phantom(spec: PhantomSpec, volume_id: str) -> Volume:
    """One standalone registered subject (used for the labeled corpus)."""
    seq = np.random.SeedSequence(spec.seed)
    family_rng = np.random.default_rng(seq.spawn(1)[0])
    canon = _draw_canonical(spec, family_rng)
    member_rng = np.random.default_rng(np.random.SeedSequence(spec.seed + 1).spawn(1)[0])
    return register_brain_frame(_render_member(spec, canon, member_rng, volume_id))


@dataclass(frozen=True)
class LabeledCorpusConfig:
    """How to draw the labeled image corpus from standalone phantoms."""

    seed: int = 100
    n_total: int = 346
    n_brain: int = 135
    n_subjects: int = 8
    image_px: int = 128
    pixel_spacing_mm: float = 1.0
    near_sp_offset_mm: float = 5.0
    near_sp_angle_rad: float = 0.12
    black_frame_frac: float = 0.08
    base_spec: PhantomSpec = field(default_factory=PhantomSpec)


def _near_sp_pose(ann: Pose6D, rng: np.random.Generator, cfg: LabeledCorpusConfig) -> Pose6D:
    dt = rng.uniform(-cfg.near_sp_offset_mm, cfg.near_sp_offset_mm, size=3)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    dr = axis * rng.uniform(0, cfg.near_sp_angle_rad)
    r = rotvec_to_matrix(ann.r) @ rotvec_to_matrix(dr)
    return Pose6D(ann.t + dt, matrix_to_rotvec(r))


def _away_pose(volume: Volume, rng: np.random.Generator) -> Pose6D:
    assert volume.brain_region is not None
    semi_max = float(np.max(volume.brain_region.semi_axes_mm))
    half = float(np.min(volume.extent_mm)) / 2.0
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    t = direction * rng.uniform(semi_max + 5.0, max(half - 4.0, semi_max + 8.0))
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return Pose6D(t, axis * rng.uniform(0, math.pi / 4))


def generate_labeled_corpus(cfg: LabeledCorpusConfig) -> list[LabeledSample]:
    """Brain images near each subject's target plane plus brain-free images.

    Brain-free images come from planes that miss the brain entirely
    (distractors and background only); a small fraction are blank frames
    so the classifier sees the no-signal case.
    """
    if cfg.n_brain >= cfg.n_total:
        raise ValueError("corpus needs non-brain images")
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    subjects = []
    for s in range(cfg.n_subjects):
        scale = rng.uniform(0.92, 1.08, size=3)
        spec = replace(
            cfg.base_spec,
            seed=cfg.seed * 1000 + 17 * s,
            brain_semi_axes_mm=tuple(np.asarray(cfg.base_spec.brain_semi_axes_mm) * scale),
            speckle_sigma=cfg.base_spec.speckle_sigma * rng.uniform(0.8, 1.2),
            volume_id_prefix=f"labeled_src{s:02d}_",
        )
        subjects.append(generate_single_phantom(spec, f"labeled_src{s:02d}"))

    out_px = (cfg.image_px, cfg.image_px)
    samples: list[LabeledSample] = []
    for i in range(cfg.n_brain):
        vol = subjects[i % len(subjects)]
        for _ in range(50):
            pose = _near_sp_pose(vol.annotation.pose, rng, cfg)
            s = extract_slice(vol, pose, out_px, cfg.pixel_spacing_mm)
            if s.gt_mask.mean() >= 0.08:
                break
        samples.append(
            LabeledSample(
                name=f"brain_{i:04d}",
                image=s.image,
                mask=s.gt_mask.astype(np.uint8),
                class_label="brain",
            )
        )

    n_non = cfg.n_total - cfg.n_brain
    n_black = int(round(cfg.black_frame_frac * n_non))
    for i in range(n_non):
        if i < n_black:
            image = np.zeros(out_px, dtype=np.float32)
        else:
            vol = subjects[i % len(subjects)]
            for _ in range(200):
                pose = _away_pose(vol, rng)
                s = extract_slice(vol, pose, out_px, cfg.pixel_spacing_mm)
                if s.gt_mask.sum() == 0:
                    break
            else:
                raise RuntimeError("could not sample a brain-free plane")
            image = s.image
        samples.append(
            LabeledSample(
                name=f"nonbrain_{i:04d}",
                image=image,
                mask=np.zeros(out_px, dtype=np.uint8),
                class_label="not_brain",
            )
        )
    return samples
