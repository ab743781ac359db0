"""Shared miniature world for training and evaluation tests.

One phantom family, one labeled corpus, one pose-paired slice dataset,
and LOOCV folds, all small enough that training tests finish in
seconds. Session-scoped so every module reuses the same rendering.
"""

import numpy as np
import pytest

from spnav.data import make_folds, save_labeled_corpus, save_slice_dataset, split_labeled
from spnav.phantom import LabeledCorpusConfig, PhantomSpec, generate_labeled_corpus, generate_phantom_family
from spnav.profiles import DataProfile, PoseProfile, Profile, SegProfile, SegStage
from spnav.volume import PoseBounds

TINY_SPEC = PhantomSpec(
    seed=5,
    dims=(72, 72, 72),
    spacing_mm=1.0,
    brain_semi_axes_mm=(22.0, 18.0, 14.0),
    n_distractors=3,
    volume_id_prefix="vol",
)

TINY = Profile(
    name="tiny",
    data=DataProfile(
        dims=(72, 72, 72),
        spacing_mm=1.0,
        brain_semi_axes_mm=(22.0, 18.0, 14.0),
        n_volumes=6,
        slices_per_volume=12,
        slice_px=32,
        slice_spacing_mm=2.0,
        max_offset_mm=8.0,
        max_angle_rad=0.5,
        labeled_total=24,
        labeled_brain=10,
        labeled_subjects=2,
    ),
    seg=SegProfile(
        input_px=32,
        widths=(4, 8, 16, 32, 64),
        stages=(
            SegStage("s", epochs=2, lr=0.003, step_size=None),
            SegStage("ss", epochs=2, lr=0.008, step_size=1),
            SegStage("ssclass", epochs=2, lr=3e-5, step_size=None),
        ),
        batch_size=4,
    ),
    pose=PoseProfile(input_px=16, epochs=3, width=8, dilation_px=3, batch_size=8, lr=1e-3),
)


class World:
    def __init__(self, root):
        d = TINY.data
        self.root = root
        self.volumes = generate_phantom_family(TINY_SPEC, d.n_volumes)
        self.volume_ids = [v.volume_id for v in self.volumes]
        self.folds = make_folds(self.volume_ids)

        self.slice_root = root / "slices"
        save_slice_dataset(
            self.volumes,
            per_volume=d.slices_per_volume,
            seed=7,
            out_dir=self.slice_root,
            image_px=d.slice_px,
            pixel_spacing_mm=d.slice_spacing_mm,
            bounds=PoseBounds(max_offset_mm=d.max_offset_mm, max_angle_rad=d.max_angle_rad),
        )

        cfg = LabeledCorpusConfig(
            seed=11,
            n_total=d.labeled_total,
            n_brain=d.labeled_brain,
            n_subjects=d.labeled_subjects,
            image_px=d.slice_px,
            pixel_spacing_mm=d.slice_spacing_mm,
            base_spec=TINY_SPEC,
        )
        samples = split_labeled(generate_labeled_corpus(cfg), seed=11)
        self.corpus_dir = root / "corpus"
        save_labeled_corpus(samples, self.corpus_dir)
        self.n_train_labeled = sum(1 for s in samples if s.split == "train")

        self.volumes_dir = root / "volumes"
        for v in self.volumes:
            v.save(self.volumes_dir)


@pytest.fixture(scope="session")
def world(tmp_path_factory):
    return World(tmp_path_factory.mktemp("world"))


@pytest.fixture(scope="session")
def trained(world, tmp_path_factory):
    """All three segmentation stages plus both pose arms, one work dir."""
    from spnav.data import AugmentConfig
    from spnav.train_pose import PoseTrainer
    from spnav.train_seg import SegTrainer

    work = tmp_path_factory.mktemp("trained")
    fold = world.folds[0]
    seg = SegTrainer(
        TINY, world.corpus_dir, work, fold=fold, slice_root=world.slice_root,
        seed=0, augment=AugmentConfig.none(),
    )
    histories = {key: seg.train_stage(key) for key in ("s", "ss", "ssclass")}
    arms = {}
    for masks in ("none", "pred"):
        pt = PoseTrainer(
            TINY, fold, world.slice_root, work, seed=0, masks=masks,
            seg_checkpoint=work / "seg_ssclass.pt" if masks == "pred" else None,
        )
        arms[masks] = (pt, pt.train())
    return work, fold, histories, arms
