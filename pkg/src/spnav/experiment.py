"""One seeded run from phantom generation to the navigation trace.

The runner builds every asset a fold needs (volume family, labeled
corpus, shared-pose slice datasets, fold table), trains the staged
segmentation schedule and both pose arms on one fold, evaluates on the
held-out volumes, and drives a synthetic approach sweep through the
frame pipeline. Everything derives from one seed; two runs with the
same profile and seed write byte-identical metric CSVs.

Artifacts under ``out_dir``:

    volumes/            saved phantom volumes
    corpus/             labeled 2D corpus with split assignments
    slices/             shared-pose slice datasets, one dir per volume
    folds.json          the leave-one-out fold table
    work/               checkpoints, per-epoch CSVs, consumption.jsonl
    eval/               per-slice pose error CSVs + summary JSONs
    trace/              stream.npz, trace.csv/jsonl/png for the sweep
    figures/            loss curves and error histograms
    metrics.csv         flat metric,value table (the determinism target)
    summary.json        structured copy of the run's results
    audit.json          fold-hygiene audit over the consumption log
    timing.json         wall-clock per phase (excluded from determinism)
"""

from __future__ import annotations

import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from scipy.stats import rankdata, spearmanr

from .data import (
    audit_fold_hygiene,
    load_labeled_corpus,
    make_folds,
    save_folds,
    save_labeled_corpus,
    save_slice_dataset,
    split_labeled,
)
from .evaluate import (
    evaluate_labeled_miou,
    evaluate_pairwise_miou,
    evaluate_pose_errors,
    pose_error_summary,
    write_json,
    write_pose_rows_csv,
)
from .geometry import Pose6D, matrix_to_rotvec, rotvec_to_matrix
from .phantom import (
    LabeledCorpusConfig,
    PhantomSpec,
    generate_labeled_corpus,
    generate_phantom_family,
)
from .pipeline import emit_trace, extract_frames, oracle_proximities, run_pipeline, save_stream
from .profiles import Profile, config_hash
from .report import render_run_figures
from .train_pose import MASK_MODES, PoseTrainer, load_pose_model
from .train_seg import (
    FLOAT_FMT,
    STAGE_ORDER,
    SegTrainer,
    append_consumption,
    load_consumption,
    load_seg_model,
)
from .volume import PoseBounds

# start of the scripted approach sweep, as fractions of the pose bounds
APPROACH_TRANS_FRAC = (0.50, 0.31, 0.42)
APPROACH_ROT_FRAC = (0.0, 0.32, 0.13)
APPROACH_DURATION_S = 10.0


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman rank correlation; nan when fewer than two points.

    Tie-free inputs go through the integer rank-difference formula,
    which lands on +-1.0 exactly for monotone series; ties fall back to
    the correlation of the rank vectors.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 2 or len(x) != len(y):
        return float("nan")
    n = len(x)
    if len(np.unique(x)) == n and len(np.unique(y)) == n:
        d = rankdata(x) - rankdata(y)
        return float(1.0 - 6.0 * float(d @ d) / (n * (n * n - 1.0)))
    return float(spearmanr(x, y)[0])


def write_metrics_kv(path: Path, metrics: dict) -> None:
    """Two-column metric table; floats in fixed precision, ints verbatim."""
    lines = ["metric,value"]
    for key, val in metrics.items():
        if isinstance(val, (int, np.integer)) and not isinstance(val, bool):
            cell = str(int(val))
        else:
            cell = FLOAT_FMT % float(val)
        lines.append(f"{key},{cell}")
    Path(path).write_text("\n".join(lines) + "\n")


def phantom_spec_for(profile: Profile, seed: int) -> PhantomSpec:
    return PhantomSpec(
        seed=seed,
        dims=profile.data.dims,
        spacing_mm=profile.data.spacing_mm,
        brain_semi_axes_mm=profile.data.brain_semi_axes_mm,
        volume_id_prefix="vol",
    )


def corpus_config_for(profile: Profile, seed: int) -> LabeledCorpusConfig:
    # the labeled corpus comes from standalone subjects, never from the
    # registered family, so its seed stream is kept separate
    return LabeledCorpusConfig(
        seed=seed + 100,
        n_total=profile.data.labeled_total,
        n_brain=profile.data.labeled_brain,
        n_subjects=profile.data.labeled_subjects,
        image_px=profile.data.slice_px,
        pixel_spacing_mm=profile.data.slice_spacing_mm,
        base_spec=phantom_spec_for(profile, seed),
    )


def build_assets(profile: Profile, out_dir: Path, seed: int = 0) -> dict:
    """Generate volumes, corpus, slice datasets, and the fold table."""
    out_dir = Path(out_dir)
    volumes_dir = out_dir / "volumes"
    corpus_dir = out_dir / "corpus"
    slice_root = out_dir / "slices"

    family = generate_phantom_family(phantom_spec_for(profile, seed), profile.data.n_volumes)
    for vol in family:
        vol.save(volumes_dir)
    ids = [vol.volume_id for vol in family]

    folds = make_folds(ids)
    save_folds(folds, out_dir / "folds.json")

    samples = split_labeled(generate_labeled_corpus(corpus_config_for(profile, seed)), seed=seed + 100)
    save_labeled_corpus(samples, corpus_dir)

    save_slice_dataset(
        family,
        per_volume=profile.data.slices_per_volume,
        seed=seed + 1,
        out_dir=slice_root,
        image_px=profile.data.slice_px,
        pixel_spacing_mm=profile.data.slice_spacing_mm,
        bounds=PoseBounds(profile.data.max_offset_mm, profile.data.max_angle_rad),
    )
    return {
        "family": family,
        "folds": folds,
        "volumes_dir": volumes_dir,
        "corpus_dir": corpus_dir,
        "slice_root": slice_root,
    }


def approach_start(target: Pose6D, profile: Profile) -> Pose6D:
    """Deterministic sweep start inside the slice-sampling bounds."""
    dt = np.asarray(APPROACH_TRANS_FRAC) * profile.data.max_offset_mm
    dr = np.asarray(APPROACH_ROT_FRAC) * profile.data.max_angle_rad
    rot = rotvec_to_matrix(target.r) @ rotvec_to_matrix(dr)
    return Pose6D(target.t + dt, matrix_to_rotvec(rot))


def run_experiment(
    profile: Profile,
    out_dir: Path,
    seed: int = 0,
    fold_index: int = 0,
) -> dict:
    """Assets, training, evaluation, and the approach trace for one fold."""
    torch.set_num_threads(1)
    out_dir = Path(out_dir)
    work_dir = out_dir / "work"
    eval_dir = out_dir / "eval"
    trace_dir = out_dir / "trace"
    figures_dir = out_dir / "figures"
    for d in (work_dir, eval_dir, trace_dir, figures_dir):
        d.mkdir(parents=True, exist_ok=True)

    timing: dict[str, float] = {}
    clock = time.monotonic()

    assets = build_assets(profile, out_dir, seed)
    family = assets["family"]
    folds = assets["folds"]
    corpus_dir = assets["corpus_dir"]
    slice_root = assets["slice_root"]
    fold = folds[fold_index]
    by_id = {vol.volume_id: vol for vol in family}
    timing["assets_s"] = time.monotonic() - clock

    # staged segmentation on this fold
    clock = time.monotonic()
    seg_trainer = SegTrainer(
        profile, corpus_dir, work_dir, fold=fold, slice_root=slice_root, seed=seed
    )
    for key in STAGE_ORDER:
        seg_trainer.train_stage(key)
    timing["seg_train_s"] = time.monotonic() - clock

    # pose arms: masked by the final-stage model, and unmasked
    clock = time.monotonic()
    for masks in MASK_MODES:
        pose_trainer = PoseTrainer(
            profile,
            fold,
            slice_root,
            work_dir,
            seed=seed,
            masks=masks,
            seg_checkpoint=work_dir / "seg_ssclass.pt" if masks == "pred" else None,
        )
        pose_trainer.train()
    timing["pose_train_s"] = time.monotonic() - clock

    # evaluation on the volumes that never produced gradients
    clock = time.monotonic()
    metrics: dict = {}
    test_samples = [s for s in load_labeled_corpus(corpus_dir) if s.split == "test"]
    held_out = list(fold.val) + list(fold.test)
    seg_models = {}
    for key in STAGE_ORDER:
        model, _ = load_seg_model(work_dir / f"seg_{key}.pt")
        seg_models[key] = model
        metrics[f"labeled_test_miou_{key}"] = evaluate_labeled_miou(
            model, test_samples, profile.seg.input_px, profile.seg.threshold
        )
        metrics[f"pairwise_miou_{key}"] = evaluate_pairwise_miou(
            model, slice_root, held_out, profile.seg.input_px, profile.seg.threshold
        )
    metrics["pairwise_gap"] = metrics["pairwise_miou_ss"] - metrics["pairwise_miou_s"]
    metrics["pairwise_gap_ssclass"] = (
        metrics["pairwise_miou_ssclass"] - metrics["pairwise_miou_s"]
    )

    seg_final = seg_models["ssclass"]
    pose_models = {}
    pose_summaries = {}
    for masks in MASK_MODES:
        model, _ = load_pose_model(work_dir / f"pose_{masks}.pt")
        pose_models[masks] = model
        rows, skipped = evaluate_pose_errors(
            model,
            slice_root,
            fold.test,
            profile.pose.input_px,
            profile.pose.dilation_px,
            masks=masks,
            segnet=seg_final if masks == "pred" else None,
            seg_input_px=profile.seg.input_px if masks == "pred" else None,
            threshold=profile.seg.threshold,
        )
        write_pose_rows_csv(eval_dir / f"pose_{masks}_rows.csv", rows)
        summary = pose_error_summary(rows, n_skipped=len(skipped))
        write_json(eval_dir / f"pose_{masks}_summary.json", summary)
        pose_summaries[masks] = summary
        for stat in ("trans_median_mm", "trans_mean_mm", "rot_median_deg", "rot_mean_deg"):
            metrics[f"pose_{masks}_{stat}"] = summary[stat]
        metrics[f"pose_{masks}_n_skipped"] = summary["n_skipped"]
    metrics["ablation_margin_mm"] = (
        metrics["pose_none_trans_median_mm"] - metrics["pose_pred_trans_median_mm"]
    )
    metrics["pose_pred_trans_median_frac"] = (
        metrics["pose_pred_trans_median_mm"] / profile.data.brain_diameter_mm
    )
    timing["evaluate_s"] = time.monotonic() - clock

    # scripted approach sweep on the held-out volume
    clock = time.monotonic()
    test_vol = by_id[fold.test[0]]
    annotation = test_vol.annotation
    start = approach_start(annotation.pose, profile)
    stream = extract_frames(
        test_vol,
        start,
        annotation.pose,
        duration_s=APPROACH_DURATION_S,
        hz=profile.stream_hz,
        image_px=profile.data.slice_px,
        pixel_spacing_mm=profile.data.slice_spacing_mm,
    )
    save_stream(stream, trace_dir / "stream.npz")
    oracle = oracle_proximities(stream, annotation)
    records = run_pipeline(
        stream,
        seg_final,
        pose_models["pred"],
        annotation,
        seg_input_px=profile.seg.input_px,
        pose_input_px=profile.pose.input_px,
        dilation_px=profile.pose.dilation_px,
        masks="pred",
        threshold=profile.seg.threshold,
    )
    emit_trace(records, trace_dir)
    with_pose = [r for r in records if r.has_pose]
    metrics["spearman_oracle_trans"] = spearman(
        stream.timestamps_s, [trans for trans, _ in oracle]
    )
    metrics["spearman_model_trans"] = spearman(
        [r.timestamp_s for r in with_pose], [r.trans_mm for r in with_pose]
    )
    metrics["n_frames"] = len(records)
    metrics["n_frames_with_pose"] = len(with_pose)
    timing["trace_s"] = time.monotonic() - clock

    # evaluation and trace consumption joins the training log, then the audit
    for record in (
        {"stage": "eval_pairwise", "fold": fold.fold, "role": "val", "volume_ids": list(fold.val)},
        {"stage": "eval_pairwise", "fold": fold.fold, "role": "test", "volume_ids": list(fold.test)},
        {"stage": "pose_eval", "fold": fold.fold, "role": "test", "volume_ids": list(fold.test)},
        {"stage": "trace", "fold": fold.fold, "role": "test", "volume_ids": list(fold.test)},
    ):
        append_consumption(work_dir, record)
    consumption = load_consumption(work_dir)
    problems = audit_fold_hygiene(folds, consumption)
    write_json(
        out_dir / "audit.json",
        {"clean": not problems, "problems": problems, "n_records": len(consumption)},
    )

    render_run_figures(out_dir)

    write_metrics_kv(out_dir / "metrics.csv", metrics)
    summary = {
        "profile": profile.name,
        "config_hash": config_hash(profile),
        "seed": seed,
        "fold": fold.fold,
        "volumes": [vol.volume_id for vol in family],
        "fold_roles": {
            "train": list(fold.train),
            "val": list(fold.val),
            "test": list(fold.test),
        },
        "metrics": {k: (int(v) if isinstance(v, (int, np.integer)) else float(v)) for k, v in metrics.items()},
        "pose": pose_summaries,
        "audit_clean": not problems,
    }
    write_json(out_dir / "summary.json", summary)
    write_json(out_dir / "timing.json", {k: round(v, 3) for k, v in timing.items()})

    if problems:
        raise RuntimeError(f"fold hygiene audit failed: {problems}")
    return summary
