"""Command line for the standard-plane proximity toolkit.

Every command works inside one run directory (``--root``, default
``run``) shaped like the experiment runner's output:

    volumes/    phantom volumes
    corpus/     labeled 2D corpus
    slices/     shared-pose slice datasets
    folds.json  leave-one-out fold table
    work/foldK/ checkpoints, metrics CSVs, consumption log
    eval/       pose error tables and summaries
    trace/      sweep traces
    figures/    rendered PNGs

Individual paths can always be pointed elsewhere with explicit flags.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .data import (
    audit_fold_hygiene,
    load_folds,
    make_folds,
    save_folds,
    save_labeled_corpus,
    save_slice_dataset,
    split_labeled,
)
from .evaluate import (
    evaluate_pose_errors,
    pose_error_summary,
    write_json,
    write_pose_rows_csv,
)
from .experiment import corpus_config_for, phantom_spec_for, run_experiment
from .geometry import PlaneAnnotation, Pose6D
from .phantom import generate_labeled_corpus, generate_phantom_family
from .pipeline import emit_trace, load_frame_dir, load_stream, run_pipeline
from .profiles import get_profile
from .report import plot_error_histograms, render_run_figures
from .train_pose import PoseTrainer, load_pose_model
from .train_seg import SegTrainer, load_consumption, load_seg_model
from .volume import PoseBounds, load_volume_dir


def _vec3(text: str) -> np.ndarray:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}")
    return np.asarray(parts)


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--root", type=Path, default=Path("run"), help="run directory")
    parser.add_argument("--profile", default="desk", help="training profile (full, desk)")
    parser.add_argument("--seed", type=int, default=0)


def _fold_table(args, slice_root: Path):
    """Fold table from folds.json, creating it from the slice layout once."""
    folds_path = args.folds if args.folds else args.root / "folds.json"
    if folds_path.exists():
        return load_folds(folds_path)
    ids = sorted(p.name for p in Path(slice_root).iterdir() if p.is_dir())
    folds = make_folds(ids)
    folds_path.parent.mkdir(parents=True, exist_ok=True)
    save_folds(folds, folds_path)
    return folds


def _work_dir(args) -> Path:
    return args.work if args.work else args.root / "work" / f"fold{args.fold}"


def cmd_phantom_generate(args) -> int:
    profile = get_profile(args.profile)
    spec = phantom_spec_for(profile, args.seed)
    n = args.n if args.n else profile.data.n_volumes
    out = args.out if args.out else args.root / "volumes"
    family = generate_phantom_family(spec, n)
    for vol in family:
        vol.save(out)
    print(f"wrote {n} volumes to {out}: {' '.join(v.volume_id for v in family)}")
    return 0


def cmd_corpus_generate(args) -> int:
    profile = get_profile(args.profile)
    out = args.out if args.out else args.root / "corpus"
    samples = split_labeled(
        generate_labeled_corpus(corpus_config_for(profile, args.seed)), seed=args.seed + 100
    )
    save_labeled_corpus(samples, out)
    counts = {name: sum(1 for s in samples if s.split == name) for name in ("train", "val", "test")}
    print(f"wrote {len(samples)} labeled images to {out} (splits: {counts})")
    return 0


def cmd_dataset_slice(args) -> int:
    profile = get_profile(args.profile)
    volumes_dir = args.volumes if args.volumes else args.root / "volumes"
    out = args.out if args.out else args.root / "slices"
    volumes = list(load_volume_dir(volumes_dir).values())
    per_volume = args.per_volume if args.per_volume else profile.data.slices_per_volume
    save_slice_dataset(
        volumes,
        per_volume=per_volume,
        seed=args.seed + 1,
        out_dir=out,
        image_px=profile.data.slice_px,
        pixel_spacing_mm=profile.data.slice_spacing_mm,
        bounds=PoseBounds(profile.data.max_offset_mm, profile.data.max_angle_rad),
    )
    print(f"wrote {per_volume} shared-pose slices for {len(volumes)} volumes to {out}")
    return 0


def cmd_annotate(args) -> int:
    volumes_dir = args.volumes if args.volumes else args.root / "volumes"
    volumes = load_volume_dir(volumes_dir)
    if args.volume_id not in volumes:
        print(f"unknown volume {args.volume_id!r}; have {sorted(volumes)}", file=sys.stderr)
        return 2
    vol = volumes[args.volume_id]
    if args.t is not None or args.r is not None:
        if args.t is None or args.r is None:
            print("--t and --r must be given together", file=sys.stderr)
            return 2
        annotation = PlaneAnnotation(
            volume_id=args.volume_id, pose=Pose6D(args.t, args.r), label=args.label
        )
    elif vol.annotation is not None:
        annotation = vol.annotation
    else:
        print(f"volume {args.volume_id!r} has no stored annotation; pass --t/--r", file=sys.stderr)
        return 2
    args.out.parent.mkdir(parents=True, exist_ok=True)
    annotation.save(args.out)
    print(f"wrote {annotation.label} annotation for {args.volume_id} to {args.out}")
    return 0


def cmd_seg_train(args) -> int:
    profile = get_profile(args.profile)
    corpus = args.corpus if args.corpus else args.root / "corpus"
    slices = args.slices if args.slices else args.root / "slices"
    fold = _fold_table(args, slices)[args.fold]
    trainer = SegTrainer(
        profile,
        corpus,
        _work_dir(args),
        fold=fold,
        slice_root=slices if args.stage != "s" else None,
        seed=args.seed,
    )
    history = trainer.train_stage(args.stage)
    last = history[-1]
    print(
        f"seg stage {args.stage} fold {args.fold}: epoch {last['epoch']}"
        f" total {last['total']:.6f} val_labeled {last['val_labeled']:.6f}"
    )
    return 0


def cmd_pose_train(args) -> int:
    profile = get_profile(args.profile)
    slices = args.slices if args.slices else args.root / "slices"
    work = _work_dir(args)
    fold = _fold_table(args, slices)[args.fold]
    seg_ckpt = args.seg_checkpoint if args.seg_checkpoint else work / "seg_ssclass.pt"
    trainer = PoseTrainer(
        profile,
        fold,
        slices,
        work,
        seed=args.seed,
        masks=args.masks,
        seg_checkpoint=seg_ckpt if args.masks == "pred" else None,
    )
    history = trainer.train()
    last = history[-1]
    print(
        f"pose masks={args.masks} fold {args.fold}: epoch {last['epoch']}"
        f" train {last['train_total']:.6f} val {last['val_total']:.6f}"
        f" ({len(trainer.skipped)} slices skipped)"
    )
    return 0


def cmd_pose_eval(args) -> int:
    profile = get_profile(args.profile)
    slices = args.slices if args.slices else args.root / "slices"
    work = _work_dir(args)
    out = args.out if args.out else args.root / "eval"
    out.mkdir(parents=True, exist_ok=True)
    fold = _fold_table(args, slices)[args.fold]
    model, _ = load_pose_model(work / f"pose_{args.masks}.pt")
    segnet = None
    seg_input_px = None
    if args.masks == "pred":
        segnet, payload = load_seg_model(work / "seg_ssclass.pt")
        seg_input_px = payload["input_px"]
    rows, skipped = evaluate_pose_errors(
        model,
        slices,
        fold.test,
        profile.pose.input_px,
        profile.pose.dilation_px,
        masks=args.masks,
        segnet=segnet,
        seg_input_px=seg_input_px,
        threshold=profile.seg.threshold,
    )
    prefix = f"fold{args.fold}_pose_{args.masks}"
    write_pose_rows_csv(out / f"{prefix}_rows.csv", rows)
    summary = pose_error_summary(rows, n_skipped=len(skipped))
    write_json(out / f"{prefix}_summary.json", summary)
    plot_error_histograms(
        [r.trans_err_mm for r in rows],
        [r.rot_deg for r in rows],
        out / f"{prefix}_errors.png",
        title=f"held-out errors, fold {args.fold}, masks={args.masks}",
    )
    for key, val in summary.items():
        print(f"{key},{val}")
    return 0


def cmd_pipeline_run(args) -> int:
    profile = get_profile(args.profile)
    work = _work_dir(args)
    out = args.out if args.out else args.root / "trace"
    stream_path = Path(args.stream)
    if stream_path.is_dir():
        hz = args.hz if args.hz else profile.stream_hz
        spacing = args.pixel_spacing_mm if args.pixel_spacing_mm else profile.data.slice_spacing_mm
        stream = load_frame_dir(stream_path, hz=hz, pixel_spacing_mm=spacing)
    else:
        stream = load_stream(stream_path)
    target = PlaneAnnotation.load(args.annotation)
    segnet, seg_payload = load_seg_model(work / "seg_ssclass.pt")
    posenet, _ = load_pose_model(work / f"pose_{args.masks}.pt")
    events = []
    if args.events:
        payload = json.loads(Path(args.events).read_text())
        events = payload["events"] if isinstance(payload, dict) else payload
    records = run_pipeline(
        stream,
        segnet,
        posenet,
        target,
        seg_input_px=seg_payload["input_px"],
        pose_input_px=profile.pose.input_px,
        dilation_px=profile.pose.dilation_px,
        masks=args.masks,
        threshold=profile.seg.threshold,
    )
    emit_trace(records, out, events=events)
    with_pose = [r for r in records if r.has_pose]
    closing = f"last reading {with_pose[-1].trans_mm:.2f} mm" if with_pose else "no readings"
    print(f"{len(records)} frames, {len(with_pose)} with a pose; {closing}; trace in {out}")
    return 0


def cmd_experiment_run(args) -> int:
    profile = get_profile(args.profile)
    out = args.out if args.out else args.root
    summary = run_experiment(profile, out, seed=args.seed, fold_index=args.fold)
    for key, val in summary["metrics"].items():
        print(f"{key},{val}")
    print(f"artifacts in {out}")
    return 0


def cmd_report(args) -> int:
    run_dir = args.run if args.run else args.root
    written = render_run_figures(run_dir)
    if not written:
        print(f"nothing to render under {run_dir}", file=sys.stderr)
        return 1
    for path in written:
        print(path)
    return 0


def cmd_audit(args) -> int:
    slices = args.slices if args.slices else args.root / "slices"
    folds = _fold_table(args, slices)
    if args.work:
        records = load_consumption(args.work)
    elif args.fold is not None:
        records = load_consumption(args.root / "work" / f"fold{args.fold}")
    else:
        records = []
        for sub in sorted((args.root / "work").glob("fold*")):
            records.extend(load_consumption(sub))
        records.extend(load_consumption(args.root / "work"))
    problems = audit_fold_hygiene(folds, records)
    payload = {"clean": not problems, "problems": problems, "n_records": len(records)}
    print(json.dumps(payload, indent=2))
    return 0 if not problems else 1


def cmd_serve(args) -> int:
    import uvicorn

    from .service import build_app

    app = build_app(
        volumes_dir=args.volumes,
        models_dir=args.models,
        profile=get_profile(args.profile),
    )
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spnav", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    phantom = sub.add_parser("phantom", help="phantom volume generation").add_subparsers(
        dest="subcommand", required=True
    )
    p = phantom.add_parser("generate", help="write a registered phantom family")
    _common(p)
    p.add_argument("--n", type=int, default=None, help="volume count (default: profile)")
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_phantom_generate)

    corpus = sub.add_parser("corpus", help="labeled 2D corpus").add_subparsers(
        dest="subcommand", required=True
    )
    p = corpus.add_parser("generate", help="write the labeled image corpus with splits")
    _common(p)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_corpus_generate)

    dataset = sub.add_parser("dataset", help="slice datasets").add_subparsers(
        dest="subcommand", required=True
    )
    p = dataset.add_parser("slice", help="render shared-pose slices for every volume")
    _common(p)
    p.add_argument("--volumes", type=Path, default=None)
    p.add_argument("--per-volume", type=int, default=None)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_dataset_slice)

    p = sub.add_parser("annotate", help="write a target-plane annotation file")
    _common(p)
    p.add_argument("--volumes", type=Path, default=None)
    p.add_argument("--volume-id", required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--t", type=_vec3, default=None, help="plane origin, mm: x,y,z")
    p.add_argument("--r", type=_vec3, default=None, help="rotation vector, rad: x,y,z")
    p.add_argument("--label", default="TV")
    p.set_defaults(func=cmd_annotate)

    seg = sub.add_parser("seg", help="segmentation training").add_subparsers(
        dest="subcommand", required=True
    )
    p = seg.add_parser("train", help="run one stage of the staged schedule")
    _common(p)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--stage", choices=("s", "ss", "ssclass"), required=True)
    p.add_argument("--corpus", type=Path, default=None)
    p.add_argument("--slices", type=Path, default=None)
    p.add_argument("--folds", type=Path, default=None)
    p.add_argument("--work", type=Path, default=None)
    p.set_defaults(func=cmd_seg_train)

    pose = sub.add_parser("pose", help="pose regression").add_subparsers(
        dest="subcommand", required=True
    )
    p = pose.add_parser("train", help="train one masking arm")
    _common(p)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--masks", choices=("pred", "none"), required=True)
    p.add_argument("--slices", type=Path, default=None)
    p.add_argument("--folds", type=Path, default=None)
    p.add_argument("--work", type=Path, default=None)
    p.add_argument("--seg-checkpoint", type=Path, default=None)
    p.set_defaults(func=cmd_pose_train)
    p = pose.add_parser("eval", help="per-slice errors on the held-out volume")
    _common(p)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--masks", choices=("pred", "none"), default="pred")
    p.add_argument("--slices", type=Path, default=None)
    p.add_argument("--folds", type=Path, default=None)
    p.add_argument("--work", type=Path, default=None)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_pose_eval)

    pipeline = sub.add_parser("pipeline", help="frame stream to proximity trace").add_subparsers(
        dest="subcommand", required=True
    )
    p = pipeline.add_parser("run", help="drive a stream through the models")
    _common(p)
    p.add_argument("--stream", required=True, help="stream .npz or a directory of PNG frames")
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--annotation", type=Path, required=True)
    p.add_argument("--events", type=Path, default=None)
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--work", type=Path, default=None)
    p.add_argument("--masks", choices=("pred", "none"), default="pred")
    p.add_argument("--hz", type=float, default=None, help="frame clock for PNG directories")
    p.add_argument("--pixel-spacing-mm", type=float, default=None)
    p.set_defaults(func=cmd_pipeline_run)

    experiment = sub.add_parser("experiment", help="end-to-end seeded run").add_subparsers(
        dest="subcommand", required=True
    )
    p = experiment.add_parser("run", help="assets, training, evaluation, trace")
    _common(p)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_experiment_run)

    p = sub.add_parser("report", help="render figures from a run's delimited outputs")
    _common(p)
    p.add_argument("--run", type=Path, default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("audit", help="check fold hygiene over the consumption logs")
    _common(p)
    p.add_argument("--fold", type=int, default=None)
    p.add_argument("--slices", type=Path, default=None)
    p.add_argument("--folds", type=Path, default=None)
    p.add_argument("--work", type=Path, default=None)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("serve", help="run the interactive navigation service")
    _common(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--volumes", type=Path, required=True)
    p.add_argument("--models", type=Path, required=True)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
