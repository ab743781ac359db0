"""Command line flows: generation, training, evaluation, trace, report, audit."""

import json
from pathlib import Path

import numpy as np
import pytest

from conftest import TINY
from spnav import profiles
from spnav.cli import main
from spnav.data import save_image_png
from spnav.experiment import approach_start
from spnav.geometry import PlaneAnnotation
from spnav.pipeline import extract_frames, load_frame_dir, save_stream
from spnav.volume import load_volume_dir


@pytest.fixture(autouse=True)
def tiny_profile(monkeypatch):
    monkeypatch.setitem(profiles.PROFILES, "tiny", TINY)


@pytest.fixture(scope="module")
def cli_root(tmp_path_factory):
    """One run directory assembled entirely through the command line."""
    root = tmp_path_factory.mktemp("cli_run")
    profiles.PROFILES["tiny"] = TINY  # module fixture outlives the autouse patch
    base = ["--root", str(root), "--profile", "tiny"]
    assert main(["phantom", "generate", *base]) == 0
    assert main(["corpus", "generate", *base]) == 0
    assert main(["dataset", "slice", *base]) == 0
    for stage in ("s", "ss", "ssclass"):
        assert main(["seg", "train", *base, "--fold", "0", "--stage", stage]) == 0
    assert main(["pose", "train", *base, "--fold", "0", "--masks", "none"]) == 0
    assert main(["pose", "train", *base, "--fold", "0", "--masks", "pred"]) == 0
    yield root
    profiles.PROFILES.pop("tiny", None)


def test_generation_layout(cli_root):
    assert (cli_root / "volumes" / "vol00.json").exists()
    assert (cli_root / "corpus" / "labels.csv").exists()
    assert (cli_root / "slices" / "vol00").is_dir()
    assert (cli_root / "folds.json").exists()


def test_training_artifacts(cli_root):
    work = cli_root / "work" / "fold0"
    for name in ("seg_s.pt", "seg_ss.pt", "seg_ssclass.pt", "pose_none.pt", "pose_pred.pt"):
        assert (work / name).exists(), name
    assert (work / "consumption.jsonl").exists()


def test_pose_eval_outputs(cli_root, capsys):
    assert main(["pose", "eval", "--root", str(cli_root), "--profile", "tiny", "--fold", "0"]) == 0
    out = capsys.readouterr().out
    assert "trans_median_mm," in out
    assert "rot_median_deg," in out
    eval_dir = cli_root / "eval"
    assert (eval_dir / "fold0_pose_pred_rows.csv").exists()
    assert (eval_dir / "fold0_pose_pred_summary.json").exists()
    assert (eval_dir / "fold0_pose_pred_errors.png").exists()


def test_annotate_stored(cli_root):
    out = cli_root / "annotation.json"
    assert main([
        "annotate", "--root", str(cli_root), "--volume-id", "vol00", "--out", str(out),
    ]) == 0
    ann = PlaneAnnotation.load(out)
    assert ann.volume_id == "vol00"
    assert ann.label == "TV"


def test_annotate_custom_pose(cli_root, tmp_path):
    out = tmp_path / "custom.json"
    assert main([
        "annotate", "--root", str(cli_root), "--volume-id", "vol01", "--out", str(out),
        "--t", "1,2,3", "--r", "0.1,0,0", "--label", "probe",
    ]) == 0
    ann = PlaneAnnotation.load(out)
    assert ann.label == "probe"
    np.testing.assert_allclose(ann.pose.t, [1.0, 2.0, 3.0])
    np.testing.assert_allclose(ann.pose.r, [0.1, 0.0, 0.0])


def test_annotate_unknown_volume(cli_root, capsys):
    rc = main([
        "annotate", "--root", str(cli_root), "--volume-id", "nope",
        "--out", str(cli_root / "x.json"),
    ])
    assert rc == 2
    assert "unknown volume" in capsys.readouterr().err


def test_vec3_rejects_malformed():
    with pytest.raises(SystemExit):
        main([
            "annotate", "--root", "r", "--volume-id", "v", "--out", "o", "--t", "1,2", "--r", "0,0,0",
        ])


@pytest.fixture(scope="module")
def cli_stream(cli_root):
    vol = load_volume_dir(cli_root / "volumes")["vol00"]
    target = vol.annotation.pose
    stream = extract_frames(
        vol,
        approach_start(target, TINY),
        target,
        duration_s=3.0,
        hz=10.0,
        image_px=TINY.data.slice_px,
        pixel_spacing_mm=TINY.data.slice_spacing_mm,
    )
    path = cli_root / "stream.npz"
    save_stream(stream, path)
    return stream, path


def test_pipeline_run_from_npz(cli_root, cli_stream, capsys):
    _, stream_path = cli_stream
    ann_path = cli_root / "annotation.json"
    assert ann_path.exists()
    events_path = cli_root / "events.json"
    events_path.write_text(json.dumps({"events": [{"t_s": 1.0, "kind": "freeze"}]}))
    out = cli_root / "trace"
    rc = main([
        "pipeline", "run", "--root", str(cli_root), "--profile", "tiny",
        "--stream", str(stream_path), "--fold", "0",
        "--annotation", str(ann_path), "--events", str(events_path), "--out", str(out),
    ])
    assert rc == 0
    assert "31 frames" in capsys.readouterr().out
    for name in ("trace.csv", "records.jsonl", "events.json", "trace.png"):
        assert (out / name).exists(), name
    echoed = json.loads((out / "events.json").read_text())
    assert echoed["events"] == [{"t_s": 1.0, "kind": "freeze"}]


def test_pipeline_run_from_png_dir(cli_root, cli_stream, tmp_path):
    stream, _ = cli_stream
    frames_dir = tmp_path / "frames"
    frames_dir.mkdir()
    for k in range(len(stream)):
        save_image_png(frames_dir / f"frame_{k:04d}.png", stream.frame(k))
    loaded = load_frame_dir(frames_dir, hz=10.0, pixel_spacing_mm=TINY.data.slice_spacing_mm)
    assert len(loaded) == len(stream)
    np.testing.assert_array_equal(loaded.images, stream.images)
    out = tmp_path / "trace"
    rc = main([
        "pipeline", "run", "--root", str(cli_root), "--profile", "tiny",
        "--stream", str(frames_dir), "--fold", "0",
        "--annotation", str(cli_root / "annotation.json"), "--out", str(out),
        "--hz", "10.0", "--pixel-spacing-mm", str(TINY.data.slice_spacing_mm),
    ])
    assert rc == 0
    assert (out / "trace.csv").exists()


def test_report_renders_figures(cli_root, capsys):
    assert main(["report", "--root", str(cli_root)]) == 0
    printed = capsys.readouterr().out.strip().splitlines()
    assert printed
    figures = cli_root / "figures"
    assert (figures / "fold0_seg_s_curves.png").exists()
    assert (figures / "fold0_pose_pred_curves.png").exists()
    assert (figures / "fold0_pose_pred_errors.png").exists()
    assert (figures / "trace.png").exists()


def test_report_empty_run(tmp_path, capsys):
    assert main(["report", "--run", str(tmp_path)]) == 1
    assert "nothing to render" in capsys.readouterr().err


def test_audit_clean(cli_root, capsys):
    assert main(["audit", "--root", str(cli_root)]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["clean"] is True
    assert payload["n_records"] > 0


def test_unknown_profile_errors(tmp_path):
    with pytest.raises(ValueError, match="unknown profile"):
        main(["phantom", "generate", "--root", str(tmp_path), "--profile", "bogus"])
