"""End-to-end experiment runs at a small scale: artifacts, audit, determinism."""

import json
import math
from pathlib import Path

import numpy as np
import pytest

from conftest import TINY
from spnav.experiment import approach_start, run_experiment, spearman, write_metrics_kv
from spnav.geometry import Pose6D, normal_angle_deg


def test_spearman_perfect_inverse():
    assert spearman([0.0, 1.0, 2.0], [5.0, 3.0, 1.0]) == -1.0


def test_spearman_degenerate_input():
    assert math.isnan(spearman([1.0], [2.0]))
    assert math.isnan(spearman([1.0, 2.0], [1.0]))


def test_spearman_matches_reference_with_ties():
    from scipy.stats import spearmanr

    x = [0.0, 1.0, 2.0, 3.0, 4.0]
    y = [1.0, 1.0, 3.0, 2.0, 5.0]
    assert spearman(x, y) == pytest.approx(float(spearmanr(x, y)[0]), abs=1e-12)


def test_spearman_exact_on_long_monotone_series():
    x = np.arange(101, dtype=float)
    assert spearman(x, -3.0 * x + 7.0) == -1.0
    assert spearman(x, np.exp(x / 50.0)) == 1.0


def test_write_metrics_kv_bytes(tmp_path):
    path = tmp_path / "metrics.csv"
    write_metrics_kv(path, {"count": 3, "third": 1.0 / 3.0})
    assert path.read_text() == "metric,value\ncount,3\nthird,0.33333333\n"


def test_approach_start_within_sampling_bounds():
    target = Pose6D(np.zeros(3), np.zeros(3))
    start = approach_start(target, TINY)
    assert np.linalg.norm(start.t) <= TINY.data.max_offset_mm
    assert np.linalg.norm(start.r) <= TINY.data.max_angle_rad
    # the sweep must actually move
    assert np.linalg.norm(start.t) > 1.0


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("experiment")
    summary = run_experiment(TINY, out, seed=0)
    return out, summary


EXPECTED_FILES = [
    "folds.json",
    "metrics.csv",
    "summary.json",
    "audit.json",
    "timing.json",
    "work/seg_s.pt",
    "work/seg_ss.pt",
    "work/seg_ssclass.pt",
    "work/seg_s_metrics.csv",
    "work/seg_ss_metrics.csv",
    "work/seg_ssclass_metrics.csv",
    "work/pose_pred.pt",
    "work/pose_none.pt",
    "work/pose_pred_metrics.csv",
    "work/pose_none_metrics.csv",
    "work/consumption.jsonl",
    "eval/pose_pred_rows.csv",
    "eval/pose_none_rows.csv",
    "eval/pose_pred_summary.json",
    "eval/pose_none_summary.json",
    "trace/stream.npz",
    "trace/trace.csv",
    "trace/records.jsonl",
    "trace/events.json",
    "trace/trace.png",
    "figures/seg_s_curves.png",
    "figures/seg_ss_curves.png",
    "figures/seg_ssclass_curves.png",
    "figures/pose_pred_curves.png",
    "figures/pose_none_curves.png",
    "figures/pose_pred_errors.png",
    "figures/pose_none_errors.png",
]


def test_artifacts_exist(tiny_run):
    out, _ = tiny_run
    missing = [rel for rel in EXPECTED_FILES if not (out / rel).exists()]
    assert not missing, f"missing artifacts: {missing}"
    assert (out / "volumes").is_dir() and (out / "corpus").is_dir() and (out / "slices").is_dir()


def test_summary_shape(tiny_run):
    _, summary = tiny_run
    assert summary["profile"] == "tiny"
    assert summary["fold"] == 0
    assert summary["fold_roles"]["test"] == ["vol00"]
    assert summary["audit_clean"] is True
    m = summary["metrics"]
    for key in (
        "labeled_test_miou_s",
        "labeled_test_miou_ss",
        "labeled_test_miou_ssclass",
        "pairwise_miou_s",
        "pairwise_miou_ss",
        "pairwise_miou_ssclass",
        "pairwise_gap",
        "pose_pred_trans_median_mm",
        "pose_none_trans_median_mm",
        "ablation_margin_mm",
        "pose_pred_trans_median_frac",
        "spearman_oracle_trans",
        "spearman_model_trans",
    ):
        assert key in m, key
    assert m["spearman_oracle_trans"] == -1.0
    assert m["n_frames"] == 101
    assert 0.0 <= m["pairwise_miou_ss"] <= 1.0


def test_audit_written_clean(tiny_run):
    out, _ = tiny_run
    audit = json.loads((out / "audit.json").read_text())
    assert audit["clean"] is True
    assert audit["problems"] == []
    assert audit["n_records"] > 0


def test_metrics_csv_covers_summary(tiny_run):
    out, summary = tiny_run
    lines = (out / "metrics.csv").read_text().strip().splitlines()
    assert lines[0] == "metric,value"
    keys = {line.split(",", 1)[0] for line in lines[1:]}
    assert keys == set(summary["metrics"].keys())


def test_rerun_writes_identical_csvs(tiny_run, tmp_path_factory):
    out1, summary1 = tiny_run
    out2 = tmp_path_factory.mktemp("experiment_again")
    summary2 = run_experiment(TINY, out2, seed=0)
    # nan != nan, so compare the serialized form
    assert json.dumps(summary1, sort_keys=True) == json.dumps(summary2, sort_keys=True)
    compared = 0
    for rel in sorted(p.relative_to(out1) for p in out1.rglob("*.csv")):
        a = (out1 / rel).read_bytes()
        b = (out2 / rel).read_bytes()
        assert a == b, f"{rel} differs between identically seeded runs"
        compared += 1
    assert compared >= 8
    assert (out1 / "summary.json").read_bytes() == (out2 / "summary.json").read_bytes()
