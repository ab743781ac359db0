"""Navigation service contract: sessions, stepping, freezing, export."""

import base64
import io
import json
import math

import numpy as np
import pytest
import torch
from fastapi.testclient import TestClient
from PIL import Image

from conftest import TINY
from spnav.geometry import Pose6D, proximity
from spnav.models.losses import rot6d_to_matrix_t
from spnav.geometry import matrix_to_rotvec
from spnav.preprocess import letterbox_square, replicate_channels, resize_image
from spnav.service import (
    PROTOCOL_VERSION,
    STEP_MAX_ROT_RAD,
    STEP_MAX_TRANS_MM,
    build_app,
)
from spnav.train_pose import load_pose_model, prepare_pose_input
from spnav.train_seg import load_seg_model
from spnav.volume import extract_slice


@pytest.fixture(scope="module")
def client(world, trained):
    work, _, _, _ = trained
    app = build_app(world.volumes_dir, work, TINY)
    with TestClient(app) as c:
        yield c


def make_session(client, volume_id="vol00", fold=0):
    resp = client.post("/v1/sessions", json={"v": 1, "volume_id": volume_id, "fold": fold})
    assert resp.status_code == 201, resp.text
    return resp.json()


def step(client, sid, dt=(0.0, 0.0, 0.0), dr=(0.0, 0.0, 0.0), seq=None):
    with client.websocket_connect(f"/v1/sessions/{sid}/step") as ws:
        msg = {"v": 1, "dt_mm": list(dt), "dr_rad": list(dr)}
        if seq is not None:
            msg["seq"] = seq
        ws.send_json(msg)
        return ws.receive_json()


def test_volume_listing(client):
    body = client.get("/v1/volumes").json()
    assert body["v"] == PROTOCOL_VERSION
    ids = [v["volume_id"] for v in body["volumes"]]
    assert ids == [f"vol{i:02d}" for i in range(6)]
    assert all(v["has_annotation"] for v in body["volumes"])


def test_create_starts_at_identity(client):
    body = make_session(client)
    assert body["v"] == PROTOCOL_VERSION
    assert body["pose"]["t_mm"] == [0.0, 0.0, 0.0]
    assert body["pose"]["rotvec_rad"] == [0.0, 0.0, 0.0]
    assert body["oracle"]["trans_mm"] > 0
    assert body["model"]["brain_prob"] is not None
    png = base64.b64decode(body["slice_png_b64"])
    img = Image.open(io.BytesIO(png))
    assert img.size == (TINY.data.slice_px, TINY.data.slice_px)


def test_unknown_volume_and_fold(client):
    assert client.post("/v1/sessions", json={"v": 1, "volume_id": "nope"}).status_code == 404
    assert (
        client.post("/v1/sessions", json={"v": 1, "volume_id": "vol00", "fold": 3}).status_code
        == 404
    )
    assert client.post("/v1/sessions", json={"v": 9, "volume_id": "vol00"}).status_code == 400
    assert client.get("/v1/sessions/absent").status_code == 404
    assert client.delete("/v1/sessions/absent").status_code == 404
    assert client.get("/v1/sessions/absent/export").status_code == 404


def test_zero_delta_twice_identical_bytes(client):
    sid = make_session(client)["session_id"]
    first = step(client, sid)
    second = step(client, sid)
    assert first["slice_png_b64"] == second["slice_png_b64"]
    assert first["model"] == second["model"]
    assert first["oracle"] == second["oracle"]


def test_straight_line_approach_monotone(client, world):
    target = world.volumes[0].annotation.pose.t
    sid = make_session(client, "vol00")["session_id"]
    n = 5
    dists = []
    for _ in range(n):
        body = step(client, sid, dt=tuple(np.asarray(target) / n))
        dists.append(body["oracle"]["trans_mm"])
    assert all(b < a for a, b in zip(dists, dists[1:]))


def test_oracle_zero_at_annotation_pose(client, world):
    ann = world.volumes[1].annotation.pose
    k = max(
        math.ceil(np.linalg.norm(ann.t) / STEP_MAX_TRANS_MM),
        math.ceil(np.linalg.norm(ann.r) / STEP_MAX_ROT_RAD),
        1,
    )
    sid = make_session(client, "vol01")["session_id"]
    # same-axis rotation increments compound exactly to the target rotvec
    for _ in range(k):
        body = step(client, sid, dt=tuple(ann.t / k), dr=tuple(ann.r / k))
    assert body["warnings"] == []
    assert body["oracle"]["trans_mm"] == pytest.approx(0.0, abs=1e-9)
    assert body["oracle"]["rot_deg"] == pytest.approx(0.0, abs=1e-5)
    trans, rot = proximity(Pose6D.from_dict(body["pose"]), ann)
    assert trans == body["oracle"]["trans_mm"]
    assert rot == body["oracle"]["rot_deg"]


def test_sessions_independent(client):
    a = make_session(client)["session_id"]
    b = make_session(client)["session_id"]
    step(client, a, dt=(4.0, 0.0, 0.0))
    body_b = client.get(f"/v1/sessions/{b}").json()
    assert body_b["pose"]["t_mm"] == [0.0, 0.0, 0.0]
    assert body_b["n_history"] == 0
    body_a = client.get(f"/v1/sessions/{a}").json()
    assert body_a["pose"]["t_mm"] == [4.0, 0.0, 0.0]
    assert body_a["n_history"] == 1


def test_delta_clamped_to_step_bounds(client):
    sid = make_session(client)["session_id"]
    body = step(client, sid, dt=(30.0, 0.0, 0.0), dr=(0.5, 0.0, 0.0))
    assert "delta_clamped" in body["warnings"]
    assert body["pose"]["t_mm"][0] == pytest.approx(STEP_MAX_TRANS_MM)
    assert body["pose"]["rotvec_rad"][0] == pytest.approx(STEP_MAX_ROT_RAD)


def test_pose_clamped_to_volume(client, world):
    half = world.volumes[0].extent_mm[0] / 2.0
    sid = make_session(client)["session_id"]
    seen = []
    for _ in range(math.ceil(half / STEP_MAX_TRANS_MM) + 1):
        body = step(client, sid, dt=(STEP_MAX_TRANS_MM, 0.0, 0.0))
        seen.extend(body["warnings"])
    assert "pose_clamped" in seen
    assert body["pose"]["t_mm"][0] == pytest.approx(half)


def test_step_socket_protocol(client):
    sid = make_session(client)["session_id"]
    with client.websocket_connect(f"/v1/sessions/{sid}/step") as ws:
        ws.send_json({"v": 1, "dt_mm": [1.0, 0.0, 0.0], "dr_rad": [0.0, 0.0, 0.0], "seq": 7})
        body = ws.receive_json()
        assert body["seq"] == 7
        assert body["index"] == 0
        # wrong version: error reply, socket stays usable
        ws.send_json({"v": 2, "seq": 8})
        err = ws.receive_json()
        assert err["seq"] == 8 and "version" in err["error"]
        # malformed delta: error reply, socket stays usable
        ws.send_json({"v": 1, "dt_mm": [1.0, 2.0], "seq": 9})
        err = ws.receive_json()
        assert err["seq"] == 9 and "3-vector" in err["error"]
        ws.send_json({"v": 1, "seq": 10})
        body = ws.receive_json()
        assert body["seq"] == 10 and body["index"] == 1


def test_missing_deltas_default_to_zero(client):
    sid = make_session(client)["session_id"]
    body = step(client, sid)
    assert body["pose"]["t_mm"] == [0.0, 0.0, 0.0]


def test_freeze_and_export(client):
    sid = make_session(client)["session_id"]
    for i in range(3):
        step(client, sid, dt=(1.0, 0.0, 0.0), seq=i)
    cap1 = client.post(f"/v1/sessions/{sid}/freeze", json={"v": 1, "score": 4.0})
    assert cap1.status_code == 200
    assert cap1.json()["capture"]["score"] == 4.0
    step(client, sid, dt=(0.0, 1.0, 0.0))
    cap2 = client.post(f"/v1/sessions/{sid}/freeze", json={"v": 1})
    assert cap2.json()["capture"]["score"] is None

    resp = client.get(f"/v1/sessions/{sid}/export")
    assert resp.status_code == 200
    lines = [json.loads(l) for l in resp.text.splitlines()]
    meta = lines[0]
    assert meta["type"] == "meta"
    assert meta["n_history"] == 4 and meta["n_captures"] == 2
    history = [l for l in lines if l["type"] == "history"]
    captures = [l for l in lines if l["type"] == "capture"]
    assert [h["index"] for h in history] == [0, 1, 2, 3]
    assert [c["at_step"] for c in captures] == [2, 3]
    assert captures[0]["score"] == 4.0 and captures[1]["score"] is None
    assert all(c["slice_png_b64"] for c in captures)
    assert "slice_png_b64" not in history[0]


def test_delete_session(client):
    sid = make_session(client)["session_id"]
    assert client.delete(f"/v1/sessions/{sid}").status_code == 200
    assert client.get(f"/v1/sessions/{sid}").status_code == 404


def test_model_reading_matches_offline_pipeline(client, world, trained):
    """The live reading must equal the frame pipeline run on the same slice."""
    work = trained[0]
    sid = make_session(client, "vol02")["session_id"]
    body = step(client, sid, dt=(2.0, 1.0, 0.0), dr=(0.05, 0.0, 0.0))
    reading = body["model"]

    pose = Pose6D.from_dict(body["pose"])
    volume = next(v for v in world.volumes if v.volume_id == "vol02")
    sample = extract_slice(
        volume, pose, (TINY.data.slice_px, TINY.data.slice_px), TINY.data.slice_spacing_mm
    )
    segnet, payload = load_seg_model(work / "seg_ssclass.pt")
    posenet, _ = load_pose_model(work / "pose_pred.pt")
    with torch.no_grad():
        square = letterbox_square(sample.image)
        cls_in = torch.from_numpy(
            replicate_channels(resize_image(square, payload["input_px"]))
        ).unsqueeze(0)
        prob = float(segnet.predict_brain_prob(cls_in)[0])
        assert reading["brain_prob"] == prob
        if prob < payload["threshold"]:
            assert reading["has_pose"] is False
            return
        inp = prepare_pose_input(
            square, TINY.pose.input_px, "pred", TINY.pose.dilation_px,
            segnet=segnet, seg_input_px=payload["input_px"], threshold=payload["threshold"],
        )
        out = posenet(torch.from_numpy(inp).unsqueeze(0))
        pred = Pose6D(out[0, :3].numpy(), matrix_to_rotvec(rot6d_to_matrix_t(out[0, 3:]).numpy()))
    trans, rot = proximity(pred, volume.annotation)
    assert reading["has_pose"] is True
    assert reading["trans_mm"] == pytest.approx(trans, abs=1e-9)
    assert reading["rot_deg"] == pytest.approx(rot, abs=1e-9)
