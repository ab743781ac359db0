"""Interactive navigation service: a virtual probe over saved volumes.

Sessions hold a probe pose inside one volume. Each step composes a
bounded delta onto the pose, extracts the slice, runs the segmentation
and pose models on it, and returns the rendered slice plus two
proximity readings against the volume's target-plane annotation: the
model's (regressed from pixels alone) and the oracle's (computed from
the true probe pose, available because the volumes are synthetic).

Transport: REST for session management, freezing, and export; a
websocket per session for the latency-sensitive stepping. Every
message carries a protocol version field "v". Responses contain no
wall-clock data, so identical step sequences produce identical bytes.

Concurrency: session operations serialize on a per-session lock, and
every forward pass serializes on its model bundle's lock, so multiple
sessions can safely share one loaded model pair.
"""

from __future__ import annotations

import base64
import io
import json
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
from fastapi import FastAPI, HTTPException, WebSocket, WebSocketDisconnect
from fastapi.responses import Response
from fastapi.staticfiles import StaticFiles
from PIL import Image
from pydantic import BaseModel
from starlette.concurrency import run_in_threadpool

from .geometry import Pose6D, matrix_to_rotvec, proximity, rotvec_to_matrix
from .models.losses import rot6d_to_matrix_t
from .preprocess import letterbox_square, replicate_channels, resize_image
from .profiles import Profile
from .train_pose import load_pose_model, predict_slice_mask, prepare_pose_input
from .train_seg import load_seg_model
from .volume import Volume, extract_slice, load_volume_dir

PROTOCOL_VERSION = 1
STEP_MAX_TRANS_MM = 10.0
STEP_MAX_ROT_RAD = 0.2


@dataclass
class ModelBundle:
    """One fold's loaded models plus the lock that serializes their use."""

    segnet: object
    posenet: object
    seg_input_px: int
    threshold: float
    lock: threading.Lock = field(default_factory=threading.Lock)


class ModelRegistry:
    """Lazily loads per-fold model pairs from a models directory.

    Accepts either per-fold subdirectories (``fold0/seg_ssclass.pt``)
    or a flat directory holding one pair, which then serves fold 0.
    """

    def __init__(self, models_dir: Path):
        self.models_dir = Path(models_dir)
        self._bundles: dict[int, ModelBundle] = {}
        self._lock = threading.Lock()

    def _fold_dir(self, fold: int) -> Optional[Path]:
        sub = self.models_dir / f"fold{fold}"
        if (sub / "seg_ssclass.pt").exists():
            return sub
        if fold == 0 and (self.models_dir / "seg_ssclass.pt").exists():
            return self.models_dir
        return None

    def get(self, fold: int) -> ModelBundle:
        with self._lock:
            if fold not in self._bundles:
                root = self._fold_dir(fold)
                if root is None or not (root / "pose_pred.pt").exists():
                    raise KeyError(fold)
                segnet, payload = load_seg_model(root / "seg_ssclass.pt")
                posenet, _ = load_pose_model(root / "pose_pred.pt")
                self._bundles[fold] = ModelBundle(
                    segnet=segnet,
                    posenet=posenet,
                    seg_input_px=payload["input_px"],
                    threshold=payload.get("threshold", 0.5),
                )
            return self._bundles[fold]


@dataclass
class Session:
    session_id: str
    volume: Volume
    fold: int
    bundle: ModelBundle
    pose: Pose6D
    history: list = field(default_factory=list)
    captures: list = field(default_factory=list)
    last: Optional[dict] = None
    lock: threading.Lock = field(default_factory=threading.Lock)


def _png_b64(image: np.ndarray) -> str:
    arr = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="L").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


class Navigator:
    """All service state: volumes, model registry, live sessions."""

    def __init__(self, volumes_dir: Path, models_dir: Path, profile: Profile):
        torch.set_num_threads(1)
        self.profile = profile
        self.volumes = load_volume_dir(volumes_dir)
        if not self.volumes:
            raise ValueError(f"no volumes under {volumes_dir}")
        self.registry = ModelRegistry(models_dir)
        self.sessions: dict[str, Session] = {}
        self._lock = threading.Lock()

    # ------------------------------------------------------------- sessions

    def create_session(self, volume_id: str, fold: int) -> Session:
        volume = self.volumes.get(volume_id)
        if volume is None:
            raise HTTPException(404, f"unknown volume {volume_id!r}")
        try:
            bundle = self.registry.get(fold)
        except KeyError:
            raise HTTPException(404, f"no models for fold {fold}") from None
        session = Session(
            session_id=uuid.uuid4().hex[:12],
            volume=volume,
            fold=fold,
            bundle=bundle,
            pose=Pose6D(np.zeros(3), np.zeros(3)),
        )
        with session.lock:
            session.last = self._render(session, warnings=[])
        with self._lock:
            self.sessions[session.session_id] = session
        return session

    def get_session(self, session_id: str) -> Session:
        session = self.sessions.get(session_id)
        if session is None:
            raise HTTPException(404, f"unknown session {session_id!r}")
        return session

    def delete_session(self, session_id: str) -> None:
        with self._lock:
            if self.sessions.pop(session_id, None) is None:
                raise HTTPException(404, f"unknown session {session_id!r}")

    # ---------------------------------------------------------------- steps

    def _readings(self, session: Session, image: np.ndarray) -> tuple[dict, Optional[str]]:
        """Model reading for one slice plus the mask overlay, if any.

        Performs the same operations, in the same order, as the offline
        frame pipeline, so a slice fed to either produces the same
        numbers. The bundle lock guards every forward pass.
        """
        profile = self.profile
        bundle = session.bundle
        annotation = session.volume.annotation
        reading = {"brain_prob": None, "has_pose": False, "trans_mm": None, "rot_deg": None}
        mask_b64 = None
        with bundle.lock, torch.no_grad():
            square = letterbox_square(image)
            cls_in = torch.from_numpy(
                replicate_channels(resize_image(square, bundle.seg_input_px))
            ).unsqueeze(0)
            prob = float(bundle.segnet.predict_brain_prob(cls_in)[0])
            reading["brain_prob"] = prob
            if prob < bundle.threshold:
                reading["note"] = "not brain"
                return reading, mask_b64
            mask = predict_slice_mask(
                bundle.segnet, square, bundle.seg_input_px, bundle.threshold
            )
            mask_b64 = _png_b64(mask.astype(np.float32))
            try:
                inp = prepare_pose_input(
                    square,
                    profile.pose.input_px,
                    "pred",
                    profile.pose.dilation_px,
                    segnet=bundle.segnet,
                    seg_input_px=bundle.seg_input_px,
                    threshold=bundle.threshold,
                )
                out = bundle.posenet(torch.from_numpy(inp).unsqueeze(0))
                pred = Pose6D(
                    out[0, :3].numpy(), matrix_to_rotvec(rot6d_to_matrix_t(out[0, 3:]).numpy())
                )
            except Exception as err:  # a bad slice must not kill the session
                reading["note"] = f"pose failed: {type(err).__name__}"
                return reading, mask_b64
        if annotation is not None:
            trans, rot = proximity(pred, annotation)
            reading.update(has_pose=True, trans_mm=trans, rot_deg=rot)
        else:
            reading.update(has_pose=True)
        reading["pose"] = pred.to_dict()
        return reading, mask_b64

    def _render(self, session: Session, warnings: list[str]) -> dict:
        profile = self.profile
        sample = extract_slice(
            session.volume,
            session.pose,
            (profile.data.slice_px, profile.data.slice_px),
            profile.data.slice_spacing_mm,
        )
        annotation = session.volume.annotation
        oracle = None
        if annotation is not None:
            trans, rot = proximity(session.pose, annotation)
            oracle = {"trans_mm": trans, "rot_deg": rot}
        model, mask_b64 = self._readings(session, sample.image)
        return {
            "v": PROTOCOL_VERSION,
            "session_id": session.session_id,
            "volume_id": session.volume.volume_id,
            "fold": session.fold,
            "pose": session.pose.to_dict(),
            "oracle": oracle,
            "model": model,
            "warnings": warnings,
            "slice_png_b64": _png_b64(sample.image),
            "mask_png_b64": mask_b64,
        }

    def step(self, session: Session, dt_mm, dr_rad, seq=None) -> dict:
        dt = np.asarray(dt_mm, dtype=float).reshape(-1)
        dr = np.asarray(dr_rad, dtype=float).reshape(-1)
        if dt.shape != (3,) or dr.shape != (3,):
            raise ValueError("dt_mm and dr_rad must be 3-vectors")
        if not (np.all(np.isfinite(dt)) and np.all(np.isfinite(dr))):
            raise ValueError("dt_mm and dr_rad must be finite")
        warnings = []
        dt_norm = float(np.linalg.norm(dt))
        if dt_norm > STEP_MAX_TRANS_MM:
            dt = dt * (STEP_MAX_TRANS_MM / dt_norm)
            warnings.append("delta_clamped")
        dr_norm = float(np.linalg.norm(dr))
        if dr_norm > STEP_MAX_ROT_RAD:
            dr = dr * (STEP_MAX_ROT_RAD / dr_norm)
            if "delta_clamped" not in warnings:
                warnings.append("delta_clamped")

        with session.lock:
            new_t = session.pose.t + dt
            half = session.volume.extent_mm / 2.0
            clamped_t = np.clip(new_t, -half, half)
            if not np.array_equal(clamped_t, new_t):
                warnings.append("pose_clamped")
            rot = rotvec_to_matrix(dr) @ rotvec_to_matrix(session.pose.r)
            session.pose = Pose6D(clamped_t, matrix_to_rotvec(rot))
            response = self._render(session, warnings)
            if seq is not None:
                response["seq"] = seq
            entry = {
                "index": len(session.history),
                "pose": response["pose"],
                "oracle": response["oracle"],
                "model": response["model"],
                "warnings": warnings,
            }
            session.history.append(entry)
            response["index"] = entry["index"]
            session.last = response
        return response

    def freeze(self, session: Session, score: Union[float, str, None]) -> dict:
        with session.lock:
            last = session.last
            capture = {
                "index": len(session.captures),
                "at_step": len(session.history) - 1,
                "pose": last["pose"],
                "oracle": last["oracle"],
                "model": last["model"],
                "score": score,
                "slice_png_b64": last["slice_png_b64"],
            }
            session.captures.append(capture)
        return capture

    def export_jsonl(self, session: Session) -> str:
        with session.lock:
            lines = [
                json.dumps(
                    {
                        "type": "meta",
                        "v": PROTOCOL_VERSION,
                        "session_id": session.session_id,
                        "volume_id": session.volume.volume_id,
                        "fold": session.fold,
                        "n_history": len(session.history),
                        "n_captures": len(session.captures),
                    },
                    sort_keys=True,
                )
            ]
            lines += [
                json.dumps({"type": "history", **e}, sort_keys=True) for e in session.history
            ]
            lines += [
                json.dumps({"type": "capture", **c}, sort_keys=True) for c in session.captures
            ]
        return "\n".join(lines) + "\n"


class CreateSessionRequest(BaseModel):
    v: int = PROTOCOL_VERSION
    volume_id: str
    fold: int = 0


class FreezeRequest(BaseModel):
    v: int = PROTOCOL_VERSION
    score: Union[float, str, None] = None


def build_app(
    volumes_dir: Path,
    models_dir: Path,
    profile: Profile,
    frontend_dir: Optional[Path] = None,
) -> FastAPI:
    nav = Navigator(volumes_dir, models_dir, profile)
    app = FastAPI(title="standard-plane navigator", version="1")
    app.state.navigator = nav

    @app.get("/v1/volumes")
    def list_volumes():
        return {
            "v": PROTOCOL_VERSION,
            "volumes": [
                {"volume_id": vid, "has_annotation": vol.annotation is not None}
                for vid, vol in sorted(nav.volumes.items())
            ],
        }

    @app.get("/v1/sessions")
    def list_sessions():
        return {
            "v": PROTOCOL_VERSION,
            "sessions": [
                {
                    "session_id": s.session_id,
                    "volume_id": s.volume.volume_id,
                    "fold": s.fold,
                    "n_history": len(s.history),
                    "n_captures": len(s.captures),
                }
                for s in nav.sessions.values()
            ],
        }

    @app.post("/v1/sessions", status_code=201)
    async def create_session(req: CreateSessionRequest):
        if req.v != PROTOCOL_VERSION:
            raise HTTPException(400, f"unsupported protocol version {req.v}")
        session = await run_in_threadpool(nav.create_session, req.volume_id, req.fold)
        return session.last

    @app.get("/v1/sessions/{session_id}")
    def get_session(session_id: str):
        s = nav.get_session(session_id)
        return {
            "v": PROTOCOL_VERSION,
            "session_id": s.session_id,
            "volume_id": s.volume.volume_id,
            "fold": s.fold,
            "pose": s.pose.to_dict(),
            "n_history": len(s.history),
            "n_captures": len(s.captures),
        }

    @app.delete("/v1/sessions/{session_id}")
    def delete_session(session_id: str):
        nav.delete_session(session_id)
        return {"v": PROTOCOL_VERSION, "deleted": session_id}

    @app.post("/v1/sessions/{session_id}/freeze")
    async def freeze(session_id: str, req: FreezeRequest):
        if req.v != PROTOCOL_VERSION:
            raise HTTPException(400, f"unsupported protocol version {req.v}")
        session = nav.get_session(session_id)
        capture = await run_in_threadpool(nav.freeze, session, req.score)
        return {"v": PROTOCOL_VERSION, "capture": capture}

    @app.get("/v1/sessions/{session_id}/export")
    def export(session_id: str):
        session = nav.get_session(session_id)
        return Response(
            content=nav.export_jsonl(session),
            media_type="application/x-ndjson",
            headers={
                "Content-Disposition": f'attachment; filename="{session_id}_export.jsonl"'
            },
        )

    @app.websocket("/v1/sessions/{session_id}/step")
    async def step_socket(ws: WebSocket, session_id: str):
        await ws.accept()
        try:
            while True:
                msg = await ws.receive_json()
                seq = msg.get("seq")
                if msg.get("v") != PROTOCOL_VERSION:
                    await ws.send_json(
                        {"v": PROTOCOL_VERSION, "seq": seq, "error": "unsupported protocol version"}
                    )
                    continue
                session = nav.sessions.get(session_id)
                if session is None:
                    await ws.send_json(
                        {"v": PROTOCOL_VERSION, "seq": seq, "error": f"unknown session {session_id!r}"}
                    )
                    continue
                try:
                    response = await run_in_threadpool(
                        nav.step,
                        session,
                        msg.get("dt_mm", (0.0, 0.0, 0.0)),
                        msg.get("dr_rad", (0.0, 0.0, 0.0)),
                        seq,
                    )
                except (ValueError, TypeError) as err:
                    response = {"v": PROTOCOL_VERSION, "seq": seq, "error": str(err)}
                await ws.send_json(response)
        except WebSocketDisconnect:
            pass

    if frontend_dir is None:
        frontend_dir = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    if frontend_dir.is_dir():
        app.mount("/ui", StaticFiles(directory=frontend_dir, html=True), name="ui")

    return app
