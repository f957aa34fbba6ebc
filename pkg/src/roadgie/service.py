"""HTTP session service for live interactive road annotation.

Versioned under /v1.  Each session holds an image, the accumulated prompt
maps and the per-round mask history; every prompts call runs exactly one
refinement step.  Calls on the same session are serialized; different
sessions run concurrently against a shared read-only parameter snapshot.
"""

from __future__ import annotations

import base64
import io
import json
import os
import threading
import uuid

import numpy as np
from fastapi import FastAPI, HTTPException, Request, Response
from fastapi.middleware.cors import CORSMiddleware
from PIL import Image
from pydantic import BaseModel, Field

from .instantiate import InstantiateConfig, NoRoadStructure, instantiate
from .metrics import dice_and_recall
from .network import NetworkConfig, PromptMap, RoadNet
from .prompts import Stroke, rasterize

MAX_SIDE = 1024  # request images larger than this are rejected with 413


class StrokeModel(BaseModel):
    kind: str
    polarity: str
    width: float = Field(gt=0)
    points: list[list[float]]


class PromptRequest(BaseModel):
    strokes: list[StrokeModel]


class InstantiateRequest(BaseModel):
    stroke: StrokeModel


class _Session:
    def __init__(self, sid, image):
        self.id = sid
        self.image = image  # [3,H,W] float32 in [0,1]
        h, w = image.shape[1:]
        self.shape = (h, w)
        self.stroke_history = []  # list of per-round stroke lists
        self.mask_history = []  # list of (logits, bool mask) per round
        self.prompt_map_history = [PromptMap(h, w)]
        self.gt = None
        self.lock = threading.Lock()

    @property
    def round(self):
        return len(self.mask_history)

    def current_soft_mask(self):
        if not self.mask_history:
            return np.zeros(self.shape, dtype=np.float32)
        logits, _ = self.mask_history[-1]
        return (1.0 / (1.0 + np.exp(-logits))).astype(np.float32)


def _decode_stroke(model: StrokeModel) -> Stroke:
    try:
        return Stroke.from_json(model.model_dump())
    except ValueError as exc:
        raise HTTPException(status_code=422, detail=str(exc))


def _png_b64(mask):
    buf = io.BytesIO()
    Image.fromarray((np.asarray(mask, dtype=np.uint8)) * 255).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _mask_png_bytes(mask):
    buf = io.BytesIO()
    Image.fromarray((np.asarray(mask, dtype=np.uint8)) * 255).save(buf, format="PNG")
    return buf.getvalue()


def create_app(net: RoadNet = None, persist_dir=None):
    """Build the FastAPI app around a shared read-only network snapshot."""
    if net is None:
        net = RoadNet(NetworkConfig())
        ckpt = os.environ.get("ROADGIE_CHECKPOINT")
        if ckpt:
            net.load(ckpt)
    shared = net.snapshot()
    sessions = {}
    store_lock = threading.Lock()
    inst_cfg = InstantiateConfig()

    app = FastAPI(title="road annotation service")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )

    def get_session(sid) -> _Session:
        with store_lock:
            s = sessions.get(sid)
        if s is None:
            raise HTTPException(status_code=404, detail=f"unknown session {sid}")
        return s

    def persist(session):
        if not persist_dir:
            return
        d = os.path.join(persist_dir, session.id)
        os.makedirs(d, exist_ok=True)
        meta = {
            "id": session.id,
            "round": session.round,
            "strokes": [[s.to_json() for s in rnd] for rnd in session.stroke_history],
        }
        tmp = os.path.join(d, "session.json.tmp")
        with open(tmp, "w") as f:
            json.dump(meta, f)
        os.replace(tmp, os.path.join(d, "session.json"))
        if session.mask_history:
            _, mask = session.mask_history[-1]
            with open(os.path.join(d, f"mask_round_{session.round:03d}.png"), "wb") as f:
                f.write(_mask_png_bytes(mask))

    @app.post("/v1/sessions")
    async def create_session(request: Request):
        body = await request.body()
        try:
            img = Image.open(io.BytesIO(body)).convert("RGB")
        except Exception:
            raise HTTPException(status_code=422, detail="body must be a PNG image")
        if max(img.size) > MAX_SIDE:
            raise HTTPException(status_code=413, detail=f"image side exceeds {MAX_SIDE}")
        arr = np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0
        sid = uuid.uuid4().hex[:12]
        with store_lock:
            sessions[sid] = _Session(sid, arr)
        return {"id": sid, "height": arr.shape[1], "width": arr.shape[2]}

    @app.post("/v1/sessions/{sid}/ground_truth")
    async def register_gt(sid: str, request: Request):
        """Optional: register a label mask so responses report Dice."""
        session = get_session(sid)
        body = await request.body()
        try:
            gt = np.asarray(Image.open(io.BytesIO(body)).convert("L")) > 127
        except Exception:
            raise HTTPException(status_code=422, detail="body must be a PNG mask")
        if gt.shape != session.shape:
            raise HTTPException(status_code=422, detail="mask size mismatch")
        with session.lock:
            session.gt = gt
        return {"ok": True}

    @app.post("/v1/sessions/{sid}/prompts")
    def add_prompts(sid: str, req: PromptRequest):
        session = get_session(sid)
        strokes = [_decode_stroke(m) for m in req.strokes]
        with session.lock:
            pm = session.prompt_map_history[-1].copy()
            h, w = session.shape
            for s in strokes:
                pm.accumulate(rasterize(s, h, w), s.polarity)
            m_prev = session.current_soft_mask()
            logits, y_hat = shared.forward_step(session.image, m_prev, pm)
            session.stroke_history.append(strokes)
            session.prompt_map_history.append(pm)
            session.mask_history.append((logits, y_hat))
            out = {
                "mask": _png_b64(y_hat),
                "round": session.round,
            }
            if session.gt is not None:
                d, _ = dice_and_recall(y_hat, session.gt)
                out["dice"] = d
            persist(session)
        return out

    @app.post("/v1/sessions/{sid}/undo")
    def undo(sid: str):
        session = get_session(sid)
        with session.lock:
            if not session.mask_history:
                raise HTTPException(status_code=422, detail="nothing to undo")
            session.mask_history.pop()
            session.stroke_history.pop()
            session.prompt_map_history.pop()
            out = {"round": session.round}
            if session.mask_history:
                out["mask"] = _png_b64(session.mask_history[-1][1])
            persist(session)
        return out

    @app.post("/v1/sessions/{sid}/instantiate")
    def instantiate_road(sid: str, req: InstantiateRequest):
        session = get_session(sid)
        stroke = _decode_stroke(req.stroke)
        with session.lock:
            soft = session.current_soft_mask()
            try:
                mask, info = instantiate(session.image, soft, stroke, inst_cfg)
            except NoRoadStructure as exc:
                raise HTTPException(status_code=422, detail=str(exc))
            return {"mask": _png_b64(mask), "attributes": info, "round": session.round}

    @app.get("/v1/sessions/{sid}/export")
    def export(sid: str):
        session = get_session(sid)
        with session.lock:
            mask = (
                session.mask_history[-1][1]
                if session.mask_history
                else np.zeros(session.shape, dtype=bool)
            )
            return Response(content=_mask_png_bytes(mask), media_type="image/png")

    @app.delete("/v1/sessions/{sid}")
    def delete(sid: str):
        with store_lock:
            if sid not in sessions:
                raise HTTPException(status_code=404, detail=f"unknown session {sid}")
            del sessions[sid]
        return {"ok": True}

    return app


def serve(host="127.0.0.1", port=None, net=None, persist_dir=None):
    """Blocking uvicorn server; port from arg or ROADGIE_PORT (default 8321)."""
    import uvicorn

    port = port or int(os.environ.get("ROADGIE_PORT", "8321"))
    app = create_app(net=net, persist_dir=persist_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning")
