"""HTTP annotation service.

Sessions walk a fixed workflow: upload -> (preprocess once) -> roi ->
segment-middle -> [refine]* -> propagate -> [refine + propagate]*, with
409 for out-of-order calls, 422 for prompts outside the ROI, and 423
when an inference is already running for the session.  Completed results
sit in a small MRU cache; on a miss the server either recomputes from
session state (default) or answers 410, per configuration.

Volumes arrive as the interchange envelope (see volume_io); masks travel
as run-length payloads (see wire).
"""

from __future__ import annotations

import json
import logging
import threading
import time
import uuid
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from fastapi import FastAPI, HTTPException, Request, Response
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel

from .model import PromptableNet, load_checkpoint
from .preprocess import get_preset, percentile_normalize, window_ct
from .propagate import segment_3d
from .volume import NORMALIZED_0_255, BoundingBox2D, SliceRange
from .volume_io import unpack_envelope
from .wire import mask_to_wire, wire_to_mask

logger = logging.getLogger("promptseg.server")

DEFAULT_CACHE_CAPACITY = 4
DEFAULT_MAX_UPLOAD = 64 * 1024 * 1024


class MruCache:
    """Most-recently-used-first bounded cache; eviction from the back."""

    def __init__(self, capacity=DEFAULT_CACHE_CAPACITY):
        if capacity < 1:
            raise ValueError("cache capacity must be >= 1")
        self.capacity = capacity
        self._items = OrderedDict()
        self._lock = threading.Lock()

    def get(self, key):
        with self._lock:
            if key not in self._items:
                return None
            self._items.move_to_end(key, last=False)  # promote to front
            return self._items[key]

    def put(self, key, value):
        with self._lock:
            self._items[key] = value
            self._items.move_to_end(key, last=False)
            while len(self._items) > self.capacity:
                self._items.popitem(last=True)

    def order(self):
        with self._lock:
            return list(self._items)


@dataclass
class SegSession:
    session_id: str
    volume: object
    state: str = "created"  # created -> roi_set -> middle_done -> propagated
    preprocessed: Optional[str] = None
    roi_range: Optional[SliceRange] = None
    roi_box: Optional[BoundingBox2D] = None
    middle_mask: Optional[np.ndarray] = None
    refined: dict = field(default_factory=dict)  # slice -> 2D bool mask
    final_mask: Optional[object] = None
    model_name: str = "default"
    provenance: dict = field(default_factory=dict)
    last_activity: float = field(default_factory=time.time)
    busy: threading.Lock = field(default_factory=threading.Lock)

    def touch(self):
        self.last_activity = time.time()


class PreprocessRequest(BaseModel):
    preset: Optional[str] = None
    percentile: bool = False


class BoxPayload(BaseModel):
    slice_index: int
    x_min: int
    y_min: int
    x_max: int
    y_max: int


class RoiRequest(BaseModel):
    start_slice: int
    end_slice: int
    box: BoxPayload


class RefineRequest(BaseModel):
    slice_index: int
    mask: dict  # {"dims": [nx, ny], "rle": [...]}


def _err(status, code, detail=""):
    raise HTTPException(status_code=status, detail={"error": code, "detail": detail})


def create_app(model: PromptableNet = None, model_path=None, extra_models=None,
               cache_capacity=DEFAULT_CACHE_CAPACITY, max_upload_bytes=DEFAULT_MAX_UPLOAD,
               cache_miss="recompute") -> FastAPI:
    """Build the service around a loaded model (or a checkpoint path)."""
    if model is None:
        if model_path is None:
            raise ValueError("create_app needs a model or a checkpoint path")
        model = load_checkpoint(model_path)
    if cache_miss not in ("recompute", "gone"):
        raise ValueError(f"cache_miss must be 'recompute' or 'gone', got {cache_miss!r}")
    models = {"default": model}
    models.update(extra_models or {})

    app = FastAPI(title="promptseg annotation server")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
        allow_headers=["*"], expose_headers=["X-Dims"],
    )
    sessions: dict[str, SegSession] = {}
    store_lock = threading.Lock()
    cache = MruCache(cache_capacity)

    @app.middleware("http")
    async def request_log(request: Request, call_next):
        start = time.time()
        response = await call_next(request)
        logger.info(
            json.dumps(
                {
                    "method": request.method,
                    "path": request.url.path,
                    "status": response.status_code,
                    "ms": round((time.time() - start) * 1000, 2),
                }
            )
        )
        return response

    def get_session(session_id) -> SegSession:
        with store_lock:
            session = sessions.get(session_id)
        if session is None:
            _err(404, "unknown_session", session_id)
        return session

    def expect_state(session, *allowed):
        if session.state not in allowed:
            _err(
                409,
                "out_of_order",
                f"state is {session.state!r}, expected one of {sorted(allowed)}",
            )

    @app.post("/sessions", status_code=201)
    async def create_session(request: Request, model_name: str = "default"):
        body = await request.body()
        if len(body) > max_upload_bytes:
            _err(413, "upload_too_large", f"limit is {max_upload_bytes} bytes")
        if model_name not in models:
            _err(400, "unknown_model", model_name)
        try:
            volume = unpack_envelope(body)
        except Exception as exc:
            _err(400, "malformed_volume", str(exc))
        nx, ny, _ = volume.dims
        size = models[model_name].config.input_size
        if (nx, ny) != (size, size):
            _err(400, "bad_in_plane_size", f"model expects {size}x{size} slices, got {nx}x{ny}")
        session_id = uuid.uuid4().hex[:16]
        with store_lock:
            sessions[session_id] = SegSession(session_id=session_id, volume=volume,
                                              model_name=model_name)
        return {"session_id": session_id, "dims": list(volume.dims)}

    @app.post("/sessions/{session_id}/preprocess")
    def preprocess(session_id: str, req: PreprocessRequest):
        session = get_session(session_id)
        if session.preprocessed is not None or session.volume.intensity_kind == NORMALIZED_0_255:
            _err(409, "already_normalized", session.preprocessed or "upload was normalized")
        if req.percentile == (req.preset is not None):
            _err(400, "bad_request", "choose exactly one of preset / percentile")
        try:
            if req.percentile:
                session.volume = percentile_normalize(session.volume)
                session.preprocessed = "percentile"
            else:
                session.volume = window_ct(session.volume, get_preset(req.preset))
                session.preprocessed = req.preset
        except KeyError as exc:
            _err(400, "unknown_preset", str(exc))
        except ValueError as exc:
            _err(400, "preprocess_failed", str(exc))
        session.touch()
        return {"preprocessed": session.preprocessed}

    @app.post("/sessions/{session_id}/roi")
    def set_roi(session_id: str, req: RoiRequest):
        session = get_session(session_id)
        expect_state(session, "created", "roi_set")
        nx, ny, nz = session.volume.dims
        if not (0 <= req.start_slice <= req.end_slice < nz):
            _err(422, "roi_outside_volume", f"slices [{req.start_slice}, {req.end_slice}] vs nz={nz}")
        try:
            box = BoundingBox2D(req.box.slice_index, req.box.x_min, req.box.y_min,
                                req.box.x_max, req.box.y_max)
            box.check_within(session.volume.dims)
        except ValueError as exc:
            _err(422, "bad_box", str(exc))
        if not (req.start_slice <= box.slice_index <= req.end_slice):
            _err(422, "box_outside_roi",
                 f"box slice {box.slice_index} outside [{req.start_slice}, {req.end_slice}]")
        session.roi_range = SliceRange(req.start_slice, req.end_slice)
        session.roi_box = box
        session.state = "roi_set"
        session.touch()
        return {"roi": [req.start_slice, req.end_slice]}

    def _session_model(session) -> PromptableNet:
        return models[session.model_name]

    @app.post("/sessions/{session_id}/segment-middle")
    def segment_middle(session_id: str):
        session = get_session(session_id)
        expect_state(session, "roi_set")
        if session.volume.intensity_kind != NORMALIZED_0_255:
            _err(409, "not_normalized", "call /preprocess first")
        if not session.busy.acquire(blocking=False):
            _err(423, "inference_in_flight", "another request is segmenting this session")
        try:
            box = session.roi_box
            result = segment_3d(
                session.volume, box, SliceRange(box.slice_index, box.slice_index),
                _session_model(session),
            )
            session.middle_mask = result.mask.labels[box.slice_index] != 0
            session.state = "middle_done"
            session.touch()
            nx, ny, _ = session.volume.dims
            return {
                "slice_index": box.slice_index,
                "mask": mask_to_wire(session.middle_mask, (nx, ny)),
                "empty": bool(result.empty_prompt_mask),
            }
        finally:
            session.busy.release()

    @app.post("/sessions/{session_id}/refine")
    def refine(session_id: str, req: RefineRequest):
        session = get_session(session_id)
        expect_state(session, "middle_done", "propagated")
        if req.slice_index not in session.roi_range:
            _err(422, "slice_outside_roi", f"slice {req.slice_index} vs {session.roi_range}")
        nx, ny, _ = session.volume.dims
        try:
            mask2d = wire_to_mask(req.mask)
        except (KeyError, ValueError) as exc:
            _err(422, "bad_mask_payload", str(exc))
        if mask2d.shape != (ny, nx):
            _err(422, "bad_mask_shape", f"{mask2d.shape} vs {(ny, nx)}")
        session.refined[int(req.slice_index)] = mask2d != 0
        session.touch()
        return {"refined_slices": sorted(session.refined)}

    @app.post("/sessions/{session_id}/propagate")
    def propagate(session_id: str):
        session = get_session(session_id)
        expect_state(session, "middle_done", "propagated")
        if not session.busy.acquire(blocking=False):
            _err(423, "inference_in_flight", "another request is segmenting this session")
        try:
            model_obj = _session_model(session)
            refined = dict(session.refined)
            if session.middle_mask is not None and session.roi_box.slice_index not in refined:
                # the reviewed middle slice conditions the propagation
                refined[session.roi_box.slice_index] = session.middle_mask
            result = segment_3d(
                session.volume, session.roi_box, session.roi_range, model_obj,
                refined_masks=refined,
            )
            session.final_mask = result.mask
            session.state = "propagated"
            session.provenance = {
                "checkpoint": model_obj.checkpoint_id,
                "prompt": {
                    "slice_index": session.roi_box.slice_index,
                    "x_min": session.roi_box.x_min,
                    "y_min": session.roi_box.y_min,
                    "x_max": session.roi_box.x_max,
                    "y_max": session.roi_box.y_max,
                },
                "range": [session.roi_range.top, session.roi_range.bottom],
                "refined_slices": sorted(int(z) for z in session.refined),
                "completed_at": time.time(),
            }
            payload = _result_payload(session)
            cache.put(session_id, payload)
            session.touch()
            return payload
        finally:
            session.busy.release()

    def _result_payload(session):
        return {
            "session_id": session.session_id,
            "mask": mask_to_wire(session.final_mask.labels, session.volume.dims),
            "provenance": session.provenance,
        }

    @app.get("/sessions/{session_id}/result")
    def get_result(session_id: str):
        session = get_session(session_id)
        if session.state != "propagated":
            _err(409, "no_result", f"state is {session.state!r}")
        cached = cache.get(session_id)
        if cached is not None:
            return cached
        if cache_miss == "gone":
            _err(410, "result_evicted", "recompute disabled by configuration")
        payload = _result_payload(session)
        cache.put(session_id, payload)
        return payload

    @app.get("/sessions/{session_id}")
    def session_info(session_id: str):
        session = get_session(session_id)
        return {
            "session_id": session.session_id,
            "state": session.state,
            "dims": list(session.volume.dims),
            "spacing": list(session.volume.spacing),
            "preprocessed": session.preprocessed,
            "intensity_kind": session.volume.intensity_kind,
            "roi": None if session.roi_range is None
            else [session.roi_range.top, session.roi_range.bottom],
            "box": None if session.roi_box is None else {
                "slice_index": session.roi_box.slice_index,
                "x_min": session.roi_box.x_min, "y_min": session.roi_box.y_min,
                "x_max": session.roi_box.x_max, "y_max": session.roi_box.y_max,
            },
            "refined_slices": sorted(session.refined),
            "model": session.model_name,
        }

    @app.get("/sessions/{session_id}/slice/{index}")
    def get_slice(session_id: str, index: int):
        """Raw little-endian float32 pixels of one slice (for viewers)."""
        session = get_session(session_id)
        nx, ny, nz = session.volume.dims
        if not 0 <= index < nz:
            _err(422, "slice_out_of_range", f"{index} vs nz={nz}")
        data = np.ascontiguousarray(session.volume.values[index], dtype="<f4").tobytes()
        return Response(content=data, media_type="application/octet-stream",
                        headers={"X-Dims": f"{nx},{ny}"})

    @app.get("/admin/cache")
    def cache_order():
        return {"order": cache.order(), "capacity": cache.capacity}

    @app.get("/healthz")
    def healthz():
        return {"ok": True, "models": sorted(models), "sessions": len(sessions)}

    app.state.sessions = sessions
    app.state.cache = cache
    app.state.models = models
    return app
