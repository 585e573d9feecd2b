"""HTTP query service over a loaded checkpoint and gallery.

Requests read one immutable snapshot (model + gallery + thumbnail table)
grabbed at entry, so a reload never leaves a request straddling two
versions. Embeddings compute under a lock: identical concurrent queries
return identical bytes, and memory stays bounded. Everything else is
read-only and runs freely in parallel.

Errors always serialize as {"error": "<reason>"}.
"""

import base64
import binascii
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import FileResponse, JSONResponse
from pydantic import BaseModel
from starlette.concurrency import run_in_threadpool

from .dataset import load_manifest
from .images import decode_image_bytes
from .model import model_fingerprint
from .persistence import load_checkpoint, load_gallery
from .retrieval import embed_one, rank


class HealthResponse(BaseModel):
    status: str
    model_fingerprint: Optional[str]
    gallery_size: int


class QueryResult(BaseModel):
    instance_id: str
    distance: float
    thumbnail_url: str


class QueryResponse(BaseModel):
    results: list[QueryResult]


class ReloadRequest(BaseModel):
    checkpoint: str
    gallery: str
    dataset_root: Optional[str] = None


@dataclass(frozen=True)
class Snapshot:
    model: object
    gallery: object
    fingerprint: str
    thumbnails: dict
    fingerprint_mismatch: bool


@dataclass
class ServiceState:
    snapshot: Optional[Snapshot] = None
    log: deque = field(default_factory=lambda: deque(maxlen=1000))
    embed_lock: threading.Lock = field(default_factory=threading.Lock)

    def swap(self, snapshot: Snapshot):
        # single reference assignment: readers see old or new, never a mix
        self.snapshot = snapshot
        self.log.append(f"loaded model {snapshot.fingerprint} with "
                        f"{len(snapshot.gallery.instance_ids)} gallery rows")
        if snapshot.fingerprint_mismatch:
            self.log.append(
                f"warning: gallery fingerprint {snapshot.gallery.fingerprint} "
                f"does not match model {snapshot.fingerprint}")

    def require_snapshot(self) -> Snapshot:
        if self.snapshot is None:
            raise HTTPException(503, "no model and gallery loaded yet")
        return self.snapshot


def load_snapshot(checkpoint_path, gallery_path, dataset_root=None) -> Snapshot:
    """Read both files and the optional thumbnail table; never partial."""
    import warnings as _warnings
    model = load_checkpoint(checkpoint_path)
    fingerprint = model_fingerprint(model)
    with _warnings.catch_warnings():
        _warnings.simplefilter("ignore")  # mismatch goes to the service log
        gallery = load_gallery(gallery_path, expected_fingerprint=fingerprint)
    thumbnails = {}
    if dataset_root is not None:
        manifest = load_manifest(dataset_root)
        thumbnails = {logo.instance_id: logo.image_path
                      for logo in manifest.logos}
    return Snapshot(model=model, gallery=gallery, fingerprint=fingerprint,
                    thumbnails=thumbnails,
                    fingerprint_mismatch=gallery.fingerprint != fingerprint)


async def _payload_bytes(request: Request) -> bytes:
    """PNG bytes from either a multipart file part or JSON base64."""
    ctype = request.headers.get("content-type", "")
    if ctype.startswith("multipart/form-data"):
        form = await request.form()
        upload = next((v for v in form.values() if hasattr(v, "read")), None)
        if upload is None:
            raise HTTPException(400, "multipart body carries no file part")
        return await upload.read()
    if ctype.startswith("application/json"):
        try:
            body = await request.json()
        except Exception:
            raise HTTPException(400, "request body is not valid JSON")
        image = body.get("image") if isinstance(body, dict) else None
        if not isinstance(image, str):
            raise HTTPException(
                400, "JSON body needs an 'image' field with base64 PNG data")
        try:
            return base64.b64decode(image, validate=True)
        except binascii.Error as exc:
            raise HTTPException(400, f"invalid base64 image data: {exc}")
    raise HTTPException(400, f"unsupported content type {ctype!r}")


def _answer_query(state: ServiceState, snapshot: Snapshot, payload: bytes,
                  k: int) -> QueryResponse:
    gallery_size = len(snapshot.gallery.instance_ids)
    if not 1 <= k <= gallery_size:
        raise HTTPException(400, f"k {k} out of range 1..{gallery_size}")
    config = snapshot.model.config
    try:
        image = decode_image_bytes(payload, config.input_channels,
                                   config.input_size)
    except ValueError as exc:
        raise HTTPException(400, str(exc))
    with state.embed_lock:
        embedding = embed_one(snapshot.model, image)
    ranked = rank(snapshot.gallery, embedding)
    results = [QueryResult(instance_id=iid, distance=round(dist, 4),
                           thumbnail_url=f"/thumbnail/{iid}")
               for iid, dist in ranked.results[:k]]
    if snapshot.fingerprint_mismatch:
        state.log.append(
            f"warning: query served with gallery fingerprint "
            f"{snapshot.gallery.fingerprint} under model {snapshot.fingerprint}")
    state.log.append(f"query k={k} top={results[0].instance_id}")
    return QueryResponse(results=results)


def create_app(state: ServiceState) -> FastAPI:
    app = FastAPI(title="logo sketch retrieval")

    @app.exception_handler(HTTPException)
    async def _http_error(request, exc):
        return JSONResponse({"error": str(exc.detail)},
                            status_code=exc.status_code)

    @app.exception_handler(RequestValidationError)
    async def _validation_error(request, exc):
        return JSONResponse({"error": str(exc.errors())}, status_code=400)

    @app.get("/health", response_model=HealthResponse)
    def health():
        snapshot = state.snapshot
        if snapshot is None:
            return HealthResponse(status="empty", model_fingerprint=None,
                                  gallery_size=0)
        return HealthResponse(
            status="ok", model_fingerprint=snapshot.fingerprint,
            gallery_size=len(snapshot.gallery.instance_ids))

    @app.post("/query", response_model=QueryResponse)
    async def query(request: Request, k: int = 10):
        snapshot = state.require_snapshot()
        payload = await _payload_bytes(request)
        return await run_in_threadpool(_answer_query, state, snapshot,
                                       payload, k)

    @app.get("/thumbnail/{instance_id}")
    def thumbnail(instance_id: str):
        snapshot = state.require_snapshot()
        path = snapshot.thumbnails.get(instance_id)
        if path is None or not Path(path).is_file():
            raise HTTPException(404, f"no thumbnail for {instance_id!r}")
        state.log.append(f"thumbnail {instance_id}")
        return FileResponse(path, media_type="image/png")

    @app.post("/admin/reload", response_model=HealthResponse)
    async def reload(body: ReloadRequest):
        try:
            snapshot = await run_in_threadpool(
                load_snapshot, body.checkpoint, body.gallery,
                body.dataset_root)
        except HTTPException:
            raise
        except Exception as exc:
            raise HTTPException(400, f"reload failed: {exc}")
        state.swap(snapshot)
        return HealthResponse(
            status="ok", model_fingerprint=snapshot.fingerprint,
            gallery_size=len(snapshot.gallery.instance_ids))

    return app


def serve(checkpoint, gallery, dataset_root=None, port: int = 8000,
          host: str = "127.0.0.1"):
    """Load both files, then block serving HTTP until interrupted."""
    import uvicorn

    state = ServiceState()
    state.swap(load_snapshot(checkpoint, gallery, dataset_root))
    app = create_app(state)
    uvicorn.run(app, host=host, port=port, log_level="warning")
