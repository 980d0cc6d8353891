"""Interactive matting over HTTP.

A session is created by uploading a PNG; candidates are computed once and
cached with the preprocessed image and its feature maps. Prompts arrive in
source-image pixel coordinates, responses embed the mask and matte as base64
PNG (raw binary variants live under /raw/). The checkpoint is shared
read-only across sessions; per-session state is single-writer.
"""

from __future__ import annotations

import base64
import io as pyio
import threading
import time
import uuid
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, Response
from PIL import Image

from .checkpoint import load_checkpoint
from .errors import SelectionError
from .guidance import (MaskCandidate, OracleConfig, Prompt, encode_features,
                       load_guidance, oracle_candidates)
from .imageops import (AlphaMatte, BinaryMask, Box, ImageRGB, read_alpha)
from .inference import (BASE_FROM_MASK, BASE_FROM_OS8, InferenceConfig,
                        MergePolicy, matte_from_prompt, preprocess)

MAX_UPLOAD_BYTES = 16 * 1024 * 1024


# ---------------------------------------------------------------------------
# candidate sources
# ---------------------------------------------------------------------------

def fallback_candidates(image: ImageRGB, max_candidates: int = 8):
    """Low-quality proposer for when no guidance source is available:
    luminance-contrast thresholds plus connected components."""
    from scipy import ndimage
    lum = (0.299 * image.planes[0] + 0.587 * image.planes[1]
           + 0.114 * image.planes[2])
    lum = (lum - lum.min()) / max(lum.max() - lum.min(), 1e-6)
    total = lum.size
    out = []
    next_id = 0
    for q in (0.35, 0.5, 0.65):
        for polarity in (1, -1):
            mask = (lum >= q) if polarity == 1 else (lum < q)
            labels, count = ndimage.label(mask)
            if not count:
                continue
            sizes = np.bincount(labels.reshape(-1))[1:]
            order = np.argsort(sizes)[::-1]
            for comp in order[:2]:
                plane = (labels == comp + 1).astype(np.uint8)
                area = int(plane.sum())
                if area < 0.01 * total or area > 0.95 * total:
                    continue
                cand = BinaryMask(plane)
                duplicate = any(
                    _mask_iou(cand, existing.mask) > 0.9 for existing in out)
                if not duplicate:
                    out.append(MaskCandidate(mask=cand, score=0.3, id=next_id))
                    next_id += 1
            if len(out) >= max_candidates:
                return out[:max_candidates]
    return out


def _mask_iou(a: BinaryMask, b: BinaryMask) -> float:
    from .imageops import iou
    return iou(a, b)


def candidates_for_image(image: ImageRGB, stem, guidance_dir, alpha_dir):
    """Imported exports first, then oracle-from-GT demo mode, then fallback.

    Returns (candidates, source tag, imported features or None).
    """
    if guidance_dir and stem:
        cands, feats = load_guidance(guidance_dir, stem)
        if cands:
            return cands, "imported", feats
    if alpha_dir and stem:
        from pathlib import Path
        root = Path(alpha_dir)
        paths = sorted(root.glob(f"{stem}_*.png")) or \
            ([root / f"{stem}.png"] if (root / f"{stem}.png").exists() else [])
        if paths:
            alphas = [read_alpha(p) for p in paths]
            return oracle_candidates(alphas, OracleConfig(r_max=0, jitter=0.0)), \
                "oracle", None
    return fallback_candidates(image), "fallback", None


# ---------------------------------------------------------------------------
# session state
# ---------------------------------------------------------------------------

@dataclass
class SessionResult:
    matte: AlphaMatte
    mask: BinaryMask
    candidate_id: int


@dataclass
class Session:
    id: str
    image: ImageRGB
    candidates: list
    candidate_source: str
    created: float
    last_access: float
    features: object = None          # encode_features cache for the padded image
    padded: object = None
    transform: object = None
    history: list = field(default_factory=list)   # append-only prompt log
    results: list = field(default_factory=list)
    lock: threading.Lock = field(default_factory=threading.Lock)


class SessionStore:
    def __init__(self, ttl_seconds: float):
        self.ttl = ttl_seconds
        self._sessions: dict[str, Session] = {}
        self._lock = threading.Lock()

    def sweep(self, now=None):
        now = time.monotonic() if now is None else now
        with self._lock:
            dead = [sid for sid, s in self._sessions.items()
                    if now - s.last_access > self.ttl]
            for sid in dead:
                del self._sessions[sid]

    def add(self, session: Session):
        with self._lock:
            self._sessions[session.id] = session

    def get(self, sid: str):
        self.sweep()
        with self._lock:
            session = self._sessions.get(sid)
            if session:
                session.last_access = time.monotonic()
            return session


# ---------------------------------------------------------------------------
# png helpers
# ---------------------------------------------------------------------------

def _png_bytes_gray8(plane01: np.ndarray) -> bytes:
    arr = np.round(np.clip(plane01, 0, 1) * 255).astype(np.uint8)
    buf = pyio.BytesIO()
    Image.fromarray(arr, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def _png_bytes_gray16(plane01: np.ndarray) -> bytes:
    arr = np.round(np.clip(plane01, 0, 1).astype(np.float64) * 65535).astype(np.uint16)
    buf = pyio.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def _png_bytes_rgb(planes01: np.ndarray) -> bytes:
    arr = np.round(np.clip(planes01, 0, 1).transpose(1, 2, 0) * 255).astype(np.uint8)
    buf = pyio.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def background_plane(kind: str, h: int, w: int) -> np.ndarray:
    if kind == "white":
        return np.ones((3, h, w), np.float32)
    if kind == "black":
        return np.zeros((3, h, w), np.float32)
    if kind == "checker":
        yy, xx = np.mgrid[:h, :w]
        cell = ((yy // 8 + xx // 8) % 2).astype(np.float32)
        plane = 0.65 + 0.25 * cell
        return np.broadcast_to(plane, (3, h, w)).astype(np.float32).copy()
    raise ValueError(f"unknown background {kind!r}")


# ---------------------------------------------------------------------------
# request validation (plain dict -> Prompt), 400 with field-level messages
# ---------------------------------------------------------------------------

class PromptValidationError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(message)
        self.field = field_name


def parse_prompt_request(payload: dict, width: int, height: int):
    """Returns (Prompt, policy override or None)."""
    if not isinstance(payload, dict):
        raise PromptValidationError("body", "request body must be a JSON object")
    kind = payload.get("kind")
    if kind not in ("box", "point"):
        raise PromptValidationError("kind", "kind must be 'box' or 'point'")
    policy = payload.get("policy")
    if policy is not None and policy not in (BASE_FROM_MASK, BASE_FROM_OS8):
        raise PromptValidationError("policy", "policy must be 'mask' or 'os8'")

    if kind == "box":
        box = payload.get("box")
        if not isinstance(box, dict):
            raise PromptValidationError("box", "box must be an object with x0,y0,x1,y1")
        try:
            coords = [int(box[k]) for k in ("x0", "y0", "x1", "y1")]
        except (KeyError, TypeError, ValueError) as exc:
            raise PromptValidationError("box", f"bad box coordinates: {exc}")
        x0, y0, x1, y1 = coords
        if not (0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height):
            raise PromptValidationError(
                "box", f"box ({x0},{y0},{x1},{y1}) outside image {width}x{height}")
        return Prompt(kind="box", box=Box(x0, y0, x1, y1)), policy

    point = payload.get("point")
    if not isinstance(point, dict):
        raise PromptValidationError("point", "point must be an object with x,y")
    try:
        x, y = int(point["x"]), int(point["y"])
    except (KeyError, TypeError, ValueError) as exc:
        raise PromptValidationError("point", f"bad point coordinates: {exc}")
    if not (0 <= x < width and 0 <= y < height):
        raise PromptValidationError(
            "point", f"point ({x},{y}) outside image {width}x{height}")
    return Prompt(kind="point", point=(x, y)), policy


# ---------------------------------------------------------------------------
# the app
# ---------------------------------------------------------------------------

def create_app(checkpoint, target: int = 64,
               default_policy: str = BASE_FROM_OS8,
               guidance_dir=None, alpha_dir=None,
               ttl_seconds: float = 3600.0,
               max_upload_bytes: int = MAX_UPLOAD_BYTES,
               ui_dir=None):
    """Build the FastAPI app around a loaded (or path-to) checkpoint."""
    if isinstance(checkpoint, (str, bytes)) or hasattr(checkpoint, "__fspath__"):
        checkpoint = load_checkpoint(checkpoint)

    app = FastAPI(title="mattekit", version="0.1.0")
    from fastapi.middleware.cors import CORSMiddleware
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"])
    if ui_dir:
        from fastapi.staticfiles import StaticFiles
        app.mount("/ui", StaticFiles(directory=ui_dir, html=True), name="ui")
    store = SessionStore(ttl_seconds)
    app.state.store = store
    app.state.checkpoint = checkpoint

    def error(status: int, message: str, field_name=None):
        body = {"error": message}
        if field_name:
            body["field"] = field_name
        return JSONResponse(body, status_code=status)

    @app.get("/v1/health")
    def health():
        return {"status": "ok", "target": target,
                "policy": default_policy}

    @app.post("/v1/sessions", status_code=201)
    async def create_session(request: Request, stem: str = None):
        body = await request.body()
        if len(body) > max_upload_bytes:
            return error(413, f"image exceeds {max_upload_bytes} bytes")
        try:
            with Image.open(pyio.BytesIO(body)) as im:
                arr = np.asarray(im.convert("RGB"), np.float32) / 255.0
        except Exception:
            return error(400, "body is not a decodable image", "body")
        image = ImageRGB(arr.transpose(2, 0, 1))
        cands, source, _ = candidates_for_image(image, stem, guidance_dir,
                                                alpha_dir)
        now = time.monotonic()
        session = Session(id=uuid.uuid4().hex, image=image, candidates=cands,
                          candidate_source=source, created=now, last_access=now)
        store.add(session)
        return {"id": session.id, "width": image.width, "height": image.height,
                "n_candidates": len(cands), "candidate_source": source}

    @app.get("/v1/sessions/{sid}/candidates")
    def list_candidates(sid: str):
        session = store.get(sid)
        if session is None:
            return error(404, "unknown session")
        return {"candidates": [
            {"id": c.id, "score": c.score,
             "mask_png": _b64(_png_bytes_gray8(c.mask.plane.astype(np.float32)))}
            for c in session.candidates]}

    @app.post("/v1/sessions/{sid}/matte")
    async def run_matte(sid: str, request: Request):
        session = store.get(sid)
        if session is None:
            return error(404, "unknown session")
        try:
            payload = await request.json()
        except Exception:
            return error(400, "body must be JSON", "body")
        try:
            prompt, policy_override = parse_prompt_request(
                payload, session.image.width, session.image.height)
        except PromptValidationError as exc:
            return error(400, str(exc), exc.field)

        base = policy_override or default_policy
        cfg = InferenceConfig(target=target, policy=MergePolicy(base=base))
        started = time.perf_counter()
        with session.lock:
            if session.features is None:
                session.padded, session.transform = preprocess(session.image,
                                                               target)
                session.features = encode_features(session.padded,
                                                   checkpoint.encoder,
                                                   training=False)
            try:
                matte, selected, _ = matte_from_prompt(
                    session.image, prompt, session.candidates, checkpoint, cfg,
                    features=session.features)
            except SelectionError as exc:
                return error(409, str(exc))
            k = len(session.results)
            session.results.append(SessionResult(matte=matte,
                                                 mask=selected.mask,
                                                 candidate_id=selected.id))
            session.history.append({"prompt": payload, "result": k,
                                    "candidate_id": selected.id})
        elapsed_ms = (time.perf_counter() - started) * 1000.0
        return {"result": k, "candidate_id": selected.id,
                "width": session.image.width, "height": session.image.height,
                "matte_png": _b64(_png_bytes_gray8(matte.plane)),
                "mask_png": _b64(_png_bytes_gray8(
                    selected.mask.plane.astype(np.float32))),
                "timing_ms": elapsed_ms}

    def _result(sid: str, k: int):
        session = store.get(sid)
        if session is None:
            return None, error(404, "unknown session")
        if not 0 <= k < len(session.results):
            return None, error(404, f"no result {k}")
        return (session, session.results[k]), None

    @app.get("/v1/sessions/{sid}/results/{k}/composite")
    def composite_result(sid: str, k: int, bg: str = "white"):
        hit, err = _result(sid, k)
        if err is not None:
            return err
        session, result = hit
        try:
            bg_planes = background_plane(bg, session.image.height,
                                         session.image.width)
        except ValueError as exc:
            return error(400, str(exc), "bg")
        a = result.matte.plane[None]
        out = a * session.image.planes + (1.0 - a) * bg_planes
        return Response(content=_png_bytes_rgb(out), media_type="image/png")

    @app.get("/v1/sessions/{sid}/results/{k}/raw/matte")
    def raw_matte(sid: str, k: int):
        hit, err = _result(sid, k)
        if err is not None:
            return err
        _, result = hit
        return Response(content=_png_bytes_gray16(result.matte.plane),
                        media_type="image/png")

    @app.get("/v1/sessions/{sid}/results/{k}/raw/mask")
    def raw_mask(sid: str, k: int):
        hit, err = _result(sid, k)
        if err is not None:
            return err
        _, result = hit
        return Response(content=_png_bytes_gray8(
            result.mask.plane.astype(np.float32)), media_type="image/png")

    @app.get("/v1/sessions/{sid}/history")
    def history(sid: str):
        session = store.get(sid)
        if session is None:
            return error(404, "unknown session")
        return {"history": session.history}

    return app
