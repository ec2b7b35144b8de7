"""HTTP interface for scenes, direction catalogs, and edit rendering.

Rendering is stateless and keyed by (scene id, edit stack); an LRU cache
absorbs the repeated near-identical requests produced by interactive
intensity sliders. Edit intensity is quantized to 1/256 of the allowed range
before rendering (documented in /catalog) to raise the cache hit rate.
"""

from __future__ import annotations

import base64
import io
import threading
from collections import OrderedDict
from typing import Optional

import numpy as np
from fastapi import FastAPI, Query, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from PIL import Image
from pydantic import BaseModel, Field

from .archive import canonical_json, load_directions_archive
from .editing import EditSpec, EditStack, apply_edit_stack
from .errors import ClassIdError, ConflictError
from .harness import Runtime, archive_direction_sets
from .scene_core import EditVector, build_latent, class_mask
from .synthetic import render_synthetic_pair

ALPHA_QUANT_STEPS = 256
ALPHA_CAP_FACTOR = 1.5
THUMBNAIL_ALPHA_FACTOR = 0.5
CACHE_SIZE = 256


def _to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip((image + 1.0) / 2.0, 0.0, 1.0) * 255.0).astype(np.uint8)


def _png_b64_rgb(image: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(_to_uint8(image)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode()


def _png_b64_labels(labels: np.ndarray, palette: list[tuple[int, int, int]]) -> str:
    img = Image.fromarray(labels.astype(np.uint8), mode="P")
    flat = []
    for rgb in palette:
        flat.extend(rgb)
    img.putpalette(flat)
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode()


class SceneRequest(BaseModel):
    seed: int


class EditWire(BaseModel):
    classId: int
    alpha: float
    k: Optional[int] = None
    vector: Optional[list[float]] = None
    blocks: Optional[tuple[int, int]] = None


class EditRequest(BaseModel):
    sceneId: str
    edits: list[EditWire] = Field(default_factory=list)


class ServiceState:
    def __init__(self, runtime: Runtime, sets_by_method: dict):
        self.runtime = runtime
        self.sets_by_method = sets_by_method
        self.scenes: dict[str, dict] = {}
        self.cache: OrderedDict[str, dict] = OrderedDict()
        self.lock = threading.Lock()
        self.n = runtime.channel_norm
        self.alpha_cap = ALPHA_CAP_FACTOR * self.n
        self.alpha_step = 2 * self.alpha_cap / ALPHA_QUANT_STEPS

    def default_method(self) -> str:
        methods = sorted(self.sets_by_method)
        return "ctrl_sis" if "ctrl_sis" in methods else methods[0]

    def quantize_alpha(self, alpha: float) -> float:
        return round(alpha / self.alpha_step) * self.alpha_step

    def cache_get(self, key: str):
        with self.lock:
            if key in self.cache:
                self.cache.move_to_end(key)
                return self.cache[key]
        return None

    def cache_put(self, key: str, value: dict) -> None:
        with self.lock:
            self.cache[key] = value
            self.cache.move_to_end(key)
            while len(self.cache) > CACHE_SIZE:
                self.cache.popitem(last=False)


def create_app(
    checkpoint_path: Optional[str] = None,
    archive_path: Optional[str] = None,
    ui_dir: Optional[str] = None,
) -> FastAPI:
    app = FastAPI(title="latentctl edit service")
    app.state.service = None
    if checkpoint_path is not None and archive_path is not None:
        load_artifacts(app, checkpoint_path, archive_path)
    if ui_dir is not None:
        from fastapi.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=ui_dir, html=True), name="ui")

    @app.exception_handler(RequestValidationError)
    async def invalid_body(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"detail": exc.errors()})

    def state() -> ServiceState:
        return app.state.service

    def unavailable() -> JSONResponse:
        return JSONResponse(status_code=503, content={"detail": "artifacts not loaded"})

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "loaded": state() is not None}

    @app.get("/catalog")
    def catalog():
        s = state()
        if s is None:
            return unavailable()
        spec = s.runtime.scene_spec
        names = spec.class_names()
        methods = sorted(s.sets_by_method)
        classes = []
        covered = sorted({c for sets in s.sets_by_method.values() for c in sets})
        for c in covered:
            per_method = {
                m: s.sets_by_method[m][c].count
                for m in methods
                if c in s.sets_by_method[m]
            }
            classes.append({"classId": c, "name": names[c], "directions": per_method})
        return {
            "classes": classes,
            "methods": methods,
            "alphaBound": s.n,
            "alphaCap": s.alpha_cap,
            "alphaQuantStep": s.alpha_step,
            "canvas": {"height": spec.height, "width": spec.width},
            "checkpointHash": s.runtime.checkpoint_hash,
        }

    @app.post("/scene")
    def scene(body: SceneRequest):
        s = state()
        if s is None:
            return unavailable()
        scene_id = f"s{body.seed:016x}"
        cached = s.scenes.get(scene_id)
        if cached is None:
            spec = s.runtime.scene_spec
            _, label_map = render_synthetic_pair(spec, body.seed)
            z = build_latent(body.seed, s.runtime.config.latent_channels, spec.height, spec.width)
            base_image = apply_edit_stack(
                s.runtime.model, z, label_map, EditStack(specs=())
            )
            palette = [
                tuple(int(round(255 * v)) for v in rgb)
                for _, rgb in _family_palette(spec.class_count)
            ]
            cached = {
                "labelMap": label_map,
                "latent": z,
                "baseImage": base_image,
                "response": {
                    "sceneId": scene_id,
                    "labelMapPng": _png_b64_labels(label_map.labels, palette),
                    "baseImagePng": _png_b64_rgb(base_image),
                    "classes": label_map.present_classes(),
                },
            }
            with s.lock:
                s.scenes[scene_id] = cached
        return cached["response"]

    @app.post("/edit")
    def edit(body: EditRequest):
        s = state()
        if s is None:
            return unavailable()
        scene = s.scenes.get(body.sceneId)
        if scene is None:
            return JSONResponse(status_code=404, content={"detail": "unknown scene"})
        for wire in body.edits:
            if abs(wire.alpha) > s.alpha_cap + 1e-9:
                return JSONResponse(
                    status_code=422,
                    content={"detail": f"alpha {wire.alpha} beyond cap {s.alpha_cap}"},
                )
        try:
            specs = tuple(
                EditSpec(
                    class_id=w.classId,
                    alpha=s.quantize_alpha(w.alpha),
                    direction=None if w.vector is None else EditVector(np.asarray(w.vector, dtype=np.float32)),
                    direction_index=w.k if w.vector is None else None,
                    blocks=w.blocks,
                )
                for w in body.edits
            )
            stack = EditStack(specs=specs, base_seed=0, label_map_id=body.sceneId)
        except ConflictError as exc:
            return JSONResponse(status_code=409, content={"detail": str(exc)})
        cache_key = canonical_json({"scene": body.sceneId, "stack": stack.to_dict()})
        hit = s.cache_get(cache_key)
        if hit is not None:
            return hit
        method = s.default_method()

        def lookup(class_id: int, k: int) -> EditVector:
            sets = s.sets_by_method[method]
            if class_id not in sets or not 0 <= k < sets[class_id].count:
                raise ClassIdError(f"no direction {k} for class {class_id}")
            return sets[class_id].vector(k)

        try:
            image = apply_edit_stack(
                s.runtime.model, scene["latent"], scene["labelMap"], stack, lookup
            )
        except ConflictError as exc:
            return JSONResponse(status_code=409, content={"detail": str(exc)})
        except ClassIdError as exc:
            return JSONResponse(status_code=422, content={"detail": str(exc)})
        base = scene["baseImage"]
        delta = np.abs(image - base).mean(axis=2)
        stats = []
        for w in body.edits:
            mask = class_mask(scene["labelMap"], w.classId).values.astype(bool)
            inside = float(delta[mask].mean()) if mask.any() else 0.0
            outside = float(delta[~mask].mean()) if (~mask).any() else 0.0
            stats.append(
                {"classId": w.classId, "insideMeanDelta": inside, "outsideMeanDelta": outside}
            )
        response = {"imagePng": _png_b64_rgb(image), "perEditDeltaStats": stats}
        s.cache_put(cache_key, response)
        return response

    @app.get("/thumbnails")
    def thumbnails(
        sceneId: str = Query(...),
        classId: int = Query(...),
        method: Optional[str] = Query(default=None),
    ):
        s = state()
        if s is None:
            return unavailable()
        scene = s.scenes.get(sceneId)
        if scene is None:
            return JSONResponse(status_code=404, content={"detail": "unknown scene"})
        method = method or s.default_method()
        sets = s.sets_by_method.get(method)
        if sets is None or classId not in sets:
            return JSONResponse(
                status_code=422, content={"detail": f"no directions for class {classId}"}
            )
        if classId not in scene["labelMap"].present_classes():
            return JSONResponse(
                status_code=422, content={"detail": f"class {classId} not in scene"}
            )
        alpha = THUMBNAIL_ALPHA_FACTOR * s.n
        cache_key = canonical_json(
            {"thumbs": sceneId, "class": classId, "method": method, "alpha": alpha}
        )
        hit = s.cache_get(cache_key)
        if hit is not None:
            return hit
        previews = []
        for k in range(sets[classId].count):
            stack = EditStack(
                specs=(EditSpec(class_id=classId, alpha=alpha, direction_index=k),)
            )
            image = apply_edit_stack(
                s.runtime.model,
                scene["latent"],
                scene["labelMap"],
                stack,
                lambda c, kk: sets[c].vector(kk),
            )
            previews.append({"k": k, "imagePng": _png_b64_rgb(image)})
        response = {"classId": classId, "method": method, "alpha": alpha, "previews": previews}
        s.cache_put(cache_key, response)
        return response

    return app


def _family_palette(class_count: int):
    from .synthetic import FAMILIES

    return [FAMILIES[c % len(FAMILIES)] for c in range(class_count)]


def load_artifacts(app: FastAPI, checkpoint_path: str, archive_path: str) -> None:
    runtime = Runtime.from_path(checkpoint_path)
    archive = load_directions_archive(archive_path, runtime.checkpoint_hash)
    app.state.service = ServiceState(runtime, archive_direction_sets(archive))
