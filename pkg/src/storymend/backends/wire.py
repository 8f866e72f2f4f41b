"""HTTP host exposing any BackendSuite on the documented wire contract.

Serves the mock suite for development and interchangeability tests; the
same routes are what a production model server is expected to implement.
"""

from __future__ import annotations

import base64
from typing import Any

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from ..errors import BackendError, BackendUnavailable, InvalidScale, UnparseableAnswer
from .base import BackendSuite, VlmMessage, VlmQuery


class GenerateBody(BaseModel):
    prompt: str
    seed: int = 0
    reference_b64: str | None = None
    reference_media_type: str | None = None
    context: dict[str, Any] | None = None


class EditBody(BaseModel):
    image_b64: str
    media_type: str
    prompt: str
    conditioning_scale: float
    seed: int = 0
    context: dict[str, Any] | None = None


class EmbedBody(BaseModel):
    image_b64: str
    media_type: str


class SegmentBody(BaseModel):
    image_b64: str
    media_type: str
    label: str


class ChatBody(BaseModel):
    messages: list[dict[str, Any]]
    schema_tag: str
    context: dict[str, Any] | None = None


class DistanceBody(BaseModel):
    image_a_b64: str
    media_type_a: str
    image_b_b64: str
    media_type_b: str


def create_backend_app(suite: BackendSuite) -> FastAPI:
    app = FastAPI(title="storymend backend host")
    store = suite.store

    def put(b64: str, media_type: str):
        return store.put(base64.b64decode(b64), media_type)

    def image_reply(ref) -> dict[str, str]:
        return {"image_b64": base64.b64encode(store.get(ref)).decode("ascii"), "media_type": ref.media_type}

    @app.exception_handler(BackendUnavailable)
    async def unavailable(_, exc):  # pragma: no cover - trivial mapping
        return JSONResponse(status_code=503, content={"detail": str(exc)})

    @app.exception_handler(BackendError)
    async def rejected(_, exc):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.post("/v1/generate")
    def generate(body: GenerateBody):
        ctx = body.context or None
        if body.reference_b64 is not None:
            ref = put(body.reference_b64, body.reference_media_type or "application/octet-stream")
            out = suite.generator.generate_conditioned(ref, body.prompt, seed=body.seed, context=ctx)
        else:
            if not body.prompt:
                raise HTTPException(status_code=400, detail="prompt must be non-empty")
            out = suite.generator.generate(body.prompt, seed=body.seed, context=ctx)
        return image_reply(out)

    @app.post("/v1/edit")
    def edit(body: EditBody):
        try:
            out = suite.editor.edit(
                put(body.image_b64, body.media_type),
                body.prompt,
                conditioning_scale=body.conditioning_scale,
                seed=body.seed,
                context=body.context or None,
            )
        except InvalidScale as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        return image_reply(out)

    @app.post("/v1/embed")
    def embed(body: EmbedBody):
        vec = suite.embedder.embed(put(body.image_b64, body.media_type))
        return {"embedding": [float(v) for v in vec.values]}

    @app.post("/v1/segment")
    def segment(body: SegmentBody):
        mask = suite.segmenter.segment(put(body.image_b64, body.media_type), body.label)
        packed = np.packbits(mask.data.astype(np.uint8).ravel())
        return {
            "width": mask.width,
            "height": mask.height,
            "mask_b64": base64.b64encode(packed.tobytes()).decode("ascii"),
        }

    @app.post("/v1/chat")
    def chat(body: ChatBody):
        messages = []
        for raw in body.messages:
            text_parts = []
            images = []
            for part in raw.get("content", []):
                if part.get("type") == "text":
                    text_parts.append(part.get("text", ""))
                elif part.get("type") == "image":
                    images.append(put(part.get("image_b64", ""), part.get("media_type", "application/octet-stream")))
            messages.append(VlmMessage(role=raw.get("role", "user"), text="\n".join(text_parts), images=tuple(images)))
        query = VlmQuery(messages=tuple(messages), schema_tag=body.schema_tag, context=body.context or {})
        try:
            answer = suite.vlm.ask(query)
        except UnparseableAnswer as exc:
            # ship the raw text back; parsing is the client's contract
            return {"content": exc.raw}
        return {"content": answer.raw}

    @app.post("/v1/distance")
    def distance(body: DistanceBody):
        backend = suite.extras.get("distance")
        if backend is None:
            raise HTTPException(status_code=404, detail="no distance backend configured")
        a = put(body.image_a_b64, body.media_type_a)
        b = put(body.image_b_b64, body.media_type_b)
        return {"distance": backend.distance(a, b)}

    return app
