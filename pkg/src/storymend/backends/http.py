"""Network clients for the backend wire contract.

All five services speak JSON POST bodies with base64 image payloads; see
docs/config.md for the exact shapes. Clients retry transient failures
exactly `retries` times with a fixed backoff before giving up.
"""

from __future__ import annotations

import base64
import os
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import httpx
import numpy as np

from ..artifacts import ArtifactStore, ImageRef
from ..errors import (
    BackendRejected,
    BackendTimeout,
    BackendUnavailable,
    DimensionMismatch,
)
from .base import (
    BackendSuite,
    EmbeddingVec,
    Mask,
    VlmAnswer,
    VlmQuery,
    check_scale,
    parse_vlm_json,
    validate_answer_shape,
)


@dataclass
class EndpointConfig:
    """Where one backend lives and how patiently we talk to it."""

    base_url: str
    auth_env: str | None = None
    timeout_s: float = 30.0
    retries: int = 2
    backoff_s: float = 0.5
    extra: dict[str, Any] = field(default_factory=dict)


class WireClient:
    """One endpoint's POST-with-retries plumbing."""

    def __init__(
        self,
        config: EndpointConfig,
        *,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.config = config
        self._sleep = sleep
        headers = {}
        if config.auth_env:
            token = os.environ.get(config.auth_env, "")
            if token:
                headers["Authorization"] = f"Bearer {token}"
        self._client = httpx.Client(
            base_url=config.base_url,
            timeout=config.timeout_s,
            headers=headers,
            transport=transport,
        )

    def post(self, path: str, body: dict[str, Any]) -> dict[str, Any]:
        attempts = self.config.retries + 1
        last_exc: Exception | None = None
        timed_out = False
        for attempt in range(attempts):
            if attempt:
                self._sleep(self.config.backoff_s)
            try:
                response = self._client.post(path, json=body)
            except httpx.TimeoutException as exc:
                last_exc, timed_out = exc, True
                continue
            except httpx.HTTPError as exc:
                last_exc, timed_out = exc, False
                continue
            if response.status_code >= 500:
                last_exc, timed_out = BackendUnavailable(f"{path}: HTTP {response.status_code}"), False
                continue
            if response.status_code >= 400:
                raise BackendRejected(f"{path}: HTTP {response.status_code}: {response.text[:500]}")
            return response.json()
        if timed_out:
            raise BackendTimeout(f"{path}: no answer within {self.config.timeout_s}s after {attempts} attempts") from last_exc
        raise BackendUnavailable(f"{path}: unavailable after {attempts} attempts: {last_exc}") from last_exc

    def close(self) -> None:
        self._client.close()


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def _unb64(text: str) -> bytes:
    return base64.b64decode(text.encode("ascii"))


class HttpGenerator:
    def __init__(self, client: WireClient, store: ArtifactStore):
        self.client = client
        self.store = store

    def _store_image(self, reply: Mapping[str, Any]) -> ImageRef:
        return self.store.put(_unb64(reply["image_b64"]), reply.get("media_type", "application/octet-stream"))

    def generate(self, prompt: str, *, seed: int, context: Mapping[str, Any] | None = None) -> ImageRef:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        body: dict[str, Any] = {"prompt": prompt, "seed": seed}
        if context:
            body["context"] = dict(context)
        return self._store_image(self.client.post("/v1/generate", body))

    def generate_conditioned(
        self, reference: ImageRef, prompt: str, *, seed: int, context: Mapping[str, Any] | None = None
    ) -> ImageRef:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        body: dict[str, Any] = {
            "prompt": prompt,
            "seed": seed,
            "reference_b64": _b64(self.store.get(reference)),
            "reference_media_type": reference.media_type,
        }
        if context:
            body["context"] = dict(context)
        return self._store_image(self.client.post("/v1/generate", body))


class HttpEditor:
    def __init__(self, client: WireClient, store: ArtifactStore):
        self.client = client
        self.store = store

    def edit(
        self,
        image: ImageRef,
        prompt: str,
        *,
        conditioning_scale: float,
        seed: int,
        context: Mapping[str, Any] | None = None,
    ) -> ImageRef:
        check_scale(conditioning_scale)
        body: dict[str, Any] = {
            "image_b64": _b64(self.store.get(image)),
            "media_type": image.media_type,
            "prompt": prompt,
            "conditioning_scale": conditioning_scale,
            "seed": seed,
        }
        if context:
            body["context"] = dict(context)
        reply = self.client.post("/v1/edit", body)
        return self.store.put(_unb64(reply["image_b64"]), reply.get("media_type", image.media_type))


class HttpEmbedder:
    def __init__(self, client: WireClient, store: ArtifactStore, *, dim: int):
        self.client = client
        self.store = store
        self._dim = dim

    @property
    def dim(self) -> int:
        return self._dim

    def embed(self, image: ImageRef) -> EmbeddingVec:
        body = {"image_b64": _b64(self.store.get(image)), "media_type": image.media_type}
        reply = self.client.post("/v1/embed", body)
        values = reply.get("embedding", [])
        if len(values) != self._dim:
            raise DimensionMismatch(self._dim, len(values))
        return EmbeddingVec.from_list(values)


class HttpSegmenter:
    def __init__(self, client: WireClient, store: ArtifactStore):
        self.client = client
        self.store = store

    def segment(self, image: ImageRef, entity_label: str) -> Mask:
        if not entity_label:
            raise ValueError("entity label must be non-empty")
        body = {
            "image_b64": _b64(self.store.get(image)),
            "media_type": image.media_type,
            "label": entity_label,
        }
        reply = self.client.post("/v1/segment", body)
        width, height = int(reply["width"]), int(reply["height"])
        bits = np.unpackbits(np.frombuffer(_unb64(reply["mask_b64"]), dtype=np.uint8))
        data = bits[: width * height].astype(bool).reshape(height, width)
        return Mask(width=width, height=height, data=data)


class HttpVlm:
    def __init__(self, client: WireClient):
        self.client = client

    def ask(self, query: VlmQuery) -> VlmAnswer:
        if not query.messages:
            raise ValueError("query must contain at least one message")
        messages = []
        for msg in query.messages:
            content: list[dict[str, Any]] = []
            if msg.text:
                content.append({"type": "text", "text": msg.text})
            for ref in msg.images:
                # images travel inline; the store resolves refs minted by this engine
                content.append({
                    "type": "image",
                    "image_b64": _b64(self._store.get(ref)) if self._store else "",
                    "media_type": ref.media_type,
                })
            messages.append({"role": msg.role, "content": content})
        body: dict[str, Any] = {"messages": messages, "schema_tag": query.schema_tag}
        if query.context:
            body["context"] = dict(query.context)
        reply = self.client.post("/v1/chat", body)
        raw = reply.get("content", "")
        data = parse_vlm_json(raw, query.schema_tag)
        validate_answer_shape(query.schema_tag, data)
        return VlmAnswer(data=data, raw=raw)

    _store: ArtifactStore | None = None

    def bind_store(self, store: ArtifactStore) -> "HttpVlm":
        self._store = store
        return self


class HttpDistance:
    def __init__(self, client: WireClient, store: ArtifactStore):
        self.client = client
        self.store = store

    def distance(self, image_a: ImageRef, image_b: ImageRef) -> float:
        body = {
            "image_a_b64": _b64(self.store.get(image_a)),
            "media_type_a": image_a.media_type,
            "image_b_b64": _b64(self.store.get(image_b)),
            "media_type_b": image_b.media_type,
        }
        return float(self.client.post("/v1/distance", body)["distance"])


def build_http_suite(
    endpoints: Mapping[str, EndpointConfig],
    *,
    embedding_dim: int,
    store: ArtifactStore | None = None,
    transport: httpx.BaseTransport | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> BackendSuite:
    """Wire up network clients for the five services (plus optional extras).

    ``endpoints`` maps backend name (vlm/generator/editor/embedder/segmenter,
    optionally clip_embedder/distance) to its endpoint config.
    """
    store = store if store is not None else ArtifactStore()

    def client(name: str) -> WireClient:
        return WireClient(endpoints[name], transport=transport, sleep=sleep)

    extras: dict[str, Any] = {}
    if "clip_embedder" in endpoints:
        extras["clip_embedder"] = HttpEmbedder(client("clip_embedder"), store, dim=embedding_dim)
    if "distance" in endpoints:
        extras["distance"] = HttpDistance(client("distance"), store)
    return BackendSuite(
        vlm=HttpVlm(client("vlm")).bind_store(store),
        generator=HttpGenerator(client("generator"), store),
        editor=HttpEditor(client("editor"), store),
        embedder=HttpEmbedder(client("embedder"), store, dim=embedding_dim),
        segmenter=HttpSegmenter(client("segmenter"), store),
        store=store,
        extras=extras,
    )
