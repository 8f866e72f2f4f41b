"""The five model-service interfaces every agent consumes.

Mocks and network clients implement the same protocols and are
interchangeable anywhere a :class:`BackendSuite` is accepted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Mapping, Protocol, Sequence, runtime_checkable

import numpy as np

from ..artifacts import ArtifactStore, ImageRef
from ..errors import InvalidScale, UnparseableAnswer

# Response-schema tags understood by the audit/repair pipeline.
SCHEMA_ENTITY_MATCH = "entity-match"
SCHEMA_MISMATCH_DETECT = "mismatch-detect"
SCHEMA_FIX_VERIFY = "fix-verify"
SCHEMA_CORRECTION_PARSE = "correction-parse"


@dataclass(frozen=True)
class EmbeddingVec:
    """Fixed-length real vector returned by the embedder."""

    values: np.ndarray
    dim: int

    @staticmethod
    def from_list(values: Sequence[float]) -> "EmbeddingVec":
        arr = np.asarray(values, dtype=np.float64)
        return EmbeddingVec(values=arr, dim=int(arr.shape[0]))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))


@dataclass(frozen=True)
class Mask:
    """Binary segmentation mask with the image's dimensions."""

    width: int
    height: int
    data: np.ndarray  # bool array of shape (height, width)

    @property
    def area_fraction(self) -> float:
        return float(self.data.mean()) if self.data.size else 0.0

    def is_empty(self) -> bool:
        return not bool(self.data.any())

    def is_full(self) -> bool:
        return bool(self.data.all()) and self.data.size > 0


@dataclass(frozen=True)
class VlmMessage:
    role: str
    text: str
    images: tuple[ImageRef, ...] = ()


@dataclass(frozen=True)
class VlmQuery:
    """Role-tagged message list plus a required response-schema tag.

    ``context`` carries run-position metadata (panel index, audit ordinal)
    used by scripted mocks and forwarded verbatim on the wire.
    """

    messages: tuple[VlmMessage, ...]
    schema_tag: str
    context: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class VlmAnswer:
    data: Any
    raw: str
    parseable: bool = True


def parse_vlm_json(raw: str, schema_tag: str) -> Any:
    """Parse a VLM reply as JSON; raise :class:`UnparseableAnswer` on prose."""
    try:
        return json.loads(raw)
    except (json.JSONDecodeError, TypeError) as exc:
        raise UnparseableAnswer(raw=str(raw), reason=f"{schema_tag}: {exc}") from exc


_ANSWER_SHAPES: dict[str, tuple[str, dict[str, type | tuple[type, ...]]]] = {
    SCHEMA_ENTITY_MATCH: ("matches", {"entity": str, "matched": bool, "basis": list}),
    SCHEMA_MISMATCH_DETECT: (
        "mismatches",
        {"entity": str, "attribute": str, "observed": str, "expected": str, "intentional": bool},
    ),
    SCHEMA_FIX_VERIFY: (
        "verdicts",
        {"entity": str, "attribute": str, "contextually_appropriate": bool, "visible": bool},
    ),
}


def validate_answer_shape(schema_tag: str, data: Any) -> None:
    """Check a parsed answer against its declared response-schema tag."""

    def fail(reason: str) -> None:
        raise UnparseableAnswer(raw=json.dumps(data, default=str), reason=f"{schema_tag}: {reason}")

    if schema_tag == SCHEMA_CORRECTION_PARSE:
        if not isinstance(data, dict) or not isinstance(data.get("sentence"), str) or not data["sentence"].strip():
            fail("expected object with non-empty 'sentence'")
        return
    if schema_tag not in _ANSWER_SHAPES:
        fail("unknown schema tag")
    list_key, fields = _ANSWER_SHAPES[schema_tag]
    if not isinstance(data, dict) or not isinstance(data.get(list_key), list):
        fail(f"expected object with list {list_key!r}")
    for item in data[list_key]:
        if not isinstance(item, dict):
            fail(f"{list_key} items must be objects")
        for key, typ in fields.items():
            if key not in item or not isinstance(item[key], typ):
                fail(f"{list_key} item missing or mistyped field {key!r}")


def check_scale(conditioning_scale: float) -> float:
    if not (0.0 < conditioning_scale <= 1.0):
        raise InvalidScale(f"conditioning scale must be in (0, 1], got {conditioning_scale}")
    return float(conditioning_scale)


@runtime_checkable
class GeneratorBackend(Protocol):
    def generate(self, prompt: str, *, seed: int, context: Mapping[str, Any] | None = None) -> ImageRef: ...

    def generate_conditioned(
        self, reference: ImageRef, prompt: str, *, seed: int, context: Mapping[str, Any] | None = None
    ) -> ImageRef: ...


@runtime_checkable
class EditorBackend(Protocol):
    def edit(
        self,
        image: ImageRef,
        prompt: str,
        *,
        conditioning_scale: float,
        seed: int,
        context: Mapping[str, Any] | None = None,
    ) -> ImageRef: ...


@runtime_checkable
class EmbedderBackend(Protocol):
    @property
    def dim(self) -> int: ...

    def embed(self, image: ImageRef) -> EmbeddingVec: ...


@runtime_checkable
class SegmenterBackend(Protocol):
    def segment(self, image: ImageRef, entity_label: str) -> Mask: ...


@runtime_checkable
class VlmBackend(Protocol):
    def ask(self, query: VlmQuery) -> VlmAnswer: ...


@runtime_checkable
class DistanceBackend(Protocol):
    """Pairwise perceptual distance between two images (metrics only)."""

    def distance(self, image_a: ImageRef, image_b: ImageRef) -> float: ...


@dataclass
class BackendSuite:
    """The five interfaces plus the artifact store their outputs live in."""

    vlm: VlmBackend
    generator: GeneratorBackend
    editor: EditorBackend
    embedder: EmbedderBackend
    segmenter: SegmenterBackend
    store: ArtifactStore
    extras: dict[str, Any] = field(default_factory=dict)  # named optional backends (clip embedder, distance)
