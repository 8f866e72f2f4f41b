"""Synthetic image container used by the mock backends.

A mock "image" is a tagged byte blob holding a JSON attribute map
(entity -> attribute -> value) plus positioning and test metadata, which
makes visual assertions exact at desk scale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

MAGIC = b"SMIMG1\n"
MEDIA_TYPE = "application/x-storymend-mockimg"


@dataclass
class MockImage:
    width: int
    height: int
    entities: dict[str, dict[str, str]] = field(default_factory=dict)
    occluded: list[tuple[str, str]] = field(default_factory=list)
    similarity: float | None = None  # scripted cosine-to-reference tag
    seed: int | None = None
    panel: int | None = None
    note: str = ""

    def encode(self) -> bytes:
        payload: dict[str, Any] = {
            "size": [self.width, self.height],
            "entities": self.entities,
            "occluded": [list(p) for p in self.occluded],
            "similarity": self.similarity,
            "seed": self.seed,
            "panel": self.panel,
            "note": self.note,
        }
        return MAGIC + json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")

    @staticmethod
    def decode(data: bytes) -> "MockImage":
        if not data.startswith(MAGIC):
            raise ValueError("not a mock image container")
        payload = json.loads(data[len(MAGIC):].decode("utf-8"))
        return MockImage(
            width=int(payload["size"][0]),
            height=int(payload["size"][1]),
            entities={k: dict(v) for k, v in payload.get("entities", {}).items()},
            occluded=[tuple(p) for p in payload.get("occluded", [])],
            similarity=payload.get("similarity"),
            seed=payload.get("seed"),
            panel=payload.get("panel"),
            note=payload.get("note", ""),
        )

    @staticmethod
    def is_mock(data: bytes) -> bool:
        return data.startswith(MAGIC)

    def attribute_triples(self) -> list[tuple[str, str, str]]:
        triples = []
        for entity in sorted(self.entities):
            for attr in sorted(self.entities[entity]):
                triples.append((entity, attr, str(self.entities[entity][attr])))
        return triples
