"""Addressable image artifacts.

Backends mint :class:`ImageRef` handles; bytes live in an
:class:`ArtifactStore` keyed by content hash so identical bytes share one id.
"""

from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass


@dataclass(frozen=True)
class ImageRef:
    """Handle to a stored image: opaque id plus content digest."""

    id: str
    content_hash: bytes  # 32-byte sha256 of the stored bytes
    byte_len: int
    media_type: str

    @property
    def hex_hash(self) -> str:
        return self.content_hash.hex()

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "content_hash": self.content_hash.hex(),
            "byte_len": self.byte_len,
            "media_type": self.media_type,
        }

    @staticmethod
    def from_dict(d: dict) -> "ImageRef":
        return ImageRef(
            id=d["id"],
            content_hash=bytes.fromhex(d["content_hash"]),
            byte_len=int(d["byte_len"]),
            media_type=d["media_type"],
        )


class ArtifactStore:
    """Thread-safe in-memory byte store, content addressed."""

    def __init__(self):
        self._lock = threading.Lock()
        self._bytes: dict[str, bytes] = {}
        self._media: dict[str, str] = {}

    def put(self, data: bytes, media_type: str) -> ImageRef:
        digest = hashlib.sha256(data).digest()
        ref = ImageRef(id=digest.hex()[:24], content_hash=digest, byte_len=len(data), media_type=media_type)
        with self._lock:
            self._bytes[ref.id] = data
            self._media[ref.id] = media_type
        return ref

    def get(self, ref: ImageRef) -> bytes:
        with self._lock:
            try:
                return self._bytes[ref.id]
            except KeyError:
                raise KeyError(f"unknown artifact {ref.id}") from None

    def has(self, ref: ImageRef) -> bool:
        with self._lock:
            return ref.id in self._bytes

    def __len__(self) -> int:
        with self._lock:
            return len(self._bytes)
