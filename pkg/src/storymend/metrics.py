"""Evaluation harness: all-pairs similarity, perceptual distance,
foreground-masked variants, and corpus aggregation into report tables.

Embedding-based similarities and the perceptual distance come from backend
endpoints (they are learned models); text-alignment scores (CLIP-T, HPS,
TIFA) are only aggregated from an external per-image scores file, never
computed here.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .artifacts import ArtifactStore, ImageRef
from .backends.base import DistanceBackend, EmbedderBackend, Mask, SegmenterBackend
from .backends.mockimg import MEDIA_TYPE as MOCK_MEDIA_TYPE
from .backends.mockimg import MockImage
from .errors import ZeroVector

log = logging.getLogger(__name__)

SIMILARITY_METRICS = ("clip_i", "dino")
DISTANCE_METRIC = "lpips"
EXTERNAL_METRICS = ("clip_t", "hps", "tifa")

TABLE_COLUMNS = [
    ("clip_i", "CLIP-I", "up"),
    ("dino", "DINO", "up"),
    ("lpips", "LPIPS", "down"),
    ("clip_t", "CLIP-T", "up"),
    ("hps", "HPS", "up"),
    ("tifa", "TIFA", "up"),
]
FG_COLUMNS = [
    ("clip_i_fg", "CLIP-I-FG", "up"),
    ("dino_fg", "DINO-FG", "up"),
    ("lpips_fg", "LPIPS-FG", "down"),
]


@dataclass
class StoryMetrics:
    """Per-story metric values plus provenance of the backends that made them."""

    num_panels: int
    values: dict[str, float] = field(default_factory=dict)
    excluded_panels: list[int] = field(default_factory=list)
    provenance: dict[str, str] = field(default_factory=dict)


def _cosine(a: np.ndarray, b: np.ndarray, index_a: int, index_b: int) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0:
        raise ZeroVector(index_a)
    if nb == 0.0:
        raise ZeroVector(index_b)
    return min(1.0, max(-1.0, float(a @ b) / (na * nb)))


def pairwise_similarity(embedder: EmbedderBackend, panels: Sequence[ImageRef]) -> float:
    """Mean cosine over all N(N-1)/2 unordered panel pairs."""
    if len(panels) < 2:
        raise ValueError("pairwise similarity needs at least two panels")
    vectors = [embedder.embed(p).values for p in panels]
    total = []
    n = len(vectors)
    for i in range(n):
        for j in range(i + 1, n):
            total.append(_cosine(vectors[i], vectors[j], i + 1, j + 1))
    return math.fsum(total) / len(total)


def pairwise_distance(distance: DistanceBackend, panels: Sequence[ImageRef]) -> float:
    """Mean backend-reported distance over all unordered panel pairs."""
    if len(panels) < 2:
        raise ValueError("pairwise distance needs at least two panels")
    total = []
    n = len(panels)
    for i in range(n):
        for j in range(i + 1, n):
            total.append(float(distance.distance(panels[i], panels[j])))
    return math.fsum(total) / len(total)


def union_mask(segmenter: SegmenterBackend, panel: ImageRef, labels: Sequence[str]) -> Mask:
    if not labels:
        raise ValueError("need at least one entity label")
    masks = [segmenter.segment(panel, label) for label in labels]
    data = masks[0].data.copy()
    for m in masks[1:]:
        data |= m.data
    return Mask(width=masks[0].width, height=masks[0].height, data=data)


def composite_on_white(
    store: ArtifactStore,
    panel: ImageRef,
    mask: Mask,
    *,
    segmenter: SegmenterBackend | None = None,
) -> ImageRef:
    """Keep masked foreground, composite the rest onto a white background.

    A full-coverage mask returns the original image unchanged, so identity
    masks leave every metric bit-identical to the unmasked run.
    """
    if mask.is_full():
        return panel
    data = store.get(panel)
    if MockImage.is_mock(data):
        img = MockImage.decode(data)
        kept: dict[str, dict[str, str]] = {}
        for name, attrs in img.entities.items():
            # an entity survives masking if any of its own pixels are kept
            if segmenter is not None:
                own = segmenter.segment(panel, name)
                if not bool((own.data & mask.data).any()):
                    continue
            kept[name] = attrs
        img.entities = kept
        img.note = "foreground-on-white"
        return store.put(img.encode(), MOCK_MEDIA_TYPE)
    from PIL import Image  # raster path

    with Image.open(io.BytesIO(data)) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
    m = mask.data[:, :, None]
    white = np.full_like(rgb, 255)
    out = np.where(m, rgb, white)
    buf = io.BytesIO()
    Image.fromarray(out.astype(np.uint8)).save(buf, format="PNG")
    return store.put(buf.getvalue(), "image/png")


def story_metrics(
    panels: Sequence[ImageRef],
    *,
    embedders: Mapping[str, EmbedderBackend],
    distance: DistanceBackend | None = None,
) -> dict[str, float]:
    values: dict[str, float] = {}
    for name, embedder in embedders.items():
        values[name] = pairwise_similarity(embedder, panels)
    if distance is not None:
        values[DISTANCE_METRIC] = pairwise_distance(distance, panels)
    return values


def foreground_masked_metrics(
    store: ArtifactStore,
    segmenter: SegmenterBackend,
    panels: Sequence[ImageRef],
    entity_labels: Sequence[str],
    *,
    embedders: Mapping[str, EmbedderBackend],
    distance: DistanceBackend | None = None,
) -> tuple[dict[str, float], list[int]]:
    """FG variants: segment named entities, composite on white, re-measure.

    Panels whose union mask is empty are excluded from FG aggregation with a
    warning; returns (metrics, excluded panel indexes).
    """
    masked: list[ImageRef] = []
    excluded: list[int] = []
    for i, panel in enumerate(panels, start=1):
        mask = union_mask(segmenter, panel, entity_labels)
        if mask.is_empty():
            excluded.append(i)
            log.warning("panel %d excluded from FG metrics: empty mask for labels %s", i, list(entity_labels))
            continue
        masked.append(composite_on_white(store, panel, mask, segmenter=segmenter))
    if len(masked) < 2:
        return {}, excluded
    out: dict[str, float] = {}
    for name, embedder in embedders.items():
        out[f"{name}_fg"] = pairwise_similarity(embedder, masked)
    if distance is not None:
        out[f"{DISTANCE_METRIC}_fg"] = pairwise_distance(distance, masked)
    return out, excluded


def attach_external_scores(
    values: dict[str, float],
    scores: Mapping[str, Mapping[str, float]] | None,
) -> None:
    """Average externally computed per-image scores (CLIP-T/HPS/TIFA) into a story row."""
    if not scores:
        return
    per_metric: dict[str, list[float]] = {}
    for _panel, metric_map in scores.items():
        for metric, value in metric_map.items():
            per_metric.setdefault(metric.lower().replace("-", "_"), []).append(float(value))
    for metric, vals in per_metric.items():
        values[metric] = math.fsum(vals) / len(vals)


def aggregate_corpus(stories: Sequence[StoryMetrics]) -> dict[str, tuple[float, float]]:
    """Mean and population standard deviation per metric across stories."""
    if not stories:
        raise ValueError("need at least one story")
    keys: list[str] = []
    for story in stories:
        for key in story.values:
            if key not in keys:
                keys.append(key)
    out = {}
    for key in keys:
        vals = [s.values[key] for s in stories if key in s.values]
        mean = math.fsum(vals) / len(vals)
        var = math.fsum((v - mean) ** 2 for v in vals) / len(vals)
        out[key] = (mean, math.sqrt(var))
    return out


def format_cell(mean: float, std: float) -> str:
    return f"{mean:.3f}±{std:.2f}"


def render_markdown(
    aggregated: Mapping[str, tuple[float, float]],
    *,
    label: str = "engine",
    include_fg: bool = False,
    excluded: Mapping[str, list[int]] | None = None,
) -> str:
    """Markdown table in the headline-table layout (one method row)."""
    lines = []

    def table(columns) -> list[str]:
        headers = ["Method"]
        cells = [label]
        for key, title, direction in columns:
            arrow = "↑" if direction == "up" else "↓"
            headers.append(f"{title}{arrow}")
            if key in aggregated:
                cells.append(format_cell(*aggregated[key]))
            else:
                cells.append("-")
        return [
            "| " + " | ".join(headers) + " |",
            "|" + "---|" * len(headers),
            "| " + " | ".join(cells) + " |",
        ]

    lines += table(TABLE_COLUMNS)
    if include_fg:
        lines.append("")
        lines += table(FG_COLUMNS)
    if excluded:
        lines.append("")
        lines.append("Footnote: panels with empty foreground masks are excluded from FG aggregation "
                     "rather than scored white-on-white.")
        for run, panels in excluded.items():
            if panels:
                lines.append(f"- {run}: excluded panels {panels}")
    return "\n".join(lines) + "\n"


def render_csv(aggregated: Mapping[str, tuple[float, float]], *, label: str = "engine") -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["method", "metric", "mean", "std"])
    for key, (mean, std) in aggregated.items():
        writer.writerow([label, key, f"{mean:.6f}", f"{std:.6f}"])
    return buf.getvalue()


def load_scores_file(path: str | Path) -> dict[str, dict[str, dict[str, float]]]:
    """Scores file: JSON map run -> panel -> metric -> value."""
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise ValueError("scores file must be a JSON object keyed by run id")
    return doc
