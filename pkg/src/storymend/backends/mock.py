"""Deterministic mock implementations of the five backend interfaces.

Every output is a pure function of (scenario, call arguments), so a fixed
scenario file and seed reproduce byte-identical artifacts across runs and
across process restarts.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import threading
from typing import Any, Mapping

import numpy as np

from ..artifacts import ArtifactStore, ImageRef
from ..errors import BackendUnavailable, UnparseableAnswer
from .base import (
    SCHEMA_CORRECTION_PARSE,
    SCHEMA_ENTITY_MATCH,
    SCHEMA_FIX_VERIFY,
    SCHEMA_MISMATCH_DETECT,
    BackendSuite,
    EmbeddingVec,
    Mask,
    VlmAnswer,
    VlmQuery,
    check_scale,
    parse_vlm_json,
    validate_answer_shape,
)
from .mockimg import MEDIA_TYPE, MockImage
from .scenario import EntitySpec, Scenario, is_unparseable_marker

_EDIT_SENTENCE = re.compile(r"change the (.+?) of (the .+?) to ([^.]+?)\.", re.IGNORECASE)
_EDIT_SENTENCE_SHORT = re.compile(r"change the (.+?) to ([^.]+?)\.", re.IGNORECASE)


def _mentioned(entity: EntitySpec, prompt: str) -> bool:
    text = prompt.lower()
    for needle in (entity.name, entity.category, entity.descriptor):
        if needle and needle.lower() in text:
            return True
    return False


def _resolve_entity(entities: Mapping[str, EntitySpec], phrase: str) -> str | None:
    """Map an edit-sentence descriptor like "the girl" to an entity name."""
    text = phrase.lower()
    for name, spec in entities.items():
        if name.lower() in text:
            return name
    for name, spec in entities.items():
        if spec.category and spec.category.lower() in text:
            return name
    for name, spec in entities.items():
        if spec.descriptor and spec.descriptor.lower() in text:
            return name
    return None


class MockGenerator:
    """Renders prompts into attribute-map containers per the scenario."""

    def __init__(self, scenario: Scenario, store: ArtifactStore):
        self.scenario = scenario
        self.store = store

    def _render(
        self,
        prompt: str,
        seed: int,
        *,
        panel_index: int | None,
        base_entities: Mapping[str, Mapping[str, str]] | None,
    ) -> ImageRef:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        sc = self.scenario
        script = sc.panel(panel_index) if panel_index is not None else sc.reference
        if script.generate_fails:
            raise BackendUnavailable(f"scripted generator failure (panel {panel_index})")
        w, h = sc.image_size
        entities: dict[str, dict[str, str]] = {}
        for name, spec in sc.entities.items():
            if name in script.absent:
                continue
            if not _mentioned(spec, prompt):
                continue
            if base_entities is not None and name in base_entities:
                attrs = dict(base_entities[name])  # inherit appearance from the reference
            else:
                attrs = dict(spec.attributes)
            for attr, value in script.drift.get(name, {}).items():
                attrs[attr] = value
            entities[name] = attrs
        similarity = None
        if sc.embedding_mode == "scripted":
            similarity = 1.0 if panel_index is None else script.similarity
        img = MockImage(
            width=w,
            height=h,
            entities=entities,
            occluded=list(script.occluded),
            similarity=similarity,
            seed=seed,
            panel=panel_index,
        )
        return self.store.put(img.encode(), MEDIA_TYPE)

    def generate(self, prompt: str, *, seed: int, context: Mapping[str, Any] | None = None) -> ImageRef:
        context = context or {}
        return self._render(prompt, seed, panel_index=context.get("panel_index"), base_entities=None)

    def generate_conditioned(
        self, reference: ImageRef, prompt: str, *, seed: int, context: Mapping[str, Any] | None = None
    ) -> ImageRef:
        context = context or {}
        ref_img = MockImage.decode(self.store.get(reference))
        return self._render(
            prompt, seed, panel_index=context.get("panel_index"), base_entities=ref_img.entities
        )


class MockEditor:
    """Applies prompt-named attribute changes; outcomes scriptable per attempt."""

    def __init__(self, scenario: Scenario, store: ArtifactStore):
        self.scenario = scenario
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
        context = context or {}
        before = MockImage.decode(self.store.get(image))
        rule = self.scenario.edit_rule(
            context.get("panel_index"),
            pass_no=context.get("audit_ordinal"),
            attempt=int(context.get("attempt", 1)),
            correction=context.get("purpose") == "correction",
        )
        if rule is not None:
            if rule.result == "error":
                raise BackendUnavailable("scripted editor failure")
            if rule.result == "too_subtle":
                return image  # identical bytes: the edit did not take
            after = MockImage.decode(self.store.get(image))
            after.seed = seed
            if rule.result == "over_edit":
                if self.scenario.embedding_mode == "scripted":
                    after.similarity = rule.similarity if rule.similarity is not None else self.scenario.over_edit_similarity
                else:
                    for name in after.entities:
                        after.entities[name] = {k: f"{v} (mangled)" for k, v in after.entities[name].items()}
                after.note = "over-edited"
                return self.store.put(after.encode(), MEDIA_TYPE)
            # result == "apply"
            if rule.set:
                for name, attrs in rule.set.items():
                    after.entities.setdefault(name, {}).update(attrs)
            else:
                self._apply_prompt(after, prompt)
            if rule.similarity is not None:
                after.similarity = rule.similarity
            return self.store.put(after.encode(), MEDIA_TYPE)

        # unscripted: edit strength is inversely related to the conditioning scale
        if conditioning_scale >= 1.0 or conditioning_scale > self.scenario.auto_subtle_above:
            return image
        after = MockImage.decode(self.store.get(image))
        after.seed = seed
        changed = self._apply_prompt(after, prompt)
        if not changed:
            return image
        return self.store.put(after.encode(), MEDIA_TYPE)

    def _apply_prompt(self, img: MockImage, prompt: str) -> bool:
        changed = False
        matched_spans: list[tuple[int, int]] = []
        for m in _EDIT_SENTENCE.finditer(prompt):
            attr, descriptor, value = m.group(1).strip(), m.group(2).strip(), m.group(3).strip()
            name = _resolve_entity(self.scenario.entities, descriptor)
            if name and name in img.entities:
                img.entities[name][attr] = value
                changed = True
            matched_spans.append(m.span())
        for m in _EDIT_SENTENCE_SHORT.finditer(prompt):
            if any(s <= m.start() < e for s, e in matched_spans):
                continue
            attr, value = m.group(1).strip(), m.group(2).strip()
            for name, attrs in img.entities.items():
                if attr in attrs:
                    attrs[attr] = value
                    changed = True
                    break
        return changed


def _hash_rng(seed_text: str) -> np.random.Generator:
    digest = hashlib.blake2b(seed_text.encode("utf-8"), digest_size=8).digest()
    return np.random.default_rng(int.from_bytes(digest, "big"))


class MockEmbedder:
    """Deterministic embeddings from attribute maps or scripted similarity tags."""

    def __init__(self, scenario: Scenario, store: ArtifactStore, *, dim: int | None = None, salt: str = ""):
        self.scenario = scenario
        self.store = store
        self._dim = dim or scenario.embedding_dim
        self.salt = salt

    @property
    def dim(self) -> int:
        return self._dim

    def embed(self, image: ImageRef) -> EmbeddingVec:
        data = self.store.get(image)
        if not MockImage.is_mock(data):
            vec = _hash_rng(self.salt + hashlib.sha256(data).hexdigest()).standard_normal(self._dim)
            vec /= np.linalg.norm(vec)
            return EmbeddingVec(values=vec, dim=self._dim)
        img = MockImage.decode(data)
        if self.scenario.embedding_mode == "scripted" and img.similarity is not None:
            vec = np.zeros(self._dim, dtype=np.float64)
            vec[0] = img.similarity
            vec[1] = math.sqrt(max(0.0, 1.0 - img.similarity * img.similarity))
            return EmbeddingVec(values=vec, dim=self._dim)
        total = np.zeros(self._dim, dtype=np.float64)
        for entity, attr, value in img.attribute_triples():
            part = _hash_rng(f"{self.salt}|{entity}\x1f{attr}\x1f{value}").standard_normal(self._dim)
            total += part / np.linalg.norm(part)
        norm = np.linalg.norm(total)
        if norm > 0:
            total /= norm
        return EmbeddingVec(values=total, dim=self._dim)


class MockSegmenter:
    """Masks from the scenario's declared entity bounding boxes."""

    def __init__(self, scenario: Scenario, store: ArtifactStore):
        self.scenario = scenario
        self.store = store

    def segment(self, image: ImageRef, entity_label: str) -> Mask:
        if not entity_label:
            raise ValueError("entity label must be non-empty")
        data = self.store.get(image)
        if not MockImage.is_mock(data):
            return Mask(width=1, height=1, data=np.zeros((1, 1), dtype=bool))
        img = MockImage.decode(data)
        mask = np.zeros((img.height, img.width), dtype=bool)
        label = entity_label.lower()
        for name in img.entities:
            spec = self.scenario.entities.get(name)
            candidates = [name.lower()]
            if spec:
                candidates += [spec.category.lower(), spec.descriptor.lower()]
            if label not in [c for c in candidates if c]:
                continue
            box = spec.box if spec else (0.0, 0.0, 1.0, 1.0)
            x0 = round(box[0] * img.width)
            x1 = round(box[2] * img.width)
            y0 = round(box[1] * img.height)
            y1 = round(box[3] * img.height)
            mask[y0:y1, x0:x1] = True
        return Mask(width=img.width, height=img.height, data=mask)


class MockDistance:
    """Perceptual-distance stand-in: Jaccard distance over attribute triples."""

    def __init__(self, store: ArtifactStore):
        self.store = store

    def distance(self, image_a: ImageRef, image_b: ImageRef) -> float:
        a, b = self.store.get(image_a), self.store.get(image_b)
        if not (MockImage.is_mock(a) and MockImage.is_mock(b)):
            return 0.0 if a == b else 1.0
        ta = set(MockImage.decode(a).attribute_triples())
        tb = set(MockImage.decode(b).attribute_triples())
        if not ta and not tb:
            return 0.0
        return 1.0 - len(ta & tb) / len(ta | tb)


class MockVlm:
    """Answers audit queries from decoded attribute maps, or from the script.

    Scripted answers are keyed by (schema tag, panel id) with an optional
    audit-ordinal refinement; unscripted queries are answered by comparing
    the attached panel and reference attribute maps.
    """

    def __init__(self, scenario: Scenario, store: ArtifactStore):
        self.scenario = scenario
        self.store = store
        self._lock = threading.Lock()

    def ask(self, query: VlmQuery) -> VlmAnswer:
        if not query.messages:
            raise ValueError("query must contain at least one message")
        panel_index = query.context.get("panel_index")
        audit_ordinal = query.context.get("audit_ordinal")
        found, value = self.scenario.scripted_answer(query.schema_tag, panel_index, audit_ordinal)
        if found:
            if is_unparseable_marker(value):
                raise UnparseableAnswer(raw="I cannot express that as JSON, sorry.", reason=query.schema_tag)
            if isinstance(value, str):
                data = parse_vlm_json(value, query.schema_tag)
            else:
                data = value
            validate_answer_shape(query.schema_tag, data)
            return VlmAnswer(data=data, raw=json.dumps(data, sort_keys=True))
        data = self._auto_answer(query)
        validate_answer_shape(query.schema_tag, data)
        return VlmAnswer(data=data, raw=json.dumps(data, sort_keys=True))

    # -- auto mode ------------------------------------------------------------

    def _attached_images(self, query: VlmQuery) -> list[MockImage]:
        images = []
        for msg in query.messages:
            for ref in msg.images:
                data = self.store.get(ref)
                if MockImage.is_mock(data):
                    images.append(MockImage.decode(data))
        return images

    def _query_text(self, query: VlmQuery) -> str:
        return "\n".join(msg.text for msg in query.messages if msg.text)

    def _auto_answer(self, query: VlmQuery) -> Any:
        tag = query.schema_tag
        if tag == SCHEMA_CORRECTION_PARSE:
            return {"sentence": self._normalize_correction(str(query.context.get("instruction", "")))}
        images = self._attached_images(query)
        panel = images[0] if images else MockImage(1, 1)
        reference = images[1] if len(images) > 1 else panel
        if tag == SCHEMA_ENTITY_MATCH:
            matches = []
            for name, spec in self.scenario.entities.items():
                present = name in panel.entities
                basis: list[str] = []
                if present:
                    ref_attrs = reference.entities.get(name, spec.attributes)
                    basis = [f"{attr}: {value}" for attr, value in sorted(ref_attrs.items())]
                    if not basis:
                        basis = [spec.category or name]
                matches.append({"entity": name, "matched": present, "basis": basis})
            return {"matches": matches}
        if tag == SCHEMA_MISMATCH_DETECT:
            prompt_text = self._query_text(query).lower()
            mismatches = []
            for name in self.scenario.entities:
                if name not in panel.entities or name not in reference.entities:
                    continue
                ref_attrs = reference.entities[name]
                panel_attrs = panel.entities[name]
                for attr in sorted(ref_attrs):
                    expected = ref_attrs[attr]
                    observed = panel_attrs.get(attr, "missing")
                    if observed == expected:
                        continue
                    mismatches.append({
                        "entity": name,
                        "attribute": attr,
                        "observed": observed,
                        "expected": expected,
                        "intentional": observed.lower() in prompt_text,
                    })
            return {"mismatches": mismatches}
        if tag == SCHEMA_FIX_VERIFY:
            panel_index = query.context.get("panel_index")
            script = self.scenario.panel(panel_index) if panel_index is not None else None
            occluded = set(panel.occluded) | set(script.occluded if script else [])
            inappropriate = set(script.inappropriate) if script else set()
            verdicts = []
            for cand in query.context.get("candidates", []):
                key = (cand.get("entity"), cand.get("attribute"))
                verdicts.append({
                    "entity": cand.get("entity"),
                    "attribute": cand.get("attribute"),
                    "contextually_appropriate": key not in inappropriate,
                    "visible": key not in occluded,
                })
            return {"verdicts": verdicts}
        raise UnparseableAnswer(raw="", reason=f"unknown schema tag {tag!r}")

    @staticmethod
    def _normalize_correction(instruction: str) -> str:
        text = instruction.strip()
        m = re.match(r"(?i)make the (.+?) (\S+)$", text.rstrip("."))
        if m:
            return f"change the {m.group(1)} to {m.group(2)}."
        if not text.endswith("."):
            text += "."
        return text[0].lower() + text[1:] if text else text


def build_mock_suite(scenario: Scenario, store: ArtifactStore | None = None, *, dim: int | None = None) -> BackendSuite:
    """Assemble the full interchangeable suite backed by one scenario."""
    store = store if store is not None else ArtifactStore()
    return BackendSuite(
        vlm=MockVlm(scenario, store),
        generator=MockGenerator(scenario, store),
        editor=MockEditor(scenario, store),
        embedder=MockEmbedder(scenario, store, dim=dim),
        segmenter=MockSegmenter(scenario, store),
        store=store,
        extras={
            "clip_embedder": MockEmbedder(scenario, store, dim=dim, salt="clip"),
            "distance": MockDistance(store),
        },
    )
