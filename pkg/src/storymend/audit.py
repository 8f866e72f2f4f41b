"""Audit agent: entity matching, mismatch detection, self-verification,
Consistency Index computation and refined-prompt compilation."""

from __future__ import annotations

import concurrent.futures
import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

from .artifacts import ImageRef
from .backends.base import (
    SCHEMA_ENTITY_MATCH,
    SCHEMA_FIX_VERIFY,
    SCHEMA_MISMATCH_DETECT,
    BackendSuite,
    EmbedderBackend,
    VlmBackend,
    VlmMessage,
    VlmQuery,
)
from .errors import AuditFailed, BackendError, DimensionMismatch, UnparseableAnswer, ZeroVector
from .memory import SharedMemory
from .report import ConsistencyReport, EntityMatch, FrameFinding, Mismatch
from .schema import CharacterSpec, StoryScript, character_descriptor


def load_prompt_templates(directory: str | Path | None = None) -> dict[str, str]:
    """The four VLM prompt templates, from a directory or the packaged defaults."""
    names = {
        "entity_match": SCHEMA_ENTITY_MATCH,
        "mismatch_detect": SCHEMA_MISMATCH_DETECT,
        "fix_verify": SCHEMA_FIX_VERIFY,
        "correction_parse": "correction-parse",
    }
    templates = {}
    for stem in names:
        if directory is not None:
            templates[stem] = (Path(directory) / f"{stem}.txt").read_text()
        else:
            templates[stem] = resources.files("storymend.prompts").joinpath(f"{stem}.txt").read_text()
    return templates


def ci_from_s_cons(s_cons: float) -> float:
    return 100.0 * (s_cons + 1.0) / 2.0


def compute_consistency_index(
    embedder: EmbedderBackend,
    panels: Sequence[ImageRef],
    reference: ImageRef,
) -> tuple[float, float]:
    """Mean cosine similarity of each panel to the reference, rescaled to [0, 100].

    The reference embedding is computed once per call. A zero-norm embedding is
    an error (cosine undefined), never silently treated as orthogonal.
    """
    if not panels:
        raise ValueError("need at least one panel")
    ref_vec = embedder.embed(reference)
    if ref_vec.dim != embedder.dim:
        raise DimensionMismatch(embedder.dim, ref_vec.dim)
    if not ref_vec.is_finite():
        raise ValueError("reference embedding is not finite")
    ref_norm = float(math.sqrt(float(ref_vec.values @ ref_vec.values)))
    if ref_norm == 0.0:
        raise ZeroVector(None)
    cosines = []
    for i, panel in enumerate(panels, start=1):
        vec = embedder.embed(panel)
        if vec.dim != embedder.dim or vec.dim != ref_vec.dim:
            raise DimensionMismatch(embedder.dim, vec.dim)
        if not vec.is_finite():
            raise ValueError(f"panel {i} embedding is not finite")
        norm = float(math.sqrt(float(vec.values @ vec.values)))
        if norm == 0.0:
            raise ZeroVector(i)
        cos = float(vec.values @ ref_vec.values) / (norm * ref_norm)
        cosines.append(min(1.0, max(-1.0, cos)))
    s_cons = math.fsum(cosines) / len(cosines)
    return s_cons, ci_from_s_cons(s_cons)


def compile_refined_prompt(
    validated: Sequence[Mismatch],
    descriptors: Mapping[str, str],
) -> str:
    """One executable edit sentence per validated mismatch, deterministic order."""
    if not validated:
        raise ValueError("no validated mismatches to compile")
    sentences = []
    for m in sorted(validated, key=lambda m: (m.entity_name, m.attribute)):
        descriptor = descriptors.get(m.entity_name, f"the {m.entity_name.lower()}")
        sentences.append(f"change the {m.attribute} of {descriptor} to {m.expected}.")
    return " ".join(sentences)


@dataclass
class AuditAgent:
    """VLM-driven inconsistency detection for one backend suite."""

    suite: BackendSuite
    templates: dict[str, str]
    max_workers: int = 1

    @property
    def vlm(self) -> VlmBackend:
        return self.suite.vlm

    def _characters_text(self, script: StoryScript) -> str:
        return "\n".join(f"- {c.name} ({c.category}): {c.description}" for c in script.characters)

    def match_entities(
        self,
        panel: ImageRef,
        reference: ImageRef,
        script: StoryScript,
        *,
        panel_index: int,
        audit_ordinal: int = 1,
    ) -> list[EntityMatch]:
        text = self.templates["entity_match"].format(
            panel_index=panel_index, characters=self._characters_text(script)
        )
        query = VlmQuery(
            messages=(VlmMessage(role="user", text=text, images=(panel, reference)),),
            schema_tag=SCHEMA_ENTITY_MATCH,
            context={"panel_index": panel_index, "audit_ordinal": audit_ordinal},
        )
        rows = {m["entity"]: m for m in self.vlm.ask(query).data["matches"]}
        matches = []
        for character in script.characters:
            row = rows.get(character.name)
            if row is None:
                matches.append(EntityMatch(entity_name=character.name, panel_index=panel_index, matched=False))
                continue
            matched = bool(row["matched"])
            basis = tuple(str(b) for b in row.get("basis", []) if str(b)) if matched else ()
            if matched and not basis:
                basis = (character.category or character.name,)
            matches.append(EntityMatch(
                entity_name=character.name, panel_index=panel_index, matched=matched, match_basis=basis
            ))
        return matches

    def detect_mismatches(
        self,
        panel: ImageRef,
        reference: ImageRef,
        scene_prompt: str,
        *,
        panel_index: int,
        audit_ordinal: int = 1,
    ) -> list[Mismatch]:
        text = self.templates["mismatch_detect"].format(panel_index=panel_index, scene_prompt=scene_prompt)
        query = VlmQuery(
            messages=(VlmMessage(role="user", text=text, images=(panel, reference)),),
            schema_tag=SCHEMA_MISMATCH_DETECT,
            context={"panel_index": panel_index, "audit_ordinal": audit_ordinal},
        )
        return [
            Mismatch(
                entity_name=row["entity"],
                attribute=row["attribute"],
                observed=row["observed"],
                expected=row["expected"],
                intentional=bool(row["intentional"]),
            )
            for row in self.vlm.ask(query).data["mismatches"]
        ]

    def self_verify(
        self,
        mismatches: Sequence[Mismatch],
        panel: ImageRef,
        reference: ImageRef,
        *,
        panel_index: int,
        audit_ordinal: int = 1,
    ) -> list[Mismatch]:
        """Two-step verification of the non-intentional candidates.

        Unparseable verification answers leave candidates unvalidated, never
        validated by default.
        """
        candidates = [m for m in mismatches if not m.intentional]
        others = [m for m in mismatches if m.intentional]
        if not candidates:
            return list(mismatches)
        payload = [
            {"entity": m.entity_name, "attribute": m.attribute, "observed": m.observed, "expected": m.expected}
            for m in candidates
        ]
        text = self.templates["fix_verify"].format(
            panel_index=panel_index, candidates=json.dumps(payload, indent=2)
        )
        query = VlmQuery(
            messages=(VlmMessage(role="user", text=text, images=(panel, reference)),),
            schema_tag=SCHEMA_FIX_VERIFY,
            context={"panel_index": panel_index, "audit_ordinal": audit_ordinal, "candidates": payload},
        )
        try:
            verdicts = {
                (v["entity"], v["attribute"]): v
                for v in self.vlm.ask(query).data["verdicts"]
            }
        except (UnparseableAnswer, BackendError):
            return others + [m for m in candidates]  # conservative: nothing validated
        verified = []
        for m in candidates:
            verdict = verdicts.get((m.entity_name, m.attribute))
            if verdict is None:
                verified.append(m)
                continue
            appropriate = bool(verdict["contextually_appropriate"])
            visible = bool(verdict["visible"])
            verified.append(Mismatch(
                entity_name=m.entity_name,
                attribute=m.attribute,
                observed=m.observed,
                expected=m.expected,
                intentional=False,
                visible=visible,
                contextually_appropriate=appropriate,
                validated=appropriate and visible,
            ))
        return others + verified

    def audit_frame(
        self,
        panel: ImageRef,
        reference: ImageRef,
        script: StoryScript,
        scene_prompt: str,
        *,
        panel_index: int,
        audit_ordinal: int = 1,
    ) -> FrameFinding:
        """Up to three VLM calls: match, describe+detect, verify."""
        try:
            matches = self.match_entities(
                panel, reference, script, panel_index=panel_index, audit_ordinal=audit_ordinal
            )
            mismatches = self.detect_mismatches(
                panel, reference, scene_prompt, panel_index=panel_index, audit_ordinal=audit_ordinal
            )
            mismatches = self.self_verify(
                mismatches, panel, reference, panel_index=panel_index, audit_ordinal=audit_ordinal
            )
        except (UnparseableAnswer, BackendError):
            return FrameFinding(panel_index=panel_index, audit_failed=True)
        validated = [m for m in mismatches if m.validated]
        refined = None
        if validated:
            descriptors = {c.name: character_descriptor(c) for c in script.characters}
            refined = compile_refined_prompt(validated, descriptors)
        return FrameFinding(
            panel_index=panel_index,
            matches=tuple(matches),
            mismatches=tuple(mismatches),
            refined_prompt=refined,
        )

    def run_audit(self, memory: SharedMemory, run_id: str) -> ConsistencyReport:
        """Audit every panel, compute the CI, and commit the report."""
        state = memory.snapshot(run_id)
        if state.reference is None or not state.panels:
            raise AuditFailed(f"run {run_id} has no initialized panels")
        audit_ordinal = state.audits_completed + 1
        indexed = [(p.index, p.image, state.script.scenes[p.index - 1].full_prompt()) for p in state.panels]

        def frame(args) -> FrameFinding:
            index, image, prompt = args
            return self.audit_frame(
                image, state.reference, state.script, prompt,
                panel_index=index, audit_ordinal=audit_ordinal,
            )

        if self.max_workers > 1:
            with concurrent.futures.ThreadPoolExecutor(max_workers=self.max_workers) as pool:
                findings = list(pool.map(frame, indexed))
        else:
            findings = [frame(item) for item in indexed]
        if all(f.audit_failed for f in findings):
            raise AuditFailed(f"no frame could be audited in run {run_id}")
        s_cons, ci = compute_consistency_index(
            self.suite.embedder, [p.image for p in state.panels], state.reference
        )
        report = ConsistencyReport(
            findings=tuple(findings), s_cons=s_cons, ci=ci, audit_iteration=audit_ordinal
        )
        memory.record_audit(run_id, report, ci)
        return report
