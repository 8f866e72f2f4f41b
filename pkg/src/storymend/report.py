"""Structured consistency report produced by each audit pass."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

CI_EPS = 1e-12


@dataclass(frozen=True)
class EntityMatch:
    entity_name: str
    panel_index: int
    matched: bool
    match_basis: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "entity_name": self.entity_name,
            "panel_index": self.panel_index,
            "matched": self.matched,
            "match_basis": list(self.match_basis),
        }

    @staticmethod
    def from_dict(d: dict[str, Any]) -> "EntityMatch":
        return EntityMatch(
            entity_name=d["entity_name"],
            panel_index=int(d["panel_index"]),
            matched=bool(d["matched"]),
            match_basis=tuple(d.get("match_basis", [])),
        )


@dataclass(frozen=True)
class Mismatch:
    entity_name: str
    attribute: str
    observed: str
    expected: str
    intentional: bool
    visible: bool | None = None
    contextually_appropriate: bool | None = None
    validated: bool = False

    def __post_init__(self):
        if self.validated and (self.intentional or not self.visible or not self.contextually_appropriate):
            raise ValueError("validated requires: not intentional, visible, contextually appropriate")

    def to_dict(self) -> dict[str, Any]:
        return {
            "entity_name": self.entity_name,
            "attribute": self.attribute,
            "observed": self.observed,
            "expected": self.expected,
            "intentional": self.intentional,
            "visible": self.visible,
            "contextually_appropriate": self.contextually_appropriate,
            "validated": self.validated,
        }

    @staticmethod
    def from_dict(d: dict[str, Any]) -> "Mismatch":
        return Mismatch(
            entity_name=d["entity_name"],
            attribute=d["attribute"],
            observed=d["observed"],
            expected=d["expected"],
            intentional=bool(d["intentional"]),
            visible=d.get("visible"),
            contextually_appropriate=d.get("contextually_appropriate"),
            validated=bool(d.get("validated", False)),
        )


@dataclass(frozen=True)
class FrameFinding:
    panel_index: int
    matches: tuple[EntityMatch, ...] = ()
    mismatches: tuple[Mismatch, ...] = ()
    refined_prompt: str | None = None
    audit_failed: bool = False

    def __post_init__(self):
        has_validated = any(m.validated for m in self.mismatches)
        if has_validated != (self.refined_prompt is not None):
            raise ValueError("refined_prompt present iff at least one validated mismatch")

    def validated_mismatches(self) -> list[Mismatch]:
        return [m for m in self.mismatches if m.validated]

    def to_dict(self) -> dict[str, Any]:
        return {
            "panel_index": self.panel_index,
            "matches": [m.to_dict() for m in self.matches],
            "mismatches": [m.to_dict() for m in self.mismatches],
            "refined_prompt": self.refined_prompt,
            "audit_failed": self.audit_failed,
        }

    @staticmethod
    def from_dict(d: dict[str, Any]) -> "FrameFinding":
        return FrameFinding(
            panel_index=int(d["panel_index"]),
            matches=tuple(EntityMatch.from_dict(m) for m in d.get("matches", [])),
            mismatches=tuple(Mismatch.from_dict(m) for m in d.get("mismatches", [])),
            refined_prompt=d.get("refined_prompt"),
            audit_failed=bool(d.get("audit_failed", False)),
        )


@dataclass(frozen=True)
class ConsistencyReport:
    findings: tuple[FrameFinding, ...]
    s_cons: float
    ci: float
    audit_iteration: int

    def __post_init__(self):
        if abs(self.ci - 100.0 * (self.s_cons + 1.0) / 2.0) > CI_EPS:
            raise ValueError("ci must equal 100*(s_cons+1)/2")
        indexes = [f.panel_index for f in self.findings]
        if sorted(indexes) != list(range(1, len(indexes) + 1)):
            raise ValueError("findings must cover every panel index exactly once")

    def repairable_indexes(self) -> list[int]:
        return [f.panel_index for f in self.findings if f.refined_prompt is not None and not f.audit_failed]

    def finding(self, panel_index: int) -> FrameFinding:
        for f in self.findings:
            if f.panel_index == panel_index:
                return f
        raise KeyError(panel_index)

    def to_dict(self) -> dict[str, Any]:
        return {
            "findings": [f.to_dict() for f in self.findings],
            "s_cons": self.s_cons,
            "ci": self.ci,
            "audit_iteration": self.audit_iteration,
        }

    @staticmethod
    def from_dict(d: dict[str, Any]) -> "ConsistencyReport":
        return ConsistencyReport(
            findings=tuple(FrameFinding.from_dict(f) for f in d.get("findings", [])),
            s_cons=float(d["s_cons"]),
            ci=float(d["ci"]),
            audit_iteration=int(d["audit_iteration"]),
        )


def report_json(report: ConsistencyReport) -> str:
    """Deterministic serialized form (stable key order, 2-space indent)."""
    return json.dumps(report.to_dict(), indent=2, sort_keys=True, ensure_ascii=False)
