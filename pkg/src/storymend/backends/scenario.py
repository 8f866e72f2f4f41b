"""Scenario files: the deterministic script driving the mock backends.

A scenario declares the entities the mock renderer knows, per-panel drift
(seeded inconsistencies), scripted VLM answers, scripted edit outcomes and,
optionally, scripted per-panel embedding similarities.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ..errors import ScenarioError

EMBEDDING_MODES = ("attributes", "scripted")
EDIT_RESULTS = ("apply", "too_subtle", "over_edit", "error")


@dataclass
class EntitySpec:
    """Canonical appearance of one entity in the mock world."""

    name: str
    category: str = ""
    descriptor: str = ""
    attributes: dict[str, str] = field(default_factory=dict)
    box: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0)  # normalized x0,y0,x1,y1


@dataclass
class PanelScript:
    """Deviations the mock renderer bakes into one panel."""

    drift: dict[str, dict[str, str]] = field(default_factory=dict)
    absent: list[str] = field(default_factory=list)
    occluded: list[tuple[str, str]] = field(default_factory=list)
    inappropriate: list[tuple[str, str]] = field(default_factory=list)
    similarity: float | None = None
    generate_fails: bool = False


@dataclass
class EditRule:
    """Scripted outcome for one edit attempt."""

    result: str  # one of EDIT_RESULTS
    similarity: float | None = None
    set: dict[str, dict[str, str]] = field(default_factory=dict)


@dataclass
class PanelEdits:
    """Edit rules for one panel, keyed by repair pass and attempt."""

    passes: dict[int, list[EditRule]] = field(default_factory=dict)
    corrections: list[EditRule] = field(default_factory=list)
    default: list[EditRule] = field(default_factory=list)

    def rule_for(self, *, pass_no: int | None, attempt: int, correction: bool) -> EditRule | None:
        rules: list[EditRule] | None = None
        if correction and self.corrections:
            rules = self.corrections
        elif pass_no is not None and pass_no in self.passes:
            rules = self.passes[pass_no]
        elif self.default:
            rules = self.default
        if not rules:
            return None
        return rules[min(max(attempt, 1) - 1, len(rules) - 1)]


@dataclass
class Scenario:
    name: str
    image_size: tuple[int, int] = (64, 48)
    embedding_mode: str = "attributes"
    embedding_dim: int = 32
    entities: dict[str, EntitySpec] = field(default_factory=dict)
    panels: dict[int, PanelScript] = field(default_factory=dict)
    reference: PanelScript = field(default_factory=PanelScript)
    vlm_answers: dict[str, Any] = field(default_factory=dict)
    vlm_unparseable: list[str] = field(default_factory=list)
    edits: dict[int, PanelEdits] = field(default_factory=dict)
    over_edit_similarity: float = 0.1
    auto_subtle_above: float = 0.9  # auto edits with scale above this leave the image unchanged

    def panel(self, index: int) -> PanelScript:
        return self.panels.get(index, PanelScript())

    def edit_rule(self, panel_index: int | None, *, pass_no: int | None, attempt: int, correction: bool) -> EditRule | None:
        if panel_index is None or panel_index not in self.edits:
            return None
        return self.edits[panel_index].rule_for(pass_no=pass_no, attempt=attempt, correction=correction)

    def scripted_answer(self, schema_tag: str, panel_index: int | None, audit_ordinal: int | None) -> tuple[bool, Any]:
        """Look up a canned VLM answer. Returns (found, value)."""
        keys = []
        if panel_index is not None and audit_ordinal is not None:
            keys.append(f"{schema_tag}/{panel_index}@{audit_ordinal}")
        if panel_index is not None:
            keys.append(f"{schema_tag}/{panel_index}")
        keys.append(f"{schema_tag}/*")
        for key in keys:
            if key in self.vlm_unparseable:
                return True, _UNPARSEABLE
            if key in self.vlm_answers:
                return True, self.vlm_answers[key]
        return False, None


_UNPARSEABLE = object()


def is_unparseable_marker(value: Any) -> bool:
    return value is _UNPARSEABLE


def _pairs(raw: Any, where: str) -> list[tuple[str, str]]:
    out = []
    for item in raw or []:
        if not (isinstance(item, (list, tuple)) and len(item) == 2):
            raise ScenarioError(f"{where}: expected [entity, attribute] pairs")
        out.append((str(item[0]), str(item[1])))
    return out


def scenario_from_dict(doc: dict[str, Any]) -> Scenario:
    """Build and validate a scenario from its JSON form."""
    if not isinstance(doc, dict):
        raise ScenarioError("scenario document must be an object")
    name = doc.get("name")
    if not name or not isinstance(name, str):
        raise ScenarioError("scenario requires a non-empty 'name'")
    mode = doc.get("embedding_mode", "attributes")
    if mode not in EMBEDDING_MODES:
        raise ScenarioError(f"embedding_mode must be one of {EMBEDDING_MODES}, got {mode!r}")
    size = doc.get("image_size", [64, 48])
    if not (isinstance(size, (list, tuple)) and len(size) == 2 and all(int(x) > 0 for x in size)):
        raise ScenarioError("image_size must be [width, height] of positive integers")

    entities: dict[str, EntitySpec] = {}
    for ename, raw in (doc.get("entities") or {}).items():
        raw = raw or {}
        box = raw.get("box", [0.0, 0.0, 1.0, 1.0])
        if not (isinstance(box, (list, tuple)) and len(box) == 4):
            raise ScenarioError(f"entity {ename!r}: box must be [x0, y0, x1, y1]")
        box = tuple(float(v) for v in box)
        if not all(0.0 <= v <= 1.0 for v in box) or box[0] > box[2] or box[1] > box[3]:
            raise ScenarioError(f"entity {ename!r}: box must be normalized and ordered")
        entities[ename] = EntitySpec(
            name=ename,
            category=str(raw.get("category", "")),
            descriptor=str(raw.get("descriptor", "")),
            attributes={str(k): str(v) for k, v in (raw.get("attributes") or {}).items()},
            box=box,
        )

    def panel_script(raw: dict[str, Any], where: str) -> PanelScript:
        sim = raw.get("similarity")
        if sim is not None:
            sim = float(sim)
            if not (-1.0 <= sim <= 1.0):
                raise ScenarioError(f"{where}: similarity must be in [-1, 1]")
        for ent in raw.get("absent") or []:
            if ent not in entities:
                raise ScenarioError(f"{where}: absent entity {ent!r} not declared")
        drift = {}
        for ent, attrs in (raw.get("drift") or {}).items():
            if ent not in entities:
                raise ScenarioError(f"{where}: drift entity {ent!r} not declared")
            drift[ent] = {str(k): str(v) for k, v in (attrs or {}).items()}
        return PanelScript(
            drift=drift,
            absent=[str(e) for e in raw.get("absent") or []],
            occluded=_pairs(raw.get("occluded"), where),
            inappropriate=_pairs(raw.get("inappropriate"), where),
            similarity=sim,
            generate_fails=bool(raw.get("generate_fails", False)),
        )

    panels: dict[int, PanelScript] = {}
    for key, raw in (doc.get("panels") or {}).items():
        try:
            idx = int(key)
        except (TypeError, ValueError):
            raise ScenarioError(f"panel key {key!r} is not an integer") from None
        if idx < 1:
            raise ScenarioError(f"panel index {idx} must be >= 1")
        panels[idx] = panel_script(raw or {}, f"panels[{key}]")

    reference = panel_script(doc.get("reference") or {}, "reference")

    def edit_rules(raw_list: Any, where: str) -> list[EditRule]:
        rules = []
        for i, raw in enumerate(raw_list or []):
            result = (raw or {}).get("result")
            if result not in EDIT_RESULTS:
                raise ScenarioError(f"{where}[{i}]: result must be one of {EDIT_RESULTS}")
            sim = raw.get("similarity")
            if sim is not None:
                sim = float(sim)
                if not (-1.0 <= sim <= 1.0):
                    raise ScenarioError(f"{where}[{i}]: similarity must be in [-1, 1]")
            set_map = {}
            for ent, attrs in (raw.get("set") or {}).items():
                set_map[str(ent)] = {str(k): str(v) for k, v in (attrs or {}).items()}
            rules.append(EditRule(result=result, similarity=sim, set=set_map))
        return rules

    edits: dict[int, PanelEdits] = {}
    for key, raw in (doc.get("edits") or {}).items():
        try:
            idx = int(key)
        except (TypeError, ValueError):
            raise ScenarioError(f"edits key {key!r} is not an integer") from None
        raw = raw or {}
        passes = {}
        for pkey, rules in (raw.get("passes") or {}).items():
            try:
                pno = int(pkey)
            except (TypeError, ValueError):
                raise ScenarioError(f"edits[{key}].passes key {pkey!r} is not an integer") from None
            passes[pno] = edit_rules(rules, f"edits[{key}].passes[{pkey}]")
        edits[idx] = PanelEdits(
            passes=passes,
            corrections=edit_rules(raw.get("corrections"), f"edits[{key}].corrections"),
            default=edit_rules(raw.get("default"), f"edits[{key}].default"),
        )

    scenario = Scenario(
        name=name,
        image_size=(int(size[0]), int(size[1])),
        embedding_mode=mode,
        embedding_dim=int(doc.get("embedding_dim", 32)),
        entities=entities,
        panels=panels,
        reference=reference,
        vlm_answers=dict(doc.get("vlm_answers") or {}),
        vlm_unparseable=[str(k) for k in doc.get("vlm_unparseable") or []],
        edits=edits,
        over_edit_similarity=float(doc.get("over_edit_similarity", 0.1)),
        auto_subtle_above=float(doc.get("auto_subtle_above", 0.9)),
    )
    if scenario.embedding_dim < 2:
        raise ScenarioError("embedding_dim must be >= 2")
    if mode == "scripted":
        for idx, p in panels.items():
            if p.similarity is None and not p.generate_fails:
                raise ScenarioError(f"panels[{idx}]: scripted embedding mode requires a similarity value")
    else:
        bad = [str(i) for i, p in panels.items() if p.similarity is not None]
        if bad:
            raise ScenarioError(
                "similarity values require embedding_mode 'scripted' (panels " + ", ".join(bad) + ")"
            )
    known = {
        "name", "image_size", "embedding_mode", "embedding_dim", "entities", "panels",
        "reference", "vlm_answers", "vlm_unparseable", "edits", "over_edit_similarity",
        "auto_subtle_above", "seed", "notes",
    }
    unknown = set(doc) - known
    if unknown:
        raise ScenarioError(f"unknown scenario keys: {sorted(unknown)}")
    return scenario


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"scenario file {path} is not JSON: {exc}") from exc
    return scenario_from_dict(doc)
