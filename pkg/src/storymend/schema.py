"""Story script parsing, validation and canonical serialization.

The on-disk format uses the exact field names "Main Characters", "Name",
"Description", "Category", "Story", "Image_Prompt", "Location_Description".
Unknown keys are retained so that parse/serialize round-trips losslessly.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Any, Mapping

from .errors import EmptyStory, InvalidScript, MalformedJson, MissingField

_KNOWN_CHARACTER_KEYS = ("Name", "Description", "Category")
_KNOWN_SCENE_KEYS = ("Image_Prompt", "Location_Description")
_KNOWN_ROOT_KEYS = ("Main Characters", "Story")


@dataclass(frozen=True)
class CharacterSpec:
    """One recurring character: visual description plus a coarse category."""

    name: str
    description: str
    category: str = ""
    extra: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class SceneSpec:
    """One panel's prompt plus an auxiliary location description."""

    image_prompt: str
    location_description: str = ""
    extra: Mapping[str, Any] = field(default_factory=dict)

    def full_prompt(self) -> str:
        """Prompt text handed to generation backends for this panel."""
        if self.location_description:
            return f"{self.image_prompt} ({self.location_description})"
        return self.image_prompt


@dataclass(frozen=True)
class StoryScript:
    """Parsed narrative: ordered characters and N >= 1 scenes."""

    characters: tuple[CharacterSpec, ...]
    scenes: tuple[SceneSpec, ...]
    extra: Mapping[str, Any] = field(default_factory=dict)

    @property
    def num_panels(self) -> int:
        return len(self.scenes)

    def character_names(self) -> list[str]:
        return [c.name for c in self.characters]


def _repair_near_json(text: str) -> str:
    """Repair the defect classes seen in real script files.

    Handles, outside of string literals only:
      * trailing commas before ``}`` or ``]``
      * a missing comma between ``}`` and ``{``
      * a duplicated opening brace (``{`` directly followed by ``{``)
    """
    out: list[str] = []
    in_string = False
    escaped = False
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if in_string:
            out.append(ch)
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            i += 1
            continue
        if ch == '"':
            in_string = True
            out.append(ch)
            i += 1
            continue
        if ch in ",}{":
            j = i + 1
            while j < n and text[j] in " \t\r\n":
                j += 1
            nxt = text[j] if j < n else ""
            if ch == "," and nxt in "}]":
                i += 1  # drop trailing comma
                continue
            if ch == "}" and nxt == "{":
                out.append("},")
                out.append(text[i + 1:j])
                i = j
                continue
            if ch == "{" and nxt == "{":
                out.append(text[i + 1:j])  # drop the duplicate opener, keep whitespace
                i = j
                continue
        out.append(ch)
        i += 1
    return "".join(out)


def _require(obj: Mapping[str, Any], key: str, path: str) -> Any:
    if not isinstance(obj, Mapping) or key not in obj:
        raise MissingField(f"{path}{key}" if path.endswith(".") or not path else f"{path}.{key}")
    return obj[key]


def _as_str(value: Any, path: str) -> str:
    if not isinstance(value, str):
        raise MissingField(path, "expected string")
    return value


def parse_story_script(text: str | bytes, *, strict: bool = True) -> StoryScript:
    """Parse a script document into a :class:`StoryScript`.

    ``strict=False`` enables repair of near-JSON defects (trailing commas,
    missing commas between objects, duplicated braces) before parsing.
    Raises :class:`MalformedJson`, :class:`MissingField`, :class:`EmptyStory`
    or :class:`InvalidScript`; never any other exception type.
    """
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedJson(f"not UTF-8: {exc}") from exc
    if not isinstance(text, str):
        raise MalformedJson(f"expected str or bytes, got {type(text).__name__}")
    try:
        doc = json.loads(text)
    except (json.JSONDecodeError, RecursionError) as exc:
        if strict:
            raise MalformedJson(str(exc)) from exc
        try:
            doc = json.loads(_repair_near_json(text))
        except (json.JSONDecodeError, RecursionError) as exc2:
            raise MalformedJson(str(exc2)) from exc2
    if not isinstance(doc, dict):
        raise MissingField("Main Characters", "document root is not an object")

    raw_chars = _require(doc, "Main Characters", "")
    if not isinstance(raw_chars, list):
        raise MissingField("Main Characters", "expected array")
    raw_scenes = _require(doc, "Story", "")
    if not isinstance(raw_scenes, list):
        raise MissingField("Story", "expected array")
    if len(raw_scenes) == 0:
        raise EmptyStory("script declares zero scenes")

    characters: list[CharacterSpec] = []
    seen_names: set[str] = set()
    for idx, raw in enumerate(raw_chars):
        path = f"Main Characters[{idx}]"
        if not isinstance(raw, Mapping):
            raise MissingField(path, "expected object")
        name = _as_str(_require(raw, "Name", path), f"{path}.Name")
        description = _as_str(_require(raw, "Description", path), f"{path}.Description")
        category = _as_str(raw.get("Category", ""), f"{path}.Category")
        if not name.strip():
            raise InvalidScript(f"{path}.Name is empty")
        if not description.strip():
            raise InvalidScript(f"{path}.Description is empty")
        if name in seen_names:
            raise InvalidScript(f"duplicate character name: {name!r}")
        seen_names.add(name)
        extra = {k: v for k, v in raw.items() if k not in _KNOWN_CHARACTER_KEYS}
        characters.append(CharacterSpec(name=name, description=description, category=category, extra=extra))

    scenes: list[SceneSpec] = []
    for idx, raw in enumerate(raw_scenes):
        path = f"Story[{idx}]"
        if not isinstance(raw, Mapping):
            raise MissingField(path, "expected object")
        image_prompt = _as_str(_require(raw, "Image_Prompt", path), f"{path}.Image_Prompt")
        if not image_prompt.strip():
            raise InvalidScript(f"{path}.Image_Prompt is empty")
        location = _as_str(raw.get("Location_Description", ""), f"{path}.Location_Description")
        extra = {k: v for k, v in raw.items() if k not in _KNOWN_SCENE_KEYS}
        scenes.append(SceneSpec(image_prompt=image_prompt, location_description=location, extra=extra))

    root_extra = {k: v for k, v in doc.items() if k not in _KNOWN_ROOT_KEYS}
    return StoryScript(characters=tuple(characters), scenes=tuple(scenes), extra=root_extra)


def script_to_dict(script: StoryScript) -> dict[str, Any]:
    """Plain-dict form of a script in canonical key order."""
    chars = []
    for c in script.characters:
        d: dict[str, Any] = {"Name": c.name, "Description": c.description, "Category": c.category}
        d.update(c.extra)
        chars.append(d)
    scenes = []
    for s in script.scenes:
        d = {"Image_Prompt": s.image_prompt, "Location_Description": s.location_description}
        d.update(s.extra)
        scenes.append(d)
    doc: dict[str, Any] = {"Main Characters": chars, "Story": scenes}
    doc.update(script.extra)
    return doc


def serialize_story_script(script: StoryScript) -> str:
    """Canonical on-disk encoding: pretty-printed JSON, 2-space indent."""
    return json.dumps(script_to_dict(script), indent=2, ensure_ascii=False)


_DESCRIPTOR_BOUNDARY = re.compile(
    r"^(with|wearing|in|on|holding|carrying|that|who|whose|having)$", re.IGNORECASE
)
_ARTICLES = {"a", "an", "the"}


def character_descriptor(character: CharacterSpec) -> str:
    """Short referring phrase for edit sentences, e.g. "the girl".

    Takes the description's leading noun phrase: strips any article and stops
    at the first attachment word (with/wearing/in/...).
    """
    tokens = character.description.split()
    head: list[str] = []
    for i, tok in enumerate(tokens):
        bare = tok.strip(",;:").lower()
        if i == 0 and bare in _ARTICLES:
            continue
        if _DESCRIPTOR_BOUNDARY.match(bare):
            break
        head.append(bare)
    if not head:
        head = [(character.category or character.name).lower()]
    return "the " + " ".join(head)


def merged_character_prompt(script: StoryScript) -> str:
    """All character descriptions joined with " and ", in declaration order.

    Used both as the reference-image prompt (editing mode) and as the
    leading prompt of the extended prompt set (story-generation mode).
    """
    if not script.characters:
        raise InvalidScript("script has no characters to merge")
    return " and ".join(c.description for c in script.characters)
