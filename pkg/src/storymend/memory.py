"""Shared memory: the blackboard every agent reads and writes.

Holds panel set, latest consistency report, Consistency Index history,
iteration counter and the append-only edit log, with write-ahead on-disk
persistence. One writer per run; snapshots are always consistent.

Run directory layout:
    run.json            state snapshot (images by reference)
    events.log          one JSON event per line, append-only, written first
    reference.<ext>     reference image bytes
    panels/<i>.<ext>    current bytes of panel i
    report_<n>.json     report of the n-th audit (0-based)
"""

from __future__ import annotations

import copy
import json
import os
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterator

from .artifacts import ArtifactStore, ImageRef
from .errors import BadIndex, CorruptRun, OutOfRangeCI, UnknownRun
from .report import ConsistencyReport, report_json
from .schema import StoryScript, parse_story_script, script_to_dict

STATUS_INITIALIZING = "initializing"
STATUS_AUDITING = "auditing"
STATUS_REPAIRING = "repairing"
STATUS_AWAITING_USER = "awaiting_user"
STATUS_DONE = "done"
STATUS_FAILED = "failed"

_TRANSITIONS: dict[str, set[str]] = {
    STATUS_INITIALIZING: {STATUS_AUDITING, STATUS_FAILED},
    STATUS_AUDITING: {STATUS_DONE, STATUS_REPAIRING, STATUS_FAILED},
    STATUS_REPAIRING: {STATUS_AUDITING, STATUS_FAILED},
    STATUS_DONE: {STATUS_AWAITING_USER},
    STATUS_AWAITING_USER: {STATUS_REPAIRING, STATUS_DONE, STATUS_FAILED},
    STATUS_FAILED: set(),
}

OUTCOME_ACCEPTED = "accepted"
OUTCOME_TOO_SUBTLE = "too_subtle"
OUTCOME_OVER_EDITED = "over_edited"
OUTCOME_SKIPPED = "skipped"
EDIT_OUTCOMES = (OUTCOME_ACCEPTED, OUTCOME_TOO_SUBTLE, OUTCOME_OVER_EDITED, OUTCOME_SKIPPED)

_EXT_BY_MEDIA = {
    "application/x-storymend-mockimg": "mockimg",
    "image/png": "png",
    "image/jpeg": "jpg",
    "image/webp": "webp",
}


def _ext_for(media_type: str) -> str:
    return _EXT_BY_MEDIA.get(media_type, "bin")


@dataclass
class PanelState:
    index: int
    image: ImageRef
    conditioning_scale: float
    attempt_count: int = 0
    skipped: bool = False
    last_refined_prompt: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "index": self.index,
            "image": self.image.to_dict(),
            "conditioning_scale": self.conditioning_scale,
            "attempt_count": self.attempt_count,
            "skipped": self.skipped,
            "last_refined_prompt": self.last_refined_prompt,
        }

    @staticmethod
    def from_dict(d: dict[str, Any]) -> "PanelState":
        return PanelState(
            index=int(d["index"]),
            image=ImageRef.from_dict(d["image"]),
            conditioning_scale=float(d["conditioning_scale"]),
            attempt_count=int(d.get("attempt_count", 0)),
            skipped=bool(d.get("skipped", False)),
            last_refined_prompt=d.get("last_refined_prompt"),
        )


@dataclass
class EditEvent:
    panel_index: int
    before: ImageRef
    after: ImageRef
    prompt: str
    scale: float
    outcome: str
    timestamp: float
    attempt: int = 1
    scale_after: float | None = None
    ci_to_reference: float | None = None
    purpose: str = "repair"  # repair | correction

    def __post_init__(self):
        if self.outcome not in EDIT_OUTCOMES:
            raise ValueError(f"unknown outcome {self.outcome!r}")
        if self.before.content_hash == self.after.content_hash:
            if self.outcome not in (OUTCOME_TOO_SUBTLE, OUTCOME_SKIPPED):
                raise ValueError("before/after may be identical only for too_subtle or skipped")

    def to_dict(self) -> dict[str, Any]:
        return {
            "panel_index": self.panel_index,
            "before": self.before.to_dict(),
            "after": self.after.to_dict(),
            "prompt": self.prompt,
            "scale": self.scale,
            "outcome": self.outcome,
            "timestamp": self.timestamp,
            "attempt": self.attempt,
            "scale_after": self.scale_after,
            "ci_to_reference": self.ci_to_reference,
            "purpose": self.purpose,
        }

    @staticmethod
    def from_dict(d: dict[str, Any]) -> "EditEvent":
        return EditEvent(
            panel_index=int(d["panel_index"]),
            before=ImageRef.from_dict(d["before"]),
            after=ImageRef.from_dict(d["after"]),
            prompt=d["prompt"],
            scale=float(d["scale"]),
            outcome=d["outcome"],
            timestamp=float(d["timestamp"]),
            attempt=int(d.get("attempt", 1)),
            scale_after=d.get("scale_after"),
            ci_to_reference=d.get("ci_to_reference"),
            purpose=d.get("purpose", "repair"),
        )


@dataclass
class RunState:
    run_id: str
    script: StoryScript
    config: dict[str, Any]
    reference: ImageRef | None = None
    panels: list[PanelState] = field(default_factory=list)
    iteration: int = 0
    ci_history: list[float] = field(default_factory=list)
    latest_report: ConsistencyReport | None = None
    edit_log: list[EditEvent] = field(default_factory=list)
    status: str = STATUS_INITIALIZING
    error: str | None = None

    def panel(self, index: int) -> PanelState:
        for p in self.panels:
            if p.index == index:
                return p
        raise BadIndex(f"panel {index} not in run {self.run_id}")

    @property
    def audits_completed(self) -> int:
        return len(self.ci_history)

    def to_dict(self) -> dict[str, Any]:
        return {
            "run_id": self.run_id,
            "script": script_to_dict(self.script),
            "config": self.config,
            "reference": self.reference.to_dict() if self.reference else None,
            "panels": [p.to_dict() for p in self.panels],
            "iteration": self.iteration,
            "ci_history": self.ci_history,
            "latest_report": self.latest_report.to_dict() if self.latest_report else None,
            "edit_log": [e.to_dict() for e in self.edit_log],
            "status": self.status,
            "error": self.error,
        }


class SharedMemory:
    """Persistent run store with single-writer discipline per run.

    Every mutation appends an event to events.log (fsynced) before the
    in-memory state changes and the run.json snapshot is rewritten, so a
    crash after any persisted event is recoverable by replay.
    """

    def __init__(self, root: str | Path, store: ArtifactStore | None = None):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.store = store if store is not None else ArtifactStore()
        self._lock = threading.RLock()
        self._cond = threading.Condition(self._lock)
        self._runs: dict[str, RunState] = {}
        self._events: dict[str, list[dict[str, Any]]] = {}
        self._dirs: dict[str, Path] = {}
        self.after_persist: Callable[[str, int], None] | None = None  # test hook

    # -- paths ------------------------------------------------------------

    def run_dir(self, run_id: str) -> Path:
        return self._dirs.get(run_id, self.root / run_id)

    def _panel_path(self, run_id: str, index: int, media_type: str) -> Path:
        return self.run_dir(run_id) / "panels" / f"{index}.{_ext_for(media_type)}"

    # -- event plumbing ----------------------------------------------------

    def _append_event(self, run_id: str, event_type: str, payload: dict[str, Any]) -> dict[str, Any]:
        events = self._events[run_id]
        event = {"seq": len(events), "ts": time.time(), "type": event_type, "run_id": run_id, **payload}
        path = self.run_dir(run_id) / "events.log"
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(event, ensure_ascii=False) + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        if self.after_persist is not None:
            self.after_persist(run_id, event["seq"])
        events.append(event)
        self._cond.notify_all()
        return event

    def _write_snapshot(self, run_id: str) -> None:
        state = self._runs[run_id]
        doc = state.to_dict()
        doc["event_count"] = len(self._events[run_id])
        path = self.run_dir(run_id) / "run.json"
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(doc, indent=2, ensure_ascii=False))
        tmp.replace(path)

    def _write_image(self, path: Path, ref: ImageRef) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.store.get(ref))
        tmp.replace(path)

    def _require(self, run_id: str) -> RunState:
        try:
            return self._runs[run_id]
        except KeyError:
            raise UnknownRun(f"no run {run_id!r}") from None

    # -- lifecycle ----------------------------------------------------------

    def create_run(self, script: StoryScript, config: dict[str, Any], run_id: str | None = None) -> str:
        run_id = run_id or uuid.uuid4().hex[:12]
        with self._lock:
            if run_id in self._runs:
                raise ValueError(f"run {run_id!r} already exists")
            (self.run_dir(run_id) / "panels").mkdir(parents=True, exist_ok=True)
            self._runs[run_id] = RunState(run_id=run_id, script=script, config=config)
            self._events[run_id] = []
            self._append_event(run_id, "run_created", {
                "run_id": run_id,
                "script": script_to_dict(script),
                "config": config,
            })
            self._write_snapshot(run_id)
        return run_id

    def list_runs(self) -> list[str]:
        with self._lock:
            return sorted(self._runs)

    def snapshot(self, run_id: str) -> RunState:
        with self._lock:
            return copy.deepcopy(self._require(run_id))

    def set_reference(self, run_id: str, ref: ImageRef) -> None:
        with self._lock:
            state = self._require(run_id)
            self._write_image(self.run_dir(run_id) / f"reference.{_ext_for(ref.media_type)}", ref)
            self._append_event(run_id, "reference_set", {"image": ref.to_dict()})
            state.reference = ref
            self._write_snapshot(run_id)

    def add_panel(self, run_id: str, panel: PanelState) -> None:
        with self._lock:
            state = self._require(run_id)
            if any(p.index == panel.index for p in state.panels):
                raise BadIndex(f"panel {panel.index} already initialized")
            self._write_image(self._panel_path(run_id, panel.index, panel.image.media_type), panel.image)
            self._append_event(run_id, "panel_initialized", {"panel": panel.to_dict()})
            state.panels.append(panel)
            state.panels.sort(key=lambda p: p.index)
            self._write_snapshot(run_id)

    def set_status(self, run_id: str, status: str, *, iteration: int | None = None, error: str | None = None) -> None:
        with self._lock:
            state = self._require(run_id)
            if status != state.status and status not in _TRANSITIONS[state.status]:
                raise ValueError(f"illegal status transition {state.status} -> {status}")
            if iteration is not None and iteration < state.iteration:
                raise ValueError("iteration counter never decreases")
            payload: dict[str, Any] = {"status": status, "iteration": iteration if iteration is not None else state.iteration}
            if error is not None:
                payload["error"] = error
            self._append_event(run_id, "status_changed", payload)
            state.status = status
            if iteration is not None:
                state.iteration = iteration
            if error is not None:
                state.error = error
            self._write_snapshot(run_id)

    def record_audit(self, run_id: str, report: ConsistencyReport, ci: float) -> None:
        """Commit an audit: append CI, replace the report, reset per-pass flags."""
        if not (0.0 <= ci <= 100.0):
            raise OutOfRangeCI(f"ci {ci} outside [0, 100]")
        with self._lock:
            state = self._require(run_id)
            ordinal = len(state.ci_history) + 1  # 1-based audit ordinal
            report_path = self.run_dir(run_id) / f"report_{ordinal}.json"
            report_path.write_text(report_json(report))
            self._append_event(run_id, "audit_recorded", {
                "ordinal": ordinal,
                "ci": ci,
                "report": report.to_dict(),
            })
            state.ci_history.append(ci)
            state.latest_report = report
            for panel in state.panels:
                panel.skipped = False
                panel.attempt_count = 0
            self._write_snapshot(run_id)

    def apply_panel_update(self, run_id: str, event: EditEvent) -> None:
        """Apply one edit outcome to exactly one panel."""
        with self._lock:
            state = self._require(run_id)
            panel = state.panel(event.panel_index)
            if event.outcome == OUTCOME_ACCEPTED:
                self._write_image(self._panel_path(run_id, panel.index, event.after.media_type), event.after)
            self._append_event(run_id, "panel_edit", {"event": event.to_dict()})
            self._apply_edit(state, event)
            self._write_snapshot(run_id)

    @staticmethod
    def _apply_edit(state: RunState, event: EditEvent) -> None:
        panel = state.panel(event.panel_index)
        panel.attempt_count = event.attempt
        if event.scale_after is not None:
            panel.conditioning_scale = event.scale_after
        if event.outcome == OUTCOME_ACCEPTED:
            panel.image = event.after
            panel.last_refined_prompt = event.prompt
            panel.skipped = False
        elif event.outcome == OUTCOME_SKIPPED:
            panel.skipped = True
        state.edit_log.append(event)

    def record_correction(self, run_id: str, panel_index: int, instruction: str, sentence: str) -> None:
        with self._lock:
            state = self._require(run_id)
            state.panel(panel_index)  # BadIndex if absent
            self._append_event(run_id, "correction_ingested", {
                "panel_index": panel_index,
                "instruction": instruction,
                "sentence": sentence,
            })
            self._write_snapshot(run_id)

    # -- subscriptions -------------------------------------------------------

    def events(self, run_id: str) -> list[dict[str, Any]]:
        with self._lock:
            self._require(run_id)
            return list(self._events[run_id])

    def follow(self, run_id: str, since: int = 0, *, stop: Callable[[], bool]) -> Iterator[dict[str, Any]]:
        """Yield events from ``since`` onward, waiting for new ones until ``stop()``."""
        next_seq = since
        while True:
            with self._cond:
                self._require(run_id)
                events = self._events[run_id]
                batch = events[next_seq:]
                if not batch:
                    if stop():
                        return
                    self._cond.wait(timeout=0.1)
                    continue
            for event in batch:
                yield event
                next_seq = event["seq"] + 1

    # -- persistence -----------------------------------------------------------

    def persist(self, run_id: str) -> Path:
        """Flush the current snapshot and all artifacts; returns the run dir."""
        with self._lock:
            state = self._require(run_id)
            if state.reference is not None:
                self._write_image(self.run_dir(run_id) / f"reference.{_ext_for(state.reference.media_type)}", state.reference)
            for panel in state.panels:
                self._write_image(self._panel_path(run_id, panel.index, panel.image.media_type), panel.image)
            self._write_snapshot(run_id)
            return self.run_dir(run_id)

    def load_run(self, run_dir: str | Path) -> RunState:
        """Rebuild a run from its directory by replaying events.log."""
        run_dir = Path(run_dir)
        events_path = run_dir / "events.log"
        if not events_path.exists():
            raise CorruptRun(f"{run_dir}: missing events.log")
        events: list[dict[str, Any]] = []
        lines = events_path.read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        for i, line in enumerate(lines):
            try:
                event = json.loads(line)
            except json.JSONDecodeError:
                if i == len(lines) - 1:
                    break  # torn tail write from a crash; the event was never acknowledged
                raise CorruptRun(f"{run_dir}: undecodable event at line {i + 1}") from None
            if event.get("seq") != i:
                raise CorruptRun(f"{run_dir}: event sequence gap at line {i + 1}")
            events.append(event)
        if not events or events[0]["type"] != "run_created":
            raise CorruptRun(f"{run_dir}: first event must be run_created")

        state = self._replay(events)
        for ordinal in range(1, len(state.ci_history) + 1):
            report_path = run_dir / f"report_{ordinal}.json"
            try:
                json.loads(report_path.read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise CorruptRun(f"{run_dir}: unreadable report_{ordinal}.json: {exc}") from exc
        self._hydrate_artifacts(run_dir, state)
        with self._lock:
            self._runs[state.run_id] = state
            self._events[state.run_id] = events
            self._dirs[state.run_id] = run_dir
        return self.snapshot(state.run_id)

    @staticmethod
    def _replay(events: list[dict[str, Any]]) -> RunState:
        head = events[0]
        try:
            script = parse_story_script(json.dumps(head["script"]))
            state = RunState(run_id=head["run_id"], script=script, config=head.get("config", {}))
            for event in events[1:]:
                etype = event["type"]
                if etype == "reference_set":
                    state.reference = ImageRef.from_dict(event["image"])
                elif etype == "panel_initialized":
                    state.panels.append(PanelState.from_dict(event["panel"]))
                    state.panels.sort(key=lambda p: p.index)
                elif etype == "status_changed":
                    state.status = event["status"]
                    state.iteration = int(event.get("iteration", state.iteration))
                    if event.get("error") is not None:
                        state.error = event["error"]
                elif etype == "audit_recorded":
                    state.ci_history.append(float(event["ci"]))
                    state.latest_report = ConsistencyReport.from_dict(event["report"])
                    for panel in state.panels:
                        panel.skipped = False
                        panel.attempt_count = 0
                elif etype == "panel_edit":
                    SharedMemory._apply_edit(state, EditEvent.from_dict(event["event"]))
                elif etype == "correction_ingested":
                    pass
                else:
                    raise CorruptRun(f"unknown event type {etype!r}")
        except (KeyError, ValueError, TypeError) as exc:
            raise CorruptRun(f"replay failed: {exc}") from exc
        return state

    def _hydrate_artifacts(self, run_dir: Path, state: RunState) -> None:
        def restore(ref: ImageRef, path: Path, what: str) -> None:
            if not path.exists():
                raise CorruptRun(f"{run_dir}: missing {what} file {path.name}")
            data = path.read_bytes()
            stored = self.store.put(data, ref.media_type)
            if stored.content_hash != ref.content_hash:
                raise CorruptRun(f"{run_dir}: {what} bytes do not match recorded hash")

        if state.reference is not None:
            restore(state.reference, run_dir / f"reference.{_ext_for(state.reference.media_type)}", "reference")
        for panel in state.panels:
            restore(panel.image, run_dir / "panels" / f"{panel.index}.{_ext_for(panel.image.media_type)}", f"panel {panel.index}")
