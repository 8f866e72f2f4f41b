"""Repair agent: localized edits under an adaptive conditioning-scale controller.

Each repairable frame gets up to max_attempts edits. Results are classified
against two drifts: similarity of the edited panel to the reference (over-
editing) and similarity of the edit to its own input (too subtle). Scale
moves down to strengthen edits, up to reinforce fidelity, and persists per
panel across director iterations via shared memory.
"""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .artifacts import ImageRef
from .backends.base import BackendSuite, EmbedderBackend
from .errors import BackendError, RepairFrameFailed, ZeroVector
from .memory import (
    OUTCOME_ACCEPTED,
    OUTCOME_OVER_EDITED,
    OUTCOME_SKIPPED,
    OUTCOME_TOO_SUBTLE,
    EditEvent,
    SharedMemory,
)
from .seeds import derive_seed


@dataclass(frozen=True)
class ScaleController:
    """Per-panel conditioning-scale state plus the engine's tuning knobs."""

    scale: float = 0.37
    step: float = 0.08
    scale_min: float = 0.10
    scale_max: float = 0.95
    over_edit_threshold: float = 60.0  # CI-scaled similarity to the reference
    subtle_threshold: float = 0.995  # cosine(before, after) above this is "no visible change"
    max_attempts: int = 3

    def __post_init__(self):
        if not (0.0 < self.scale <= 1.0):
            raise ValueError(f"scale {self.scale} outside (0, 1]")
        if not (self.scale_min <= self.scale <= self.scale_max):
            raise ValueError("scale outside [scale_min, scale_max]")
        if self.step <= 0 or self.max_attempts < 1:
            raise ValueError("step must be positive and max_attempts >= 1")
        if not (0.0 <= self.over_edit_threshold <= 100.0):
            raise ValueError("over_edit_threshold is CI-scaled, must be in [0, 100]")

    def with_scale(self, scale: float) -> "ScaleController":
        return dataclasses.replace(self, scale=scale)


def adjust_scale(controller: ScaleController, outcome: str) -> ScaleController:
    """too_subtle lowers the scale (stronger edits); over_edited raises it."""
    if outcome == OUTCOME_TOO_SUBTLE:
        new = max(controller.scale - controller.step, controller.scale_min)
    elif outcome == OUTCOME_OVER_EDITED:
        new = min(controller.scale + controller.step, controller.scale_max)
    else:
        raise ValueError(f"adjust_scale only applies to too_subtle/over_edited, got {outcome!r}")
    return controller.with_scale(round(new, 6))


def _cosine(a: np.ndarray, b: np.ndarray, *, what: str) -> float:
    na = float(math.sqrt(float(a @ a)))
    nb = float(math.sqrt(float(b @ b)))
    if na == 0.0 or nb == 0.0:
        raise ZeroVector(None) if what == "reference" else ZeroVector(-1)
    return min(1.0, max(-1.0, float(a @ b) / (na * nb)))


def evaluate_edit(
    embedder: EmbedderBackend,
    before: ImageRef,
    after: ImageRef,
    reference: ImageRef,
    controller: ScaleController,
    *,
    reference_vec: np.ndarray | None = None,
) -> tuple[str, float]:
    """Classify one edit attempt; returns (outcome, CI-scaled similarity to reference).

    Over-editing takes precedence: it is checked against the reference before
    the too-subtle check compares the edit to its own input.
    """
    ref_vec = reference_vec if reference_vec is not None else embedder.embed(reference).values
    after_vec = embedder.embed(after).values
    ci_to_ref = 100.0 * (_cosine(after_vec, ref_vec, what="reference") + 1.0) / 2.0
    if ci_to_ref < controller.over_edit_threshold:
        return OUTCOME_OVER_EDITED, ci_to_ref
    if after.content_hash == before.content_hash:
        return OUTCOME_TOO_SUBTLE, ci_to_ref
    before_vec = embedder.embed(before).values
    if _cosine(before_vec, after_vec, what="panel") > controller.subtle_threshold:
        return OUTCOME_TOO_SUBTLE, ci_to_ref
    return OUTCOME_ACCEPTED, ci_to_ref


@dataclass(frozen=True)
class AttemptTrace:
    attempt: int
    scale: float
    outcome: str
    ci_to_reference: float | None


@dataclass(frozen=True)
class RepairOutcome:
    panel_index: int
    outcome: str
    attempts: tuple[AttemptTrace, ...]

    @property
    def scales_used(self) -> list[float]:
        return [a.scale for a in self.attempts]


@dataclass(frozen=True)
class PassSummary:
    attempted: tuple[int, ...]
    accepted: tuple[int, ...]
    skipped: tuple[int, ...]
    failed: tuple[int, ...]
    outcomes: tuple[RepairOutcome, ...] = ()


@dataclass
class RepairAgent:
    suite: BackendSuite
    defaults: ScaleController = field(default_factory=ScaleController)

    def _events_since_last_audit(self, memory: SharedMemory, run_id: str, panel_index: int) -> list[dict]:
        events = memory.events(run_id)
        last_audit = max((e["seq"] for e in events if e["type"] == "audit_recorded"), default=-1)
        return [
            e["event"]
            for e in events
            if e["type"] == "panel_edit" and e["seq"] > last_audit and e["event"]["panel_index"] == panel_index
        ]

    def repair_frame(
        self,
        memory: SharedMemory,
        run_id: str,
        panel_index: int,
        *,
        pass_no: int | None,
        seed: int,
        refined_prompt: str | None = None,
        purpose: str = "repair",
    ) -> RepairOutcome:
        """Run the adaptive edit loop for one frame, committing every attempt."""
        state = memory.snapshot(run_id)
        panel = state.panel(panel_index)
        if refined_prompt is None:
            if state.latest_report is None:
                raise ValueError("no report to repair from")
            finding = state.latest_report.finding(panel_index)
            if finding.refined_prompt is None or finding.audit_failed:
                raise ValueError(f"panel {panel_index} is not repairable per the latest report")
            refined_prompt = finding.refined_prompt
        controller = self.defaults.with_scale(panel.conditioning_scale)
        reference = state.reference
        if reference is None:
            raise ValueError("run has no reference image")
        ref_vec = self.suite.embedder.embed(reference).values

        prior = self._events_since_last_audit(memory, run_id, panel_index)
        attempt = len(prior)
        traces = [
            AttemptTrace(
                attempt=i + 1,
                scale=float(ev["scale"]),
                outcome=ev["outcome"],
                ci_to_reference=ev.get("ci_to_reference"),
            )
            for i, ev in enumerate(prior)
        ]
        if any(ev["outcome"] in (OUTCOME_ACCEPTED, OUTCOME_SKIPPED) for ev in prior):
            final = prior[-1]["outcome"]
            return RepairOutcome(panel_index=panel_index, outcome=final, attempts=tuple(traces))

        backend_failures = 0
        classified_this_call = 0
        current = panel.image
        while attempt < controller.max_attempts:
            attempt += 1
            scale = controller.scale
            context = {
                "panel_index": panel_index,
                "attempt": attempt,
                "purpose": purpose,
            }
            if pass_no is not None:
                context["audit_ordinal"] = pass_no
            try:
                after = self.suite.editor.edit(
                    current,
                    refined_prompt,
                    conditioning_scale=scale,
                    seed=derive_seed(seed, "edit", pass_no if pass_no is not None else purpose, panel_index, attempt),
                    context=context,
                )
            except BackendError:
                backend_failures += 1
                continue
            outcome, ci_to_ref = evaluate_edit(
                self.suite.embedder, current, after, reference, controller, reference_vec=ref_vec
            )
            classified_this_call += 1
            if outcome == OUTCOME_ACCEPTED:
                memory.apply_panel_update(run_id, EditEvent(
                    panel_index=panel_index, before=current, after=after,
                    prompt=refined_prompt, scale=scale, outcome=OUTCOME_ACCEPTED,
                    timestamp=time.time(), attempt=attempt, scale_after=scale,
                    ci_to_reference=ci_to_ref, purpose=purpose,
                ))
                traces.append(AttemptTrace(attempt=attempt, scale=scale, outcome=outcome, ci_to_reference=ci_to_ref))
                return RepairOutcome(panel_index=panel_index, outcome=OUTCOME_ACCEPTED, attempts=tuple(traces))
            controller = adjust_scale(controller, outcome)
            memory.apply_panel_update(run_id, EditEvent(
                panel_index=panel_index, before=current, after=after,
                prompt=refined_prompt, scale=scale, outcome=outcome,
                timestamp=time.time(), attempt=attempt, scale_after=controller.scale,
                ci_to_reference=ci_to_ref, purpose=purpose,
            ))
            traces.append(AttemptTrace(attempt=attempt, scale=scale, outcome=outcome, ci_to_reference=ci_to_ref))

        # exhausted: skip this panel and revisit it at the next audit
        memory.apply_panel_update(run_id, EditEvent(
            panel_index=panel_index, before=current, after=current,
            prompt=refined_prompt, scale=controller.scale, outcome=OUTCOME_SKIPPED,
            timestamp=time.time(), attempt=attempt, scale_after=controller.scale,
            ci_to_reference=None, purpose=purpose,
        ))
        if backend_failures > 0 and classified_this_call == 0:
            raise RepairFrameFailed(panel_index)
        return RepairOutcome(panel_index=panel_index, outcome=OUTCOME_SKIPPED, attempts=tuple(traces))

    def repair_pass(
        self,
        memory: SharedMemory,
        run_id: str,
        *,
        pass_no: int | None,
        seed: int,
        frames: Mapping[int, str] | None = None,
        purpose: str = "repair",
    ) -> PassSummary:
        """Process each repairable frame exactly once, in index order.

        ``frames`` overrides the repairable set with explicit refined prompts
        (the user-correction path); otherwise the latest report decides.
        """
        state = memory.snapshot(run_id)
        if frames is not None:
            targets = [(i, frames[i]) for i in sorted(frames)]
        else:
            if state.latest_report is None:
                raise ValueError("no report to repair from")
            skipped_now = {p.index for p in state.panels if p.skipped}
            targets = [
                (i, None)
                for i in state.latest_report.repairable_indexes()
                if i not in skipped_now
            ]
        attempted, accepted, skipped, failed, outcomes = [], [], [], [], []
        for index, prompt in targets:
            attempted.append(index)
            try:
                result = self.repair_frame(
                    memory, run_id, index,
                    pass_no=pass_no, seed=seed, refined_prompt=prompt, purpose=purpose,
                )
            except RepairFrameFailed:
                failed.append(index)
                continue
            outcomes.append(result)
            if result.outcome == OUTCOME_ACCEPTED:
                accepted.append(index)
            else:
                skipped.append(index)
        return PassSummary(
            attempted=tuple(attempted),
            accepted=tuple(accepted),
            skipped=tuple(skipped),
            failed=tuple(failed),
            outcomes=tuple(outcomes),
        )
