"""Consistency Director: drives init -> audit -> repair cycles until the
Consistency Index clears the threshold or iterations are exhausted, and
ingests user-in-the-loop corrections on finished runs.

The loop re-audits after every repair pass, so the reported CI always
reflects the delivered panels. All decisions are derivable from the
persisted event log, which is what makes kill-anywhere resume possible.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

from .audit import AuditAgent, load_prompt_templates
from .backends.base import SCHEMA_CORRECTION_PARSE, BackendSuite, VlmMessage, VlmQuery
from .errors import (
    BackendError,
    BadIndex,
    EngineError,
    InitFailed,
    UnparseableAnswer,
)
from .initagent import InitMode, initialize_run
from .memory import (
    STATUS_AUDITING,
    STATUS_AWAITING_USER,
    STATUS_DONE,
    STATUS_FAILED,
    STATUS_INITIALIZING,
    STATUS_REPAIRING,
    RunState,
    SharedMemory,
)
from .repair import RepairAgent, ScaleController
from .schema import StoryScript
from .seeds import derive_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DirectorConfig:
    tau: float = 90.0
    t_max: int = 2
    mode: InitMode = InitMode.EDITING_BASED
    seed: int = 0
    sequential_init: bool = True

    def __post_init__(self):
        if not (0.0 <= self.tau <= 100.0):
            raise ValueError(f"tau must be in [0, 100], got {self.tau}")
        if self.t_max < 0:
            raise ValueError("t_max must be non-negative")

    def to_dict(self) -> dict[str, Any]:
        return {
            "tau": self.tau,
            "t_max": self.t_max,
            "mode": self.mode.value,
            "seed": self.seed,
            "sequential_init": self.sequential_init,
        }

    @staticmethod
    def from_dict(d: Mapping[str, Any]) -> "DirectorConfig":
        return DirectorConfig(
            tau=float(d.get("tau", 90.0)),
            t_max=int(d.get("t_max", 2)),
            mode=InitMode(d.get("mode", "editing_based")),
            seed=int(d.get("seed", 0)),
            sequential_init=bool(d.get("sequential_init", True)),
        )


@dataclass(frozen=True)
class UserCorrection:
    panel_index: int
    instruction: str


@dataclass(frozen=True)
class CorrectionResult:
    applied: tuple[int, ...]
    rejected: tuple[tuple[int, str], ...]
    final_ci: float | None


@dataclass
class Director:
    memory: SharedMemory
    suite: BackendSuite
    templates: dict[str, str] = field(default_factory=load_prompt_templates)
    controller: ScaleController = field(default_factory=ScaleController)
    audit_workers: int = 1

    def __post_init__(self):
        self.auditor = AuditAgent(suite=self.suite, templates=self.templates, max_workers=self.audit_workers)

    # -- run lifecycle -------------------------------------------------------

    def start_run(
        self,
        script: StoryScript,
        config: DirectorConfig,
        run_id: str | None = None,
        *,
        engine_config: Mapping[str, Any] | None = None,
    ) -> str:
        run_config = {"director": config.to_dict(), "controller": _controller_dict(self.controller)}
        if engine_config:
            run_config["engine"] = dict(engine_config)
        return self.memory.create_run(script, run_config, run_id=run_id)

    def run_pipeline(
        self,
        script: StoryScript,
        config: DirectorConfig,
        run_id: str | None = None,
        *,
        engine_config: Mapping[str, Any] | None = None,
    ) -> RunState:
        """init; T:=0; loop {audit; stop if CI >= tau or T >= t_max; repair; T+=1}."""
        run_id = self.start_run(script, config, run_id=run_id, engine_config=engine_config)
        return self.resume(run_id)

    def resume(self, run_id: str) -> RunState:
        """Drive a run from its current persisted state to a terminal status."""
        state = self.memory.snapshot(run_id)
        config = DirectorConfig.from_dict(state.config.get("director", {}))
        try:
            return self._drive(run_id, config)
        except EngineError as exc:
            log.error("run %s failed: %s", run_id, exc)
            self.memory.set_status(run_id, STATUS_FAILED, error=f"{type(exc).__name__}: {exc}")
            return self.memory.snapshot(run_id)

    # -- the state machine ----------------------------------------------------

    def _run_repairer(self, run_id: str) -> RepairAgent:
        state = self.memory.snapshot(run_id)
        return RepairAgent(suite=self.suite, defaults=controller_from_dict(state.config.get("controller", {})))

    def _drive(self, run_id: str, config: DirectorConfig) -> RunState:
        state = self.memory.snapshot(run_id)
        repairer = self._run_repairer(run_id)
        if state.status == STATUS_INITIALIZING:
            try:
                initialize_run(
                    self.memory, run_id, self.suite, config.mode, config.seed,
                    default_scale=repairer.defaults.scale,
                    sequential=config.sequential_init,
                )
            except BackendError as exc:
                raise InitFailed(f"reference synthesis failed: {exc}") from exc
            self.memory.set_status(run_id, STATUS_AUDITING, iteration=0)

        if self._in_correction_phase(run_id):
            return self._drive_corrections(run_id, config)

        while True:
            state = self.memory.snapshot(run_id)
            if state.status in (STATUS_DONE, STATUS_FAILED):
                return state
            if state.status == STATUS_AUDITING:
                if state.audits_completed < state.iteration + 1:
                    self.auditor.run_audit(self.memory, run_id)
                    state = self.memory.snapshot(run_id)
                ci = state.ci_history[-1]
                if ci >= config.tau or state.iteration >= config.t_max:
                    self.memory.set_status(run_id, STATUS_DONE)
                    return self.memory.snapshot(run_id)
                self.memory.set_status(run_id, STATUS_REPAIRING)
            elif state.status == STATUS_REPAIRING:
                pass_no = state.audits_completed
                summary = repairer.repair_pass(
                    self.memory, run_id, pass_no=pass_no, seed=config.seed,
                )
                if summary.attempted and len(summary.failed) == len(summary.attempted):
                    raise EngineError(
                        f"every repairable frame failed with backend errors in pass {pass_no}"
                    )
                self.memory.set_status(run_id, STATUS_AUDITING, iteration=state.iteration + 1)
            else:
                raise EngineError(f"cannot resume from status {state.status!r}")

    # -- user corrections -------------------------------------------------------

    def ingest_user_corrections(self, run_id: str, corrections: Sequence[UserCorrection]) -> CorrectionResult:
        """Parse corrections into refined prompts and repair exactly those panels."""
        state = self.memory.snapshot(run_id)
        if state.status not in (STATUS_DONE, STATUS_AWAITING_USER):
            raise EngineError(f"corrections require a finished run, status is {state.status!r}")
        if not corrections:
            return CorrectionResult(applied=(), rejected=(), final_ci=state.ci_history[-1] if state.ci_history else None)
        valid_indexes = {p.index for p in state.panels}
        for c in corrections:
            if c.panel_index not in valid_indexes:
                raise BadIndex(f"panel {c.panel_index} not in run {run_id}")
        config = DirectorConfig.from_dict(state.config.get("director", {}))
        if state.status == STATUS_DONE:
            self.memory.set_status(run_id, STATUS_AWAITING_USER)
        rejected: list[tuple[int, str]] = []
        recorded: list[int] = []
        for c in corrections:
            text = self.templates["correction_parse"].format(
                panel_index=c.panel_index, instruction=c.instruction
            )
            panel_image = state.panel(c.panel_index).image
            query = VlmQuery(
                messages=(VlmMessage(role="user", text=text, images=(panel_image,)),),
                schema_tag=SCHEMA_CORRECTION_PARSE,
                context={"panel_index": c.panel_index, "instruction": c.instruction},
            )
            try:
                sentence = self.suite.vlm.ask(query).data["sentence"]
            except (UnparseableAnswer, BackendError) as exc:
                rejected.append((c.panel_index, str(exc)))
                continue
            self.memory.record_correction(run_id, c.panel_index, c.instruction, sentence)
            recorded.append(c.panel_index)
        final = self._drive_corrections(run_id, config)
        return CorrectionResult(
            applied=tuple(sorted(set(recorded))),
            rejected=tuple(rejected),
            final_ci=final.ci_history[-1] if final.ci_history else None,
        )

    def _correction_batch(self, run_id: str) -> tuple[int, dict[int, str]]:
        """Corrections recorded since the last terminal 'done', with batch start seq."""
        events = self.memory.events(run_id)
        last_done = max(
            (e["seq"] for e in events if e["type"] == "status_changed" and e["status"] == STATUS_DONE),
            default=-1,
        )
        frames: dict[int, str] = {}
        for e in events:
            if e["type"] == "correction_ingested" and e["seq"] > last_done:
                frames[int(e["panel_index"])] = e["sentence"]
        return last_done, frames

    def _in_correction_phase(self, run_id: str) -> bool:
        state = self.memory.snapshot(run_id)
        if state.status == STATUS_AWAITING_USER:
            return True
        if state.status in (STATUS_REPAIRING, STATUS_AUDITING):
            _, frames = self._correction_batch(run_id)
            return bool(frames)
        return False

    def _drive_corrections(self, run_id: str, config: DirectorConfig) -> RunState:
        last_done, frames = self._correction_batch(run_id)
        state = self.memory.snapshot(run_id)
        if not frames or state.status in (STATUS_DONE, STATUS_FAILED):
            if state.status == STATUS_AWAITING_USER:
                self.memory.set_status(run_id, STATUS_DONE)
            return self.memory.snapshot(run_id)
        events = self.memory.events(run_id)
        first_corr_seq = min(
            e["seq"] for e in events if e["type"] == "correction_ingested" and e["seq"] > last_done
        )
        audits_before = sum(
            1 for e in events if e["type"] == "audit_recorded" and e["seq"] < first_corr_seq
        )
        repairer = self._run_repairer(run_id)
        if state.status == STATUS_AWAITING_USER:
            self.memory.set_status(run_id, STATUS_REPAIRING)
            state = self.memory.snapshot(run_id)
        if state.status == STATUS_REPAIRING:
            repairer.repair_pass(
                self.memory, run_id,
                pass_no=None,
                seed=derive_seed(config.seed, "correction", audits_before),
                frames=frames,
                purpose="correction",
            )
            self.memory.set_status(run_id, STATUS_AUDITING)
            state = self.memory.snapshot(run_id)
        if state.status == STATUS_AUDITING:
            if state.audits_completed <= audits_before:
                self.auditor.run_audit(self.memory, run_id)
            self.memory.set_status(run_id, STATUS_DONE)
        return self.memory.snapshot(run_id)


def _controller_dict(controller: ScaleController) -> dict[str, Any]:
    return {
        "scale": controller.scale,
        "step": controller.step,
        "scale_min": controller.scale_min,
        "scale_max": controller.scale_max,
        "over_edit_threshold": controller.over_edit_threshold,
        "subtle_threshold": controller.subtle_threshold,
        "max_attempts": controller.max_attempts,
    }


def controller_from_dict(d: Mapping[str, Any]) -> ScaleController:
    return ScaleController(
        scale=float(d.get("scale", 0.37)),
        step=float(d.get("step", 0.08)),
        scale_min=float(d.get("scale_min", 0.10)),
        scale_max=float(d.get("scale_max", 0.95)),
        over_edit_threshold=float(d.get("over_edit_threshold", 60.0)),
        subtle_threshold=float(d.get("subtle_threshold", 0.995)),
        max_attempts=int(d.get("max_attempts", 3)),
    )
