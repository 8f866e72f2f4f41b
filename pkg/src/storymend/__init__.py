"""Audit-and-repair orchestration engine for multi-panel story visualization.

Panels are initialized from a story script, audited for cross-panel
character and object drift by a vision-language backend, and repaired with
localized conditioned edits until the Consistency Index clears a threshold
or the iteration budget runs out.
"""

from .audit import AuditAgent, compile_refined_prompt, compute_consistency_index
from .config import RunConfig, build_suite, load_config
from .director import Director, DirectorConfig, UserCorrection
from .errors import EngineError
from .initagent import InitMode
from .memory import EditEvent, PanelState, RunState, SharedMemory
from .repair import RepairAgent, ScaleController, adjust_scale, evaluate_edit
from .report import ConsistencyReport, EntityMatch, FrameFinding, Mismatch
from .schema import (
    CharacterSpec,
    SceneSpec,
    StoryScript,
    merged_character_prompt,
    parse_story_script,
    serialize_story_script,
)

__version__ = "0.1.0"

__all__ = [
    "AuditAgent",
    "CharacterSpec",
    "ConsistencyReport",
    "Director",
    "DirectorConfig",
    "EditEvent",
    "EngineError",
    "EntityMatch",
    "FrameFinding",
    "InitMode",
    "Mismatch",
    "PanelState",
    "RepairAgent",
    "RunConfig",
    "RunState",
    "ScaleController",
    "SceneSpec",
    "SharedMemory",
    "StoryScript",
    "UserCorrection",
    "adjust_scale",
    "build_suite",
    "compile_refined_prompt",
    "compute_consistency_index",
    "evaluate_edit",
    "load_config",
    "merged_character_prompt",
    "parse_story_script",
    "serialize_story_script",
]
