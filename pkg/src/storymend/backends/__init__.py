"""Backend interfaces, deterministic mocks, and network clients."""

from .base import (
    SCHEMA_CORRECTION_PARSE,
    SCHEMA_ENTITY_MATCH,
    SCHEMA_FIX_VERIFY,
    SCHEMA_MISMATCH_DETECT,
    BackendSuite,
    DistanceBackend,
    EditorBackend,
    EmbedderBackend,
    EmbeddingVec,
    GeneratorBackend,
    Mask,
    SegmenterBackend,
    VlmAnswer,
    VlmBackend,
    VlmMessage,
    VlmQuery,
    check_scale,
    validate_answer_shape,
)
from .mock import build_mock_suite
from .mockimg import MockImage
from .scenario import Scenario, load_scenario, scenario_from_dict

__all__ = [
    "BackendSuite",
    "DistanceBackend",
    "EditorBackend",
    "EmbedderBackend",
    "EmbeddingVec",
    "GeneratorBackend",
    "Mask",
    "MockImage",
    "Scenario",
    "SCHEMA_CORRECTION_PARSE",
    "SCHEMA_ENTITY_MATCH",
    "SCHEMA_FIX_VERIFY",
    "SCHEMA_MISMATCH_DETECT",
    "VlmAnswer",
    "VlmBackend",
    "VlmMessage",
    "VlmQuery",
    "build_mock_suite",
    "check_scale",
    "load_scenario",
    "scenario_from_dict",
    "validate_answer_shape",
]
