"""Exception hierarchy shared across the engine."""

from __future__ import annotations


class EngineError(Exception):
    """Base class for every error raised by this package."""


# --- story script parsing ---------------------------------------------------

class MalformedJson(EngineError):
    """Input is not JSON (or not repairable near-JSON in lenient mode)."""


class MissingField(EngineError):
    """A required field is absent or has the wrong shape."""

    def __init__(self, path: str, message: str = ""):
        self.path = path
        super().__init__(f"missing or invalid field: {path}" + (f" ({message})" if message else ""))


class EmptyStory(EngineError):
    """The script declares zero scenes."""


class InvalidScript(EngineError):
    """Semantic violation in a parsed script (empty names, duplicates, no characters)."""


# --- backends ----------------------------------------------------------------

class BackendError(EngineError):
    """Base class for model-service failures."""


class BackendUnavailable(BackendError):
    """Backend unreachable after the configured retries."""


class BackendRejected(BackendError):
    """Backend answered with a definitive rejection (4xx-style)."""


class BackendTimeout(BackendError):
    """Backend did not answer within the configured timeout, retries exhausted."""


class InvalidScale(BackendError):
    """Conditioning scale outside (0, 1]."""


class DimensionMismatch(BackendError):
    """Embedder returned a vector of unexpected length."""

    def __init__(self, expected: int, got: int):
        self.expected = expected
        self.got = got
        super().__init__(f"expected embedding dim {expected}, got {got}")


class UnparseableAnswer(BackendError):
    """VLM answer did not validate against the declared response schema."""

    def __init__(self, raw: str, reason: str = ""):
        self.raw = raw
        self.reason = reason
        super().__init__(f"unparseable VLM answer: {reason or 'schema validation failed'}")


class ScenarioError(EngineError):
    """Mock scenario file is invalid."""


# --- shared memory -----------------------------------------------------------

class UnknownRun(EngineError):
    """No run with that id in the store."""


class OutOfRangeCI(EngineError):
    """Consistency Index outside [0, 100]."""


class BadIndex(EngineError):
    """Panel index outside 1..N."""


class CorruptRun(EngineError):
    """Run directory failed integrity checks on load."""

    def __init__(self, details: str):
        self.details = details
        super().__init__(f"corrupt run: {details}")


# --- agents ------------------------------------------------------------------

class PartialInit(EngineError):
    """Panel initialization failed at a specific index; earlier panels retained."""

    def __init__(self, panel_index: int, cause: Exception | None = None):
        self.panel_index = panel_index
        self.cause = cause
        super().__init__(f"initialization failed at panel {panel_index}: {cause}")


class InitFailed(EngineError):
    """Story initialization could not produce a reference or panel set."""


class AuditFrameFailed(EngineError):
    """A single frame's VLM audit failed; the frame is excluded from repair."""

    def __init__(self, panel_index: int, cause: Exception | None = None):
        self.panel_index = panel_index
        self.cause = cause
        super().__init__(f"audit failed for panel {panel_index}: {cause}")


class AuditFailed(EngineError):
    """No frame could be audited."""


class ZeroVector(EngineError):
    """An embedding had zero norm; cosine similarity is undefined."""

    def __init__(self, panel_index: int | None):
        self.panel_index = panel_index
        where = "reference" if panel_index is None else f"panel {panel_index}"
        super().__init__(f"zero-norm embedding for {where}")


class RepairFrameFailed(EngineError):
    """Every repair attempt for a frame failed with backend errors."""

    def __init__(self, panel_index: int, cause: Exception | None = None):
        self.panel_index = panel_index
        self.cause = cause
        super().__init__(f"repair failed for panel {panel_index}: {cause}")


class EmptyMask(EngineError):
    """Segmentation produced no foreground for any requested label."""

    def __init__(self, panel_index: int, labels: tuple[str, ...]):
        self.panel_index = panel_index
        self.labels = labels
        super().__init__(f"empty foreground mask for panel {panel_index} (labels {list(labels)})")


# --- config / service ----------------------------------------------------------

class ConfigError(EngineError):
    """Run config file failed validation."""
