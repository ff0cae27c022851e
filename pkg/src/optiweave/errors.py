"""Error taxonomy shared across the pipeline.

Every failure mode carries a stable ``code`` string so CLI exit codes and
structured logs stay consistent, and a ``family`` used to map exceptions onto
exit-code groups.
"""

from __future__ import annotations


class PipelineError(Exception):
    """Base class for all pipeline errors."""

    code = "PIPELINE_ERROR"
    family = "internal"

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)
        self.message = message or self.code


# --- configuration ---------------------------------------------------------

class ConfigInvalidError(PipelineError):
    code = "CONFIG_INVALID"
    family = "config"


# --- input / data ----------------------------------------------------------

class UndecodableFileError(PipelineError):
    code = "UNDECODABLE_FILE"
    family = "data"


class UnknownFunctionError(PipelineError):
    code = "UNKNOWN_FUNCTION"
    family = "data"


class NotARepoError(PipelineError):
    code = "NOT_A_REPO"
    family = "data"


class RevisionNotFoundError(PipelineError):
    code = "REVISION_NOT_FOUND"
    family = "data"


class EmptyRangeError(PipelineError):
    code = "EMPTY_RANGE"
    family = "data"


class NoTestsError(PipelineError):
    code = "NO_TESTS"
    family = "data"


class SchemaViolationError(PipelineError):
    code = "SCHEMA_VIOLATION"
    family = "data"


class EmptySetError(PipelineError):
    code = "EMPTY_SET"
    family = "data"


# --- model providers -------------------------------------------------------

class ModelFailureError(PipelineError):
    code = "MODEL_FAILURE"
    family = "provider"


class ScorerUnavailableError(PipelineError):
    code = "SCORER_UNAVAILABLE"
    family = "provider"


class EmbedderUnavailableError(PipelineError):
    code = "EMBEDDER_UNAVAILABLE"
    family = "provider"


class ScriptExhaustedError(PipelineError):
    code = "SCRIPT_EXHAUSTED"
    family = "provider"


class MalformedToolCallError(PipelineError):
    code = "MALFORMED_TOOL_CALL"
    family = "provider"


# --- editing pipeline ------------------------------------------------------

class UnparseableCandidateError(PipelineError):
    code = "UNPARSEABLE_CANDIDATE"
    family = "edit"


class PatchApplyError(PipelineError):
    code = "PATCH_APPLY_FAILURE"
    family = "edit"


# --- measurement / evaluation ----------------------------------------------

class EnvSetupError(PipelineError):
    code = "ENV_SETUP_FAILURE"
    family = "measure"


class MeasurementTimeoutError(PipelineError):
    code = "TIMEOUT"
    family = "measure"


class CommandNotFoundError(PipelineError):
    code = "COMMAND_NOT_FOUND"
    family = "measure"


class BackendUnavailableError(PipelineError):
    code = "BACKEND_UNAVAILABLE"
    family = "measure"


class ZeroBaselineError(PipelineError):
    code = "ZERO_BASELINE"
    family = "measure"


class ZeroMethodCountError(PipelineError):
    code = "ZERO_METHOD_COUNT"
    family = "measure"


class MissingBaselineError(PipelineError):
    code = "MISSING_BASELINE"
    family = "measure"


# Exit code per error family; the CLI maps uncaught PipelineErrors through this.
EXIT_CODES = {
    "config": 2,
    "data": 3,
    "provider": 4,
    "edit": 5,
    "measure": 6,
    "internal": 1,
}


def exit_code_for(err: BaseException) -> int:
    if isinstance(err, PipelineError):
        return EXIT_CODES.get(err.family, 1)
    return 1
