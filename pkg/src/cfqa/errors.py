"""Exception hierarchy. CLI exit codes hang off the three top-level families."""


class CfqaError(Exception):
    exit_code = 1


class ConfigError(CfqaError, ValueError):
    """Bad configuration or usage."""

    exit_code = 1


class DataError(CfqaError, ValueError):
    """Malformed input files or records that violate an invariant."""

    exit_code = 2


class DuplicateIdError(DataError):
    def __init__(self, question_id: str):
        super().__init__(f"duplicate question_id: {question_id!r}")
        self.question_id = question_id


class MalformedRecordError(DataError):
    def __init__(self, path, line_number: int, byte_offset: int, reason: str):
        super().__init__(f"{path}:{line_number} (byte {byte_offset}): {reason}")
        self.path = path
        self.line_number = line_number
        self.byte_offset = byte_offset
        self.reason = reason


class TemplateAmbiguityError(DataError):
    """Text to be rendered contains one of the template's markers."""


class UndefinedVerdictError(DataError):
    """Judge put zero mass on both Yes and No."""


class BackendError(CfqaError):
    exit_code = 3


class TransientBackendError(BackendError):
    """Retryable failure (timeouts, rate limiting, 5xx)."""


class ContentRefusalError(BackendError):
    """Permanent refusal for this prompt; never retried."""


class TransportError(BackendError):
    """Retry budget exhausted."""


class CapabilityError(BackendError):
    def __init__(self, backend_id: str, capability: str):
        super().__init__(f"backend {backend_id!r} does not support {capability}")
        self.backend_id = backend_id


class UnknownPromptError(BackendError):
    def __init__(self, prompt_hash: str, sample_index=None):
        where = "" if sample_index is None else f" (sample_index={sample_index})"
        super().__init__(f"mock fixture has no entry for prompt_hash {prompt_hash}{where}")
        self.prompt_hash = prompt_hash


class FixtureError(CfqaError):
    exit_code = 1
