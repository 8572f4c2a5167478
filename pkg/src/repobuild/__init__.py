"""Automated compilation harness for C/C++ repositories.

Combines instruction retrieval, an iterative generate/execute/repair agent
loop running in disposable sandboxes, rule-based baseline builders, binary
validation, and a benchmark harness with pass@k reporting.
"""

from .errors import (
    CloneError,
    DomainError,
    ManifestParseError,
    ManifestValidationError,
    OversizeReplyError,
    ProtocolError,
    RepobuildError,
    SampleSizeError,
    SandboxDeadError,
    SandboxUnavailableError,
    ScenarioExhaustedError,
    TransportError,
    UsageError,
)

__version__ = "0.1.0"

__all__ = [
    "CloneError",
    "DomainError",
    "ManifestParseError",
    "ManifestValidationError",
    "OversizeReplyError",
    "ProtocolError",
    "RepobuildError",
    "SampleSizeError",
    "SandboxDeadError",
    "SandboxUnavailableError",
    "ScenarioExhaustedError",
    "TransportError",
    "UsageError",
    "__version__",
]
