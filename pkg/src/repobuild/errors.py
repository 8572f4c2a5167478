"""Exception hierarchy shared across the package."""


class RepobuildError(Exception):
    """Base class for all errors raised by this package."""


class ManifestParseError(RepobuildError):
    """Manifest file is malformed (bad encoding, bad record syntax)."""


class ManifestValidationError(RepobuildError):
    """A record violates an invariant; message names the record and field."""


class DomainError(RepobuildError):
    """An argument is outside its mathematical domain."""


class SampleSizeError(RepobuildError):
    """Requested sample exceeds the available records."""


class CloneError(RepobuildError):
    """Repository could not be materialized.

    ``kind`` distinguishes failure classes: "unreachable", "missing-revision",
    "auth", "other".
    """

    def __init__(self, message: str, kind: str = "other"):
        super().__init__(message)
        self.kind = kind


class TransportError(RepobuildError):
    """LLM backend unreachable after retries."""


class ScenarioExhaustedError(RepobuildError):
    """Scripted backend has no matching step and no default reply."""


class OversizeReplyError(RepobuildError):
    """LLM reply exceeded the configured character cap."""


class ProtocolError(RepobuildError):
    """LLM reply stayed malformed after the single re-ask."""


class SandboxUnavailableError(RepobuildError):
    """Requested sandbox backend cannot run on this host."""


class SandboxDeadError(RepobuildError):
    """Operation attempted on a destroyed sandbox handle."""


class UsageError(RepobuildError):
    """CLI or configuration misuse; maps to exit code 2."""
