"""Exception hierarchy shared across the package."""


class RegionSegError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(RegionSegError, ValueError):
    """An argument violates a documented precondition."""


class ContractViolation(RegionSegError, ValueError):
    """An internal contract between pipeline stages was broken."""


class FormatError(RegionSegError, ValueError):
    """Serialized data (RLE counts, manifests) is malformed."""


class ProposalParseError(RegionSegError):
    """No usable structured block could be recovered from an MLLM response."""


class BackendError(RegionSegError):
    """A model backend failed to produce a result."""


class BackendUnavailableError(BackendError):
    """Transport failures persisted after all retries."""


class TransientBackendError(BackendError):
    """A failure worth retrying (connection reset, 5xx, rate limit)."""


class ConfigurationError(BackendError):
    """Backend rejected our credentials or configuration; never retried."""


class ProtocolError(BackendError):
    """A remote backend answered with a malformed payload."""


class CorpusError(RegionSegError):
    """A corpus could not be loaded at all."""


class AblationError(RegionSegError):
    """An ablation request is invalid (e.g. exceeds the combination cap)."""
