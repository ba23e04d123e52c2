"""
Error handling utilities for the surgical image enhancement agent.
Defines the exception hierarchy shared by every module and error formatting.
"""

from typing import Dict, Any, Optional, Union


class ScopeAgentError(Exception):
    """Base exception for all scopeagent errors."""

    def __init__(self, message: str, code: int = 500, details: Optional[Dict[str, Any]] = None):
        """Initialize error with message, code and details."""
        self.message = message
        self.code = code
        self.details = details or {}
        super().__init__(self.message)

    def to_dict(self) -> Dict[str, Any]:
        """Convert error to dictionary for JSON serialization."""
        result = {
            "error": self.message,
            "type": type(self).__name__,
            "code": self.code,
        }
        if self.details:
            result["details"] = self.details
        return result


class ConfigError(ScopeAgentError):
    """Error raised for configuration issues."""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message, 500, details)


# imagecore

class ImageIOError(ScopeAgentError):
    """Error raised while reading or writing raster files."""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message, 500, details)


class ImageFileNotFound(ImageIOError):
    """The requested image file does not exist."""


class UnsupportedFormat(ImageIOError):
    """The file is not an 8-bit PNG or binary PPM raster."""


class CorruptData(ImageIOError):
    """The file has a known signature but cannot be decoded."""


class IoFailure(ImageIOError):
    """Writing a file failed."""


class LabelError(ScopeAgentError):
    """Error raised for distortion label problems."""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message, 400, details)


class LabelParseError(LabelError):
    """A canonical label string contains unknown tokens."""


class InvariantViolation(LabelError):
    """A label breaks one of the distortion label rules."""


class ManifestError(ScopeAgentError):
    """Error raised for malformed dataset manifests."""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message, 400, details)


# distortion synthesis

class SynthesisError(ScopeAgentError):
    """Error raised by distortion synthesis."""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message, 400, details)


class ContractViolation(SynthesisError):
    """An operation was called outside its precondition."""


class KernelExceedsImage(SynthesisError):
    """The motion kernel is longer than the image's short side."""


class SeverityUnsupported(SynthesisError):
    """The operation does not support the requested severity."""


class InsufficientSourceImages(SynthesisError):
    """The source manifest cannot cover the requested counts."""


# prior model

class PriorError(ScopeAgentError):
    """Error raised by the prior model."""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message, 400, details)


class InvalidTemperature(PriorError):
    """Softmax temperature must be positive."""


class DegenerateData(PriorError):
    """A presence head lacks present or absent training examples."""


class NonFiniteLoss(PriorError):
    """Training diverged."""


# few-shot context

class ContextError(ScopeAgentError):
    """Error raised while building or rendering few-shot context."""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message, 400, details)


class InsufficientExemplars(ContextError):
    """The train split lacks enough single or composite exemplars."""


class MissingImage(ContextError):
    """An exemplar image reference cannot be resolved."""


# agent

class AgentError(ScopeAgentError):
    """Error raised by the agent. Details carry the raw response when one exists."""

    def __init__(self, message: str, raw_response: Optional[str] = None,
                 details: Optional[Dict[str, Any]] = None, code: int = 502):
        details = dict(details or {})
        if raw_response is not None:
            details["raw_response"] = raw_response
        self.raw_response = raw_response
        super().__init__(message, code, details)


class EncodingFailure(AgentError):
    """The query image could not be encoded."""


class PromptBudgetExceeded(AgentError):
    """The assembled prompt is larger than the configured byte budget."""


class BackendTimeout(AgentError):
    """The backend did not answer in time after all retries."""


class BackendRefusal(AgentError):
    """The backend kept answering with a non-success status."""


class ParseFailure(AgentError):
    """The response holds no single valid answer object."""


# enhancement

class EnhanceError(ScopeAgentError):
    """Error raised by the enhancement registry or operators."""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message, 400, details)


class NoModelForLabel(EnhanceError):
    """The registry has no enhancer for a (category, severity) pair."""


class RegistryError(EnhanceError):
    """The registry document is incomplete or inconsistent."""


# metrics

class MetricError(ScopeAgentError):
    """Error raised by metric computation."""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message, 400, details)


class DimensionMismatch(MetricError):
    """Reference and test images differ in size."""


class TooSmall(MetricError):
    """The image is too small for the metric window."""


class InsufficientCorpus(MetricError):
    """Not enough pristine images to fit a model."""


class EmptyInput(MetricError):
    """No predictions were given."""


# harness

class HarnessError(ScopeAgentError):
    """Error raised by pipeline orchestration."""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message, 500, details)


class IncompleteRun(HarnessError):
    """The run directory holds no usable records."""


def format_error(error: Union[ScopeAgentError, Exception]) -> Dict[str, Any]:
    """Format any error for JSON records."""
    if isinstance(error, ScopeAgentError):
        return error.to_dict()

    return {
        "error": str(error),
        "type": type(error).__name__,
        "code": 500,
    }
