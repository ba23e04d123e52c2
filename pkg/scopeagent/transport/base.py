"""
Base backend interface for the agent.
Defines the backend descriptor and the contract every backend implements.
"""

import abc
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

from scopeagent.config import settings
from scopeagent.protocol.prompt import PromptDocument
from scopeagent.utils import logger
from scopeagent.utils.error import ConfigError

BACKEND_KINDS = ("mock", "http")


@dataclass(frozen=True)
class AgentBackendDescriptor:
    """Which backend answers prompts and how.

    ``model_id`` is opaque: it names the external model and keys the response
    cache. ``options`` carries decoding options for http and the policy block
    for mock.
    """

    kind: str = "mock"
    model_id: str = "mock"
    endpoint: Optional[str] = None
    timeout: float = 60.0
    max_retries: int = 3
    options: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in BACKEND_KINDS:
            raise ConfigError(f"Unknown backend kind {self.kind!r}", details={"kinds": list(BACKEND_KINDS)})
        if not self.timeout > 0:
            raise ConfigError("Backend timeout must be positive")
        if self.max_retries < 0:
            raise ConfigError("Backend max_retries cannot be negative")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AgentBackendDescriptor":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"Unknown backend keys: {sorted(unknown)}")
        kwargs = dict(data)
        if kwargs.get("kind", "mock") == "http":
            kwargs.setdefault("model_id", settings.model_id)
            kwargs.setdefault("timeout", settings.http_timeout)
            kwargs.setdefault("max_retries", settings.max_retries)
        elif "model_id" not in kwargs:
            options = kwargs.get("options", {})
            policy = options.get("policy", "ground-truth")
            model_id = f"mock-{policy}"
            if policy == "noisy":
                model_id += f"-{options.get('epsilon', 'schedule')}-{options.get('seed', 0)}"
            elif policy == "fixed-label":
                model_id += f"-{options.get('label', 'normal')}"
            kwargs["model_id"] = model_id
        return cls(**kwargs)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "model_id": self.model_id,
            "endpoint": self.endpoint,
            "timeout": self.timeout,
            "max_retries": self.max_retries,
            "options": dict(self.options),
        }


@dataclass(frozen=True)
class BackendReply:
    text: str
    meta: Dict[str, Any] = field(default_factory=dict)


class BaseBackend(abc.ABC):
    """Base class for all agent backends."""

    def __init__(self, descriptor: AgentBackendDescriptor):
        self.descriptor = descriptor
        self._calls = 0
        self._calls_lock = threading.Lock()
        logger.info(f"Initialized {self.__class__.__name__}", model_id=descriptor.model_id)

    @property
    def calls(self) -> int:
        """Number of prompts this backend has answered."""
        return self._calls

    def invoke(self, prompt: PromptDocument) -> BackendReply:
        """Answer one prompt, counting the call and timing it."""
        with self._calls_lock:
            self._calls += 1
        start = time.perf_counter()
        reply = self.complete(prompt)
        latency_ms = (time.perf_counter() - start) * 1000.0
        meta = {"model_id": self.descriptor.model_id, "latency_ms": round(latency_ms, 3), **reply.meta}
        logger.debug("Backend call completed", backend=self.descriptor.kind,
                     latency_ms=meta["latency_ms"], query=prompt.annotations.get("query_id"))
        return BackendReply(reply.text, meta)

    @abc.abstractmethod
    def complete(self, prompt: PromptDocument) -> BackendReply:
        """Send the prompt and return the first choice's text."""
        pass
