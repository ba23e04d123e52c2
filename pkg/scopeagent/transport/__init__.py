"""
Agent backends: offline mock policies and a chat-completions HTTP client.
"""

from scopeagent.transport.base import AgentBackendDescriptor, BackendReply, BaseBackend
from scopeagent.transport.mock import MockBackend
from scopeagent.transport.http import HttpBackend


def create_backend(descriptor: AgentBackendDescriptor, client=None) -> BaseBackend:
    """Instantiate the backend a descriptor names."""
    if descriptor.kind == "http":
        return HttpBackend(descriptor, client=client)
    return MockBackend(descriptor)


__all__ = ["AgentBackendDescriptor", "BackendReply", "BaseBackend", "MockBackend", "HttpBackend", "create_backend"]
