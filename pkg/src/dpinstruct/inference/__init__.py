"""Chat-completion client and the mock backend used by tests and offline runs."""

from __future__ import annotations

import httpx

from .client import (
    ChatClient,
    CompletionRequest,
    CompletionResponse,
    EndpointError,
    EndpointProfile,
    RequestGroup,
    RetriesExhausted,
    Sampling,
    Timeout,
    batch_by_prefix,
    complete,
    flatten_groups,
    ungroup,
)
from .mock import BindError, MockConfig, MockHandle, MockState, RuleOracle, create_app, mock_serve

IN_PROCESS_URL = "http://mock.local"


def in_process_client(config: MockConfig, profile: EndpointProfile | None = None,
                      state: MockState | None = None) -> ChatClient:
    """A client wired straight to a mock app, no sockets involved."""
    app = create_app(config, state)
    profile = profile or EndpointProfile(IN_PROCESS_URL, model_name="mock", backoff_base=0.0)
    return ChatClient(profile, transport=httpx.ASGITransport(app=app))


__all__ = [
    "BindError", "ChatClient", "CompletionRequest", "CompletionResponse", "EndpointError",
    "EndpointProfile", "MockConfig", "MockHandle", "MockState", "RequestGroup", "RetriesExhausted",
    "RuleOracle", "Sampling", "Timeout", "batch_by_prefix", "complete", "create_app",
    "flatten_groups", "in_process_client", "mock_serve", "ungroup", "IN_PROCESS_URL",
]
