"""
Chat-completions HTTP backend for the agent.
Sends the multimodal prompt through the OpenAI client with bounded
concurrency and exponential backoff.
"""

import os
import threading
import time
from typing import Any, Callable, Dict, List, Optional

import httpx
from openai import APIConnectionError, APIStatusError, APITimeoutError, OpenAI

from scopeagent.config import settings
from scopeagent.protocol.prompt import PromptDocument
from scopeagent.transport.base import AgentBackendDescriptor, BackendReply, BaseBackend
from scopeagent.utils import logger
from scopeagent.utils.error import BackendRefusal, BackendTimeout, ConfigError

RETRYABLE_STATUS = {408, 409, 429}


def to_chat_messages(prompt: PromptDocument) -> List[Dict[str, Any]]:
    """One user message; image blocks become image_url parts carrying the data URL."""
    content = []
    for block in prompt.blocks:
        if block["type"] == "image":
            content.append({"type": "image_url", "image_url": {"url": block["data"]}})
        else:
            content.append({"type": "text", "text": block["text"]})
    return [{"role": "user", "content": content}]


class HttpBackend(BaseBackend):
    """Backend calling a chat-completions endpoint."""

    def __init__(self, descriptor: AgentBackendDescriptor, client: Optional[Any] = None,
                 sleep: Callable[[float], None] = time.sleep):
        super().__init__(descriptor)
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(settings.max_in_flight)
        self.client = client or self._initialize_client()

    def _initialize_client(self):
        """Initialize OpenAI client with error handling for compatibility."""
        env_name = self.descriptor.options.get("api_key_env", settings.api_key_env)
        api_key = os.environ.get(env_name, "")
        if not api_key:
            error_msg = f"{env_name} not found. Please set this key in your .env file or environment."
            logger.error(error_msg)
            raise ConfigError(error_msg)

        kwargs = {"api_key": api_key, "timeout": self.descriptor.timeout, "max_retries": 0}
        if self.descriptor.endpoint:
            kwargs["base_url"] = self.descriptor.endpoint
        try:
            return OpenAI(**kwargs)
        except TypeError as e:
            if "unexpected keyword argument 'proxies'" in str(e):
                logger.info("Creating custom HTTP client for OpenAI compatibility")
                return OpenAI(**kwargs, http_client=httpx.Client(timeout=self.descriptor.timeout))
            raise ConfigError(f"Unexpected error initializing OpenAI client: {e}")

    def complete(self, prompt: PromptDocument) -> BackendReply:
        request = {
            "model": self.descriptor.model_id,
            "messages": to_chat_messages(prompt),
            "temperature": self.descriptor.options.get("temperature", 0.0),
        }
        for key in ("max_tokens", "seed", "top_p"):
            if key in self.descriptor.options:
                request[key] = self.descriptor.options[key]

        attempts = self.descriptor.max_retries + 1
        last_error: Optional[Exception] = None
        for attempt in range(attempts):
            if attempt:
                delay = settings.backoff_base * (2 ** (attempt - 1))
                logger.warning("Retrying backend call", attempt=attempt, delay=delay, error=str(last_error))
                self._sleep(delay)
            try:
                with self._slots:
                    completion = self.client.chat.completions.create(**request)
            except APITimeoutError as e:
                last_error = e
                continue
            except APIStatusError as e:
                last_error = e
                if e.status_code in RETRYABLE_STATUS or e.status_code >= 500:
                    continue
                raise BackendRefusal(f"Backend answered with status {e.status_code}",
                                     raw_response=_body_text(e), details={"status": e.status_code})
            except APIConnectionError as e:
                last_error = e
                continue
            return _reply_from(completion)

        if isinstance(last_error, APIStatusError):
            raise BackendRefusal(f"Backend answered with status {last_error.status_code} after {attempts} attempts",
                                 raw_response=_body_text(last_error), details={"status": last_error.status_code})
        if isinstance(last_error, APITimeoutError):
            raise BackendTimeout(f"Backend timed out after {attempts} attempts",
                                 details={"timeout": self.descriptor.timeout})
        raise BackendRefusal(f"Backend unreachable after {attempts} attempts: {last_error}")


def _body_text(error: APIStatusError) -> str:
    try:
        return error.response.text
    except Exception:
        return str(error)


def _reply_from(completion: Any) -> BackendReply:
    if not completion.choices:
        raise BackendRefusal("Backend returned no choices", raw_response=str(completion))
    message = completion.choices[0].message
    if message.content is None:
        refusal = getattr(message, "refusal", None)
        raise BackendRefusal("Backend refused to answer", raw_response=refusal or "")

    meta: Dict[str, Any] = {}
    usage = getattr(completion, "usage", None)
    if usage is not None:
        meta["prompt_tokens"] = getattr(usage, "prompt_tokens", None)
        meta["completion_tokens"] = getattr(usage, "completion_tokens", None)
    return BackendReply(message.content, meta)
